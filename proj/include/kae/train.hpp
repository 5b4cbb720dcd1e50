#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kae/common.hpp"
#include "kae/data.hpp"
#include "kae/koopman.hpp"
#include "kae/loss.hpp"
#include "kae/model.hpp"
#include "kae/net.hpp"

namespace kae {

/// Run-level knobs for the optimization loop. Epoch indices are 0-based and
/// the schedule is a pure function of the epoch, so a resumed run replays the
/// exact learning-rate sequence of an uninterrupted one.
struct TrainConfig {
  int epochs = 200;
  int batch_size = 64;
  int horizon = 8;  // latent rollout steps per window
  int stride = 1;   // window spacing when slicing trajectories

  double lr_peak = 5e-4;
  double lr_final = 1e-5;
  int warmup_epochs = 20;

  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 1e-4;

  /// Global gradient-norm cap; 0 disables clipping.
  double grad_clip = 0.0;
  /// Frobenius penalty on the conditioned low-rank correction. Keeps the
  /// learned generator's spectrum from drifting right; 0 disables.
  double stability_weight = 0.0;
  /// Cut gradients at the encoder targets of the latent terms, so only the
  /// rollout side is trained against them.
  bool detach_targets = false;

  LossWeights weights;
  Scheme scheme = Scheme::rk4;
  std::uint64_t seed = 0;

  /// Pause the run after this epoch index is reached (exclusive); -1 runs to
  /// `epochs`. The learning-rate schedule always spans `epochs`, so a paused
  /// and resumed run retraces an uninterrupted one exactly.
  int stop_epoch = -1;

  /// Data-parallel width for batch loss evaluation; 0 defers to the
  /// KAE_THREADS environment variable (absent: 1). Results are identical
  /// for every width because gradients reduce in window order.
  int threads = 0;

  void validate() const;  // ConfigError
};

/// Learning rate at `epoch`: linear warm-up from 0 to lr_peak over
/// warmup_epochs, then cosine decay to exactly lr_final at the last epoch.
/// ConfigError outside [0, epochs).
double lr_schedule(const TrainConfig& cfg, int epoch);

/// First and second moment accumulators, aligned with ParamStore order.
struct AdamWState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::int64_t step = 0;
};

void init_optimizer(AdamWState& st, const ParamStore& ps);

/// Decoupled decay applies to weight matrices only: dense "<prefix>/W<i>"
/// layers and the operator factors op/S, op/A, op/B. Biases and the
/// dissipation vector op/d stay undecayed (shrinking d would push the
/// dissipation toward softplus's saturated tail, not toward zero).
bool decayed_param(const std::string& name);

/// One AdamW update with bias correction. `grads` aligns with ps order.
/// A non-finite gradient entry aborts (NumericError, names the parameter)
/// before any tensor is touched.
void optimizer_step(ParamStore& ps, const std::vector<Tensor>& grads,
                    AdamWState& st, const TrainConfig& cfg, double lr);

/// threads >= 1 passes through; 0 reads KAE_THREADS (unset or empty: 1).
/// ConfigError on an unparseable or non-positive override.
int resolve_threads(int configured);

/// Everything the composite objective of one training window produces.
/// Terms with zero effective weight are skipped (left invalid) so a
/// reconstruction-only run does not pay for rollouts or spectra.
struct WindowObjective {
  LossTerms terms;
  ad::Value total;      // optimization target, includes the stability penalty
  ad::Value stability;  // invalid when stability_weight == 0
  LossReport report;
  double stability_value = 0.0;
};

/// Build the full per-window training graph on `tape`:
/// order-2 context encoding, reconstruction, `horizon` integrator steps,
/// decoded predictions against the target frames, latent consistency /
/// linearity / direction / energy against present-stream encodings, and the
/// physics block (time and space differences, spectra) on the decoded
/// sequence. `phi_jitter` is the pre-drawn conditioning noise for this
/// window; evaluation passes 0.
WindowObjective window_objective(ad::Tape& tape, const ParamStore& ps,
                                 const ModelConfig& mcfg,
                                 const KoopmanConfig& kcfg,
                                 const TrainConfig& tcfg,
                                 const TrajectoryDataset& ds,
                                 const WindowBatch& w, double phi_jitter = 0.0);

struct EpochMetrics {
  int epoch = 0;
  double lr = 0.0;
  int windows = 0;      // windows contributing to the means below
  LossReport mean;      // per-component means over the epoch's windows
  double stability = 0.0;
};

/// Rollout quality on held-out data plus the structural rk4-vs-exp
/// comparison. MSE is decoded mean squared error in state space; the
/// persistence baseline repeats the window's last context frame.
struct EvalMetrics {
  int horizon = 0;
  Scheme scheme = Scheme::rk4;
  std::vector<double> per_step_mse;      // index j-1 for step j
  std::vector<double> persistence_mse;   // same indexing
  double mean_mse = 0.0;
  double mean_persistence = 0.0;
  double mse_rk4 = 0.0;  // decoded MSE, iterated rk4 latents
  double mse_exp = 0.0;  // decoded MSE, one-shot exponential latents
  double max_latent_rel_exp_rk4 = 0.0;
  double time_iterative_s = 0.0;  // total seconds in the rk4 rollouts
  double time_exp_s = 0.0;        // total seconds in the exponential rollouts
};

struct MetricsRecord {
  std::vector<EpochMetrics> epochs;
  std::vector<EvalMetrics> evals;
};

/// Optimizer state plus the next epoch to run; together with the parameters
/// this is the whole resume surface (shuffles and jitter reseed per epoch).
struct TrainState {
  AdamWState opt;
  int next_epoch = 0;
};

/// Run epochs [state.next_epoch, cfg.epochs) on ds, updating ps and state in
/// place. Shuffle order and conditioning jitter derive from (seed, epoch),
/// never from call history. NumericError during a window or an update is
/// rethrown with epoch / batch / window provenance.
MetricsRecord train(const TrajectoryDataset& ds, ParamStore& ps,
                    const ModelConfig& mcfg, const KoopmanConfig& kcfg,
                    const TrainConfig& tcfg, TrainState& state);

/// Plain-path evaluation: encode the two context frames once per window,
/// integrate the latent forward `horizon` steps under `scheme`, decode, and
/// score against the true frames. Always also runs the iterated rk4 and the
/// one-shot exponential latent paths to fill the comparison fields.
EvalMetrics evaluate(const TrajectoryDataset& ds, const ParamStore& ps,
                     const ModelConfig& mcfg, const KoopmanConfig& kcfg,
                     int horizon, Scheme scheme, int stride = 1);

/// One wide table, a row per epoch and per evaluation step plus one summary
/// row per evaluation; inapplicable cells stay empty.
void write_metrics_csv(const MetricsRecord& rec, const std::string& path);

/// Checkpoint carrying parameters and the optimizer/resume state packed as
/// extra tensors ("opt.m/<name>", "opt.v/<name>", "opt/step",
/// "train/next_epoch") in the same file format.
void save_train_checkpoint(const std::string& path, const ParamStore& ps,
                           const TrainState& st,
                           const std::string& config_snapshot);

struct TrainCheckpoint {
  ParamStore params;
  TrainState state;
  std::string config_snapshot;
};

/// Splits packed tensors back out. A checkpoint written without training
/// state (the plain writer) yields fresh zero state at epoch 0; a partially
/// present state is a DataError.
TrainCheckpoint load_train_checkpoint(const std::string& path);

}  // namespace kae
