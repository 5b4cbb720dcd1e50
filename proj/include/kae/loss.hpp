#pragma once

#include <string>
#include <utility>
#include <vector>

#include "kae/autodiff.hpp"
#include "kae/koopman.hpp"
#include "kae/linalg.hpp"

namespace kae {

enum class TemporalMode { uniform, cosine };
TemporalMode parse_temporal_mode(const std::string& name);
const char* temporal_mode_name(TemporalMode mode);

/// Relative contributions of the objective terms. The latent block bundles
/// consistency, forward-backward linearity, the directional term (scaled by
/// w_cos) and the energy term; the physics block bundles the two Sobolev
/// terms and the spectral term under their sub-weights.
struct LossWeights {
  double alpha = 1.0;        // decoded rollout block
  double beta = 0.1;         // latent block
  double lambda_phys = 0.1;  // physics block
  double w_cos = 0.1;
  double w_sobolev_time = 1.0;
  double w_sobolev_space = 1.0;
  double w_spectral = 1.0;
  TemporalMode temporal = TemporalMode::cosine;

  // every weight must be >= 0
  void validate() const;
};

/// Horizon weights w_j = raw_j / sum, raw_j = (1 + cos(pi (j-1)/(N-1))) / 2.
/// Front-loaded: w_1 is the largest, w_N = 0. Needs n >= 2.
std::vector<double> cosine_weights(int n);
/// Dispatch: uniform gives 1/n for any n >= 1, cosine defers to the above.
std::vector<double> temporal_weights(TemporalMode mode, int n);

// Frame tensors may be {m, 1} columns or {h, w} grids; `channels` must
// divide the element count. Reduction: mean over the per-channel extent,
// summed across channels.
ad::Value loss_recon(ad::Tape& tape, ad::Value xhat, ad::Value x,
                     int channels);
/// Per-step frame losses combined with the given horizon weights.
ad::Value loss_pred(ad::Tape& tape, const std::vector<ad::Value>& xhat,
                    const std::vector<ad::Value>& x,
                    const std::vector<double>& weights, int channels);
/// Sum over the horizon of the squared distance between rolled-out latents
/// and the encodings of the true frames. Gradients reach both sides unless
/// the caller detaches the targets.
ad::Value loss_latent_consistency(ad::Tape& tape,
                                  const std::vector<ad::Value>& zhat,
                                  const std::vector<ad::Value>& targets);
/// Squared residual of one integrator step forward from z_t to z_next plus
/// one step backward from z_next to z_t. Zero only where the pair actually
/// lies on the operator's flow; identically zero data also gives zero, so
/// this guards against norm-collapsing dynamics only on nonzero latents.
ad::Value loss_linearity(ad::Tape& tape, const OperatorGraph& og,
                         ad::Value z_t, ad::Value z_next, double dt, Scheme s,
                         int midpoint_iters = 12);
double loss_linearity_plain(const linalg::Matrix& k,
                            const std::vector<double>& z_t,
                            const std::vector<double>& z_next, double dt,
                            Scheme s);
/// 1 - <a, b> / (|a| |b| + 1e-8). Pure direction mismatch: 0 for parallel,
/// 1 for orthogonal, 2 for opposite; the guard makes two zero vectors read
/// as 1 instead of dividing by zero.
ad::Value loss_cosine_dir(ad::Tape& tape, ad::Value zhat, ad::Value z);
/// Squared change of the latent norm across one step.
ad::Value loss_energy(ad::Tape& tape, ad::Value z_t, ad::Value z_next);
/// Mean over adjacent frame pairs of the squared mismatch between predicted
/// and true frame-to-frame increments. Per-frame constant offsets cancel.
ad::Value loss_sobolev_time(ad::Tape& tape,
                            const std::vector<ad::Value>& xhat,
                            const std::vector<ad::Value>& x);
/// Squared mismatch of forward differences along both grid axes, summed.
/// Inputs are single-channel {h, w} grids with h, w >= 2.
ad::Value loss_sobolev_space(ad::Tape& tape, ad::Value xhat, ad::Value x);
/// Real and imaginary parts of the unnormalized forward 2-D DFT of a {h, w}
/// grid, as tape values (matrix form, so gradients flow). Matches
/// linalg::fft2 bin for bin.
std::pair<ad::Value, ad::Value> dft2_graph(ad::Tape& tape, ad::Value f);
/// L1 distance between DFT magnitude grids plus squared L2 distances between
/// the real and the imaginary parts. The quadratic parts see phase; the L1
/// part sees only the energy distribution.
ad::Value loss_spectral(ad::Tape& tape, ad::Value xhat, ad::Value x);

/// Handles to the component values of one training window. A
/// default-constructed (invalid) entry means "not built"; loss_total accepts
/// that only where the term's effective weight is zero and feeds a constant
/// zero in its place so the combination arithmetic never changes shape.
struct LossTerms {
  ad::Value recon;
  ad::Value pred;
  ad::Value consistency;
  ad::Value linearity;
  ad::Value cosine;
  ad::Value energy;
  ad::Value sobolev_time;
  ad::Value sobolev_space;
  ad::Value spectral;
};

struct LossReport {
  double recon = 0, pred = 0;
  double consistency = 0, linearity = 0, cosine = 0, energy = 0;
  double sobolev_time = 0, sobolev_space = 0, spectral = 0;
  double latent = 0, phys = 0, total = 0;
};

/// total = recon + alpha * pred + beta * latent + lambda_phys * phys, with
///   latent = consistency + linearity + w_cos * cosine + energy
///   phys   = weighted sum of the two Sobolev terms and the spectral term.
ad::Value loss_total(ad::Tape& tape, const LossTerms& terms,
                     const LossWeights& w);
/// Scalar snapshot of every component plus the combined blocks, computed in
/// the same association order as loss_total so the identity holds exactly.
LossReport make_report(const LossTerms& terms, const LossWeights& w);
/// Rebuild total from a report's components; equals report.total bit for bit.
double recompute_total(const LossReport& r, const LossWeights& w);

/// Plain-path frame error with the same reduction as loss_recon.
double frame_mse(const std::vector<double>& a, const std::vector<double>& b,
                 int channels);

}  // namespace kae
