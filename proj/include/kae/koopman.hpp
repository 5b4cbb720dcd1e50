#pragma once

#include <string>
#include <vector>

#include "kae/linalg.hpp"
#include "kae/net.hpp"

namespace kae {

enum class Scheme { euler, rk4, midpoint, expm };

/// Accepts "euler" | "rk4" | "midpoint" | "exp"; ConfigError otherwise.
Scheme parse_scheme(const std::string& s);
std::string scheme_name(Scheme s);

/// Configuration of the conditioned latent generator
///
///   K(phi) = (S - S^T)/2 - diag(softplus(d)) + gate(phi) * B diag(c(phi)) A
///
/// The skew/dissipation core has every eigenvalue real part <= 0 by
/// construction. The correction is rank <= `rank` for any pair of phi values;
/// a small dense net maps RBF features of phi to the per-rank scales c and
/// the scalar gate.
struct KoopmanConfig {
  int nz = 64;
  int rank = 4;
  int hyper_hidden = 16;
  ParamEmbedding embed = ParamEmbedding::linspace(0.0, 1.0, 8);

  std::vector<int> hyper_widths() const {
    return {embed.dim(), hyper_hidden, rank + 1};
  }
  void validate() const;  // ConfigError
};

/// Create the generator's tensors under the "op/" prefix:
/// op/S {nz,nz}, op/d {nz,1}, op/A {rank,nz}, op/B {nz,rank}, op/hyper/*.
/// d starts near -2 so the initial dissipation softplus(d) is mild; the
/// hypernet's last layer starts small but nonzero (an exact zero would make
/// the gate*scales product a stationary point for both factors).
void init_operator(ParamStore& ps, const KoopmanConfig& cfg, Rng& rng);

/// (S - S^T)/2 - diag(softplus(d)); the phi-independent part.
linalg::Matrix koopman_core(const ParamStore& ps, const KoopmanConfig& cfg);

/// Full conditioned generator for one phi (no conditioning noise).
linalg::Matrix koopman_matrix(const ParamStore& ps, const KoopmanConfig& cfg,
                              double phi);

// ---- one-step integrators on an assembled generator ----

/// z + dt K z. Backward steps (dt < 0) are allowed everywhere below.
std::vector<double> step_euler(const linalg::Matrix& k,
                               const std::vector<double>& z, double dt);
/// Classical 4-stage step on f(z) = Kz; local error O(dt^5).
std::vector<double> step_rk4(const linalg::Matrix& k,
                             const std::vector<double>& z, double dt);
/// Solve (I - dt/2 K) z' = (I + dt/2 K) z. A-stable; NumericError if the
/// system is singular (dt hits an eigenvalue resonance).
std::vector<double> step_implicit_midpoint(const linalg::Matrix& k,
                                           const std::vector<double>& z,
                                           double dt);
/// Dispatch on scheme; Scheme::expm uses the exact flow matrix_exp_action.
std::vector<double> step_plain(const linalg::Matrix& k,
                               const std::vector<double>& z, double dt,
                               Scheme s);

/// steps >= 1 states at t0 + j dt, j = 1..steps, by iterating step_plain.
/// NumericError with the step index if a state goes non-finite.
std::vector<std::vector<double>> rollout_plain(const linalg::Matrix& k,
                                               const std::vector<double>& z0,
                                               double dt, int steps, Scheme s);

/// exp(K tau) z0 for each requested tau, each computed in one shot from z0
/// (no iteration, arbitrary spacing). times must be strictly increasing and
/// positive. Inference path: no gradients flow through the exponential.
std::vector<std::vector<double>> rollout_exp(const linalg::Matrix& k,
                                             const std::vector<double>& z0,
                                             const std::vector<double>& times);

// ---- tape-recorded variants; gradients reach S, d, A, B, hypernet ----

/// Per-tape handles for the generator. The dissipation vector and the
/// hypernet outputs are built once and shared by every step on the tape.
struct OperatorGraph {
  ad::Value s;       // {nz, nz}
  ad::Value diss;    // softplus(d), {nz, 1}
  ad::Value a;       // {rank, nz}
  ad::Value b;       // {nz, rank}
  ad::Value scales;  // {rank, 1}
  ad::Value gate;    // {1, 1}
  int nz = 0;
  int rank = 0;
};

/// noise_rng (with embed.noise_std > 0) perturbs phi before embedding, the
/// training-time conditioning jitter; pass nullptr for evaluation.
OperatorGraph operator_graph(ad::Tape& tape, const ParamStore& ps,
                             const KoopmanConfig& cfg, double phi,
                             Rng* noise_rng = nullptr);

/// K z for a {nz, 1} latent column. The transpose in the skew part is formed
/// by multiplying with the row view of z, so no transposed copy of S exists
/// on the tape:  S^T z = (z^T S)^T, and a column's transpose is a reshape.
ad::Value apply_generator(ad::Tape& tape, const OperatorGraph& og, ad::Value z);

/// One integrator step on the tape. Scheme::expm is refused (ConfigError):
/// the exponential path is inference-only. The implicit midpoint solve is a
/// fixed unrolled substitution y <- z + dt K (z+y)/2, contracting when
/// |dt| ||K|| < 2; midpoint_iters controls the depth.
ad::Value step_graph(ad::Tape& tape, const OperatorGraph& og, ad::Value z,
                     double dt, Scheme s, int midpoint_iters = 12);

/// steps tape states at t0 + j dt. NumericError carries the step index if a
/// state goes non-finite.
std::vector<ad::Value> rollout_graph(ad::Tape& tape, const OperatorGraph& og,
                                     ad::Value z0, double dt, int steps,
                                     Scheme s, int midpoint_iters = 12);

}  // namespace kae
