#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "kae/linalg.hpp"

namespace kae {

/// One recorded trajectory: T frames of C*H*W doubles in (T, C, H, W)
/// row-major order, plus the scalar conditioning parameter it was generated
/// with.
struct Trajectory {
  double phi = 0.0;
  std::vector<double> data;
};

struct TrajectoryDataset {
  double dt = 0.1;
  int t_len = 0;
  int channels = 0;
  int height = 0;
  int width = 0;
  std::string generator;
  std::uint64_t seed = 0;
  std::vector<std::string> channel_names;
  std::vector<Trajectory> trajectories;

  std::int64_t frame_size() const {
    return static_cast<std::int64_t>(channels) * height * width;
  }
  int n_traj() const { return static_cast<int>(trajectories.size()); }
  /// Pointer to frame t of one trajectory; bounds-checked.
  const double* frame(int traj, int t) const;
  std::vector<double> frame_copy(int traj, int t) const;
  // shapes positive and uniform, names match channels
  void validate() const;
};

/// One training window: two context frames followed by `horizon` target
/// frames, all consecutive within a single trajectory. Frame pointers alias
/// the dataset, which is immutable once built.
struct WindowBatch {
  int trajectory = 0;
  int start = 0;  // index of the first context frame
  double phi = 0.0;
  std::vector<const double*> context;
  std::vector<const double*> targets;
};

/// Exhaustive stride-1 enumeration (or coarser for non-overlapping splits),
/// trajectory by trajectory, starts ascending. Trajectories shorter than
/// context + horizon contribute nothing. The context length is pinned to 2.
std::vector<WindowBatch> sliding_windows(const TrajectoryDataset& ds,
                                         int context, int horizon,
                                         int stride = 1);
/// Windows one trajectory of length t_len yields under the same rules.
std::int64_t window_count(int t_len, int context, int horizon, int stride = 1);

/// Data whose latent dynamics are linear by construction: a stable generator
/// acts on a hidden state and a fixed random lifting maps it to observation
/// space. Every adjacent frame pair satisfies the one-step flow identity
/// exactly, which makes this the ground truth for end-to-end checks.
struct LinearOracleConfig {
  std::uint64_t seed = 1;
  int nz_true = 8;
  int n_d = 64;
  int t_len = 64;
  double dt = 0.1;
  // 16 rollouts give the default trainer enough optimizer steps per epoch
  // to push reconstruction well below the one-step persistence drift
  int n_traj = 16;
  double phi_lo = 0.0;
  double phi_hi = 1.0;
  // generate at dt/2 and keep every other frame
  bool half_step_subsample = false;

  void validate() const;
};

/// The hidden generator at a given phi: skew-symmetric part minus a positive
/// diagonal, with one skew entry moved affinely by phi. Rebuilt purely from
/// (seed, config), so callers can verify datasets against it.
linalg::Matrix linear_oracle_generator(const LinearOracleConfig& cfg,
                                       double phi);
/// The fixed n_d x nz_true observation map, also rebuilt from (seed, config).
linalg::Matrix linear_oracle_lifting(const LinearOracleConfig& cfg);
/// Evenly spaced conditioning values over [phi_lo, phi_hi] (midpoint for a
/// single trajectory).
std::vector<double> spread_phi(double lo, double hi, int count);

TrajectoryDataset generate_linear_oracle(const LinearOracleConfig& cfg);

/// Two staggered rows of counter-rotating Gaussian vortices advecting across
/// a periodic unit square; velocity is the perpendicular gradient of the
/// summed streamfunction, so the field is divergence-free. Advection speed
/// and amplitude decay are affine in phi.
struct VortexStreetConfig {
  std::uint64_t seed = 1;
  int height = 16;
  int width = 32;
  int t_len = 64;
  double dt = 0.1;
  int n_traj = 8;
  double phi_lo = 0.0;
  double phi_hi = 1.0;
  int vortices_per_row = 2;
  double core_width = 0.08;  // gaussian radius, domain units
  double strength = 0.012;   // streamfunction amplitude
  double advect0 = 0.25, advect1 = 0.25;  // U(phi) = advect0 + advect1 phi
  double decay0 = 0.05, decay1 = 0.10;    // gamma(phi) = decay0 + decay1 phi
  bool half_step_subsample = false;

  void validate() const;
};

TrajectoryDataset generate_vortex_street(const VortexStreetConfig& cfg);

// On-disk dataset format, integers little-endian:
//   "KAED" | u32 version | u64 metadata length | metadata (JSON text) |
//   payload: per trajectory, t_len*channels*height*width f64 values |
//   u64 FNV-1a checksum over the payload bytes.
// Round-trips are bit-exact, including every payload float and every phi.
// Loading rejects unknown magic, newer versions, truncated files and
// checksum mismatches outright.
void save_dataset(const TrajectoryDataset& ds, const std::string& path);
TrajectoryDataset load_dataset(const std::string& path);

}  // namespace kae
