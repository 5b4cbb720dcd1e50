#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kae/net.hpp"

namespace kae {

/// Shapes of the observation space and of the dense encoder/decoder stacks.
/// States are C x H x W fields, flattened to columns of n_d() entries in
/// (channel, row, column) order.
struct ModelConfig {
  int channels = 2;
  int height = 16;
  int width = 32;
  int hidden = 256;
  int nz = 64;

  int n_d() const { return channels * height * width; }
  std::vector<int> encoder_widths() const { return {n_d(), hidden, nz}; }
  std::vector<int> decoder_widths() const { return {nz, hidden, n_d()}; }
  void validate() const;  // ConfigError
};

/// Two independent encoders ("enc_p" for the current frame, "enc_h" for the
/// previous one) plus the decoder "dec". The two encoder stacks never share
/// weights; the latent is their averaged output.
void init_model(ParamStore& ps, const ModelConfig& cfg, Rng& rng);

/// Learnable scalar count across enc_p, enc_h and dec for this config.
std::int64_t model_param_count(const ModelConfig& cfg);

// ---- tape paths (training) ----

/// (E_present(x_t) + E_history(x_prev)) / 2, the order-2 context encoding.
ad::Value encode_graph(ad::Tape& tape, const ParamStore& ps,
                       const ModelConfig& cfg, ad::Value x_t, ad::Value x_prev,
                       bool linear_mode = false);
/// Present stream only; the target-side encoding for latent consistency.
ad::Value encode_present_graph(ad::Tape& tape, const ParamStore& ps,
                               const ModelConfig& cfg, ad::Value x,
                               bool linear_mode = false);
ad::Value decode_graph(ad::Tape& tape, const ParamStore& ps,
                       const ModelConfig& cfg, ad::Value z,
                       bool linear_mode = false);

// ---- plain paths (evaluation) ----

std::vector<double> encode_plain(const ParamStore& ps, const ModelConfig& cfg,
                                 const std::vector<double>& x_t,
                                 const std::vector<double>& x_prev,
                                 bool linear_mode = false);
std::vector<double> encode_present_plain(const ParamStore& ps,
                                         const ModelConfig& cfg,
                                         const std::vector<double>& x,
                                         bool linear_mode = false);
std::vector<double> decode_plain(const ParamStore& ps, const ModelConfig& cfg,
                                 const std::vector<double>& z,
                                 bool linear_mode = false);

// ---- checkpoint file ----
//
// Layout, all integers little-endian:
//   "KAEW" | u32 version | u64 tensor count |
//   per tensor: u32 name length, name bytes, u8 requires_grad, u32 rank,
//               i64 dims..., f64 values... |
//   u64 snapshot length | snapshot bytes (the resolved run configuration)
// Round-trips are bit-exact; loaders reject unknown magic or newer versions
// outright rather than partially reading.

struct Checkpoint {
  ParamStore params;
  std::string config_snapshot;
};

void save_checkpoint(const std::string& path, const ParamStore& ps,
                     const std::string& config_snapshot);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace kae
