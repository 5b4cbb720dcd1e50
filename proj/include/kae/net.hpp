#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kae/autodiff.hpp"
#include "kae/common.hpp"
#include "kae/tensor.hpp"

namespace kae {

using ad::Tensor;

/// Ordered, named collection of learnable tensors.
///
/// Insertion order is the canonical iteration order everywhere that touches
/// parameters (graph leaf creation, optimizer updates, checkpoint layout,
/// gradient reduction), which keeps runs bit-reproducible.
class ParamStore {
 public:
  /// ConfigError on duplicate name.
  void add(const std::string& name, Tensor t);
  bool has(const std::string& name) const;
  /// ConfigError if absent.
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  const std::vector<std::string>& names() const { return order_; }
  std::size_t size() const { return order_.size(); }
  std::int64_t total_elements() const;

 private:
  int index_of(const std::string& name) const;  // -1 if absent

  std::vector<std::string> order_;
  std::vector<Tensor> tensors_;
};

/// Gaussian radial-basis features of a scalar conditioning parameter.
/// k-th feature = exp(-(phi - centers[k])^2 / (2 sigma^2)).
struct ParamEmbedding {
  std::vector<double> centers;  // strictly increasing
  double sigma = 1.0;           // > 0
  double noise_std = 0.0;       // perturbs phi before embedding, train only

  /// count evenly spaced centers over [lo, hi]; sigma = spacing * sigma_scale.
  static ParamEmbedding linspace(double lo, double hi, int count,
                                 double sigma_scale = 1.0);
  void validate() const;  // ConfigError on violation
  int dim() const { return static_cast<int>(centers.size()); }
};

/// Feature vector for phi. Noise is applied only when a generator is passed
/// and noise_std > 0; evaluation paths pass nullptr.
std::vector<double> embed_params(double phi, const ParamEmbedding& pe,
                                 Rng* noise_rng = nullptr);

// ---- dense stacks ----
//
// widths = {in, h1, ..., out}. Layer i has weight "<prefix>/W<i>" of shape
// {widths[i+1], widths[i]} and bias "<prefix>/b<i>" of shape {widths[i+1], 1}.
// The smooth x*sigmoid(x) unit sits between layers, never after the last;
// linear_mode skips it so tests can see the pure matrix composition.

/// Create the stack's tensors. Weights are Xavier-uniform draws; biases zero.
/// zero_final forces the last layer to exact zeros; final_scale rescales the
/// last layer's weight draw (small nonzero values keep early gradients alive
/// where a product of two trained factors would otherwise start at a saddle).
void init_dense(ParamStore& ps, const std::string& prefix,
                const std::vector<int>& widths, Rng& rng,
                bool zero_final = false, double final_scale = 1.0);

std::int64_t dense_param_count(const std::vector<int>& widths);

/// Apply the stack on the tape to a {in, 1} column. Pulls each parameter leaf
/// from the tape by name, creating it from `ps` on first use.
ad::Value dense_graph(ad::Tape& tape, const ParamStore& ps,
                      const std::string& prefix, const std::vector<int>& widths,
                      ad::Value x, bool linear_mode = false);

/// Same arithmetic without a tape, for evaluation paths.
std::vector<double> dense_plain(const ParamStore& ps, const std::string& prefix,
                                const std::vector<int>& widths,
                                const std::vector<double>& x,
                                bool linear_mode = false);

/// Tape leaf for a stored parameter; created on first use, shared after.
ad::Value param_leaf(ad::Tape& tape, const ParamStore& ps,
                     const std::string& name);

}  // namespace kae
