#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "kae/common.hpp"

namespace kae::ad {

/// Dense row-major tensor of 64-bit floats. The last index varies fastest.
/// This is the only storage type the graph engine and the model touch; all
/// arithmetic in the project is double precision.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::int64_t> shape)
      : shape_(std::move(shape)), data_(checked_numel(shape_), 0.0) {}

  Tensor(std::vector<std::int64_t> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<std::int64_t>(data_.size()) != checked_numel(shape_))
      throw NumericError("Tensor: data size does not match shape");
  }

  static Tensor zeros(std::vector<std::int64_t> shape) {
    return Tensor(std::move(shape));
  }

  static Tensor full(std::vector<std::int64_t> shape, double v) {
    Tensor t(std::move(shape));
    for (double& x : t.data_) x = v;
    return t;
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  const std::vector<std::int64_t>& shape() const { return shape_; }
  std::int64_t rank() const {
    return static_cast<std::int64_t>(shape_.size());
  }
  std::int64_t numel() const {
    return static_cast<std::int64_t>(data_.size());
  }
  std::int64_t dim(std::int64_t axis) const { return shape_.at(axis); }

  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }
  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  double& operator[](std::int64_t i) { return data_[i]; }
  double operator[](std::int64_t i) const { return data_[i]; }

  // 2-D accessors; most graph intermediates are matrices or column vectors.
  double& at(std::int64_t i, std::int64_t j) {
    return data_[i * shape_[1] + j];
  }
  double at(std::int64_t i, std::int64_t j) const {
    return data_[i * shape_[1] + j];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (double x : data_)
      if (!std::isfinite(x)) return false;
    return true;
  }

  std::string shape_str() const {
    std::string s = "(";
    for (std::size_t i = 0; i < shape_.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape_[i]);
    }
    return s + ")";
  }

  /// Gradient accumulator. Empty means "absent"; ensure_grad() allocates
  /// zeros. It is never cleared implicitly; the optimizer owns zeroing.
  bool requires_grad = false;
  std::vector<double> grad;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data_.size(), 0.0);
  }
  void zero_grad() { grad.assign(data_.size(), 0.0); }

 private:
  static std::int64_t checked_numel(const std::vector<std::int64_t>& shape) {
    std::int64_t n = 1;
    for (std::int64_t d : shape) {
      if (d <= 0) throw NumericError("Tensor: shape dims must be positive");
      n *= d;
    }
    return n;
  }

  std::vector<std::int64_t> shape_;
  std::vector<double> data_;
};

}  // namespace kae::ad
