#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "kae/tensor.hpp"

namespace kae::ad {

class Tape;

// One recorded primitive. Kept deliberately small: the model, the integrator
// steps and every loss term are compositions of these.
enum class Op {
  leaf,
  add,
  sub,
  mul,       // elementwise
  matmul,    // 2-D only
  reshape,
  concat,    // binary, along an axis
  slice,     // contiguous range along an axis
  sum,       // full reduction -> shape {1}
  mean,      // full reduction -> shape {1}
  tanh,
  silu,
  square,
  sqrt,
  cos,
  softplus,
  recip,
  stop_grad,  // identity forward, blocks the reverse sweep
};

const char* op_name(Op op);

/// Handle to a node on a Tape. Cheap to copy; only valid while the Tape
/// lives.
struct Value {
  Tape* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor& val() const;
  /// Value of a single-element node.
  double scalar() const;
};

struct Node {
  Op op = Op::leaf;
  int a = -1;
  int b = -1;
  std::vector<std::int64_t> aux;  // slice: {axis,start,len}; concat: {axis}
  Tensor val;
  std::vector<double> grad;  // adjoint, allocated during backward
  bool needs_grad = false;
  std::string name;  // non-empty for named leaves
};

/// Topologically ordered record of primitive operations over Tensors.
///
/// Nodes are appended with their forward value computed eagerly, so parents
/// always precede children and replay() reproduces every value bit for bit.
/// backward() runs one reverse sweep, accumulating adjoints; a leaf used in
/// several places receives the sum of all its contributions. Any non-finite
/// forward value throws NumericError immediately.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // ---- leaves ----
  Value input(const std::string& name, Tensor v, bool requires_grad);
  Value constant(Tensor v);
  Value constant(double v) { return constant(Tensor::scalar(v)); }
  Value full_like(const Value& v, double c);

  bool has_leaf(const std::string& name) const {
    return leaves_.count(name) != 0;
  }
  Value leaf(const std::string& name) const;
  /// Names of requires_grad leaves, in creation order.
  std::vector<std::string> grad_leaf_names() const;

  // ---- forward control ----
  /// Rebind a named leaf (shape must match). Downstream values go stale
  /// until replay().
  void set_leaf(const std::string& name, const Tensor& v);
  /// Recompute every non-leaf value in record order.
  void replay();
  bool stale() const { return stale_; }

  // ---- named outputs ----
  void mark_output(const std::string& name, Value v);
  Tensor output(const std::string& name) const;
  /// Bind the given leaves, replay, and return every marked output.
  std::vector<std::pair<std::string, Tensor>> evaluate(
      const std::vector<std::pair<std::string, Tensor>>& inputs);

  // ---- reverse sweep ----
  /// Seeds d(loss)/d(loss) = seed and accumulates adjoints into every node
  /// that leads to a requires_grad leaf. loss must be a single element and
  /// the tape must not be stale.
  void backward(Value loss, double seed = 1.0);
  bool backward_done() const { return backward_done_; }

  /// Adjoint of a leaf after backward(); zeros if the leaf is unused.
  Tensor grad(const std::string& leaf_name) const;
  Tensor grad(Value leaf) const;
  /// All requires_grad leaf adjoints, in creation order.
  std::vector<std::pair<std::string, Tensor>> gradients() const;

  // ---- introspection ----
  std::size_t size() const { return nodes_.size(); }
  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  Node& node_mut(int id) { return nodes_[static_cast<std::size_t>(id)]; }
  void reserve(std::size_t n) { nodes_.reserve(n); }

  /// Test hook: scale the adjoint contribution that `op` sends to its first
  /// parent by `factor`. Lets tests prove the finite-difference oracle
  /// catches a wrong backward rule. factor = 1 disables.
  void inject_backward_fault(Op op, double factor) {
    fault_op_ = op;
    fault_factor_ = factor;
  }

 private:
  friend Value push_unary(Op op, Value a);
  friend Value push_binary(Op op, Value a, Value b);
  friend Value matmul(Value a, Value b);
  friend Value reshape(Value a, std::vector<std::int64_t> shape);
  friend Value concat(Value a, Value b, int axis);
  friend Value slice(Value a, int axis, std::int64_t start, std::int64_t len);

  int push(Node n);
  void compute(Node& n);  // forward rule; writes n.val in place
  void check_finite(const Node& n) const;

  std::vector<Node> nodes_;
  std::unordered_map<std::string, int> leaves_;
  std::vector<std::string> grad_leaf_order_;
  std::vector<std::pair<std::string, int>> outputs_;
  bool stale_ = false;
  bool backward_done_ = false;
  Op fault_op_ = Op::leaf;
  double fault_factor_ = 1.0;
};

// ---- primitives ----
Value add(Value a, Value b);
Value sub(Value a, Value b);
Value mul(Value a, Value b);
Value matmul(Value a, Value b);
Value reshape(Value a, std::vector<std::int64_t> shape);
Value concat(Value a, Value b, int axis);
Value slice(Value a, int axis, std::int64_t start, std::int64_t len);
Value sum(Value a);
Value mean(Value a);
Value tanh(Value a);
Value silu(Value a);
Value square(Value a);
Value sqrt(Value a);
Value cos(Value a);
Value softplus(Value a);
Value recip(Value a);
Value stop_grad(Value a);

inline Value operator+(Value a, Value b) { return add(a, b); }
inline Value operator-(Value a, Value b) { return sub(a, b); }
inline Value operator*(Value a, Value b) { return mul(a, b); }

// ---- compositions used throughout the model and losses ----
/// Multiply by a host constant.
Value scale(Value a, double c);
/// sum(a * b) over all entries.
Value dot(Value a, Value b);
/// Euclidean norm, sqrt(sum(square(a))).
Value norm2(Value a);
/// mean(square(a - b)).
Value mse(Value a, Value b);
/// sum(square(a - b)).
Value sq_err(Value a, Value b);
/// |a| entrywise as sqrt(square(a)).
Value abs_val(Value a);

/// Max over entries of `leaf` of |analytic - central difference| /
/// (|central difference| + eps), at step h > 0. Runs backward() itself and
/// leaves the tape replayed at the unperturbed point.
double finite_difference_check(Tape& tape, Value loss,
                               const std::string& leaf, double h,
                               double eps = 1e-8);

}  // namespace kae::ad
