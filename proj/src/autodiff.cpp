#include "kae/autodiff.hpp"

#include <cmath>
#include <cstring>

namespace kae::ad {

namespace {

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

std::int64_t prod(const std::vector<std::int64_t>& s, std::size_t lo,
                  std::size_t hi) {
  std::int64_t p = 1;
  for (std::size_t i = lo; i < hi; ++i) p *= s[i];
  return p;
}

void require(bool cond, const std::string& msg) {
  if (!cond) throw NumericError(msg);
}

}  // namespace

const char* op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::matmul: return "matmul";
    case Op::reshape: return "reshape";
    case Op::concat: return "concat";
    case Op::slice: return "slice";
    case Op::sum: return "sum";
    case Op::mean: return "mean";
    case Op::tanh: return "tanh";
    case Op::silu: return "silu";
    case Op::square: return "square";
    case Op::sqrt: return "sqrt";
    case Op::cos: return "cos";
    case Op::softplus: return "softplus";
    case Op::recip: return "recip";
    case Op::stop_grad: return "stop_grad";
  }
  return "?";
}

const Tensor& Value::val() const { return tape->node(id).val; }

double Value::scalar() const {
  const Tensor& t = val();
  require(t.numel() == 1, "Value::scalar: node is not a single element");
  return t[0];
}

// ---------------------------------------------------------------------------
// Tape: leaves and bookkeeping
// ---------------------------------------------------------------------------

Value Tape::input(const std::string& name, Tensor v, bool requires_grad) {
  if (name.empty()) throw NumericError("Tape::input: empty leaf name");
  if (leaves_.count(name))
    throw NumericError("Tape::input: duplicate leaf name '" + name + "'");
  Node n;
  n.op = Op::leaf;
  n.val = std::move(v);
  n.needs_grad = requires_grad;
  n.name = name;
  const int id = push(std::move(n));
  leaves_.emplace(name, id);
  if (requires_grad) grad_leaf_order_.push_back(name);
  return Value{this, id};
}

Value Tape::constant(Tensor v) {
  Node n;
  n.op = Op::leaf;
  n.val = std::move(v);
  n.needs_grad = false;
  return Value{this, push(std::move(n))};
}

Value Tape::full_like(const Value& v, double c) {
  return constant(Tensor::full(v.val().shape(), c));
}

Value Tape::leaf(const std::string& name) const {
  auto it = leaves_.find(name);
  if (it == leaves_.end())
    throw NumericError("Tape::leaf: no leaf named '" + name + "'");
  return Value{const_cast<Tape*>(this), it->second};
}

std::vector<std::string> Tape::grad_leaf_names() const {
  return grad_leaf_order_;
}

void Tape::set_leaf(const std::string& name, const Tensor& v) {
  auto it = leaves_.find(name);
  if (it == leaves_.end())
    throw NumericError("Tape::set_leaf: no leaf named '" + name + "'");
  Node& n = nodes_[static_cast<std::size_t>(it->second)];
  require(n.val.same_shape(v), "Tape::set_leaf: shape mismatch for '" + name +
                                   "': " + n.val.shape_str() + " vs " +
                                   v.shape_str());
  n.val.values() = v.values();
  stale_ = true;
}

void Tape::replay() {
  for (Node& n : nodes_) {
    if (n.op == Op::leaf) continue;
    compute(n);
    check_finite(n);
  }
  stale_ = false;
  backward_done_ = false;
}

void Tape::mark_output(const std::string& name, Value v) {
  require(v.tape == this, "Tape::mark_output: value from another tape");
  outputs_.emplace_back(name, v.id);
}

Tensor Tape::output(const std::string& name) const {
  for (const auto& [n, id] : outputs_)
    if (n == name) return nodes_[static_cast<std::size_t>(id)].val;
  throw NumericError("Tape::output: no output named '" + name + "'");
}

std::vector<std::pair<std::string, Tensor>> Tape::evaluate(
    const std::vector<std::pair<std::string, Tensor>>& inputs) {
  for (const auto& [name, v] : inputs) set_leaf(name, v);
  replay();
  std::vector<std::pair<std::string, Tensor>> out;
  out.reserve(outputs_.size());
  for (const auto& [name, id] : outputs_)
    out.emplace_back(name, nodes_[static_cast<std::size_t>(id)].val);
  return out;
}

int Tape::push(Node n) {
  require(!stale_, "Tape: cannot extend a stale tape; replay() first");
  if (n.op != Op::leaf) {
    compute(n);
    check_finite(n);
  } else {
    check_finite(n);
  }
  nodes_.push_back(std::move(n));
  backward_done_ = false;
  return static_cast<int>(nodes_.size()) - 1;
}

void Tape::check_finite(const Node& n) const {
  if (!n.val.all_finite())
    throw NumericError(std::string("non-finite value produced by '") +
                       op_name(n.op) + "' (node " +
                       std::to_string(nodes_.size()) +
                       (n.name.empty() ? "" : ", leaf '" + n.name + "'") + ")");
}

// ---------------------------------------------------------------------------
// Forward rules
// ---------------------------------------------------------------------------

void Tape::compute(Node& n) {
  const Tensor& A = nodes_[static_cast<std::size_t>(n.a)].val;
  const std::int64_t na = A.numel();
  double* out = n.val.data();
  const double* a = A.data();

  switch (n.op) {
    case Op::leaf:
      return;
    case Op::add: {
      const double* b = nodes_[static_cast<std::size_t>(n.b)].val.data();
      for (std::int64_t i = 0; i < na; ++i) out[i] = a[i] + b[i];
      return;
    }
    case Op::sub: {
      const double* b = nodes_[static_cast<std::size_t>(n.b)].val.data();
      for (std::int64_t i = 0; i < na; ++i) out[i] = a[i] - b[i];
      return;
    }
    case Op::mul: {
      const double* b = nodes_[static_cast<std::size_t>(n.b)].val.data();
      for (std::int64_t i = 0; i < na; ++i) out[i] = a[i] * b[i];
      return;
    }
    case Op::matmul: {
      const Tensor& B = nodes_[static_cast<std::size_t>(n.b)].val;
      const double* b = B.data();
      const std::int64_t m = A.dim(0), k = A.dim(1), p = B.dim(1);
      std::memset(out, 0, static_cast<std::size_t>(m * p) * sizeof(double));
      for (std::int64_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* orow = out + i * p;
        for (std::int64_t l = 0; l < k; ++l) {
          const double av = arow[l];
          const double* brow = b + l * p;
          for (std::int64_t j = 0; j < p; ++j) orow[j] += av * brow[j];
        }
      }
      return;
    }
    case Op::reshape:
    case Op::stop_grad: {
      std::memcpy(out, a, static_cast<std::size_t>(na) * sizeof(double));
      return;
    }
    case Op::concat: {
      const Tensor& B = nodes_[static_cast<std::size_t>(n.b)].val;
      const double* b = B.data();
      const std::size_t axis = static_cast<std::size_t>(n.aux[0]);
      const std::int64_t inner = prod(n.val.shape(), axis + 1,
                                      n.val.shape().size());
      const std::int64_t outer = prod(n.val.shape(), 0, axis);
      const std::int64_t da = A.dim(static_cast<std::int64_t>(axis)) * inner;
      const std::int64_t db = B.dim(static_cast<std::int64_t>(axis)) * inner;
      for (std::int64_t o = 0; o < outer; ++o) {
        std::memcpy(out + o * (da + db), a + o * da,
                    static_cast<std::size_t>(da) * sizeof(double));
        std::memcpy(out + o * (da + db) + da, b + o * db,
                    static_cast<std::size_t>(db) * sizeof(double));
      }
      return;
    }
    case Op::slice: {
      const std::size_t axis = static_cast<std::size_t>(n.aux[0]);
      const std::int64_t start = n.aux[1], len = n.aux[2];
      const std::int64_t inner = prod(A.shape(), axis + 1, A.shape().size());
      const std::int64_t outer = prod(A.shape(), 0, axis);
      const std::int64_t stride = A.dim(static_cast<std::int64_t>(axis)) * inner;
      for (std::int64_t o = 0; o < outer; ++o)
        std::memcpy(out + o * len * inner, a + o * stride + start * inner,
                    static_cast<std::size_t>(len * inner) * sizeof(double));
      return;
    }
    case Op::sum: {
      double s = 0.0;
      for (std::int64_t i = 0; i < na; ++i) s += a[i];
      out[0] = s;
      return;
    }
    case Op::mean: {
      double s = 0.0;
      for (std::int64_t i = 0; i < na; ++i) s += a[i];
      out[0] = s / static_cast<double>(na);
      return;
    }
    case Op::tanh:
      for (std::int64_t i = 0; i < na; ++i) out[i] = std::tanh(a[i]);
      return;
    case Op::silu:
      for (std::int64_t i = 0; i < na; ++i) out[i] = a[i] * sigmoid(a[i]);
      return;
    case Op::square:
      for (std::int64_t i = 0; i < na; ++i) out[i] = a[i] * a[i];
      return;
    case Op::sqrt:
      for (std::int64_t i = 0; i < na; ++i) out[i] = std::sqrt(a[i]);
      return;
    case Op::cos:
      for (std::int64_t i = 0; i < na; ++i) out[i] = std::cos(a[i]);
      return;
    case Op::softplus:
      for (std::int64_t i = 0; i < na; ++i) {
        const double x = a[i];
        out[i] = std::fmax(x, 0.0) + std::log1p(std::exp(-std::fabs(x)));
      }
      return;
    case Op::recip:
      for (std::int64_t i = 0; i < na; ++i) out[i] = 1.0 / a[i];
      return;
  }
}

// ---------------------------------------------------------------------------
// Reverse sweep
// ---------------------------------------------------------------------------

void Tape::backward(Value loss, double seed) {
  require(loss.tape == this, "Tape::backward: loss from another tape");
  require(!stale_, "Tape::backward: tape is stale; replay() first");
  const Node& ln = nodes_[static_cast<std::size_t>(loss.id)];
  require(ln.val.numel() == 1, "Tape::backward: loss is not a single element");

  for (Node& n : nodes_) {
    if (n.needs_grad)
      n.grad.assign(static_cast<std::size_t>(n.val.numel()), 0.0);
    else
      n.grad.clear();
  }
  Node& lmut = nodes_[static_cast<std::size_t>(loss.id)];
  if (!lmut.needs_grad) {
    backward_done_ = true;  // loss does not reach any learnable leaf
    return;
  }
  lmut.grad[0] = seed;

  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.needs_grad || n.op == Op::leaf || n.op == Op::stop_grad) continue;

    Node& A = nodes_[static_cast<std::size_t>(n.a)];
    const double fault =
        (n.op == fault_op_) ? fault_factor_ : 1.0;
    const std::int64_t na = A.val.numel();
    const double* g = n.grad.data();
    const double* a = A.val.data();
    double* ga = A.needs_grad ? A.grad.data() : nullptr;

    switch (n.op) {
      case Op::add: {
        Node& B = nodes_[static_cast<std::size_t>(n.b)];
        if (ga)
          for (std::int64_t i = 0; i < na; ++i) ga[i] += fault * g[i];
        if (B.needs_grad) {
          double* gb = B.grad.data();
          for (std::int64_t i = 0; i < na; ++i) gb[i] += g[i];
        }
        break;
      }
      case Op::sub: {
        Node& B = nodes_[static_cast<std::size_t>(n.b)];
        if (ga)
          for (std::int64_t i = 0; i < na; ++i) ga[i] += fault * g[i];
        if (B.needs_grad) {
          double* gb = B.grad.data();
          for (std::int64_t i = 0; i < na; ++i) gb[i] -= g[i];
        }
        break;
      }
      case Op::mul: {
        Node& B = nodes_[static_cast<std::size_t>(n.b)];
        const double* b = B.val.data();
        if (ga)
          for (std::int64_t i = 0; i < na; ++i) ga[i] += fault * g[i] * b[i];
        if (B.needs_grad) {
          double* gb = B.grad.data();
          for (std::int64_t i = 0; i < na; ++i) gb[i] += g[i] * a[i];
        }
        break;
      }
      case Op::matmul: {
        Node& B = nodes_[static_cast<std::size_t>(n.b)];
        const double* b = B.val.data();
        const std::int64_t m = A.val.dim(0), k = A.val.dim(1),
                           p = B.val.dim(1);
        if (ga) {
          // dA = G * B^T
          for (std::int64_t i = 0; i < m; ++i) {
            const double* grow = g + i * p;
            double* garow = ga + i * k;
            for (std::int64_t l = 0; l < k; ++l) {
              const double* brow = b + l * p;
              double s = 0.0;
              for (std::int64_t j = 0; j < p; ++j) s += grow[j] * brow[j];
              garow[l] += fault * s;
            }
          }
        }
        if (B.needs_grad) {
          // dB = A^T * G
          double* gb = B.grad.data();
          for (std::int64_t i = 0; i < m; ++i) {
            const double* arow = a + i * k;
            const double* grow = g + i * p;
            for (std::int64_t l = 0; l < k; ++l) {
              const double av = arow[l];
              double* gbrow = gb + l * p;
              for (std::int64_t j = 0; j < p; ++j) gbrow[j] += av * grow[j];
            }
          }
        }
        break;
      }
      case Op::reshape: {
        if (ga)
          for (std::int64_t i = 0; i < na; ++i) ga[i] += fault * g[i];
        break;
      }
      case Op::concat: {
        Node& B = nodes_[static_cast<std::size_t>(n.b)];
        const std::size_t axis = static_cast<std::size_t>(n.aux[0]);
        const std::int64_t inner =
            prod(n.val.shape(), axis + 1, n.val.shape().size());
        const std::int64_t outer = prod(n.val.shape(), 0, axis);
        const std::int64_t da =
            A.val.dim(static_cast<std::int64_t>(axis)) * inner;
        const std::int64_t db =
            B.val.dim(static_cast<std::int64_t>(axis)) * inner;
        for (std::int64_t o = 0; o < outer; ++o) {
          const double* go = g + o * (da + db);
          if (ga)
            for (std::int64_t i = 0; i < da; ++i)
              ga[o * da + i] += fault * go[i];
          if (B.needs_grad) {
            double* gb = B.grad.data();
            for (std::int64_t i = 0; i < db; ++i)
              gb[o * db + i] += go[da + i];
          }
        }
        break;
      }
      case Op::slice: {
        if (!ga) break;
        const std::size_t axis = static_cast<std::size_t>(n.aux[0]);
        const std::int64_t start = n.aux[1], len = n.aux[2];
        const std::int64_t inner =
            prod(A.val.shape(), axis + 1, A.val.shape().size());
        const std::int64_t outer = prod(A.val.shape(), 0, axis);
        const std::int64_t stride =
            A.val.dim(static_cast<std::int64_t>(axis)) * inner;
        for (std::int64_t o = 0; o < outer; ++o) {
          const double* go = g + o * len * inner;
          double* gao = ga + o * stride + start * inner;
          for (std::int64_t i = 0; i < len * inner; ++i)
            gao[i] += fault * go[i];
        }
        break;
      }
      case Op::sum: {
        if (ga) {
          const double gv = fault * g[0];
          for (std::int64_t i = 0; i < na; ++i) ga[i] += gv;
        }
        break;
      }
      case Op::mean: {
        if (ga) {
          const double gv = fault * g[0] / static_cast<double>(na);
          for (std::int64_t i = 0; i < na; ++i) ga[i] += gv;
        }
        break;
      }
      case Op::tanh: {
        if (ga) {
          const double* y = n.val.data();
          for (std::int64_t i = 0; i < na; ++i)
            ga[i] += fault * g[i] * (1.0 - y[i] * y[i]);
        }
        break;
      }
      case Op::silu: {
        if (ga)
          for (std::int64_t i = 0; i < na; ++i) {
            const double s = sigmoid(a[i]);
            ga[i] += fault * g[i] * s * (1.0 + a[i] * (1.0 - s));
          }
        break;
      }
      case Op::square: {
        if (ga)
          for (std::int64_t i = 0; i < na; ++i)
            ga[i] += fault * g[i] * 2.0 * a[i];
        break;
      }
      case Op::sqrt: {
        if (ga) {
          const double* y = n.val.data();
          // Derivative is unbounded at 0; clamp the denominator so an exact
          // zero does not immediately poison the sweep with inf * 0.
          for (std::int64_t i = 0; i < na; ++i)
            ga[i] += fault * g[i] * 0.5 / std::fmax(y[i], 1e-150);
        }
        break;
      }
      case Op::cos: {
        if (ga)
          for (std::int64_t i = 0; i < na; ++i)
            ga[i] += fault * g[i] * -std::sin(a[i]);
        break;
      }
      case Op::softplus: {
        if (ga)
          for (std::int64_t i = 0; i < na; ++i)
            ga[i] += fault * g[i] * sigmoid(a[i]);
        break;
      }
      case Op::recip: {
        if (ga) {
          const double* y = n.val.data();
          for (std::int64_t i = 0; i < na; ++i)
            ga[i] += fault * g[i] * -(y[i] * y[i]);
        }
        break;
      }
      case Op::leaf:
      case Op::stop_grad:
        break;
    }
  }
  backward_done_ = true;
}

Tensor Tape::grad(const std::string& leaf_name) const {
  return grad(leaf(leaf_name));
}

Tensor Tape::grad(Value v) const {
  require(v.tape == this, "Tape::grad: value from another tape");
  require(backward_done_, "Tape::grad: backward() has not run");
  const Node& n = nodes_[static_cast<std::size_t>(v.id)];
  Tensor g(n.val.shape());
  if (!n.grad.empty()) g.values() = n.grad;
  return g;
}

std::vector<std::pair<std::string, Tensor>> Tape::gradients() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.reserve(grad_leaf_order_.size());
  for (const std::string& name : grad_leaf_order_)
    out.emplace_back(name, grad(name));
  return out;
}

// ---------------------------------------------------------------------------
// Op constructors
// ---------------------------------------------------------------------------

namespace {

void check_same_tape(Value a, Value b, const char* what) {
  require(a.valid() && b.valid() && a.tape == b.tape,
          std::string(what) + ": operands must live on one tape");
}

}  // namespace

Value push_binary(Op op, Value a, Value b) {
  check_same_tape(a, b, op_name(op));
  Tape& t = *a.tape;
  const Tensor& A = a.val();
  const Tensor& B = b.val();
  Node n;
  n.op = op;
  n.a = a.id;
  n.b = b.id;
  if (op == Op::matmul) {
    require(A.rank() == 2 && B.rank() == 2, "matmul: operands must be 2-D");
    require(A.dim(1) == B.dim(0), "matmul: inner dims differ, " +
                                      A.shape_str() + " x " + B.shape_str());
    n.val = Tensor({A.dim(0), B.dim(1)});
  } else {
    require(A.same_shape(B), std::string(op_name(op)) + ": shape mismatch, " +
                                 A.shape_str() + " vs " + B.shape_str());
    n.val = Tensor(A.shape());
  }
  n.needs_grad = t.node(a.id).needs_grad || t.node(b.id).needs_grad;
  return Value{&t, t.push(std::move(n))};
}

Value push_unary(Op op, Value a) {
  require(a.valid(), std::string(op_name(op)) + ": invalid operand");
  Tape& t = *a.tape;
  const Tensor& A = a.val();
  Node n;
  n.op = op;
  n.a = a.id;
  if (op == Op::sum || op == Op::mean)
    n.val = Tensor({1});
  else
    n.val = Tensor(A.shape());
  n.needs_grad = (op == Op::stop_grad) ? false : t.node(a.id).needs_grad;
  return Value{&t, t.push(std::move(n))};
}

Value add(Value a, Value b) { return push_binary(Op::add, a, b); }
Value sub(Value a, Value b) { return push_binary(Op::sub, a, b); }
Value mul(Value a, Value b) { return push_binary(Op::mul, a, b); }
Value matmul(Value a, Value b) { return push_binary(Op::matmul, a, b); }

Value reshape(Value a, std::vector<std::int64_t> shape) {
  require(a.valid(), "reshape: invalid operand");
  Tape& t = *a.tape;
  Node n;
  n.op = Op::reshape;
  n.a = a.id;
  n.val = Tensor(std::move(shape));
  require(n.val.numel() == a.val().numel(),
          "reshape: element count mismatch, " + a.val().shape_str() + " -> " +
              n.val.shape_str());
  n.needs_grad = t.node(a.id).needs_grad;
  return Value{&t, t.push(std::move(n))};
}

Value concat(Value a, Value b, int axis) {
  check_same_tape(a, b, "concat");
  Tape& t = *a.tape;
  const Tensor& A = a.val();
  const Tensor& B = b.val();
  require(A.rank() == B.rank(), "concat: rank mismatch");
  require(axis >= 0 && axis < A.rank(), "concat: axis out of range");
  for (std::int64_t d = 0; d < A.rank(); ++d)
    if (d != axis)
      require(A.dim(d) == B.dim(d), "concat: dim mismatch off the axis");
  std::vector<std::int64_t> shape = A.shape();
  shape[static_cast<std::size_t>(axis)] += B.dim(axis);
  Node n;
  n.op = Op::concat;
  n.a = a.id;
  n.b = b.id;
  n.aux = {axis};
  n.val = Tensor(std::move(shape));
  n.needs_grad = t.node(a.id).needs_grad || t.node(b.id).needs_grad;
  return Value{&t, t.push(std::move(n))};
}

Value slice(Value a, int axis, std::int64_t start, std::int64_t len) {
  require(a.valid(), "slice: invalid operand");
  Tape& t = *a.tape;
  const Tensor& A = a.val();
  require(axis >= 0 && axis < A.rank(), "slice: axis out of range");
  require(start >= 0 && len >= 1 && start + len <= A.dim(axis),
          "slice: range out of bounds");
  std::vector<std::int64_t> shape = A.shape();
  shape[static_cast<std::size_t>(axis)] = len;
  Node n;
  n.op = Op::slice;
  n.a = a.id;
  n.aux = {axis, start, len};
  n.val = Tensor(std::move(shape));
  n.needs_grad = t.node(a.id).needs_grad;
  return Value{&t, t.push(std::move(n))};
}

Value sum(Value a) { return push_unary(Op::sum, a); }
Value mean(Value a) { return push_unary(Op::mean, a); }
Value tanh(Value a) { return push_unary(Op::tanh, a); }
Value silu(Value a) { return push_unary(Op::silu, a); }
Value square(Value a) { return push_unary(Op::square, a); }
Value sqrt(Value a) { return push_unary(Op::sqrt, a); }
Value cos(Value a) { return push_unary(Op::cos, a); }
Value softplus(Value a) { return push_unary(Op::softplus, a); }
Value recip(Value a) { return push_unary(Op::recip, a); }
Value stop_grad(Value a) { return push_unary(Op::stop_grad, a); }

Value scale(Value a, double c) { return mul(a, a.tape->full_like(a, c)); }
Value dot(Value a, Value b) { return sum(mul(a, b)); }
Value norm2(Value a) { return sqrt(sum(square(a))); }
Value mse(Value a, Value b) { return mean(square(sub(a, b))); }
Value sq_err(Value a, Value b) { return sum(square(sub(a, b))); }
Value abs_val(Value a) { return sqrt(square(a)); }

// ---------------------------------------------------------------------------
// Finite-difference oracle
// ---------------------------------------------------------------------------

double finite_difference_check(Tape& tape, Value loss,
                               const std::string& leaf, double h, double eps) {
  if (h <= 0.0)
    throw ConfigError("finite_difference_check: step h must be > 0");
  require(loss.tape == &tape, "finite_difference_check: loss on wrong tape");
  if (tape.stale()) tape.replay();
  tape.backward(loss);
  const Tensor analytic = tape.grad(leaf);

  Value lv = tape.leaf(leaf);
  Tensor& lval = tape.node_mut(lv.id).val;
  double worst = 0.0;
  for (std::int64_t i = 0; i < lval.numel(); ++i) {
    const double saved = lval[i];
    lval[i] = saved + h;
    tape.replay();
    const double lp = loss.scalar();
    lval[i] = saved - h;
    tape.replay();
    const double lm = loss.scalar();
    lval[i] = saved;
    const double fd = (lp - lm) / (2.0 * h);
    const double ratio =
        std::fabs(analytic[i] - fd) / (std::fabs(fd) + eps);
    if (ratio > worst) worst = ratio;
  }
  tape.replay();
  return worst;
}

}  // namespace kae::ad
