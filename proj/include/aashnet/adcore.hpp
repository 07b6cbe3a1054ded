#pragma once

// Tape-based automatic differentiation.
//
// A Tape<T> records a computation as a topologically ordered list of coarse
// nodes (whole vectors and matrices, not individual scalars). Three passes run
// over a recorded tape:
//
//   replay()         recompute every primal from the inputs
//   tangents()       forward mode, one directional derivative per node
//   adjoints()       reverse mode, sensitivity of a scalar output per node
//
// Second order comes from running the reverse pass on Tape<Dual>: the tangent
// parts of the adjoints are a Hessian-vector product (forward-over-reverse).

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "aashnet/errors.hpp"

namespace aashnet::ad {

// Value plus one directional derivative.
struct Dual {
  double val = 0.0;
  double tan = 0.0;

  constexpr Dual() = default;
  constexpr Dual(double v, double t = 0.0) : val(v), tan(t) {}  // NOLINT: implicit from double

  Dual& operator+=(const Dual& o) {
    val += o.val;
    tan += o.tan;
    return *this;
  }
  Dual& operator-=(const Dual& o) {
    val -= o.val;
    tan -= o.tan;
    return *this;
  }
};

inline Dual operator+(Dual a, Dual b) { return {a.val + b.val, a.tan + b.tan}; }
inline Dual operator-(Dual a, Dual b) { return {a.val - b.val, a.tan - b.tan}; }
inline Dual operator-(Dual a) { return {-a.val, -a.tan}; }
inline Dual operator*(Dual a, Dual b) { return {a.val * b.val, a.tan * b.val + a.val * b.tan}; }
inline Dual operator/(Dual a, Dual b) {
  const double q = a.val / b.val;
  return {q, (a.tan - q * b.tan) / b.val};
}
inline Dual sin(Dual x) { return {std::sin(x.val), std::cos(x.val) * x.tan}; }
inline Dual cos(Dual x) { return {std::cos(x.val), -std::sin(x.val) * x.tan}; }
inline Dual exp(Dual x) {
  const double e = std::exp(x.val);
  return {e, e * x.tan};
}
inline Dual tanh(Dual x) {
  const double t = std::tanh(x.val);
  return {t, (1.0 - t * t) * x.tan};
}
inline Dual sqrt(Dual x) {
  const double s = std::sqrt(x.val);
  return {s, x.tan / (2.0 * s)};
}

inline bool is_finite(double x) { return std::isfinite(x); }
inline bool is_finite(Dual x) { return std::isfinite(x.val) && std::isfinite(x.tan); }
inline double primal(double x) { return x; }
inline double primal(Dual x) { return x.val; }

// Dense row-major tensor of rank <= 2. Column vectors have cols == 1 and
// scalars are 1x1.
template <class T>
struct Tensor {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> data;

  Tensor() = default;
  Tensor(std::size_t r, std::size_t c, T fill = T{}) : rows(r), cols(c), data(r * c, fill) {}
  Tensor(std::size_t r, std::size_t c, std::vector<T> values) : rows(r), cols(c), data(std::move(values)) {
    if (data.size() != r * c) {
      throw ShapeMismatch("tensor data has " + std::to_string(data.size()) + " entries, shape needs " +
                          std::to_string(r * c));
    }
  }

  static Tensor scalar(T v) { return Tensor(1, 1, std::vector<T>{v}); }
  static Tensor column(std::vector<T> values) {
    const std::size_t n = values.size();
    return Tensor(n, 1, std::move(values));
  }

  std::size_t size() const { return data.size(); }
  bool is_scalar() const { return rows == 1 && cols == 1; }
  bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }
  T& operator[](std::size_t k) { return data[k]; }
  const T& operator[](std::size_t k) const { return data[k]; }
  T& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  const T& operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
};

enum class Op : std::uint8_t {
  input,
  constant,
  add,
  sub,
  mul,
  div,
  scale,
  matmul,
  gather,
  cos,
  sin,
  tanh,
  logistic,
  sqrt,
  square,
  smooth_abs,
  sum,
  dot,
};

constexpr std::string_view op_name(Op op) {
  switch (op) {
    case Op::input: return "input";
    case Op::constant: return "constant";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::div: return "div";
    case Op::scale: return "scale";
    case Op::matmul: return "matmul";
    case Op::gather: return "gather";
    case Op::cos: return "cos";
    case Op::sin: return "sin";
    case Op::tanh: return "tanh";
    case Op::logistic: return "logistic";
    case Op::sqrt: return "sqrt";
    case Op::square: return "square";
    case Op::smooth_abs: return "smooth_abs";
    case Op::sum: return "sum";
    case Op::dot: return "dot";
  }
  return "?";
}

using Index = std::shared_ptr<const std::vector<std::size_t>>;

template <class T>
class Tape;

// Handle to a node on a tape. Cheap to copy; only valid while the tape lives.
template <class T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>& tape() const { return *tape_; }
  Tape<T>* tape_ptr() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  const Tensor<T>& value() const { return tape_->node(id_).value; }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <class T>
struct Node {
  Op op = Op::constant;
  std::ptrdiff_t lhs = -1;
  std::ptrdiff_t rhs = -1;
  double param = 0.0;
  Index index;
  Tensor<T> value;
};

namespace detail {

template <class T>
T logistic(T x) {
  using std::exp;
  return T(1.0) / (T(1.0) + exp(-x));
}

inline std::size_t bcast(const std::size_t k, const bool scalar) { return scalar ? 0 : k; }

template <class T>
Tensor<T> elementwise(const Tensor<T>& a, const Tensor<T>& b, auto fn) {
  const bool sa = a.is_scalar() && !b.is_scalar();
  const bool sb = b.is_scalar() && !a.is_scalar();
  const Tensor<T>& shape = sa ? b : a;
  Tensor<T> out(shape.rows, shape.cols);
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = fn(a[bcast(k, sa)], b[bcast(k, sb)]);
  return out;
}

template <class T>
Tensor<T> unary(const Tensor<T>& a, auto fn) {
  Tensor<T> out(a.rows, a.cols);
  for (std::size_t k = 0; k < a.size(); ++k) out[k] = fn(a[k]);
  return out;
}

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> out(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t l = 0; l < a.cols; ++l) {
      const T ail = a(i, l);
      for (std::size_t j = 0; j < b.cols; ++j) out(i, j) += ail * b(l, j);
    }
  }
  return out;
}

// Primal rule shared by recording and replay.
template <class T>
Tensor<T> evaluate(const Node<T>& node, const Tensor<T>* a, const Tensor<T>* b) {
  using std::cos;
  using std::sin;
  using std::sqrt;
  using std::tanh;
  const double c = node.param;
  switch (node.op) {
    case Op::input:
    case Op::constant: return node.value;
    case Op::add: return elementwise(*a, *b, [](T x, T y) { return x + y; });
    case Op::sub: return elementwise(*a, *b, [](T x, T y) { return x - y; });
    case Op::mul: return elementwise(*a, *b, [](T x, T y) { return x * y; });
    case Op::div: return elementwise(*a, *b, [](T x, T y) { return x / y; });
    case Op::scale: return unary(*a, [c](T x) { return T(c) * x; });
    case Op::matmul: return matmul(*a, *b);
    case Op::gather: {
      Tensor<T> out(node.value.rows, node.value.cols);
      const auto& idx = *node.index;
      for (std::size_t k = 0; k < idx.size(); ++k) out[k] = (*a)[idx[k]];
      return out;
    }
    case Op::cos: return unary(*a, [](T x) { return cos(x); });
    case Op::sin: return unary(*a, [](T x) { return sin(x); });
    case Op::tanh: return unary(*a, [](T x) { return tanh(x); });
    case Op::logistic: return unary(*a, [](T x) { return logistic(x); });
    case Op::sqrt: return unary(*a, [](T x) { return sqrt(x); });
    case Op::square: return unary(*a, [](T x) { return x * x; });
    case Op::smooth_abs: return unary(*a, [c](T x) { return sqrt(x * x + T(c)); });
    case Op::sum: {
      T s{};
      for (const T& x : a->data) s += x;
      return Tensor<T>::scalar(s);
    }
    case Op::dot: {
      T s{};
      for (std::size_t k = 0; k < a->size(); ++k) s += (*a)[k] * (*b)[k];
      return Tensor<T>::scalar(s);
    }
  }
  throw UnsupportedPrimitive(std::string(op_name(node.op)));
}

}  // namespace detail

template <class T>
class Tape {
 public:
  using value_type = T;

  Var<T> input(Tensor<T> value) {
    Node<T> n;
    n.op = Op::input;
    n.value = std::move(value);
    inputs_.push_back(nodes_.size());
    input_size_ += n.value.size();
    return push(std::move(n));
  }

  Var<T> input(std::span<const T> values) {
    return input(Tensor<T>::column(std::vector<T>(values.begin(), values.end())));
  }

  Var<T> constant(Tensor<T> value) {
    Node<T> n;
    n.op = Op::constant;
    n.value = std::move(value);
    return push(std::move(n));
  }

  Var<T> constant(T scalar) { return constant(Tensor<T>::scalar(scalar)); }

  // Appends an operation node. Shapes are checked and the primal is computed
  // immediately; a non-finite primal aborts recording.
  Var<T> record(Op op, Var<T> lhs, Var<T> rhs = {}, double param = 0.0, Index index = nullptr,
                std::size_t rows = 0, std::size_t cols = 0) {
    own(lhs);
    if (rhs.valid()) own(rhs);
    Node<T> n;
    n.op = op;
    n.lhs = static_cast<std::ptrdiff_t>(lhs.id());
    n.rhs = rhs.valid() ? static_cast<std::ptrdiff_t>(rhs.id()) : -1;
    n.param = param;
    n.index = std::move(index);
    check_shapes(n, rows, cols);
    if (op == Op::gather) n.value = Tensor<T>(rows, cols);
    const Tensor<T>* a = &nodes_[lhs.id()].value;
    const Tensor<T>* b = rhs.valid() ? &nodes_[rhs.id()].value : nullptr;
    n.value = detail::evaluate(n, a, b);
    return push(std::move(n));
  }

  std::size_t size() const { return nodes_.size(); }
  const Node<T>& node(std::size_t i) const { return nodes_.at(i); }
  const std::vector<std::size_t>& inputs() const { return inputs_; }
  // Total number of scalar entries across all input nodes.
  std::size_t input_size() const { return input_size_; }

 private:
  void own(const Var<T>& v) const {
    if (v.tape_ptr() != this) throw ContractViolation("variable belongs to a different tape");
  }

  void check_shapes(const Node<T>& n, std::size_t rows, std::size_t cols) const {
    const Tensor<T>& a = nodes_[static_cast<std::size_t>(n.lhs)].value;
    const Tensor<T>* b = n.rhs >= 0 ? &nodes_[static_cast<std::size_t>(n.rhs)].value : nullptr;
    auto fail = [&](const std::string& what) {
      throw ShapeMismatch(std::string(op_name(n.op)) + ": " + what + " (" + std::to_string(a.rows) + "x" +
                          std::to_string(a.cols) +
                          (b ? " vs " + std::to_string(b->rows) + "x" + std::to_string(b->cols) : std::string()) +
                          ")");
    };
    switch (n.op) {
      case Op::add:
      case Op::sub:
      case Op::mul:
      case Op::div:
        if (!b) fail("missing operand");
        if (!a.same_shape(*b) && !a.is_scalar() && !b->is_scalar()) fail("incompatible shapes");
        break;
      case Op::matmul:
        if (!b || a.cols != b->rows) fail("inner dimensions differ");
        break;
      case Op::dot:
        if (!b || a.size() != b->size()) fail("length mismatch");
        break;
      case Op::gather:
        if (!n.index || n.index->size() != rows * cols) fail("index count does not match output shape");
        for (std::size_t k : *n.index) {
          if (k >= a.size()) fail("index out of range");
        }
        break;
      case Op::input:
      case Op::constant: fail("not an operation");
      default: break;
    }
  }

  Var<T> push(Node<T> n) {
    for (const T& x : n.value.data) {
      if (!is_finite(x)) {
        throw NonFiniteValue("non-finite value at node " + std::to_string(nodes_.size()) + " (" +
                             std::string(op_name(n.op)) + ")");
      }
    }
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
  }

  std::vector<Node<T>> nodes_;
  std::vector<std::size_t> inputs_;
  std::size_t input_size_ = 0;
};

// ---------------------------------------------------------------------------
// Expression building.

template <class T>
Var<T> operator+(Var<T> a, Var<T> b) { return a.tape().record(Op::add, a, b); }
template <class T>
Var<T> operator-(Var<T> a, Var<T> b) { return a.tape().record(Op::sub, a, b); }
template <class T>
Var<T> operator*(Var<T> a, Var<T> b) { return a.tape().record(Op::mul, a, b); }
template <class T>
Var<T> operator/(Var<T> a, Var<T> b) { return a.tape().record(Op::div, a, b); }
template <class T>
Var<T> operator*(double c, Var<T> a) { return a.tape().record(Op::scale, a, {}, c); }
template <class T>
Var<T> operator*(Var<T> a, double c) { return c * a; }
template <class T>
Var<T> operator-(Var<T> a) { return -1.0 * a; }
template <class T>
Var<T> operator+(Var<T> a, double c) { return a + a.tape().constant(T(c)); }
template <class T>
Var<T> operator+(double c, Var<T> a) { return a.tape().constant(T(c)) + a; }
template <class T>
Var<T> operator-(Var<T> a, double c) { return a - a.tape().constant(T(c)); }
template <class T>
Var<T> operator-(double c, Var<T> a) { return a.tape().constant(T(c)) - a; }

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) { return a.tape().record(Op::matmul, a, b); }
template <class T>
Var<T> dot(Var<T> a, Var<T> b) { return a.tape().record(Op::dot, a, b); }
template <class T>
Var<T> sum(Var<T> a) { return a.tape().record(Op::sum, a); }
template <class T>
Var<T> cos(Var<T> a) { return a.tape().record(Op::cos, a); }
template <class T>
Var<T> sin(Var<T> a) { return a.tape().record(Op::sin, a); }
template <class T>
Var<T> tanh(Var<T> a) { return a.tape().record(Op::tanh, a); }
template <class T>
Var<T> logistic(Var<T> a) { return a.tape().record(Op::logistic, a); }
template <class T>
Var<T> sqrt(Var<T> a) { return a.tape().record(Op::sqrt, a); }
template <class T>
Var<T> square(Var<T> a) { return a.tape().record(Op::square, a); }
// sqrt(x^2 + eps): differentiable stand-in for |x|.
template <class T>
Var<T> smooth_abs(Var<T> a, double eps) {
  if (!(eps > 0.0)) throw ContractViolation("smooth_abs requires eps > 0");
  return a.tape().record(Op::smooth_abs, a, {}, eps);
}
// Picks entries of `a` (flat row-major positions) into a rows x cols tensor.
template <class T>
Var<T> gather(Var<T> a, Index index, std::size_t rows, std::size_t cols) {
  return a.tape().record(Op::gather, a, {}, 0.0, std::move(index), rows, cols);
}

// Name-based dispatch, for callers that assemble expressions from text.
template <class T>
Var<T> apply_unary(std::string_view name, Var<T> a) {
  if (name == "cos") return cos(a);
  if (name == "sin") return sin(a);
  if (name == "tanh") return tanh(a);
  if (name == "logistic") return logistic(a);
  if (name == "sqrt") return sqrt(a);
  if (name == "square") return square(a);
  if (name == "sum") return sum(a);
  throw UnsupportedPrimitive(std::string(name));
}

template <class T>
Var<T> apply_binary(std::string_view name, Var<T> a, Var<T> b) {
  if (name == "add") return a + b;
  if (name == "sub") return a - b;
  if (name == "mul") return a * b;
  if (name == "div") return a / b;
  if (name == "matmul") return matmul(a, b);
  if (name == "dot") return dot(a, b);
  throw UnsupportedPrimitive(std::string(name));
}

// ---------------------------------------------------------------------------
// Passes.

// Recomputes every node from the stored inputs and constants.
template <class T>
std::vector<Tensor<T>> replay(const Tape<T>& tape) {
  std::vector<Tensor<T>> values;
  values.reserve(tape.size());
  for (std::size_t i = 0; i < tape.size(); ++i) {
    const Node<T>& n = tape.node(i);
    const Tensor<T>* a = n.lhs >= 0 ? &values[static_cast<std::size_t>(n.lhs)] : nullptr;
    const Tensor<T>* b = n.rhs >= 0 ? &values[static_cast<std::size_t>(n.rhs)] : nullptr;
    values.push_back(detail::evaluate(n, a, b));
  }
  return values;
}

// Forward tangent trace. `seed` is the flat concatenation of the input
// directions in input-creation order.
template <class T>
std::vector<Tensor<T>> tangents(const Tape<T>& tape, std::span<const double> seed) {
  using std::cos;
  using std::sin;
  if (seed.size() != tape.input_size()) {
    throw ShapeMismatch("seed has " + std::to_string(seed.size()) + " entries, tape has " +
                        std::to_string(tape.input_size()) + " inputs");
  }
  std::vector<Tensor<T>> tan(tape.size());
  std::size_t offset = 0;
  for (std::size_t i = 0; i < tape.size(); ++i) {
    const Node<T>& n = tape.node(i);
    const Tensor<T>& y = n.value;
    Tensor<T>& out = tan[i];
    out = Tensor<T>(y.rows, y.cols);
    if (n.op == Op::input) {
      for (std::size_t k = 0; k < y.size(); ++k) out[k] = T(seed[offset + k]);
      offset += y.size();
      continue;
    }
    if (n.op == Op::constant) continue;
    const auto ia = static_cast<std::size_t>(n.lhs);
    const Tensor<T>& a = tape.node(ia).value;
    const Tensor<T>& da = tan[ia];
    const Tensor<T>* b = n.rhs >= 0 ? &tape.node(static_cast<std::size_t>(n.rhs)).value : nullptr;
    const Tensor<T>* db = n.rhs >= 0 ? &tan[static_cast<std::size_t>(n.rhs)] : nullptr;
    const bool sa = b && a.is_scalar() && !b->is_scalar();
    const bool sb = b && b->is_scalar() && !a.is_scalar();
    const std::size_t m = y.size();
    switch (n.op) {
      case Op::add:
        for (std::size_t k = 0; k < m; ++k) out[k] = da[detail::bcast(k, sa)] + (*db)[detail::bcast(k, sb)];
        break;
      case Op::sub:
        for (std::size_t k = 0; k < m; ++k) out[k] = da[detail::bcast(k, sa)] - (*db)[detail::bcast(k, sb)];
        break;
      case Op::mul:
        for (std::size_t k = 0; k < m; ++k) {
          const std::size_t ka = detail::bcast(k, sa), kb = detail::bcast(k, sb);
          out[k] = da[ka] * (*b)[kb] + a[ka] * (*db)[kb];
        }
        break;
      case Op::div:
        for (std::size_t k = 0; k < m; ++k) {
          const std::size_t ka = detail::bcast(k, sa), kb = detail::bcast(k, sb);
          out[k] = (da[ka] - y[k] * (*db)[kb]) / (*b)[kb];
        }
        break;
      case Op::scale:
        for (std::size_t k = 0; k < m; ++k) out[k] = T(n.param) * da[k];
        break;
      case Op::matmul: {
        const Tensor<T> left = detail::matmul(da, *b);
        const Tensor<T> right = detail::matmul(a, *db);
        for (std::size_t k = 0; k < m; ++k) out[k] = left[k] + right[k];
        break;
      }
      case Op::gather:
        for (std::size_t k = 0; k < m; ++k) out[k] = da[(*n.index)[k]];
        break;
      case Op::cos:
        for (std::size_t k = 0; k < m; ++k) out[k] = -sin(a[k]) * da[k];
        break;
      case Op::sin:
        for (std::size_t k = 0; k < m; ++k) out[k] = cos(a[k]) * da[k];
        break;
      case Op::tanh:
        for (std::size_t k = 0; k < m; ++k) out[k] = (T(1.0) - y[k] * y[k]) * da[k];
        break;
      case Op::logistic:
        for (std::size_t k = 0; k < m; ++k) out[k] = y[k] * (T(1.0) - y[k]) * da[k];
        break;
      case Op::sqrt:
        for (std::size_t k = 0; k < m; ++k) out[k] = da[k] / (T(2.0) * y[k]);
        break;
      case Op::square:
        for (std::size_t k = 0; k < m; ++k) out[k] = T(2.0) * a[k] * da[k];
        break;
      case Op::smooth_abs:
        for (std::size_t k = 0; k < m; ++k) out[k] = a[k] / y[k] * da[k];
        break;
      case Op::sum: {
        T s{};
        for (const T& x : da.data) s += x;
        out[0] = s;
        break;
      }
      case Op::dot: {
        T s{};
        for (std::size_t k = 0; k < a.size(); ++k) s += da[k] * (*b)[k] + a[k] * (*db)[k];
        out[0] = s;
        break;
      }
      case Op::input:
      case Op::constant: break;
    }
  }
  return tan;
}

// Directional derivative of a scalar output along `seed`.
template <class T>
T forward_tangent(const Tape<T>& tape, Var<T> output, std::span<const double> seed) {
  if (output.value().size() != 1) throw ContractViolation("forward_tangent expects a scalar output");
  return tangents(tape, seed)[output.id()][0];
}

// Reverse adjoint trace: entry i is d(output)/d(node i), shaped like node i.
// Nodes recorded after `output`, or not feeding it, have zero adjoint.
template <class T>
std::vector<Tensor<T>> adjoints(const Tape<T>& tape, Var<T> output) {
  using std::cos;
  using std::sin;
  if (output.value().size() != 1) {
    throw ContractViolation("reverse pass needs a single scalar output; node " + std::to_string(output.id()) +
                            " has " + std::to_string(output.value().size()) + " entries");
  }
  std::vector<Tensor<T>> adj(tape.size());
  for (std::size_t i = 0; i < tape.size(); ++i) {
    const Tensor<T>& v = tape.node(i).value;
    adj[i] = Tensor<T>(v.rows, v.cols);
  }
  adj[output.id()][0] = T(1.0);
  std::vector<bool> live(tape.size(), false);
  live[output.id()] = true;

  for (std::size_t i = output.id() + 1; i-- > 0;) {
    if (!live[i]) continue;
    const Node<T>& n = tape.node(i);
    if (n.op == Op::input || n.op == Op::constant) continue;
    const Tensor<T>& g = adj[i];
    const Tensor<T>& y = n.value;
    const auto ia = static_cast<std::size_t>(n.lhs);
    const Tensor<T>& a = tape.node(ia).value;
    Tensor<T>& ga = adj[ia];
    live[ia] = true;
    const Tensor<T>* b = nullptr;
    Tensor<T>* gb = nullptr;
    if (n.rhs >= 0) {
      const auto ib = static_cast<std::size_t>(n.rhs);
      b = &tape.node(ib).value;
      gb = &adj[ib];
      live[ib] = true;
    }
    const bool sa = b && a.is_scalar() && !b->is_scalar();
    const bool sb = b && b->is_scalar() && !a.is_scalar();
    const std::size_t m = y.size();
    switch (n.op) {
      case Op::add:
        for (std::size_t k = 0; k < m; ++k) {
          ga[detail::bcast(k, sa)] += g[k];
          (*gb)[detail::bcast(k, sb)] += g[k];
        }
        break;
      case Op::sub:
        for (std::size_t k = 0; k < m; ++k) {
          ga[detail::bcast(k, sa)] += g[k];
          (*gb)[detail::bcast(k, sb)] -= g[k];
        }
        break;
      case Op::mul:
        for (std::size_t k = 0; k < m; ++k) {
          const std::size_t ka = detail::bcast(k, sa), kb = detail::bcast(k, sb);
          ga[ka] += g[k] * (*b)[kb];
          (*gb)[kb] += g[k] * a[ka];
        }
        break;
      case Op::div:
        for (std::size_t k = 0; k < m; ++k) {
          const std::size_t ka = detail::bcast(k, sa), kb = detail::bcast(k, sb);
          const T q = g[k] / (*b)[kb];
          ga[ka] += q;
          (*gb)[kb] -= q * y[k];
        }
        break;
      case Op::scale:
        for (std::size_t k = 0; k < m; ++k) ga[k] += T(n.param) * g[k];
        break;
      case Op::matmul:
        // C = A B:  dA += dC B^T,  dB += A^T dC
        for (std::size_t r = 0; r < a.rows; ++r) {
          for (std::size_t l = 0; l < a.cols; ++l) {
            T acc{};
            for (std::size_t c = 0; c < b->cols; ++c) acc += g(r, c) * (*b)(l, c);
            ga(r, l) += acc;
            const T arl = a(r, l);
            for (std::size_t c = 0; c < b->cols; ++c) (*gb)(l, c) += arl * g(r, c);
          }
        }
        break;
      case Op::gather:
        for (std::size_t k = 0; k < m; ++k) ga[(*n.index)[k]] += g[k];
        break;
      case Op::cos:
        for (std::size_t k = 0; k < m; ++k) ga[k] += -sin(a[k]) * g[k];
        break;
      case Op::sin:
        for (std::size_t k = 0; k < m; ++k) ga[k] += cos(a[k]) * g[k];
        break;
      case Op::tanh:
        for (std::size_t k = 0; k < m; ++k) ga[k] += (T(1.0) - y[k] * y[k]) * g[k];
        break;
      case Op::logistic:
        for (std::size_t k = 0; k < m; ++k) ga[k] += y[k] * (T(1.0) - y[k]) * g[k];
        break;
      case Op::sqrt:
        for (std::size_t k = 0; k < m; ++k) ga[k] += g[k] / (T(2.0) * y[k]);
        break;
      case Op::square:
        for (std::size_t k = 0; k < m; ++k) ga[k] += T(2.0) * a[k] * g[k];
        break;
      case Op::smooth_abs:
        for (std::size_t k = 0; k < m; ++k) ga[k] += a[k] / y[k] * g[k];
        break;
      case Op::sum:
        for (std::size_t k = 0; k < a.size(); ++k) ga[k] += g[0];
        break;
      case Op::dot:
        for (std::size_t k = 0; k < a.size(); ++k) {
          ga[k] += g[0] * (*b)[k];
          (*gb)[k] += g[0] * a[k];
        }
        break;
      case Op::input:
      case Op::constant: break;
    }
  }
  return adj;
}

// Gradient of a scalar output with respect to all inputs, flattened in
// input-creation order.
template <class T>
std::vector<T> reverse_grad(const Tape<T>& tape, Var<T> output) {
  const auto adj = adjoints(tape, output);
  std::vector<T> grad;
  grad.reserve(tape.input_size());
  for (std::size_t id : tape.inputs()) {
    grad.insert(grad.end(), adj[id].data.begin(), adj[id].data.end());
  }
  return grad;
}

// ---------------------------------------------------------------------------
// Function-level helpers. `f` is any callable (Tape<T>&, Var<T>) -> Var<T>
// that is generic in T, e.g. a lambda taking `auto&, auto`.

template <class F>
std::vector<double> gradient(F&& f, std::span<const double> at) {
  Tape<double> tape;
  const Var<double> x = tape.input(at);
  return reverse_grad(tape, f(tape, x));
}

// H(at) * direction, by reversing a tape of dual numbers whose tangents carry
// the direction.
template <class F>
std::vector<double> hvp(F&& f, std::span<const double> at, std::span<const double> direction) {
  if (at.size() != direction.size()) {
    throw ShapeMismatch("hvp: point has " + std::to_string(at.size()) + " entries, direction has " +
                        std::to_string(direction.size()));
  }
  Tape<Dual> tape;
  Tensor<Dual> x(at.size(), 1);
  for (std::size_t k = 0; k < at.size(); ++k) x[k] = Dual(at[k], direction[k]);
  const Var<Dual> in = tape.input(std::move(x));
  const auto g = reverse_grad(tape, f(tape, in));
  std::vector<double> out(g.size());
  for (std::size_t k = 0; k < g.size(); ++k) out[k] = g[k].tan;
  return out;
}

}  // namespace aashnet::ad
