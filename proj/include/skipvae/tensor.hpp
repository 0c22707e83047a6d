// Dense float64 tensors with a reverse-mode gradient tape.
//
// Tensors are row-major and batch-first. A tensor either carries no tape
// reference (a constant, freely shareable) or refers to a node on exactly one
// Tape. Every forward op records a node when any input is tracked; backward()
// walks the tape once in reverse insertion order.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace skipvae {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline std::string to_string(const Shape& shape) {
  std::string out = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(shape[i]);
  }
  return out + ")";
}

inline std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

class Tape;

class Tensor {
 public:
  /// A rank-0 zero.
  Tensor() : Tensor(Shape{}, std::vector<double>{0.0}) {}

  Tensor(Shape shape, std::vector<double> values)
      : shape_(std::move(shape)),
        data_(std::make_shared<const std::vector<double>>(std::move(values))) {
    for (auto extent : shape_) {
      if (extent == 0) throw ShapeError("tensor extents must be positive, got " + to_string(shape_));
    }
    if (data_->size() != element_count(shape_)) {
      throw ShapeError("tensor of shape " + to_string(shape_) + " needs " +
                       std::to_string(element_count(shape_)) + " values, got " +
                       std::to_string(data_->size()));
    }
  }

  static Tensor full(Shape shape, double value) {
    auto n = element_count(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value));
  }
  static Tensor zeros(Shape shape) { return full(std::move(shape), 0.0); }
  static Tensor scalar(double value) { return Tensor(Shape{}, {value}); }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
    return Tensor(Shape{rows, cols}, std::move(values));
  }
  static Tensor vector(std::vector<double> values) {
    auto n = values.size();
    return Tensor(Shape{n}, std::move(values));
  }
  static Tensor identity(std::size_t n) {
    std::vector<double> v(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
    return matrix(n, n, std::move(v));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_->size(); }
  /// Matrix view: rank-1 tensors are a single row, scalars are 1x1.
  std::size_t rows() const { return rank() == 2 ? shape_[0] : 1; }
  std::size_t cols() const { return rank() == 0 ? 1 : shape_.back(); }

  std::span<const double> values() const { return *data_; }
  const std::vector<double>& storage() const { return *data_; }
  double operator[](std::size_t i) const { return (*data_)[i]; }
  double at(std::size_t r, std::size_t c) const { return (*data_)[r * cols() + c]; }
  double item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape_));
    return (*data_)[0];
  }

  bool tracked() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  std::size_t node() const { return node_; }

  /// Same values, no tape reference.
  Tensor detached() const {
    Tensor t = *this;
    t.tape_ = nullptr;
    t.node_ = 0;
    return t;
  }

  Tensor reshaped(Shape shape) const {
    if (element_count(shape) != size()) {
      throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
    }
    if (tracked()) throw TapeError("reshape of a tracked tensor is not recorded");
    Tensor t = *this;
    t.shape_ = std::move(shape);
    return t;
  }

 private:
  friend class Tape;
  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
  Tape* tape_ = nullptr;
  std::size_t node_ = 0;
};

/// Per-node gradient buffers produced by Tape::backward.
class Gradients {
 public:
  /// Gradient of the loss with respect to `t`; zeros when `t` did not
  /// influence the loss.
  Tensor of(const Tensor& t) const {
    if (t.tape() != tape_) throw TapeError("tensor is not tracked on the differentiated tape");
    const auto& g = grads_.at(t.node());
    if (g.empty()) return Tensor::zeros(t.shape());
    return Tensor(t.shape(), g);
  }

 private:
  friend class Tape;
  const Tape* tape_ = nullptr;
  std::vector<std::vector<double>> grads_;
};

class Tape {
 public:
  /// Receives d(loss)/d(output) and accumulates into each parent's buffer;
  /// a null buffer marks a constant parent.
  using BackwardFn =
      std::function<void(std::span<const double>, std::span<std::vector<double>* const>)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers `value` as a differentiable leaf.
  Tensor variable(const Tensor& value) {
    if (value.tracked()) throw TapeError("variable() expects an untracked tensor");
    Tensor t = value;
    t.tape_ = this;
    t.node_ = nodes_.size();
    nodes_.push_back(Node{value.shape(), {}, nullptr});
    return t;
  }

  std::size_t size() const { return nodes_.size(); }
  bool differentiated() const { return differentiated_; }

  void reset() {
    nodes_.clear();
    differentiated_ = false;
  }

  /// Records an op result. `parents` are the op inputs in order.
  Tensor record(Shape shape, std::vector<double> values, std::initializer_list<const Tensor*> parents,
                BackwardFn backward) {
    return record(std::move(shape), std::move(values), std::vector<const Tensor*>(parents),
                  std::move(backward));
  }

  Tensor record(Shape shape, std::vector<double> values, const std::vector<const Tensor*>& parents,
                BackwardFn backward) {
    if (differentiated_) throw TapeError("cannot record onto a tape after backward(); reset it first");
    Tensor t(std::move(shape), std::move(values));
    Node node{t.shape(), {}, std::move(backward)};
    node.parents.reserve(parents.size());
    for (const Tensor* p : parents) {
      if (p->tracked() && p->tape() != this) throw TapeError("op inputs live on different tapes");
      node.parents.push_back(p->tracked() ? p->node() : kConstant);
    }
    t.tape_ = this;
    t.node_ = nodes_.size();
    nodes_.push_back(std::move(node));
    return t;
  }

  Gradients backward(const Tensor& loss) {
    if (loss.tape() != this) throw TapeError("loss is not tracked on this tape");
    if (loss.size() != 1) throw ShapeError("backward() needs a scalar loss, got " + to_string(loss.shape()));
    if (differentiated_) throw TapeError("backward() called twice without reset()");
    differentiated_ = true;

    Gradients out;
    out.tape_ = this;
    auto& grads = out.grads_;
    grads.resize(nodes_.size());
    grads[loss.node()] = {1.0};

    std::vector<std::vector<double>*> parent_bufs;
    for (std::size_t i = loss.node() + 1; i-- > 0;) {
      const Node& node = nodes_[i];
      if (grads[i].empty() || !node.backward) continue;
      parent_bufs.clear();
      for (auto pid : node.parents) {
        if (pid == kConstant) {
          parent_bufs.push_back(nullptr);
          continue;
        }
        auto& buf = grads[pid];
        if (buf.empty()) buf.assign(element_count(nodes_[pid].shape), 0.0);
        parent_bufs.push_back(&buf);
      }
      node.backward(grads[i], parent_bufs);
    }
    return out;
  }

 private:
  static constexpr std::size_t kConstant = std::numeric_limits<std::size_t>::max();

  struct Node {
    Shape shape;
    std::vector<std::size_t> parents;
    BackwardFn backward;  // empty for leaves
  };

  std::vector<Node> nodes_;
  bool differentiated_ = false;
};

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

inline ConstMap as_matrix(std::span<const double> v, std::size_t rows, std::size_t cols) {
  return ConstMap(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
inline MutMap as_matrix(std::vector<double>& v, std::size_t rows, std::size_t cols) {
  return MutMap(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

inline void check_finite(const std::vector<double>& v, const char* op) {
  for (double x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string("non-finite result in ") + op);
  }
}

inline Tape* common_tape(std::initializer_list<const Tensor*> inputs) {
  Tape* tape = nullptr;
  for (const Tensor* t : inputs) {
    if (!t->tracked()) continue;
    if (tape && t->tape() != tape) throw TapeError("op inputs live on different tapes");
    tape = t->tape();
  }
  return tape;
}

inline Tensor finish(Shape shape, std::vector<double> values, const char* op,
                     std::initializer_list<const Tensor*> inputs, Tape::BackwardFn backward) {
  check_finite(values, op);
  Tape* tape = common_tape(inputs);
  if (!tape) return Tensor(std::move(shape), std::move(values));
  return tape->record(std::move(shape), std::move(values), inputs, std::move(backward));
}

enum class Broadcast { none, rhs_row, lhs_row };

// Elementwise operands either share a shape or one of them is a vector (or
// 1 x F matrix) repeated across the rows of the other.
inline Broadcast broadcast_kind(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::none;
  auto is_row = [](const Tensor& t) { return t.rank() == 1 || (t.rank() == 2 && t.rows() == 1); };
  if (a.rank() == 2 && is_row(b) && b.cols() == a.cols()) return Broadcast::rhs_row;
  if (b.rank() == 2 && is_row(a) && a.cols() == b.cols()) return Broadcast::lhs_row;
  throw ShapeError(std::string(op) + ": incompatible shapes " + to_string(a.shape()) + " and " +
                   to_string(b.shape()));
}

// Adds `g` (full output shape) into `dst`, summing over rows when `dst` is the
// broadcast row operand.
inline void accumulate(std::vector<double>& dst, std::span<const double> g, bool reduce_rows,
                       std::size_t cols, double scale = 1.0) {
  if (!reduce_rows) {
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += scale * g[i];
    return;
  }
  for (std::size_t i = 0; i < g.size(); ++i) dst[i % cols] += scale * g[i];
}

template <class Forward, class Partials>
Tensor binary_elementwise(const Tensor& a, const Tensor& b, const char* op, Forward forward,
                          Partials partials) {
  auto kind = broadcast_kind(a, b, op);
  const Shape& shape = kind == Broadcast::lhs_row ? b.shape() : a.shape();
  const std::size_t n = element_count(shape);
  const std::size_t cols = shape.empty() ? 1 : shape.back();
  auto av = a.values();
  auto bv = b.values();
  auto ai = [&](std::size_t i) { return kind == Broadcast::lhs_row ? av[i % cols] : av[i]; };
  auto bi = [&](std::size_t i) { return kind == Broadcast::rhs_row ? bv[i % cols] : bv[i]; };
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = forward(ai(i), bi(i));
  return finish(shape, std::move(out), op, {&a, &b},
                [a = a.detached(), b = b.detached(), kind, cols, partials](
                    std::span<const double> g, std::span<std::vector<double>* const> p) {
                  auto av = a.values();
                  auto bv = b.values();
                  for (std::size_t i = 0; i < g.size(); ++i) {
                    double x = kind == Broadcast::lhs_row ? av[i % cols] : av[i];
                    double y = kind == Broadcast::rhs_row ? bv[i % cols] : bv[i];
                    auto [dx, dy] = partials(x, y);
                    if (p[0]) (*p[0])[kind == Broadcast::lhs_row ? i % cols : i] += g[i] * dx;
                    if (p[1]) (*p[1])[kind == Broadcast::rhs_row ? i % cols : i] += g[i] * dy;
                  }
                });
}

// `derivative(x, y)` gets the input and the output value.
template <class Forward, class Derivative>
Tensor unary(const Tensor& a, const char* op, Forward forward, Derivative derivative) {
  auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = forward(av[i]);
  auto result_values = out;
  return finish(a.shape(), std::move(out), op, {&a},
                [a = a.detached(), y = std::move(result_values), derivative](
                    std::span<const double> g, std::span<std::vector<double>* const> p) {
                  if (!p[0]) return;
                  auto av = a.values();
                  for (std::size_t i = 0; i < g.size(); ++i) (*p[0])[i] += g[i] * derivative(av[i], y[i]);
                });
}

inline double stable_softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Forward ops
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
    throw ShapeError("matmul: incompatible shapes " + to_string(a.shape()) + " and " +
                     to_string(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(m * n);
  detail::as_matrix(out, m, n).noalias() =
      detail::as_matrix(a.values(), m, k) * detail::as_matrix(b.values(), k, n);
  return detail::finish(
      {m, n}, std::move(out), "matmul", {&a, &b},
      [a = a.detached(), b = b.detached(), m, k, n](std::span<const double> g,
                                                     std::span<std::vector<double>* const> p) {
        auto gm = detail::as_matrix(g, m, n);
        if (p[0]) detail::as_matrix(*p[0], m, k).noalias() += gm * detail::as_matrix(b.values(), k, n).transpose();
        if (p[1]) detail::as_matrix(*p[1], k, n).noalias() += detail::as_matrix(a.values(), m, k).transpose() * gm;
      });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_elementwise(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double) { return std::pair{1.0, 1.0}; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_elementwise(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double) { return std::pair{1.0, -1.0}; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_elementwise(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double x, double y) { return std::pair{y, x}; });
}

inline Tensor scale(const Tensor& a, double c) {
  return detail::unary(
      a, "scale", [c](double x) { return c * x; }, [c](double, double) { return c; });
}

inline Tensor add_scalar(const Tensor& a, double c) {
  return detail::unary(
      a, "add_scalar", [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

inline Tensor square(const Tensor& a) {
  return detail::unary(
      a, "square", [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

inline Tensor relu(const Tensor& a) {
  return detail::unary(
      a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary(a, "sigmoid", detail::stable_sigmoid,
                       [](double, double y) { return y * (1.0 - y); });
}

inline Tensor tanh(const Tensor& a) {
  return detail::unary(
      a, "tanh", [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

inline Tensor exp(const Tensor& a) {
  return detail::unary(
      a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& a) {
  return detail::unary(
      a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

/// log(1 + exp(x)) without overflow.
inline Tensor softplus(const Tensor& a) {
  return detail::unary(a, "softplus", detail::stable_softplus,
                       [](double x, double) { return detail::stable_sigmoid(x); });
}

/// Elementwise clamp; the gradient is zero outside [lo, hi].
inline Tensor clamp(const Tensor& a, double lo, double hi) {
  return detail::unary(
      a, "clamp", [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x < lo || x > hi) ? 0.0 : 1.0; });
}

/// Sum over `axis` of a rank-1 or rank-2 tensor.
inline Tensor sum(const Tensor& a, std::size_t axis) {
  if (a.rank() == 1 && axis == 0) {
    double s = 0.0;
    for (double x : a.values()) s += x;
    return detail::finish({}, {s}, "sum", {&a},
                          [n = a.size()](std::span<const double> g, std::span<std::vector<double>* const> p) {
                            if (!p[0]) return;
                            for (std::size_t i = 0; i < n; ++i) (*p[0])[i] += g[0];
                          });
  }
  if (a.rank() != 2 || axis > 1) {
    throw ShapeError("sum: axis " + std::to_string(axis) + " invalid for shape " + to_string(a.shape()));
  }
  const std::size_t r = a.rows(), c = a.cols();
  auto av = a.values();
  if (axis == 0) {
    std::vector<double> out(c, 0.0);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[j] += av[i * c + j];
    return detail::finish({c}, std::move(out), "sum", {&a},
                          [r, c](std::span<const double> g, std::span<std::vector<double>* const> p) {
                            if (!p[0]) return;
                            for (std::size_t i = 0; i < r; ++i)
                              for (std::size_t j = 0; j < c; ++j) (*p[0])[i * c + j] += g[j];
                          });
  }
  std::vector<double> out(r, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i] += av[i * c + j];
  return detail::finish({r}, std::move(out), "sum", {&a},
                        [r, c](std::span<const double> g, std::span<std::vector<double>* const> p) {
                          if (!p[0]) return;
                          for (std::size_t i = 0; i < r; ++i)
                            for (std::size_t j = 0; j < c; ++j) (*p[0])[i * c + j] += g[i];
                        });
}

inline Tensor mean(const Tensor& a, std::size_t axis) {
  std::size_t n = a.rank() == 1 ? a.size() : (axis == 0 ? a.rows() : a.cols());
  return scale(sum(a, axis), 1.0 / static_cast<double>(n));
}

inline Tensor sum_all(const Tensor& a) {
  if (a.rank() == 1) return sum(a, 0);
  if (a.rank() == 0) return a;
  return sum(sum(a, 1), 0);
}

inline Tensor mean_all(const Tensor& a) { return scale(sum_all(a), 1.0 / static_cast<double>(a.size())); }

/// Concatenates rank-2 tensors with equal row counts along the last axis.
inline Tensor concat(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const std::size_t r = parts.front().rows();
  std::size_t total = 0;
  for (const auto& t : parts) {
    if (t.rank() != 2 || t.rows() != r) {
      throw ShapeError("concat: incompatible shapes " + to_string(parts.front().shape()) + " and " +
                       to_string(t.shape()));
    }
    total += t.cols();
  }
  std::vector<double> out(r * total);
  std::vector<std::size_t> widths;
  std::size_t offset = 0;
  for (const auto& t : parts) {
    auto v = t.values();
    for (std::size_t i = 0; i < r; ++i)
      std::copy_n(v.begin() + i * t.cols(), t.cols(), out.begin() + i * total + offset);
    offset += t.cols();
    widths.push_back(t.cols());
  }
  detail::check_finite(out, "concat");
  Tape* tape = nullptr;
  std::vector<const Tensor*> inputs;
  for (const auto& t : parts) {
    inputs.push_back(&t);
    if (t.tracked()) {
      if (tape && t.tape() != tape) throw TapeError("op inputs live on different tapes");
      tape = t.tape();
    }
  }
  if (!tape) return Tensor({r, total}, std::move(out));
  return tape->record({r, total}, std::move(out), inputs,
                      [r, total, widths](std::span<const double> g, std::span<std::vector<double>* const> p) {
                        std::size_t off = 0;
                        for (std::size_t k = 0; k < widths.size(); ++k) {
                          if (p[k]) {
                            for (std::size_t i = 0; i < r; ++i)
                              for (std::size_t j = 0; j < widths[k]; ++j)
                                (*p[k])[i * widths[k] + j] += g[i * total + off + j];
                          }
                          off += widths[k];
                        }
                      });
}

/// Columns [begin, end) of a rank-2 tensor.
inline Tensor slice(const Tensor& a, std::size_t begin, std::size_t end) {
  if (a.rank() != 2 || begin >= end || end > a.cols()) {
    throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") invalid for shape " + to_string(a.shape()));
  }
  const std::size_t r = a.rows(), c = a.cols(), w = end - begin;
  std::vector<double> out(r * w);
  auto av = a.values();
  for (std::size_t i = 0; i < r; ++i) std::copy_n(av.begin() + i * c + begin, w, out.begin() + i * w);
  return detail::finish({r, w}, std::move(out), "slice", {&a},
                        [r, c, w, begin](std::span<const double> g, std::span<std::vector<double>* const> p) {
                          if (!p[0]) return;
                          for (std::size_t i = 0; i < r; ++i)
                            for (std::size_t j = 0; j < w; ++j) (*p[0])[i * c + begin + j] += g[i * w + j];
                        });
}

/// Rows [begin, end) of a rank-2 tensor, as a constant.
inline Tensor row_range(const Tensor& a, std::size_t begin, std::size_t end) {
  if (a.rank() != 2 || begin >= end || end > a.rows()) {
    throw ShapeError("row_range: invalid range for shape " + to_string(a.shape()));
  }
  auto av = a.values();
  std::vector<double> out(av.begin() + begin * a.cols(), av.begin() + end * a.cols());
  return Tensor({end - begin, a.cols()}, std::move(out));
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(double c, const Tensor& a) { return scale(a, c); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

}  // namespace skipvae
