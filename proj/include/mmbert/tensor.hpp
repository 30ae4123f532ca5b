// Dense row-major tensors with a reverse-mode autodiff tape.
//
// A tensor is a shared handle onto a node that owns values (and, after a
// backward pass, gradients). Operations record themselves on the tape that is
// active on the current thread (see `TapeScope`) whenever at least one input
// requires a gradient. Without an active tape nothing is recorded, which is
// how inference runs.
//
// The scalar type is a template parameter: models train in float, while the
// finite-difference oracle instantiates everything in double.
#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mmbert/errors.hpp"

namespace mmbert {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

/// When set, every op verifies its output is finite and throws NumericError
/// otherwise. On by default in builds without NDEBUG.
inline bool& checked_mode() {
#ifdef NDEBUG
  static bool flag = false;
#else
  static bool flag = true;
#endif
  return flag;
}

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  bool leaf = true;
  std::uint64_t tape_id = 0;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
  }
};

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

inline std::uint64_t next_tape_id() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

}  // namespace detail

template <typename T>
class BasicTape;

template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() : node_(std::make_shared<detail::Node<T>>()) {}

  BasicTensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : node_(std::make_shared<detail::Node<T>>()) {
    if (numel(shape) != values.size())
      throw DimensionError("tensor " + shape_str(shape) + " needs " +
                           std::to_string(numel(shape)) + " values, got " +
                           std::to_string(values.size()));
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static BasicTensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<T> v(numel(shape), T(0));
    return BasicTensor(std::move(shape), std::move(v), requires_grad);
  }
  static BasicTensor full(Shape shape, T fill, bool requires_grad = false) {
    std::vector<T> v(numel(shape), fill);
    return BasicTensor(std::move(shape), std::move(v), requires_grad);
  }
  static BasicTensor ones(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T(1), requires_grad);
  }
  static BasicTensor scalar(T v, bool requires_grad = false) {
    return BasicTensor(Shape{}, std::vector<T>{v}, requires_grad);
  }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->value.size(); }

  std::span<const T> values() const { return node_->value; }
  /// Direct write access; only meaningful on leaves (parameters, inputs).
  std::span<T> mutable_values() { return node_->value; }
  const std::vector<T>& vec() const { return node_->value; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool is_leaf() const { return node_->leaf; }
  std::uint64_t tape_id() const { return node_->tape_id; }

  T item() const {
    if (size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }
  T at(std::size_t i) const { return node_->value.at(i); }
  T at(std::size_t r, std::size_t c) const { return node_->value.at(r * shape().back() + c); }

  /// Fresh leaf holding a copy of the values, cut off from any tape.
  BasicTensor detach() const { return BasicTensor(shape(), node_->value, false); }
  BasicTensor clone(bool requires_grad) const { return BasicTensor(shape(), node_->value, requires_grad); }

  const detail::NodePtr<T>& node() const { return node_; }

  /// Wraps an op result; used by op implementations.
  static BasicTensor from_node(detail::NodePtr<T> n) {
    BasicTensor t;
    t.node_ = std::move(n);
    return t;
  }

 private:
  detail::NodePtr<T> node_;
};

/// Ordered record of the differentiable operations of one forward pass.
/// Inputs of an entry always precede it, so reverse order is a valid
/// topological order for backpropagation.
template <typename T>
class BasicTape {
 public:
  BasicTape() : id_(detail::next_tape_id()) {}
  BasicTape(const BasicTape&) = delete;
  BasicTape& operator=(const BasicTape&) = delete;

  std::uint64_t id() const { return id_; }
  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

  void record(const detail::NodePtr<T>& out, std::function<void()> backward) {
    out->leaf = false;
    out->requires_grad = true;
    out->tape_id = id_;
    entries_.push_back({out, std::move(backward)});
  }

  /// Seeds d(loss)/d(loss) = 1 and runs every recorded backward rule in
  /// reverse. Leaf gradients accumulate across calls until zero_grad();
  /// intermediate gradients and the tape itself are released afterwards
  /// unless `retain` is set.
  void backward(const BasicTensor<T>& loss, bool retain = false) {
    if (loss.size() != 1)
      throw ArgumentError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
    if (loss.is_leaf() || loss.tape_id() != id_)
      throw ArgumentError("backward() loss was not recorded on this tape");
    auto& root = *loss.node();
    root.ensure_grad();
    root.grad[0] += T(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      if (it->output->grad.empty()) continue;
      it->backward();
    }
    if (!retain) {
      for (auto& e : entries_) e.output->grad.clear();
      entries_.clear();
    }
  }

  static BasicTape* active() { return active_; }

 private:
  template <typename U>
  friend class BasicTapeScope;
  template <typename U>
  friend class NoGradScope;

  struct Entry {
    detail::NodePtr<T> output;
    std::function<void()> backward;
  };
  std::uint64_t id_;
  std::vector<Entry> entries_;
  static inline thread_local BasicTape* active_ = nullptr;
};

/// Makes `tape` the recording target for the current thread while alive.
template <typename T>
class BasicTapeScope {
 public:
  explicit BasicTapeScope(BasicTape<T>& tape) : prev_(BasicTape<T>::active_) {
    BasicTape<T>::active_ = &tape;
  }
  ~BasicTapeScope() { BasicTape<T>::active_ = prev_; }
  BasicTapeScope(const BasicTapeScope&) = delete;
  BasicTapeScope& operator=(const BasicTapeScope&) = delete;

 private:
  BasicTape<T>* prev_;
};

/// Suspends recording (e.g. for evaluation inside a training step).
template <typename T>
class NoGradScope {
 public:
  NoGradScope() : prev_(BasicTape<T>::active_) { BasicTape<T>::active_ = nullptr; }
  ~NoGradScope() { BasicTape<T>::active_ = prev_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  BasicTape<T>* prev_;
};

using Tensor = BasicTensor<float>;
using Tape = BasicTape<float>;
using TapeScope = BasicTapeScope<float>;

namespace detail {

template <typename T>
void check_finite(const char* op, const std::vector<T>& v) {
  if (!checked_mode()) return;
  for (T x : v)
    if (!std::isfinite(x)) throw NumericError(std::string("non-finite value produced by ") + op);
}

template <typename T>
bool wants_grad(std::initializer_list<const BasicTensor<T>*> inputs) {
  if (!BasicTape<T>::active()) return false;
  for (auto* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

template <typename T>
BasicTensor<T> make_output(const char* op, Shape shape, std::vector<T> value) {
  check_finite(op, value);
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  return BasicTensor<T>::from_node(std::move(n));
}

template <typename T>
void attach(const BasicTensor<T>& out, std::function<void()> fn) {
  BasicTape<T>::active()->record(out.node(), std::move(fn));
}

// Gradient sink for an input: null when the input does not need one.
template <typename T>
T* grad_sink(const BasicTensor<T>& t) {
  if (!t.requires_grad()) return nullptr;
  t.node()->ensure_grad();
  return t.node()->grad.data();
}

// b either equals a's shape or is a trailing suffix of it (repeated over
// a's leading dimensions).
inline bool suffix_broadcastable(const Shape& a, const Shape& b) {
  if (b.size() > a.size()) return false;
  return std::equal(b.rbegin(), b.rend(), a.rbegin());
}

struct AxisSplit {
  std::size_t outer, axis, inner;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
  if (axis >= s.size())
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  AxisSplit r{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

namespace detail {

enum class BinOp { add, sub, mul };

template <typename T>
BasicTensor<T> binary(const BasicTensor<T>& a, const BasicTensor<T>& b, BinOp op, const char* name) {
  if (!suffix_broadcastable(a.shape(), b.shape()))
    throw DimensionError(std::string(name) + ": shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " are not compatible");
  const std::size_t n = a.size(), m = std::max<std::size_t>(b.size(), 1);
  std::vector<T> out(n);
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t r = 0; r < n; r += m) {
    const T* __restrict x = av.data() + r;
    const T* __restrict y = bv.data();
    T* __restrict o = out.data() + r;
    const std::size_t len = std::min(m, n - r);
    if (op == BinOp::add)
      for (std::size_t i = 0; i < len; ++i) o[i] = x[i] + y[i];
    else if (op == BinOp::sub)
      for (std::size_t i = 0; i < len; ++i) o[i] = x[i] - y[i];
    else
      for (std::size_t i = 0; i < len; ++i) o[i] = x[i] * y[i];
  }
  auto res = make_output<T>(name, a.shape(), std::move(out));
  if (wants_grad<T>({&a, &b})) {
    attach(res, [a, b, res, op, n, m]() {
      const auto& g = res.node()->grad;
      if (T* ga = grad_sink(a)) {
        auto bv = b.values();
        for (std::size_t r = 0; r < n; r += m) {
          const std::size_t len = std::min(m, n - r);
          if (op == BinOp::mul)
            for (std::size_t i = 0; i < len; ++i) ga[r + i] += g[r + i] * bv[i];
          else
            for (std::size_t i = 0; i < len; ++i) ga[r + i] += g[r + i];
        }
      }
      if (T* gb = grad_sink(b)) {
        auto av = a.values();
        for (std::size_t r = 0; r < n; r += m) {
          const std::size_t len = std::min(m, n - r);
          if (op == BinOp::add)
            for (std::size_t i = 0; i < len; ++i) gb[i] += g[r + i];
          else if (op == BinOp::sub)
            for (std::size_t i = 0; i < len; ++i) gb[i] -= g[r + i];
          else
            for (std::size_t i = 0; i < len; ++i) gb[i] += g[r + i] * av[r + i];
        }
      }
    });
  }
  return res;
}

template <typename T, typename F, typename D>
BasicTensor<T> unary(const BasicTensor<T>& x, const char* name, F f, D df) {
  std::vector<T> out(x.size());
  auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
  auto res = make_output<T>(name, x.shape(), std::move(out));
  if (wants_grad<T>({&x})) {
    attach(res, [x, res, df]() {
      const auto& g = res.node()->grad;
      T* gx = grad_sink(x);
      auto xv = x.values();
      auto yv = res.values();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(xv[i], yv[i]);
    });
  }
  return res;
}

}  // namespace detail

/// a + b, where b may repeat over a's leading dimensions.
template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return detail::binary(a, b, detail::BinOp::add, "add");
}
template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return detail::binary(a, b, detail::BinOp::sub, "sub");
}
template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return detail::binary(a, b, detail::BinOp::mul, "mul");
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& x, T c) {
  return detail::unary(
      x, "scale", [c](T v) { return v * c; }, [c](T, T) { return c; });
}

template <typename T>
BasicTensor<T> tanh(const BasicTensor<T>& x) {
  return detail::unary(
      x, "tanh", [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

/// GELU, tanh approximation.
template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double c = 0.044715;
  return detail::unary(
      x, "gelu",
      [](T v) {
        double u = k * (v + c * v * v * v);
        return T(0.5 * v * (1.0 + std::tanh(u)));
      },
      [](T v, T) {
        double u = k * (v + c * v * v * v);
        double t = std::tanh(u);
        double du = k * (1.0 + 3.0 * c * v * v);
        return T(0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
      });
}

/// Scales row r of x (rows = all leading dims flattened) by s[r].
template <typename T>
BasicTensor<T> mul_rows(const BasicTensor<T>& x, const BasicTensor<T>& s) {
  if (x.rank() == 0) throw DimensionError("mul_rows: scalar input");
  const std::size_t cols = x.shape().back();
  const std::size_t rows = cols ? x.size() / cols : 0;
  if (s.size() != rows)
    throw DimensionError("mul_rows: " + shape_str(x.shape()) + " has " + std::to_string(rows) +
                         " rows but scale has shape " + shape_str(s.shape()));
  std::vector<T> out(x.size());
  auto xv = x.values();
  auto sv = s.values();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = xv[r * cols + c] * sv[r];
  auto res = detail::make_output<T>("mul_rows", x.shape(), std::move(out));
  if (detail::wants_grad<T>({&x, &s})) {
    detail::attach(res, [x, s, res, rows, cols]() {
      const auto& g = res.node()->grad;
      if (T* gx = detail::grad_sink(x)) {
        auto sv = s.values();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += g[r * cols + c] * sv[r];
      }
      if (T* gs = detail::grad_sink(s)) {
        auto xv = x.values();
        for (std::size_t r = 0; r < rows; ++r) {
          double acc = 0;
          for (std::size_t c = 0; c < cols; ++c) acc += double(g[r * cols + c]) * xv[r * cols + c];
          gs[r] += T(acc);
        }
      }
    });
  }
  return res;
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

namespace detail {

/// C[I,J] += A[I,K] B[K,J], row-major. Full 64-column blocks of a row are
/// accumulated in a local buffer, the remainder directly in C.
template <typename T>
void gemm_acc(const T* A, const T* B, T* C, std::size_t I, std::size_t K, std::size_t J) {
  constexpr std::size_t W = 64;
  for (std::size_t i = 0; i < I; ++i) {
    T* __restrict crow = C + i * J;
    const T* arow = A + i * K;
    std::size_t j = 0;
    for (; j + W <= J; j += W) {
      T acc[W];
      for (std::size_t w = 0; w < W; ++w) acc[w] = crow[j + w];
      for (std::size_t k = 0; k < K; ++k) {
        const T a = arow[k];
        const T* __restrict b = B + k * J + j;
        for (std::size_t w = 0; w < W; ++w) acc[w] += a * b[w];
      }
      for (std::size_t w = 0; w < W; ++w) crow[j + w] = acc[w];
    }
    if (j == J) continue;
    for (std::size_t k = 0; k < K; ++k) {
      const T a = arow[k];
      const T* __restrict b = B + k * J;
      for (std::size_t jj = j; jj < J; ++jj) crow[jj] += a * b[jj];
    }
  }
}

}  // namespace detail

/// Matrix product over the last two axes. `b` is either a plain matrix shared
/// by every leading batch of `a`, or carries the same batch dimensions.
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  auto fail = [&] {
    throw DimensionError("matmul: incompatible shapes " + shape_str(sa) + " x " + shape_str(sb));
  };
  if (sa.size() < 2 || sb.size() < 2) fail();
  const std::size_t I = sa[sa.size() - 2], K = sa.back();
  const std::size_t K2 = sb[sb.size() - 2], J = sb.back();
  if (K != K2) fail();
  const bool shared_b = sb.size() == 2;
  if (!shared_b && (sb.size() != sa.size() || !std::equal(sa.begin(), sa.end() - 2, sb.begin()))) fail();
  const std::size_t batches = numel(Shape(sa.begin(), sa.end() - 2));

  Shape so(sa.begin(), sa.end() - 2);
  so.push_back(I);
  so.push_back(J);
  std::vector<T> out(batches * I * J, T(0));
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t n = 0; n < batches; ++n) {
    const T* A = av.data() + n * I * K;
    const T* B = bv.data() + (shared_b ? 0 : n * K * J);
    detail::gemm_acc(A, B, out.data() + n * I * J, I, K, J);
  }
  auto res = detail::make_output<T>("matmul", std::move(so), std::move(out));
  if (detail::wants_grad<T>({&a, &b})) {
    detail::attach(res, [a, b, res, batches, I, K, J, shared_b]() {
      const T* G = res.node()->grad.data();
      T* ga = detail::grad_sink(a);
      T* gb = detail::grad_sink(b);
      auto av = a.values();
      auto bv = b.values();
      std::vector<T> bt(ga ? K * J : 0);
      for (std::size_t n = 0; n < batches; ++n) {
        const T* Gn = G + n * I * J;
        const T* A = av.data() + n * I * K;
        const T* B = bv.data() + (shared_b ? 0 : n * K * J);
        if (ga) {
          // dA = G B^T, computed as G (B^T) with B^T materialized
          if (!shared_b || n == 0) {
            for (std::size_t k = 0; k < K; ++k)
              for (std::size_t j = 0; j < J; ++j) bt[j * K + k] = B[k * J + j];
          }
          detail::gemm_acc(Gn, bt.data(), ga + n * I * K, I, J, K);
        }
        if (gb) {
          // dB = A^T G
          T* GB = gb + (shared_b ? 0 : n * K * J);
          for (std::size_t i = 0; i < I; ++i)
            for (std::size_t k = 0; k < K; ++k) {
              const T aik = A[i * K + k];
              const T* __restrict grow = Gn + i * J;
              T* __restrict gbrow = GB + k * J;
              for (std::size_t j = 0; j < J; ++j) gbrow[j] += aik * grow[j];
            }
        }
      }
    });
  }
  return res;
}

/// Swaps the last two axes.
template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& x) {
  const Shape& s = x.shape();
  if (s.size() < 2) throw DimensionError("transpose: need rank >= 2, got " + shape_str(s));
  const std::size_t R = s[s.size() - 2], C = s.back();
  const std::size_t batches = (R && C) ? x.size() / (R * C) : 0;
  Shape so = s;
  std::swap(so[so.size() - 2], so.back());
  std::vector<T> out(x.size());
  auto xv = x.values();
  for (std::size_t n = 0; n < batches; ++n)
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t c = 0; c < C; ++c) out[n * R * C + c * R + r] = xv[n * R * C + r * C + c];
  auto res = detail::make_output<T>("transpose", std::move(so), std::move(out));
  if (detail::wants_grad<T>({&x})) {
    detail::attach(res, [x, res, batches, R, C]() {
      const auto& g = res.node()->grad;
      T* gx = detail::grad_sink(x);
      for (std::size_t n = 0; n < batches; ++n)
        for (std::size_t r = 0; r < R; ++r)
          for (std::size_t c = 0; c < C; ++c) gx[n * R * C + r * C + c] += g[n * R * C + c * R + r];
    });
  }
  return res;
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
  if (numel(shape) != x.size())
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  auto res = detail::make_output<T>("reshape", std::move(shape), x.vec());
  if (detail::wants_grad<T>({&x})) {
    detail::attach(res, [x, res]() {
      const auto& g = res.node()->grad;
      T* gx = detail::grad_sink(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return res;
}

/// Half-open range [begin, end) along `axis`.
template <typename T>
BasicTensor<T> slice(const BasicTensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
  auto sp = detail::split_axis(x.shape(), axis);
  if (begin > end || end > sp.axis)
    throw DimensionError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") out of bounds for axis " + std::to_string(axis) + " of " + shape_str(x.shape()));
  const std::size_t len = end - begin;
  Shape so = x.shape();
  so[axis] = len;
  std::vector<T> out(sp.outer * len * sp.inner);
  auto xv = x.values();
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(xv.data() + (o * sp.axis + begin) * sp.inner, len * sp.inner,
                out.data() + o * len * sp.inner);
  auto res = detail::make_output<T>("slice", std::move(so), std::move(out));
  if (detail::wants_grad<T>({&x})) {
    detail::attach(res, [x, res, sp, begin, len]() {
      const auto& g = res.node()->grad;
      T* gx = detail::grad_sink(x);
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t i = 0; i < len * sp.inner; ++i)
          gx[(o * sp.axis + begin) * sp.inner + i] += g[o * len * sp.inner + i];
    });
  }
  return res;
}

template <typename T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ArgumentError("concat: no inputs");
  Shape so = parts.front().shape();
  if (axis >= so.size()) throw DimensionError("concat: axis out of range for " + shape_str(so));
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape a = p.shape(), b = so;
    if (a.size() != b.size()) throw DimensionError("concat: rank mismatch " + shape_str(a) + " vs " + shape_str(b));
    a[axis] = b[axis] = 0;
    if (a != b) throw DimensionError("concat: shapes " + shape_str(p.shape()) + " and " + shape_str(so) + " differ off-axis");
    total += p.shape()[axis];
  }
  so[axis] = total;
  auto sp = detail::split_axis(so, axis);
  std::vector<T> out(numel(so));
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    const std::size_t len = p.shape()[axis];
    auto pv = p.values();
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(pv.data() + o * len * sp.inner, len * sp.inner, out.data() + (o * total + offset) * sp.inner);
    offsets.push_back(offset);
    offset += len;
  }
  auto res = detail::make_output<T>("concat", std::move(so), std::move(out));
  bool any = false;
  if (BasicTape<T>::active())
    for (const auto& p : parts) any = any || p.requires_grad();
  if (any) {
    detail::attach(res, [parts, res, sp, offsets, axis, total]() {
      const auto& g = res.node()->grad;
      for (std::size_t k = 0; k < parts.size(); ++k) {
        T* gp = detail::grad_sink(parts[k]);
        if (!gp) continue;
        const std::size_t len = parts[k].shape()[axis];
        for (std::size_t o = 0; o < sp.outer; ++o)
          for (std::size_t i = 0; i < len * sp.inner; ++i)
            gp[o * len * sp.inner + i] += g[(o * total + offsets[k]) * sp.inner + i];
      }
    });
  }
  return res;
}

/// Row lookup: table [V, D], ids -> [len(ids), D].
template <typename T>
BasicTensor<T> embedding(const BasicTensor<T>& table, std::span<const int> ids) {
  if (table.rank() != 2) throw DimensionError("embedding: table must be rank 2, got " + shape_str(table.shape()));
  const std::size_t V = table.dim(0), D = table.dim(1);
  std::vector<T> out(ids.size() * D);
  auto tv = table.values();
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || std::size_t(ids[r]) >= V)
      throw VocabError("embedding: id " + std::to_string(ids[r]) + " outside table of " + std::to_string(V) + " rows");
    std::copy_n(tv.data() + std::size_t(ids[r]) * D, D, out.data() + r * D);
  }
  auto res = detail::make_output<T>("embedding", Shape{ids.size(), D}, std::move(out));
  if (detail::wants_grad<T>({&table})) {
    std::vector<int> rows(ids.begin(), ids.end());
    detail::attach(res, [table, res, rows, D]() {
      const auto& g = res.node()->grad;
      T* gt = detail::grad_sink(table);
      for (std::size_t r = 0; r < rows.size(); ++r)
        for (std::size_t d = 0; d < D; ++d) gt[std::size_t(rows[r]) * D + d] += g[r * D + d];
    });
  }
  return res;
}

// ---------------------------------------------------------------------------
// Reductions (accumulated in double)
// ---------------------------------------------------------------------------

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  double acc = 0;
  for (T v : x.values()) acc += v;
  auto res = detail::make_output<T>("sum", Shape{}, std::vector<T>{T(acc)});
  if (detail::wants_grad<T>({&x})) {
    detail::attach(res, [x, res]() {
      const T g = res.node()->grad[0];
      T* gx = detail::grad_sink(x);
      for (std::size_t i = 0; i < x.size(); ++i) gx[i] += g;
    });
  }
  return res;
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
  if (x.size() == 0) throw ArgumentError("mean of empty tensor");
  return scale(sum(x), T(1.0 / double(x.size())));
}

/// Mean over one axis; the axis is removed from the shape.
template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x, std::size_t axis) {
  auto sp = detail::split_axis(x.shape(), axis);
  if (sp.axis == 0) throw ArgumentError("mean over empty axis");
  Shape so = x.shape();
  so.erase(so.begin() + axis);
  std::vector<T> out(sp.outer * sp.inner);
  auto xv = x.values();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      double acc = 0;
      for (std::size_t a = 0; a < sp.axis; ++a) acc += xv[(o * sp.axis + a) * sp.inner + i];
      out[o * sp.inner + i] = T(acc / double(sp.axis));
    }
  auto res = detail::make_output<T>("mean", std::move(so), std::move(out));
  if (detail::wants_grad<T>({&x})) {
    detail::attach(res, [x, res, sp]() {
      const auto& g = res.node()->grad;
      T* gx = detail::grad_sink(x);
      const T inv = T(1.0 / double(sp.axis));
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t a = 0; a < sp.axis; ++a)
          for (std::size_t i = 0; i < sp.inner; ++i) gx[(o * sp.axis + a) * sp.inner + i] += g[o * sp.inner + i] * inv;
    });
  }
  return res;
}

/// Numerically stable softmax along `axis` (max-subtracted, double denominators).
template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x, std::size_t axis) {
  auto sp = detail::split_axis(x.shape(), axis);
  std::vector<T> out(x.size());
  auto xv = x.values();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      auto idx = [&](std::size_t a) { return (o * sp.axis + a) * sp.inner + i; };
      double mx = -INFINITY;
      for (std::size_t a = 0; a < sp.axis; ++a) mx = std::max(mx, double(xv[idx(a)]));
      double denom = 0;
      for (std::size_t a = 0; a < sp.axis; ++a) denom += std::exp(double(xv[idx(a)]) - mx);
      for (std::size_t a = 0; a < sp.axis; ++a) out[idx(a)] = T(std::exp(double(xv[idx(a)]) - mx) / denom);
    }
  auto res = detail::make_output<T>("softmax", x.shape(), std::move(out));
  if (detail::wants_grad<T>({&x})) {
    detail::attach(res, [x, res, sp]() {
      const auto& g = res.node()->grad;
      auto y = res.values();
      T* gx = detail::grad_sink(x);
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t i = 0; i < sp.inner; ++i) {
          auto idx = [&](std::size_t a) { return (o * sp.axis + a) * sp.inner + i; };
          double dot = 0;
          for (std::size_t a = 0; a < sp.axis; ++a) dot += double(g[idx(a)]) * y[idx(a)];
          for (std::size_t a = 0; a < sp.axis; ++a) gx[idx(a)] += T(y[idx(a)] * (g[idx(a)] - dot));
        }
    });
  }
  return res;
}

/// Normalizes over the last dimension, then applies gamma/beta.
template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                          double eps = 1e-12) {
  if (eps < 0 || !std::isfinite(eps)) throw ConfigError("layer_norm: eps must be >= 0, got " + std::to_string(eps));
  if (x.rank() == 0) throw DimensionError("layer_norm: scalar input");
  const std::size_t D = x.shape().back();
  if (gamma.shape() != Shape{D} || beta.shape() != Shape{D})
    throw DimensionError("layer_norm: gamma " + shape_str(gamma.shape()) + " / beta " + shape_str(beta.shape()) +
                         " must match last dimension of " + shape_str(x.shape()));
  const std::size_t rows = D ? x.size() / D : 0;
  std::vector<T> out(x.size());
  std::vector<double> xhat(x.size()), inv_std(rows);
  auto xv = x.values();
  auto gv = gamma.values();
  auto bv = beta.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * D;
    double mu = 0;
    for (std::size_t d = 0; d < D; ++d) mu += row[d];
    mu /= double(D);
    double var = 0;
    for (std::size_t d = 0; d < D; ++d) var += (row[d] - mu) * (row[d] - mu);
    var /= double(D);
    const double is = var + eps > 0 ? 1.0 / std::sqrt(var + eps) : 0.0;
    inv_std[r] = is;
    for (std::size_t d = 0; d < D; ++d) {
      xhat[r * D + d] = (row[d] - mu) * is;
      out[r * D + d] = T(xhat[r * D + d] * gv[d] + bv[d]);
    }
  }
  auto res = detail::make_output<T>("layer_norm", x.shape(), std::move(out));
  if (detail::wants_grad<T>({&x, &gamma, &beta})) {
    detail::attach(res, [x, gamma, beta, res, xhat = std::move(xhat), inv_std = std::move(inv_std), rows, D]() {
      const auto& g = res.node()->grad;
      auto gv = gamma.values();
      T* gx = detail::grad_sink(x);
      T* gg = detail::grad_sink(gamma);
      T* gb = detail::grad_sink(beta);
      for (std::size_t r = 0; r < rows; ++r) {
        const T* grow = g.data() + r * D;
        const double* xh = xhat.data() + r * D;
        if (gg)
          for (std::size_t d = 0; d < D; ++d) gg[d] += T(grow[d] * xh[d]);
        if (gb)
          for (std::size_t d = 0; d < D; ++d) gb[d] += grow[d];
        if (gx) {
          double m1 = 0, m2 = 0;
          for (std::size_t d = 0; d < D; ++d) {
            const double dxh = double(grow[d]) * gv[d];
            m1 += dxh;
            m2 += dxh * xh[d];
          }
          m1 /= double(D);
          m2 /= double(D);
          for (std::size_t d = 0; d < D; ++d) {
            const double dxh = double(grow[d]) * gv[d];
            gx[r * D + d] += T(inv_std[r] * (dxh - m1 - xh[d] * m2));
          }
        }
      }
    });
  }
  return res;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Mean over rows of -log softmax(logits)[label]. `logits` is [C] (one
/// sample) or [B, C].
template <typename T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, std::span<const int> labels) {
  if (logits.rank() != 1 && logits.rank() != 2)
    throw DimensionError("cross_entropy: logits must be [C] or [B,C], got " + shape_str(logits.shape()));
  const std::size_t C = logits.shape().back();
  const std::size_t B = logits.rank() == 1 ? 1 : logits.dim(0);
  if (labels.size() != B)
    throw DimensionError("cross_entropy: " + std::to_string(B) + " rows but " + std::to_string(labels.size()) + " labels");
  if (B == 0) throw ArgumentError("cross_entropy: empty batch");
  for (int l : labels)
    if (l < 0 || std::size_t(l) >= C)
      throw ArgumentError("cross_entropy: label " + std::to_string(l) + " outside [0," + std::to_string(C) + ")");
  auto lv = logits.values();
  std::vector<double> probs(B * C);
  double total = 0;
  for (std::size_t b = 0; b < B; ++b) {
    const T* row = lv.data() + b * C;
    double mx = *std::max_element(row, row + C);
    double denom = 0;
    for (std::size_t c = 0; c < C; ++c) denom += std::exp(double(row[c]) - mx);
    for (std::size_t c = 0; c < C; ++c) probs[b * C + c] = std::exp(double(row[c]) - mx) / denom;
    total += -(double(row[labels[b]]) - mx - std::log(denom));
  }
  auto res = detail::make_output<T>("cross_entropy", Shape{}, std::vector<T>{T(total / double(B))});
  if (detail::wants_grad<T>({&logits})) {
    std::vector<int> lab(labels.begin(), labels.end());
    detail::attach(res, [logits, res, probs = std::move(probs), lab, B, C]() {
      const double g = res.node()->grad[0] / double(B);
      T* gl = detail::grad_sink(logits);
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c)
          gl[b * C + c] += T(g * (probs[b * C + c] - (int(c) == lab[b] ? 1.0 : 0.0)));
    });
  }
  return res;
}

template <typename T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, int label) {
  return cross_entropy(logits, std::span<const int>(&label, 1));
}

/// Mean squared elementwise difference.
template <typename T>
BasicTensor<T> mse(const BasicTensor<T>& pred, const BasicTensor<T>& target) {
  if (pred.shape() != target.shape())
    throw DimensionError("mse: shapes " + shape_str(pred.shape()) + " and " + shape_str(target.shape()) + " differ");
  if (pred.size() == 0) throw ArgumentError("mse of empty tensors");
  auto d = sub(pred, target);
  return mean(mul(d, d));
}

/// Inverted dropout; identity when rate is 0.
template <typename T, typename Rng>
BasicTensor<T> dropout(const BasicTensor<T>& x, double rate, Rng& rng) {
  if (rate < 0 || rate >= 1) throw ConfigError("dropout rate must be in [0,1), got " + std::to_string(rate));
  if (rate == 0) return x;
  std::bernoulli_distribution keep(1.0 - rate);
  std::vector<T> mask(x.size());
  const T s = T(1.0 / (1.0 - rate));
  for (auto& m : mask) m = keep(rng) ? s : T(0);
  return mul(x, BasicTensor<T>(x.shape(), std::move(mask)));
}

}  // namespace mmbert
