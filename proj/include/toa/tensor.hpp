#pragma once

// Dense tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a shared handle onto a TensorNode; copying a Tensor aliases the
// same storage. Every op records a backward closure on the calling thread's
// Tape when grad mode is on and at least one input requires a gradient.
// backward() replays the tape in exact reverse order and then clears it.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "toa/error.hpp"

namespace toa {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <std::floating_point T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until something accumulates into it
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
  }
};

namespace detail {
inline bool& grad_mode() {
  static thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

/// Disables tape recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <std::floating_point T>
class Tensor;

template <std::floating_point T>
class Tape {
 public:
  using Backward = std::function<void()>;

  static Tape& active() {
    static thread_local Tape tape;
    return tape;
  }

  void record(std::shared_ptr<TensorNode<T>> out, Backward fn) {
    entries_.push_back({std::move(out), std::move(fn)});
  }

  /// Seeds d(loss)/d(loss) = 1, runs every recorded closure newest-first, then
  /// drops the tape. Leaf gradients accumulate across calls until zeroed.
  void backward(const Tensor<T>& loss);

  void clear() { entries_.clear(); }
  std::size_t size() const { return entries_.size(); }

 private:
  struct Entry {
    std::shared_ptr<TensorNode<T>> out;
    Backward fn;
  };
  std::vector<Entry> entries_;
};

template <std::floating_point T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false)
      : node_(std::make_shared<TensorNode<T>>()) {
    check_shape(shape);
    node_->data.assign(toa::numel(shape), fill);
    node_->shape = std::move(shape);
    node_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<TensorNode<T>>()) {
    check_shape(shape);
    if (toa::numel(shape) != data.size()) {
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor scalar(T value) { return Tensor(Shape{1}, value); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim() const { return node_->shape.size(); }
  std::size_t size(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  /// Direct write access. Only meant for parameter updates and test fixtures,
  /// never for tensors still referenced by a live tape.
  std::span<T> mutable_data() { return node_->data; }
  std::vector<T> to_vector() const { return node_->data; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T(0)); }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
  }

  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }
  T operator[](std::size_t flat) const { return node_->data[flat]; }

  /// Fresh storage, same values, detached from any tape.
  Tensor detach() const { return Tensor(shape(), node_->data); }

  void backward() const { Tape<T>::active().backward(*this); }

  const std::shared_ptr<TensorNode<T>>& node() const { return node_; }

 private:
  static void check_shape(const Shape& shape) {
    if (shape.empty()) throw DimensionError("tensor shape must have at least one extent");
    for (auto e : shape) {
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    }
  }

  std::shared_ptr<TensorNode<T>> node_;
};

template <std::floating_point T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) {
    throw ContractError("backward() on a loss that does not depend on any trainable tensor");
  }
  loss.node()->ensure_grad();
  loss.node()->grad[0] += T(1);
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (!it->out->grad.empty()) it->fn();
  }
  clear();
}

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

// Exponent-all-ones test on the raw bits; vectorizes, unlike std::isfinite.
template <class T>
void check_finite(const std::vector<T>& v, const char* op) {
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  constexpr Bits exp_mask = sizeof(T) == 4 ? Bits(0x7f800000u) : Bits(0x7ff0000000000000ull);
  Bits bad = 0;
  const T* p = v.data();
  for (std::size_t i = 0; i < v.size(); ++i) {
    Bits b;
    std::memcpy(&b, p + i, sizeof(T));
    bad |= static_cast<Bits>((b & exp_mask) == exp_mask);
  }
  if (bad) throw NumericError(std::string(op) + " produced a non-finite value");
}

template <class T>
bool any_requires_grad(std::initializer_list<const Tensor<T>*> inputs) {
  if (!grad_mode()) return false;
  for (const auto* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> data, const char* op, bool track) {
  check_finite(data, op);
  Tensor<T> out(std::move(shape), std::move(data));
  out.set_requires_grad(track);
  return out;
}

template <class T>
void record(const Tensor<T>& out, typename Tape<T>::Backward fn) {
  Tape<T>::active().record(out.node(), std::move(fn));
}

// Broadcast iteration. Each operand gets a stride per output axis (0 where
// that operand is broadcast). The innermost axis is a plain counted loop.
struct BroadcastPlan {
  Shape out;
  std::vector<std::size_t> stride_a;
  std::vector<std::size_t> stride_b;
};

inline std::vector<std::size_t> contiguous_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size());
  std::size_t acc = 1;
  for (std::size_t i = s.size(); i-- > 0;) {
    st[i] = acc;
    acc *= s[i];
  }
  return st;
}

inline BroadcastPlan plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  const std::size_t nd = std::max(a.size(), b.size());
  BroadcastPlan p;
  p.out.assign(nd, 1);
  p.stride_a.assign(nd, 0);
  p.stride_b.assign(nd, 0);
  const auto sa = contiguous_strides(a);
  const auto sb = contiguous_strides(b);
  for (std::size_t i = 0; i < nd; ++i) {
    const std::ptrdiff_t ia = static_cast<std::ptrdiff_t>(i) - static_cast<std::ptrdiff_t>(nd - a.size());
    const std::ptrdiff_t ib = static_cast<std::ptrdiff_t>(i) - static_cast<std::ptrdiff_t>(nd - b.size());
    const std::size_t ea = ia >= 0 ? a[ia] : 1;
    const std::size_t eb = ib >= 0 ? b[ib] : 1;
    if (ea != eb && ea != 1 && eb != 1) {
      throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    p.out[i] = std::max(ea, eb);
    if (ia >= 0 && ea != 1) p.stride_a[i] = sa[ia];
    if (ib >= 0 && eb != 1) p.stride_b[i] = sb[ib];
  }
  return p;
}

// Merges adjacent axes that every operand walks contiguously (or skips
// together), so the innermost run is as long as possible.
inline BroadcastPlan coalesce(const BroadcastPlan& p) {
  BroadcastPlan q;
  for (std::size_t d = 0; d < p.out.size(); ++d) {
    if (p.out[d] == 1) continue;
    if (!q.out.empty()) {
      const std::size_t e = p.out[d];
      const bool a_ok = q.stride_a.back() == p.stride_a[d] * e;
      const bool b_ok = q.stride_b.back() == p.stride_b[d] * e;
      if (a_ok && b_ok) {
        q.out.back() *= e;
        q.stride_a.back() = p.stride_a[d];
        q.stride_b.back() = p.stride_b[d];
        continue;
      }
    }
    q.out.push_back(p.out[d]);
    q.stride_a.push_back(p.stride_a[d]);
    q.stride_b.push_back(p.stride_b[d]);
  }
  if (q.out.empty()) {
    q.out = {1};
    q.stride_a = {0};
    q.stride_b = {0};
  }
  return q;
}

// Calls row(io, ia, ib, n, step_a, step_b) once per innermost run.
template <class F>
void broadcast_rows(const BroadcastPlan& plan, F&& row) {
  const BroadcastPlan p = coalesce(plan);
  const std::size_t nd = p.out.size();
  const std::size_t inner = p.out[nd - 1];
  const std::size_t ia_step = p.stride_a[nd - 1];
  const std::size_t ib_step = p.stride_b[nd - 1];
  const std::size_t outer = numel(p.out) / inner;
  std::vector<std::size_t> idx(nd, 0);
  std::size_t oa = 0, ob = 0, io = 0;
  for (std::size_t o = 0; o < outer; ++o) {
    row(io, oa, ob, inner, ia_step, ib_step);
    io += inner;
    for (std::size_t d = nd - 1; d-- > 0;) {
      ++idx[d];
      oa += p.stride_a[d];
      ob += p.stride_b[d];
      if (idx[d] < p.out[d]) break;
      oa -= p.stride_a[d] * p.out[d];
      ob -= p.stride_b[d] * p.out[d];
      idx[d] = 0;
    }
  }
}

template <class F>
void broadcast_loop(const BroadcastPlan& p, F&& f) {
  broadcast_rows(p, [&](std::size_t io, std::size_t ia, std::size_t ib, std::size_t n, std::size_t sa, std::size_t sb) {
    for (std::size_t k = 0; k < n; ++k) f(io + k, ia + k * sa, ib + k * sb);
  });
}

enum class BinaryKind { add, sub, mul };

// out[k] = op(a[k * sa], b[k * sb]) for the stride patterns that occur
// (1 or 0 per operand), written so each case is a plain vectorizable loop.
template <BinaryKind K, class T>
void binary_row(T* out, const T* a, const T* b, std::size_t n, std::size_t sa, std::size_t sb) {
  auto op = [](T x, T y) {
    if constexpr (K == BinaryKind::add) return x + y;
    else if constexpr (K == BinaryKind::sub) return x - y;
    else return x * y;
  };
  if (sa == 1 && sb == 1) {
    for (std::size_t k = 0; k < n; ++k) out[k] = op(a[k], b[k]);
  } else if (sa == 1 && sb == 0) {
    const T y = b[0];
    for (std::size_t k = 0; k < n; ++k) out[k] = op(a[k], y);
  } else if (sa == 0 && sb == 1) {
    const T x = a[0];
    for (std::size_t k = 0; k < n; ++k) out[k] = op(x, b[k]);
  } else {
    for (std::size_t k = 0; k < n; ++k) out[k] = op(a[k * sa], b[k * sb]);
  }
}

// Gradient accumulation for one run: d[k * s] += coef(k) * g[k], where the
// coefficient is 1, -1 or the other operand's value.
template <class T>
void accumulate_row(T* d, std::size_t s, const T* g, const T* other, std::size_t so, T sign, std::size_t n) {
  if (other == nullptr) {
    if (s == 1) {
      for (std::size_t k = 0; k < n; ++k) d[k] += sign * g[k];
    } else if (s == 0) {
      T acc = 0;
      for (std::size_t k = 0; k < n; ++k) acc += g[k];
      d[0] += sign * acc;
    } else {
      for (std::size_t k = 0; k < n; ++k) d[k * s] += sign * g[k];
    }
    return;
  }
  if (s == 1 && so == 1) {
    for (std::size_t k = 0; k < n; ++k) d[k] += g[k] * other[k];
  } else if (s == 1 && so == 0) {
    const T y = other[0];
    for (std::size_t k = 0; k < n; ++k) d[k] += g[k] * y;
  } else if (s == 0 && so == 1) {
    T acc = 0;
    for (std::size_t k = 0; k < n; ++k) acc += g[k] * other[k];
    d[0] += acc;
  } else {
    for (std::size_t k = 0; k < n; ++k) d[k * s] += g[k] * other[k * so];
  }
}

template <class T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, BinaryKind kind, const char* op) {
  const bool track = any_requires_grad<T>({&a, &b});
  const auto A = a.node();
  const auto B = b.node();
  BroadcastPlan plan;
  if (a.shape() == b.shape()) {
    plan.out = a.shape();
    plan.stride_a = plan.stride_b = contiguous_strides(a.shape());
  } else {
    plan = plan_broadcast(a.shape(), b.shape(), op);
  }
  Shape out_shape = plan.out;
  std::vector<T> out(numel(out_shape));
  const T* pa = A->data.data();
  const T* pb = B->data.data();
  broadcast_rows(plan, [&](std::size_t io, std::size_t ia, std::size_t ib, std::size_t n, std::size_t sa, std::size_t sb) {
    switch (kind) {
      case BinaryKind::add: binary_row<BinaryKind::add>(out.data() + io, pa + ia, pb + ib, n, sa, sb); break;
      case BinaryKind::sub: binary_row<BinaryKind::sub>(out.data() + io, pa + ia, pb + ib, n, sa, sb); break;
      case BinaryKind::mul: binary_row<BinaryKind::mul>(out.data() + io, pa + ia, pb + ib, n, sa, sb); break;
    }
  });
  auto result = make_result(std::move(out_shape), std::move(out), op, track);
  if (track) {
    record(result, [A, B, O = result.node().get(), plan, kind]() {
      const T* g = O->grad.data();
      const bool ga = A->requires_grad;
      const bool gb = B->requires_grad;
      if (ga) A->ensure_grad();
      if (gb) B->ensure_grad();
      T* da = ga ? A->grad.data() : nullptr;
      T* db = gb ? B->grad.data() : nullptr;
      const T* va = A->data.data();
      const T* vb = B->data.data();
      broadcast_rows(plan, [&](std::size_t io, std::size_t ia, std::size_t ib, std::size_t n, std::size_t sa,
                               std::size_t sb) {
        if (kind == BinaryKind::mul) {
          if (da) accumulate_row(da + ia, sa, g + io, vb + ib, sb, T(1), n);
          if (db) accumulate_row(db + ib, sb, g + io, va + ia, sa, T(1), n);
        } else {
          if (da) accumulate_row<T>(da + ia, sa, g + io, nullptr, 0, T(1), n);
          if (db) accumulate_row<T>(db + ib, sb, g + io, nullptr, 0, kind == BinaryKind::sub ? T(-1) : T(1), n);
        }
      });
    });
  }
  return result;
}

// Splits a shape around one axis into (outer, extent, inner) counts.
inline void split_axis(const Shape& s, std::size_t axis, std::size_t& outer, std::size_t& extent,
                       std::size_t& inner) {
  outer = 1;
  inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}

inline std::size_t resolve_axis(std::ptrdiff_t axis, std::size_t nd, const char* op) {
  const std::ptrdiff_t r = axis < 0 ? axis + static_cast<std::ptrdiff_t>(nd) : axis;
  if (r < 0 || r >= static_cast<std::ptrdiff_t>(nd)) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                         std::to_string(nd));
  }
  return static_cast<std::size_t>(r);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <std::floating_point T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, detail::BinaryKind::add, "add");
}
template <std::floating_point T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, detail::BinaryKind::sub, "sub");
}
template <std::floating_point T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, detail::BinaryKind::mul, "mul");
}

/// Multiplication by a constant (non-differentiated) scalar.
template <std::floating_point T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  const bool track = detail::any_requires_grad<T>({&x});
  std::vector<T> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= factor;
  auto result = detail::make_result(x.shape(), std::move(out), "scale", track);
  if (track) {
    detail::record(result, [X = x.node(), O = result.node().get(), factor]() {
      if (!X->requires_grad) return;
      X->ensure_grad();
      for (std::size_t i = 0; i < O->grad.size(); ++i) X->grad[i] += factor * O->grad[i];
    });
  }
  return result;
}

template <std::floating_point T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <std::floating_point T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <std::floating_point T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <std::floating_point T>
Tensor<T> operator*(const Tensor<T>& a, T s) { return scale(a, s); }

template <std::floating_point T>
Tensor<T> silu(const Tensor<T>& x) {
  const bool track = detail::any_requires_grad<T>({&x});
  const auto& in = x.node()->data;
  std::vector<T> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] / (T(1) + std::exp(-in[i]));
  auto result = detail::make_result(x.shape(), std::move(out), "silu", track);
  if (track) {
    detail::record(result, [X = x.node(), O = result.node().get()]() {
      if (!X->requires_grad) return;
      X->ensure_grad();
      for (std::size_t i = 0; i < O->grad.size(); ++i) {
        const T v = X->data[i];
        const T s = T(1) / (T(1) + std::exp(-v));
        X->grad[i] += O->grad[i] * s * (T(1) + v * (T(1) - s));
      }
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Reductions

template <std::floating_point T>
Tensor<T> sum(const Tensor<T>& x) {
  const bool track = detail::any_requires_grad<T>({&x});
  T s = T(0);
  for (T v : x.data()) s += v;
  auto result = detail::make_result(Shape{1}, std::vector<T>{s}, "sum", track);
  if (track) {
    detail::record(result, [X = x.node(), O = result.node().get()]() {
      if (!X->requires_grad) return;
      X->ensure_grad();
      const T g = O->grad[0];
      for (auto& d : X->grad) d += g;
    });
  }
  return result;
}

template <std::floating_point T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <std::floating_point T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape) +
                         " changes element count");
  }
  const bool track = detail::any_requires_grad<T>({&x});
  auto result = detail::make_result(std::move(shape), x.to_vector(), "reshape", track);
  if (track) {
    detail::record(result, [X = x.node(), O = result.node().get()]() {
      if (!X->requires_grad) return;
      X->ensure_grad();
      for (std::size_t i = 0; i < O->grad.size(); ++i) X->grad[i] += O->grad[i];
    });
  }
  return result;
}

/// Output axis i is input axis `axes[i]`.
template <std::floating_point T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& axes) {
  const std::size_t nd = x.dim();
  if (axes.size() != nd) throw DimensionError("permute: axis list length does not match rank");
  std::vector<bool> seen(nd, false);
  for (auto a : axes) {
    if (a >= nd || seen[a]) throw DimensionError("permute: axes must be a permutation");
    seen[a] = true;
  }
  Shape out_shape(nd);
  const auto in_strides = detail::contiguous_strides(x.shape());
  detail::BroadcastPlan plan;  // reused as a strided gather: stride_a walks the input
  for (std::size_t i = 0; i < nd; ++i) out_shape[i] = x.shape()[axes[i]];
  plan.out = out_shape;
  plan.stride_a.resize(nd);
  plan.stride_b.assign(nd, 0);
  for (std::size_t i = 0; i < nd; ++i) plan.stride_a[i] = in_strides[axes[i]];
  const auto& in = x.node()->data;
  std::vector<T> out(in.size());
  detail::broadcast_loop(plan, [&](std::size_t io, std::size_t ia, std::size_t) { out[io] = in[ia]; });
  const bool track = detail::any_requires_grad<T>({&x});
  auto result = detail::make_result(std::move(out_shape), std::move(out), "permute", track);
  if (track) {
    detail::record(result, [X = x.node(), O = result.node().get(), plan]() {
      if (!X->requires_grad) return;
      X->ensure_grad();
      detail::broadcast_loop(plan, [&](std::size_t io, std::size_t ia, std::size_t) { X->grad[ia] += O->grad[io]; });
    });
  }
  return result;
}

template <std::floating_point T>
Tensor<T> transpose(const Tensor<T>& x, std::ptrdiff_t a0, std::ptrdiff_t a1) {
  std::vector<std::size_t> axes(x.dim());
  std::iota(axes.begin(), axes.end(), std::size_t{0});
  std::swap(axes[detail::resolve_axis(a0, x.dim(), "transpose")], axes[detail::resolve_axis(a1, x.dim(), "transpose")]);
  return permute(x, axes);
}

template <std::floating_point T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::ptrdiff_t axis_in) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  const std::size_t axis = detail::resolve_axis(axis_in, s0.size(), "concat");
  Shape out_shape = s0;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.dim() != s0.size()) throw DimensionError("concat: rank mismatch " + shape_str(s0) + " vs " + shape_str(p.shape()));
    for (std::size_t i = 0; i < s0.size(); ++i) {
      if (i != axis && p.shape()[i] != s0[i]) {
        throw DimensionError("concat: extents differ off-axis, " + shape_str(s0) + " vs " + shape_str(p.shape()));
      }
    }
    out_shape[axis] += p.shape()[axis];
  }
  std::size_t outer, extent, inner;
  detail::split_axis(out_shape, axis, outer, extent, inner);
  std::vector<T> out(numel(out_shape));
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t len = p.shape()[axis] * inner;
    const auto& src = p.node()->data;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(src.begin() + o * len, len, out.begin() + o * extent * inner + offset * inner);
    }
    offset += p.shape()[axis];
  }
  bool track = false;
  if (detail::grad_mode()) {
    for (const auto& p : parts) track = track || p.requires_grad();
  }
  auto result = detail::make_result(std::move(out_shape), std::move(out), "concat", track);
  if (track) {
    std::vector<std::shared_ptr<TensorNode<T>>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    detail::record(result, [nodes, offsets, O = result.node().get(), outer, extent, inner, axis]() {
      for (std::size_t k = 0; k < nodes.size(); ++k) {
        auto& n = *nodes[k];
        if (!n.requires_grad) continue;
        n.ensure_grad();
        const std::size_t len = n.shape[axis] * inner;
        for (std::size_t o = 0; o < outer; ++o) {
          const T* g = O->grad.data() + o * extent * inner + offsets[k] * inner;
          T* d = n.grad.data() + o * len;
          for (std::size_t i = 0; i < len; ++i) d[i] += g[i];
        }
      }
    });
  }
  return result;
}

/// Half-open range [begin, end) along one axis.
template <std::floating_point T>
Tensor<T> slice(const Tensor<T>& x, std::ptrdiff_t axis_in, std::size_t begin, std::size_t end) {
  const std::size_t axis = detail::resolve_axis(axis_in, x.dim(), "slice");
  if (begin >= end || end > x.shape()[axis]) {
    throw DimensionError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") invalid for extent " + std::to_string(x.shape()[axis]));
  }
  std::size_t outer, extent, inner;
  detail::split_axis(x.shape(), axis, outer, extent, inner);
  Shape out_shape = x.shape();
  out_shape[axis] = end - begin;
  const std::size_t len = (end - begin) * inner;
  std::vector<T> out(numel(out_shape));
  const auto& in = x.node()->data;
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(in.begin() + o * extent * inner + begin * inner, len, out.begin() + o * len);
  }
  const bool track = detail::any_requires_grad<T>({&x});
  auto result = detail::make_result(std::move(out_shape), std::move(out), "slice", track);
  if (track) {
    detail::record(result, [X = x.node(), O = result.node().get(), outer, extent, inner, begin, len]() {
      if (!X->requires_grad) return;
      X->ensure_grad();
      for (std::size_t o = 0; o < outer; ++o) {
        T* d = X->grad.data() + o * extent * inner + begin * inner;
        const T* g = O->grad.data() + o * len;
        for (std::size_t i = 0; i < len; ++i) d[i] += g[i];
      }
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Linear algebra

/// Batched matrix product over the two trailing axes; leading axes broadcast.
template <std::floating_point T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  using detail::ConstMatMap;
  using detail::MatMap;
  if (a.dim() < 2 || b.dim() < 2) {
    throw DimensionError("matmul: operands must be at least 2-D, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t p = a.shape()[a.dim() - 2];
  const std::size_t q = a.shape()[a.dim() - 1];
  const std::size_t qb = b.shape()[b.dim() - 2];
  const std::size_t r = b.shape()[b.dim() - 1];
  if (q != qb) {
    throw DimensionError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const bool track = detail::any_requires_grad<T>({&a, &b});
  const auto A = a.node();
  const auto B = b.node();

  if (b.dim() == 2) {
    // Fold every leading axis of `a` into rows: one GEMM.
    const std::size_t rows = a.numel() / q;
    Shape out_shape(a.shape().begin(), a.shape().end() - 1);
    out_shape.push_back(r);
    std::vector<T> out(rows * r);
    MatMap<T>(out.data(), rows, r).noalias() =
        ConstMatMap<T>(A->data.data(), rows, q) * ConstMatMap<T>(B->data.data(), q, r);
    auto result = detail::make_result(std::move(out_shape), std::move(out), "matmul", track);
    if (track) {
      detail::record(result, [A, B, O = result.node().get(), rows, q, r]() {
        ConstMatMap<T> g(O->grad.data(), rows, r);
        if (A->requires_grad) {
          A->ensure_grad();
          MatMap<T>(A->grad.data(), rows, q).noalias() += g * ConstMatMap<T>(B->data.data(), q, r).transpose();
        }
        if (B->requires_grad) {
          B->ensure_grad();
          MatMap<T>(B->grad.data(), q, r).noalias() += ConstMatMap<T>(A->data.data(), rows, q).transpose() * g;
        }
      });
    }
    return result;
  }

  Shape batch_a(a.shape().begin(), a.shape().end() - 2);
  Shape batch_b(b.shape().begin(), b.shape().end() - 2);
  if (batch_a.empty()) batch_a.push_back(1);
  auto plan = detail::plan_broadcast(batch_a, batch_b, "matmul");
  Shape out_shape = plan.out;
  out_shape.push_back(p);
  out_shape.push_back(r);
  std::vector<T> out(numel(out_shape));
  const std::size_t sa = p * q, sb = q * r, so = p * r;
  detail::broadcast_loop(plan, [&](std::size_t io, std::size_t ia, std::size_t ib) {
    MatMap<T>(out.data() + io * so, p, r).noalias() =
        ConstMatMap<T>(A->data.data() + ia * sa, p, q) * ConstMatMap<T>(B->data.data() + ib * sb, q, r);
  });
  auto result = detail::make_result(std::move(out_shape), std::move(out), "matmul", track);
  if (track) {
    detail::record(result, [A, B, O = result.node().get(), plan, p, q, r]() {
      const std::size_t sa = p * q, sb = q * r, so = p * r;
      if (A->requires_grad) A->ensure_grad();
      if (B->requires_grad) B->ensure_grad();
      detail::broadcast_loop(plan, [&](std::size_t io, std::size_t ia, std::size_t ib) {
        ConstMatMap<T> g(O->grad.data() + io * so, p, r);
        if (A->requires_grad) {
          MatMap<T>(A->grad.data() + ia * sa, p, q).noalias() +=
              g * ConstMatMap<T>(B->data.data() + ib * sb, q, r).transpose();
        }
        if (B->requires_grad) {
          MatMap<T>(B->grad.data() + ib * sb, q, r).noalias() +=
              ConstMatMap<T>(A->data.data() + ia * sa, p, q).transpose() * g;
        }
      });
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Convolution (cross-correlation) via im2col + GEMM

namespace detail {

struct ConvGeometry {
  std::size_t batch, in_ch, h, w, out_ch, kh, kw, stride, pad, oh, ow;
  std::size_t col_rows() const { return in_ch * kh * kw; }
  std::size_t col_cols() const { return batch * oh * ow; }
};

// Output columns [lo, hi) of a kernel tap read real input; the rest is padding.
inline void valid_range(std::size_t out, std::size_t in, std::size_t stride, std::size_t tap, std::size_t pad,
                        std::size_t& lo, std::size_t& hi) {
  lo = tap >= pad ? 0 : (pad - tap + stride - 1) / stride;
  const std::ptrdiff_t last = static_cast<std::ptrdiff_t>(in) - 1 + static_cast<std::ptrdiff_t>(pad) - static_cast<std::ptrdiff_t>(tap);
  hi = last < 0 ? 0 : std::min(out, static_cast<std::size_t>(last) / stride + 1);
  if (hi < lo) hi = lo;
}

template <class T>
void im2col(const T* x, const ConvGeometry& g, T* cols) {
  const std::size_t plane = g.oh * g.ow;
  const std::size_t ncols = g.col_cols();
  for (std::size_t c = 0; c < g.in_ch; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        T* row = cols + ((c * g.kh + i) * g.kw + j) * ncols;
        std::size_t lo, hi;
        valid_range(g.ow, g.w, g.stride, j, g.pad, lo, hi);
        for (std::size_t b = 0; b < g.batch; ++b) {
          const T* src = x + (b * g.in_ch + c) * g.h * g.w;
          T* dst = row + b * plane;
          for (std::size_t oy = 0; oy < g.oh; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + i) - static_cast<std::ptrdiff_t>(g.pad);
            T* d = dst + oy * g.ow;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
              std::fill_n(d, g.ow, T(0));
              continue;
            }
            const T* s = src + iy * g.w;  // input column of output ox is ox * stride + j - pad
            std::fill_n(d, lo, T(0));
            if (g.stride == 1) {
              std::copy(s + (lo + j - g.pad), s + (hi + j - g.pad), d + lo);
            } else {
              for (std::size_t ox = lo; ox < hi; ++ox) d[ox] = s[ox * g.stride + j - g.pad];
            }
            std::fill(d + hi, d + g.ow, T(0));
          }
        }
      }
    }
  }
}

template <class T>
void col2im_add(const T* cols, const ConvGeometry& g, T* dx) {
  const std::size_t plane = g.oh * g.ow;
  const std::size_t ncols = g.col_cols();
  for (std::size_t c = 0; c < g.in_ch; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const T* row = cols + ((c * g.kh + i) * g.kw + j) * ncols;
        std::size_t lo, hi;
        valid_range(g.ow, g.w, g.stride, j, g.pad, lo, hi);
        for (std::size_t b = 0; b < g.batch; ++b) {
          T* dst = dx + (b * g.in_ch + c) * g.h * g.w;
          const T* src = row + b * plane;
          for (std::size_t oy = 0; oy < g.oh; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + i) - static_cast<std::ptrdiff_t>(g.pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
            T* d = dst + iy * g.w;
            const T* s = src + oy * g.ow;
            if (g.stride == 1) {
              T* dd = d + (lo + j - g.pad);
              for (std::size_t ox = lo; ox < hi; ++ox) dd[ox - lo] += s[ox];
            } else {
              for (std::size_t ox = lo; ox < hi; ++ox) d[ox * g.stride + j - g.pad] += s[ox];
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

/// x: [batch, in_ch, h, w], kernel: [out_ch, in_ch, kh, kw]. No bias; add one
/// with a broadcast `add` against [1, out_ch, 1, 1].
template <std::floating_point T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, std::size_t stride = 1, std::size_t pad = 0) {
  using detail::ConstMatMap;
  using detail::MatMap;
  if (x.dim() != 4 || kernel.dim() != 4) {
    throw DimensionError("conv2d: expected 4-D input and kernel, got " + shape_str(x.shape()) + " and " +
                         shape_str(kernel.shape()));
  }
  if (x.shape()[1] != kernel.shape()[1]) {
    throw DimensionError("conv2d: input channels " + shape_str(x.shape()) + " do not match kernel " +
                         shape_str(kernel.shape()));
  }
  detail::ConvGeometry g{x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3], kernel.shape()[0],
                         kernel.shape()[2], kernel.shape()[3], stride, pad, 0, 0};
  if (g.kh % 2 == 0 || g.kw % 2 == 0) throw ConfigError("conv2d: kernel extents must be odd");
  if (stride == 0) throw ConfigError("conv2d: stride must be positive");
  const std::size_t ph = g.h + 2 * pad, pw = g.w + 2 * pad;
  // A stride that leaves trailing rows/columns unvisited is only accepted when
  // those are padding; dropping real input is a configuration error.
  if (ph < g.kh || pw < g.kw || (ph - g.kh) % stride > pad || (pw - g.kw) % stride > pad) {
    throw ConfigError("conv2d: output extent is not integral for input " + shape_str(x.shape()) + ", kernel " +
                      shape_str(kernel.shape()) + ", stride " + std::to_string(stride) + ", pad " +
                      std::to_string(pad));
  }
  g.oh = (ph - g.kh) / stride + 1;
  g.ow = (pw - g.kw) / stride + 1;

  const std::size_t plane = g.oh * g.ow;
  // Scratch buffers are left uninitialized: every element is written before use.
  std::shared_ptr<T[]> cols(new T[g.col_rows() * g.col_cols()]);
  detail::im2col(x.node()->data.data(), g, cols.get());
  std::unique_ptr<T[]> tmp(new T[g.out_ch * g.col_cols()]);
  MatMap<T>(tmp.get(), g.out_ch, g.col_cols()).noalias() =
      ConstMatMap<T>(kernel.node()->data.data(), g.out_ch, g.col_rows()) *
      ConstMatMap<T>(cols.get(), g.col_rows(), g.col_cols());
  std::vector<T> out(g.batch * g.out_ch * plane);
  for (std::size_t o = 0; o < g.out_ch; ++o) {
    for (std::size_t b = 0; b < g.batch; ++b) {
      std::copy_n(tmp.get() + o * g.col_cols() + b * plane, plane, out.begin() + (b * g.out_ch + o) * plane);
    }
  }
  const bool track = detail::any_requires_grad<T>({&x, &kernel});
  auto result = detail::make_result(Shape{g.batch, g.out_ch, g.oh, g.ow}, std::move(out), "conv2d", track);
  if (track) {
    // The column matrix is kept for the kernel gradient instead of rebuilt.
    if (!kernel.requires_grad()) cols.reset();
    detail::record(result, [X = x.node(), K = kernel.node(), O = result.node().get(), g, cols]() {
      const std::size_t plane = g.oh * g.ow;
      std::unique_ptr<T[]> gt(new T[g.out_ch * g.col_cols()]);
      for (std::size_t o = 0; o < g.out_ch; ++o) {
        for (std::size_t b = 0; b < g.batch; ++b) {
          std::copy_n(O->grad.begin() + (b * g.out_ch + o) * plane, plane, gt.get() + o * g.col_cols() + b * plane);
        }
      }
      ConstMatMap<T> gm(gt.get(), g.out_ch, g.col_cols());
      if (K->requires_grad) {
        K->ensure_grad();
        MatMap<T>(K->grad.data(), g.out_ch, g.col_rows()).noalias() +=
            gm * ConstMatMap<T>(cols.get(), g.col_rows(), g.col_cols()).transpose();
      }
      if (X->requires_grad) {
        X->ensure_grad();
        std::unique_ptr<T[]> dcols(new T[g.col_rows() * g.col_cols()]);
        MatMap<T>(dcols.get(), g.col_rows(), g.col_cols()).noalias() =
            ConstMatMap<T>(K->data.data(), g.out_ch, g.col_rows()).transpose() * gm;
        detail::col2im_add(dcols.get(), g, X->grad.data());
      }
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Normalization and attention

template <std::floating_point T>
Tensor<T> softmax(const Tensor<T>& x, std::ptrdiff_t axis_in = -1) {
  const std::size_t axis = detail::resolve_axis(axis_in, x.dim(), "softmax");
  std::size_t outer, extent, inner;
  detail::split_axis(x.shape(), axis, outer, extent, inner);
  const auto& in = x.node()->data;
  std::vector<T> out(in.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * extent * inner + i;
      T mx = in[base];
      for (std::size_t k = 1; k < extent; ++k) mx = std::max(mx, in[base + k * inner]);
      T z = T(0);
      for (std::size_t k = 0; k < extent; ++k) {
        const T e = std::exp(in[base + k * inner] - mx);
        out[base + k * inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < extent; ++k) out[base + k * inner] /= z;
    }
  }
  const bool track = detail::any_requires_grad<T>({&x});
  auto result = detail::make_result(x.shape(), std::move(out), "softmax", track);
  if (track) {
    detail::record(result, [X = x.node(), O = result.node().get(), outer, extent, inner]() {
      if (!X->requires_grad) return;
      X->ensure_grad();
      const auto& y = O->data;
      const auto& g = O->grad;
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < inner; ++i) {
          const std::size_t base = o * extent * inner + i;
          T dot = T(0);
          for (std::size_t k = 0; k < extent; ++k) dot += g[base + k * inner] * y[base + k * inner];
          for (std::size_t k = 0; k < extent; ++k) {
            const std::size_t j = base + k * inner;
            X->grad[j] += y[j] * (g[j] - dot);
          }
        }
      }
    });
  }
  return result;
}

/// Normalizes over the last axis to zero mean and unit variance. No affine
/// part; compose with `mul`/`add` for gain and bias.
template <std::floating_point T>
Tensor<T> layer_norm(const Tensor<T>& x, T eps = T(1e-5)) {
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  const auto& in = x.node()->data;
  std::vector<T> out(in.size());
  std::vector<T> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* v = in.data() + r * n;
    T m = T(0);
    for (std::size_t i = 0; i < n; ++i) m += v[i];
    m /= static_cast<T>(n);
    T var = T(0);
    for (std::size_t i = 0; i < n; ++i) var += (v[i] - m) * (v[i] - m);
    var /= static_cast<T>(n);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t i = 0; i < n; ++i) out[r * n + i] = (v[i] - m) * rstd[r];
  }
  const bool track = detail::any_requires_grad<T>({&x});
  auto result = detail::make_result(x.shape(), std::move(out), "layer_norm", track);
  if (track) {
    detail::record(result, [X = x.node(), O = result.node().get(), rstd = std::move(rstd), n, rows]() {
      if (!X->requires_grad) return;
      X->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const T* g = O->grad.data() + r * n;
        const T* xhat = O->data.data() + r * n;
        T mg = T(0), mgx = T(0);
        for (std::size_t i = 0; i < n; ++i) {
          mg += g[i];
          mgx += g[i] * xhat[i];
        }
        mg /= static_cast<T>(n);
        mgx /= static_cast<T>(n);
        T* d = X->grad.data() + r * n;
        for (std::size_t i = 0; i < n; ++i) d[i] += rstd[r] * (g[i] - mg - xhat[i] * mgx);
      }
    });
  }
  return result;
}

/// softmax(Q Kᵀ / sqrt(d)) V over the two trailing axes; leading axes must
/// agree exactly. Q: [..., s, d], K: [..., t, d], V: [..., t, dv].
template <std::floating_point T>
Tensor<T> scaled_dot_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
  using detail::ConstMatMap;
  using detail::MatMap;
  const std::size_t nd = q.dim();
  if (nd < 2 || k.dim() != nd || v.dim() != nd) {
    throw DimensionError("attention: rank mismatch " + shape_str(q.shape()) + ", " + shape_str(k.shape()) + ", " +
                         shape_str(v.shape()));
  }
  for (std::size_t i = 0; i + 2 < nd; ++i) {
    if (q.shape()[i] != k.shape()[i] || q.shape()[i] != v.shape()[i]) {
      throw DimensionError("attention: batch extents differ " + shape_str(q.shape()) + ", " + shape_str(k.shape()) +
                           ", " + shape_str(v.shape()));
    }
  }
  const std::size_t s = q.shape()[nd - 2], d = q.shape()[nd - 1];
  const std::size_t t = k.shape()[nd - 2], dv = v.shape()[nd - 1];
  if (k.shape()[nd - 1] != d || v.shape()[nd - 2] != t) {
    throw DimensionError("attention: head/key extents differ " + shape_str(q.shape()) + ", " + shape_str(k.shape()) +
                         ", " + shape_str(v.shape()));
  }
  const std::size_t batch = q.numel() / (s * d);
  const T sc = T(1) / std::sqrt(static_cast<T>(d));
  std::vector<T> probs(batch * s * t);
  Shape out_shape = q.shape();
  out_shape[nd - 1] = dv;
  std::vector<T> out(batch * s * dv);
  const auto Q = q.node(), K = k.node(), V = v.node();
  for (std::size_t b = 0; b < batch; ++b) {
    MatMap<T> P(probs.data() + b * s * t, s, t);
    P.noalias() = ConstMatMap<T>(Q->data.data() + b * s * d, s, d) *
                  ConstMatMap<T>(K->data.data() + b * t * d, t, d).transpose();
    for (std::size_t i = 0; i < s; ++i) {
      T* row = probs.data() + b * s * t + i * t;
      T mx = row[0] * sc;
      for (std::size_t j = 0; j < t; ++j) mx = std::max(mx, row[j] * sc);
      T z = T(0);
      for (std::size_t j = 0; j < t; ++j) {
        row[j] = std::exp(row[j] * sc - mx);
        z += row[j];
      }
      for (std::size_t j = 0; j < t; ++j) row[j] /= z;
    }
    MatMap<T>(out.data() + b * s * dv, s, dv).noalias() = P * ConstMatMap<T>(V->data.data() + b * t * dv, t, dv);
  }
  const bool track = detail::any_requires_grad<T>({&q, &k, &v});
  auto result = detail::make_result(std::move(out_shape), std::move(out), "scaled_dot_attention", track);
  if (track) {
    detail::record(result, [Q, K, V, O = result.node().get(), probs = std::move(probs), batch, s, t, d, dv, sc]() {
      if (Q->requires_grad) Q->ensure_grad();
      if (K->requires_grad) K->ensure_grad();
      if (V->requires_grad) V->ensure_grad();
      detail::RowMat<T> dP(s, t);
      for (std::size_t b = 0; b < batch; ++b) {
        ConstMatMap<T> P(probs.data() + b * s * t, s, t);
        ConstMatMap<T> G(O->grad.data() + b * s * dv, s, dv);
        ConstMatMap<T> Vm(V->data.data() + b * t * dv, t, dv);
        if (V->requires_grad) MatMap<T>(V->grad.data() + b * t * dv, t, dv).noalias() += P.transpose() * G;
        if (!Q->requires_grad && !K->requires_grad) continue;
        dP.noalias() = G * Vm.transpose();
        for (std::size_t i = 0; i < s; ++i) {
          T dot = T(0);
          for (std::size_t j = 0; j < t; ++j) dot += dP(i, j) * P(i, j);
          for (std::size_t j = 0; j < t; ++j) dP(i, j) = P(i, j) * (dP(i, j) - dot) * sc;
        }
        if (Q->requires_grad) {
          MatMap<T>(Q->grad.data() + b * s * d, s, d).noalias() += dP * ConstMatMap<T>(K->data.data() + b * t * d, t, d);
        }
        if (K->requires_grad) {
          MatMap<T>(K->grad.data() + b * t * d, t, d).noalias() +=
              dP.transpose() * ConstMatMap<T>(Q->data.data() + b * s * d, s, d);
        }
      }
    });
  }
  return result;
}

}  // namespace toa
