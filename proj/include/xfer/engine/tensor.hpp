#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include <Eigen/Core>

#include "xfer/corpus.hpp"
#include "xfer/error.hpp"
#include "xfer/rng.hpp"

namespace xfer {

using Shape = std::vector<long>;

inline long shape_numel(const Shape& s) {
  long n = 1;
  for (long d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

namespace detail {

inline std::atomic<std::uint64_t> node_counter{0};
inline thread_local int no_grad_depth = 0;

}  // namespace detail

// Disables autodiff recording for the current thread while alive.
struct NoGradGuard {
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

template <typename S>
struct Node {
  using Vec = Eigen::Array<S, Eigen::Dynamic, 1>;

  Shape shape;
  Vec value;
  Vec grad;  // size 0 until first use
  bool requires_grad = false;
  bool is_leaf = true;
  std::uint64_t order = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != value.size()) grad = Vec::Zero(value.size());
  }
};

// Dense tensor handle with optional reverse-mode autodiff record.  Copying
// a Tensor shares the underlying node (value semantics live at the data
// level: ops always produce fresh buffers).
template <typename S>
class Tensor {
 public:
  using Vec = typename Node<S>::Vec;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<S>> n) : node(std::move(n)) {}

  static Tensor zeros(Shape shape) {
    auto n = fresh(std::move(shape));
    n->value.setZero();
    return Tensor(std::move(n));
  }
  static Tensor constant(Shape shape, S v) {
    auto n = fresh(std::move(shape));
    n->value.setConstant(v);
    return Tensor(std::move(n));
  }
  static Tensor from_data(Shape shape, std::vector<S> data) {
    auto n = fresh(std::move(shape));
    if (static_cast<long>(data.size()) != n->value.size()) {
      throw std::runtime_error("from_data: size mismatch");
    }
    std::copy(data.begin(), data.end(), n->value.data());
    return Tensor(std::move(n));
  }
  static Tensor randn(Shape shape, S stddev, Rng& rng) {
    auto n = fresh(std::move(shape));
    for (long i = 0; i < n->value.size(); ++i) {
      n->value[i] = static_cast<S>(rng.normal()) * stddev;
    }
    return Tensor(std::move(n));
  }
  static Tensor uninit(Shape shape) { return Tensor(fresh(std::move(shape))); }

  bool defined() const { return node != nullptr; }
  const Shape& shape() const { return node->shape; }
  long numel() const { return node->value.size(); }
  long dim(std::size_t i) const { return node->shape[i]; }
  std::size_t ndim() const { return node->shape.size(); }

  Vec& value() { return node->value; }
  const Vec& value() const { return node->value; }
  Vec& grad() {
    node->ensure_grad();
    return node->grad;
  }
  bool has_grad() const { return node->grad.size() == node->value.size(); }

  S item() const {
    if (numel() != 1) {
      throw std::runtime_error("item(): tensor is not scalar, shape " +
                               shape_str(node->shape));
    }
    return node->value[0];
  }

  Tensor& set_requires_grad(bool v = true) {
    node->requires_grad = v;
    return *this;
  }
  bool requires_grad() const { return node->requires_grad; }

  std::shared_ptr<Node<S>> node;

 private:
  static std::shared_ptr<Node<S>> fresh(Shape shape) {
    auto n = std::make_shared<Node<S>>();
    n->value.resize(shape_numel(shape));
    n->shape = std::move(shape);
    n->order = detail::node_counter.fetch_add(1, std::memory_order_relaxed);
    return n;
  }
};

template <typename S>
struct Parameter {
  std::string name;
  Tensor<S> tensor;
};

namespace detail {

template <typename S>
bool track(std::initializer_list<const Tensor<S>*> parents) {
  if (!grad_enabled()) return false;
  for (const auto* p : parents) {
    if (p->node->requires_grad) return true;
  }
  return false;
}

template <typename S, typename F>
void record(Tensor<S>& out, std::initializer_list<const Tensor<S>*> parents,
            F&& bw) {
  out.node->requires_grad = true;
  out.node->is_leaf = false;
  for (const auto* p : parents) out.node->parents.push_back(p->node);
  out.node->backward_fn = std::forward<F>(bw);
}

// Accumulate `expr` into n's grad buffer if gradient flows through n.
template <typename S, typename Expr>
void accum(Node<S>* n, const Expr& expr) {
  if (!n->requires_grad) return;
  n->ensure_grad();
  n->grad += expr;
}

template <typename S>
using MatMap =
    Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename S>
using CMatMap = Eigen::Map<
    const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

template <typename S>
MatMap<S> as_mat(typename Node<S>::Vec& v, long r, long c) {
  return MatMap<S>(v.data(), r, c);
}
template <typename S>
CMatMap<S> as_cmat(const typename Node<S>::Vec& v, long r, long c) {
  return CMatMap<S>(v.data(), r, c);
}

inline void check(bool ok, const std::string& msg) {
  if (!ok) throw std::runtime_error(msg);
}

inline bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and broadcasting ops.  Broadcasting is limited to the second
// operand's shape being a trailing suffix of the first's.

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check(detail::is_suffix(b.shape(), a.shape()),
                "add: shape " + shape_str(b.shape()) +
                    " is not a suffix of " + shape_str(a.shape()));
  const long k = b.numel();
  const long rep = a.numel() / k;
  auto out = Tensor<S>::uninit(a.shape());
  detail::as_mat<S>(out.value(), rep, k) =
      detail::as_cmat<S>(a.value(), rep, k).rowwise() +
      detail::as_cmat<S>(b.value(), 1, k).row(0);
  if (detail::track<S>({&a, &b})) {
    auto* pa = a.node.get();
    auto* pb = b.node.get();
    detail::record(out, {&a, &b}, [pa, pb, rep, k](Node<S>& self) {
      detail::accum(pa, self.grad);
      if (pb->requires_grad) {
        pb->ensure_grad();
        detail::as_mat<S>(pb->grad, 1, k).row(0) +=
            detail::as_cmat<S>(self.grad, rep, k).colwise().sum();
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check(detail::is_suffix(b.shape(), a.shape()),
                "mul: shape " + shape_str(b.shape()) +
                    " is not a suffix of " + shape_str(a.shape()));
  const long k = b.numel();
  const long rep = a.numel() / k;
  auto out = Tensor<S>::uninit(a.shape());
  detail::as_mat<S>(out.value(), rep, k) =
      detail::as_cmat<S>(a.value(), rep, k).array().rowwise() *
      detail::as_cmat<S>(b.value(), 1, k).row(0).array();
  if (detail::track<S>({&a, &b})) {
    auto* pa = a.node.get();
    auto* pb = b.node.get();
    detail::record(out, {&a, &b}, [pa, pb, rep, k](Node<S>& self) {
      if (pa->requires_grad) {
        pa->ensure_grad();
        detail::as_mat<S>(pa->grad, rep, k).array() +=
            detail::as_cmat<S>(self.grad, rep, k).array().rowwise() *
            detail::as_cmat<S>(pb->value, 1, k).row(0).array();
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        detail::as_mat<S>(pb->grad, 1, k).array().row(0) +=
            (detail::as_cmat<S>(self.grad, rep, k).array() *
             detail::as_cmat<S>(pa->value, rep, k).array())
                .colwise()
                .sum();
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> neg(const Tensor<S>& a) {
  auto out = Tensor<S>::uninit(a.shape());
  out.value() = -a.value();
  if (detail::track<S>({&a})) {
    auto* pa = a.node.get();
    detail::record(out, {&a},
                   [pa](Node<S>& self) { detail::accum(pa, -self.grad); });
  }
  return out;
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return add(a, neg(b));
}

template <typename S>
Tensor<S> add_scalar(const Tensor<S>& a, S v) {
  auto out = Tensor<S>::uninit(a.shape());
  out.value() = a.value() + v;
  if (detail::track<S>({&a})) {
    auto* pa = a.node.get();
    detail::record(out, {&a},
                   [pa](Node<S>& self) { detail::accum(pa, self.grad); });
  }
  return out;
}

template <typename S>
Tensor<S> mul_scalar(const Tensor<S>& a, S v) {
  auto out = Tensor<S>::uninit(a.shape());
  out.value() = a.value() * v;
  if (detail::track<S>({&a})) {
    auto* pa = a.node.get();
    detail::record(out, {&a},
                   [pa, v](Node<S>& self) { detail::accum(pa, self.grad * v); });
  }
  return out;
}

template <typename S>
Tensor<S> sum(const Tensor<S>& a) {
  auto out = Tensor<S>::uninit({});
  out.value()[0] = a.value().sum();
  if (detail::track<S>({&a})) {
    auto* pa = a.node.get();
    detail::record(out, {&a}, [pa](Node<S>& self) {
      detail::accum(pa, Node<S>::Vec::Constant(pa->value.size(), self.grad[0]));
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape ops.

template <typename S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
  detail::check(shape_numel(shape) == a.numel(),
                "reshape: " + shape_str(a.shape()) + " -> " +
                    shape_str(shape) + " changes element count");
  auto out = Tensor<S>::uninit(std::move(shape));
  out.value() = a.value();
  if (detail::track<S>({&a})) {
    auto* pa = a.node.get();
    detail::record(out, {&a},
                   [pa](Node<S>& self) { detail::accum(pa, self.grad); });
  }
  return out;
}

namespace detail {

inline std::vector<long> row_strides(const Shape& s) {
  std::vector<long> st(s.size());
  long acc = 1;
  for (std::size_t i = s.size(); i-- > 0;) {
    st[i] = acc;
    acc *= s[i];
  }
  return st;
}

// dst[multi-index with axes d0,d1 swapped] = src[multi-index]; when
// kAccum, += into dst instead.
template <typename S, bool kAccum>
void swap_axes_copy(const S* src, const Shape& in_shape, std::size_t d0,
                    std::size_t d1, S* dst) {
  Shape out_shape = in_shape;
  std::swap(out_shape[d0], out_shape[d1]);
  const auto out_st = row_strides(out_shape);
  const long n = shape_numel(in_shape);
  std::vector<long> idx(in_shape.size(), 0);
  for (long lin = 0; lin < n; ++lin) {
    long off = 0;
    for (std::size_t d = 0; d < idx.size(); ++d) {
      std::size_t od = d == d0 ? d1 : (d == d1 ? d0 : d);
      off += idx[d] * out_st[od];
    }
    if constexpr (kAccum) {
      dst[off] += src[lin];
    } else {
      dst[off] = src[lin];
    }
    for (std::size_t d = idx.size(); d-- > 0;) {
      if (++idx[d] < in_shape[d]) break;
      idx[d] = 0;
    }
  }
}

}  // namespace detail

template <typename S>
Tensor<S> transpose(const Tensor<S>& a, std::size_t d0, std::size_t d1) {
  detail::check(d0 < a.ndim() && d1 < a.ndim(),
                "transpose: axis out of range for " + shape_str(a.shape()));
  Shape out_shape = a.shape();
  std::swap(out_shape[d0], out_shape[d1]);
  auto out = Tensor<S>::uninit(std::move(out_shape));
  detail::swap_axes_copy<S, false>(a.value().data(), a.shape(), d0, d1,
                                   out.value().data());
  if (detail::track<S>({&a})) {
    auto* pa = a.node.get();
    const Shape g_shape = out.shape();
    detail::record(out, {&a}, [pa, g_shape, d0, d1](Node<S>& self) {
      if (!pa->requires_grad) return;
      pa->ensure_grad();
      detail::swap_axes_copy<S, true>(self.grad.data(), g_shape, d0, d1,
                                      pa->grad.data());
    });
  }
  return out;
}

// 2-D transpose shorthand.
template <typename S>
Tensor<S> transpose(const Tensor<S>& a) {
  detail::check(a.ndim() == 2, "transpose: expected 2-D tensor, got " +
                                   shape_str(a.shape()));
  return transpose(a, 0, 1);
}

template <typename S>
Tensor<S> slice(const Tensor<S>& a, std::size_t axis, long start, long len) {
  detail::check(axis < a.ndim() && start >= 0 && len >= 1 &&
                    start + len <= a.shape()[axis],
                "slice: range [" + std::to_string(start) + ", " +
                    std::to_string(start + len) + ") invalid for axis " +
                    std::to_string(axis) + " of " + shape_str(a.shape()));
  Shape out_shape = a.shape();
  out_shape[axis] = len;
  long outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= a.shape()[d];
  for (std::size_t d = axis + 1; d < a.ndim(); ++d) inner *= a.shape()[d];
  const long dim = a.shape()[axis];
  auto out = Tensor<S>::uninit(std::move(out_shape));
  for (long o = 0; o < outer; ++o) {
    std::memcpy(out.value().data() + o * len * inner,
                a.value().data() + (o * dim + start) * inner,
                sizeof(S) * len * inner);
  }
  if (detail::track<S>({&a})) {
    auto* pa = a.node.get();
    detail::record(out, {&a},
                   [pa, outer, inner, dim, start, len](Node<S>& self) {
                     if (!pa->requires_grad) return;
                     pa->ensure_grad();
                     for (long o = 0; o < outer; ++o) {
                       Eigen::Map<typename Node<S>::Vec>(
                           pa->grad.data() + (o * dim + start) * inner,
                           len * inner) +=
                           Eigen::Map<const typename Node<S>::Vec>(
                               self.grad.data() + o * len * inner, len * inner);
                     }
                   });
  }
  return out;
}

template <typename S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, std::size_t axis) {
  detail::check(!parts.empty(), "concat: no inputs");
  Shape out_shape = parts[0].shape();
  detail::check(axis < out_shape.size(), "concat: axis out of range");
  long total = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    detail::check(s.size() == out_shape.size(), "concat: rank mismatch");
    for (std::size_t d = 0; d < s.size(); ++d) {
      detail::check(d == axis || s[d] == out_shape[d],
                    "concat: shape mismatch " + shape_str(s) + " vs " +
                        shape_str(out_shape));
    }
    total += s[axis];
  }
  out_shape[axis] = total;
  long outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= out_shape[d];
  for (std::size_t d = axis + 1; d < out_shape.size(); ++d)
    inner *= out_shape[d];
  auto out = Tensor<S>::uninit(out_shape);
  long off = 0;
  for (const auto& p : parts) {
    const long dim = p.shape()[axis];
    for (long o = 0; o < outer; ++o) {
      std::memcpy(out.value().data() + (o * total + off) * inner,
                  p.value().data() + o * dim * inner, sizeof(S) * dim * inner);
    }
    off += dim;
  }
  bool need = false;
  if (grad_enabled()) {
    for (const auto& p : parts) need = need || p.node->requires_grad;
  }
  if (need) {
    out.node->requires_grad = true;
    out.node->is_leaf = false;
    std::vector<Node<S>*> raw;
    for (const auto& p : parts) {
      out.node->parents.push_back(p.node);
      raw.push_back(p.node.get());
    }
    out.node->backward_fn = [raw, outer, inner, total](Node<S>& self) {
      long off = 0;
      for (auto* pn : raw) {
        const long dim = pn->value.size() / (outer * inner);
        if (pn->requires_grad) {
          pn->ensure_grad();
          for (long o = 0; o < outer; ++o) {
            Eigen::Map<typename Node<S>::Vec>(pn->grad.data() + o * dim * inner,
                                              dim * inner) +=
                Eigen::Map<const typename Node<S>::Vec>(
                    self.grad.data() + (o * total + off) * inner, dim * inner);
          }
        }
        off += dim;
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Matrix multiply: a is [..., m, k]; b is [k, n] or batched [..., k, n]
// with identical leading dims.

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check(a.ndim() >= 2 && b.ndim() >= 2,
                "matmul: operands must have rank >= 2, got " +
                    shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const long m = a.shape()[a.ndim() - 2];
  const long k = a.shape()[a.ndim() - 1];
  const long kb = b.shape()[b.ndim() - 2];
  const long n = b.shape()[b.ndim() - 1];
  const bool batched_b = b.ndim() > 2;
  detail::check(k == kb, "matmul: inner dims differ, " + shape_str(a.shape()) +
                             " x " + shape_str(b.shape()));
  long batch = 1;
  for (std::size_t d = 0; d + 2 < a.ndim(); ++d) batch *= a.shape()[d];
  if (batched_b) {
    detail::check(
        std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin(),
                   b.shape().end() - 2),
        "matmul: batch dims differ, " + shape_str(a.shape()) + " x " +
            shape_str(b.shape()));
  }
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(n);
  auto out = Tensor<S>::uninit(std::move(out_shape));
  for (long i = 0; i < batch; ++i) {
    detail::MatMap<S>(out.value().data() + i * m * n, m, n).noalias() =
        detail::CMatMap<S>(a.value().data() + i * m * k, m, k) *
        detail::CMatMap<S>(b.value().data() + (batched_b ? i * k * n : 0), k,
                           n);
  }
  if (detail::track<S>({&a, &b})) {
    auto* pa = a.node.get();
    auto* pb = b.node.get();
    detail::record(out, {&a, &b},
                   [pa, pb, batch, m, k, n, batched_b](Node<S>& self) {
                     for (long i = 0; i < batch; ++i) {
                       detail::CMatMap<S> g(self.grad.data() + i * m * n, m, n);
                       if (pa->requires_grad) {
                         pa->ensure_grad();
                         detail::MatMap<S>(pa->grad.data() + i * m * k, m, k)
                             .noalias() +=
                             g * detail::CMatMap<S>(
                                     pb->value.data() +
                                         (batched_b ? i * k * n : 0),
                                     k, n)
                                     .transpose();
                       }
                       if (pb->requires_grad) {
                         pb->ensure_grad();
                         detail::MatMap<S>(
                             pb->grad.data() + (batched_b ? i * k * n : 0), k,
                             n)
                             .noalias() +=
                             detail::CMatMap<S>(pa->value.data() + i * m * k,
                                                m, k)
                                 .transpose() *
                             g;
                       }
                     }
                   });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalization (all over the last axis where relevant).

template <typename S>
Tensor<S> softmax(const Tensor<S>& a) {
  detail::check(a.ndim() >= 1, "softmax: scalar input");
  const long k = a.shape().back();
  const long rows = a.numel() / k;
  auto out = Tensor<S>::uninit(a.shape());
  for (long r = 0; r < rows; ++r) {
    Eigen::Map<const typename Node<S>::Vec> x(a.value().data() + r * k, k);
    Eigen::Map<typename Node<S>::Vec> y(out.value().data() + r * k, k);
    const S mx = x.maxCoeff();
    y = (x - mx).exp();
    y /= y.sum();
  }
  if (detail::track<S>({&a})) {
    auto* pa = a.node.get();
    detail::record(out, {&a}, [pa, rows, k](Node<S>& self) {
      if (!pa->requires_grad) return;
      pa->ensure_grad();
      for (long r = 0; r < rows; ++r) {
        Eigen::Map<const typename Node<S>::Vec> y(self.value.data() + r * k, k);
        Eigen::Map<const typename Node<S>::Vec> g(self.grad.data() + r * k, k);
        Eigen::Map<typename Node<S>::Vec> dx(pa->grad.data() + r * k, k);
        const S dot = (g * y).sum();
        dx += y * (g - dot);
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> layer_norm(const Tensor<S>& a, S eps) {
  detail::check(a.ndim() >= 1, "layer_norm: scalar input");
  const long k = a.shape().back();
  const long rows = a.numel() / k;
  auto out = Tensor<S>::uninit(a.shape());
  std::vector<S> inv_std(rows);
  for (long r = 0; r < rows; ++r) {
    Eigen::Map<const typename Node<S>::Vec> x(a.value().data() + r * k, k);
    Eigen::Map<typename Node<S>::Vec> y(out.value().data() + r * k, k);
    const S mean = x.mean();
    const S var = (x - mean).square().mean();
    inv_std[r] = S(1) / std::sqrt(var + eps);
    y = (x - mean) * inv_std[r];
  }
  if (detail::track<S>({&a})) {
    auto* pa = a.node.get();
    detail::record(out, {&a},
                   [pa, rows, k, inv_std = std::move(inv_std)](Node<S>& self) {
                     if (!pa->requires_grad) return;
                     pa->ensure_grad();
                     for (long r = 0; r < rows; ++r) {
                       Eigen::Map<const typename Node<S>::Vec> y(
                           self.value.data() + r * k, k);
                       Eigen::Map<const typename Node<S>::Vec> g(
                           self.grad.data() + r * k, k);
                       Eigen::Map<typename Node<S>::Vec> dx(
                           pa->grad.data() + r * k, k);
                       const S gm = g.mean();
                       const S gym = (g * y).mean();
                       dx += inv_std[r] * (g - gm - y * gym);
                     }
                   });
  }
  return out;
}

// Tanh-approximation GELU.
template <typename S>
Tensor<S> gelu(const Tensor<S>& a) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kB = 0.044715;
  auto out = Tensor<S>::uninit(a.shape());
  {
    const auto& x = a.value();
    const typename Node<S>::Vec u = (S(kC) * (x + S(kB) * x.cube())).tanh();
    out.value() = S(0.5) * x * (S(1) + u);
  }
  if (detail::track<S>({&a})) {
    auto* pa = a.node.get();
    detail::record(out, {&a}, [pa](Node<S>& self) {
      if (!pa->requires_grad) return;
      pa->ensure_grad();
      const auto& x = pa->value;
      const typename Node<S>::Vec t = (S(kC) * (x + S(kB) * x.cube())).tanh();
      const typename Node<S>::Vec du =
          S(kC) * (S(1) + S(3) * S(kB) * x.square());
      pa->grad += self.grad * (S(0.5) * (S(1) + t) +
                               S(0.5) * x * (S(1) - t.square()) * du);
    });
  }
  return out;
}

// Row gather: out[i, :] = table[ids[i], :].
template <typename S>
Tensor<S> embedding(const Tensor<S>& table, std::vector<long> ids) {
  detail::check(table.ndim() == 2,
                "embedding: table must be 2-D, got " + shape_str(table.shape()));
  const long v = table.shape()[0];
  const long h = table.shape()[1];
  for (long id : ids) {
    detail::check(id >= 0 && id < v,
                  "embedding: id " + std::to_string(id) +
                      " out of range for table " + shape_str(table.shape()));
  }
  auto out = Tensor<S>::uninit({static_cast<long>(ids.size()), h});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::memcpy(out.value().data() + i * h, table.value().data() + ids[i] * h,
                sizeof(S) * h);
  }
  if (detail::track<S>({&table})) {
    auto* pt = table.node.get();
    detail::record(out, {&table}, [pt, h, ids = std::move(ids)](Node<S>& self) {
      if (!pt->requires_grad) return;
      pt->ensure_grad();
      for (std::size_t i = 0; i < ids.size(); ++i) {
        Eigen::Map<typename Node<S>::Vec>(pt->grad.data() + ids[i] * h, h) +=
            Eigen::Map<const typename Node<S>::Vec>(self.grad.data() + i * h,
                                                    h);
      }
    });
  }
  return out;
}

// Mean softmax cross-entropy in nats: logits [N, V], one target id per row.
template <typename S>
Tensor<S> cross_entropy(const Tensor<S>& logits,
                        std::span<const TokenId> targets) {
  detail::check(logits.ndim() == 2, "cross_entropy: logits must be 2-D, got " +
                                        shape_str(logits.shape()));
  const long n = logits.shape()[0];
  const long v = logits.shape()[1];
  detail::check(static_cast<long>(targets.size()) == n,
                "cross_entropy: " + std::to_string(targets.size()) +
                    " targets for " + std::to_string(n) + " rows");
  auto probs = std::make_shared<typename Node<S>::Vec>(n * v);
  S loss = 0;
  for (long r = 0; r < n; ++r) {
    detail::check(targets[r] >= 0 && targets[r] < v,
                  "cross_entropy: target id out of range");
    Eigen::Map<const typename Node<S>::Vec> x(logits.value().data() + r * v, v);
    Eigen::Map<typename Node<S>::Vec> p(probs->data() + r * v, v);
    const S mx = x.maxCoeff();
    p = (x - mx).exp();
    const S z = p.sum();
    p /= z;
    loss += mx + std::log(z) - x[targets[r]];
  }
  auto out = Tensor<S>::uninit({});
  out.value()[0] = loss / static_cast<S>(n);
  if (detail::track<S>({&logits})) {
    auto* pl = logits.node.get();
    std::vector<TokenId> tgt(targets.begin(), targets.end());
    detail::record(out, {&logits},
                   [pl, probs, tgt = std::move(tgt), n, v](Node<S>& self) {
                     if (!pl->requires_grad) return;
                     pl->ensure_grad();
                     const S scale = self.grad[0] / static_cast<S>(n);
                     Eigen::Map<typename Node<S>::Vec> dx(pl->grad.data(),
                                                          n * v);
                     dx += *probs * scale;
                     for (long r = 0; r < n; ++r) {
                       pl->grad[r * v + tgt[r]] -= scale;
                     }
                   });
  }
  return out;
}

// Inverted dropout; identity when p == 0.
template <typename S>
Tensor<S> dropout(const Tensor<S>& a, double p, Rng& rng) {
  detail::check(p >= 0.0 && p < 1.0, "dropout: p must be in [0, 1)");
  if (p == 0.0) return a;
  auto mask = std::make_shared<typename Node<S>::Vec>(a.numel());
  const S keep_scale = S(1.0 / (1.0 - p));
  for (long i = 0; i < a.numel(); ++i) {
    (*mask)[i] = rng.uniform() >= p ? keep_scale : S(0);
  }
  auto out = Tensor<S>::uninit(a.shape());
  out.value() = a.value() * *mask;
  if (detail::track<S>({&a})) {
    auto* pa = a.node.get();
    detail::record(out, {&a}, [pa, mask](Node<S>& self) {
      detail::accum(pa, self.grad * *mask);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reverse pass.

template <typename S>
void backward(const Tensor<S>& loss) {
  if (loss.numel() != 1) {
    throw std::runtime_error("backward: loss must be scalar, shape " +
                             shape_str(loss.shape()));
  }
  if (!loss.node->requires_grad) {
    throw std::runtime_error(
        "backward: loss is not connected to any trainable tensor");
  }
  // Collect the reachable differentiable subgraph.
  std::vector<Node<S>*> order;
  std::unordered_set<Node<S>*> seen;
  std::vector<Node<S>*> stack{loss.node.get()};
  seen.insert(loss.node.get());
  while (!stack.empty()) {
    Node<S>* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) {
        stack.push_back(p.get());
      }
    }
  }
  // Interior grads are scratch; leaf grads accumulate across calls.
  for (Node<S>* n : order) {
    if (!n->is_leaf) {
      n->grad = Node<S>::Vec::Zero(n->value.size());
    }
  }
  std::sort(order.begin(), order.end(),
            [](const Node<S>* a, const Node<S>* b) { return a->order > b->order; });
  loss.node->ensure_grad();
  loss.node->grad[0] += S(1);
  for (Node<S>* n : order) {
    if (n->backward_fn) n->backward_fn(*n);
  }
}

template <typename S>
void zero_grad(std::vector<Parameter<S>>& params) {
  for (auto& p : params) {
    auto& n = *p.tensor.node;
    if (n.grad.size() > 0) n.grad.setZero();
  }
}

// Value copy with no autodiff record.
template <typename S>
Tensor<S> detach(const Tensor<S>& a) {
  auto out = Tensor<S>::uninit(a.shape());
  out.value() = a.value();
  return out;
}

}  // namespace xfer
