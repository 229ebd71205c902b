#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "mose/tensor.hpp"

namespace mose {

namespace detail {

template <typename S>
inline bool tracking(std::initializer_list<const Tensor<S>*> inputs) {
  if (!Tape<S>::current()) return false;
  for (const Tensor<S>* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

template <typename S>
inline void track(Tensor<S>& out, std::function<void()> pull) {
  out.set_requires_grad(true);
  out.mark_non_leaf();
  Tape<S>::current()->record(out.handle(), std::move(pull));
}

// C[m x n] (+)= A[m x k] * B[k x n]. For every output element the reduction
// over k runs in ascending index order, which pins the forward bits.
template <typename S>
inline void gemm_nn(const S* a, const S* b, S* c, int64_t m, int64_t k, int64_t n,
                    bool accumulate) {
  for (int64_t i = 0; i < m; ++i) {
    S* crow = c + i * n;
    if (!accumulate) std::fill(crow, crow + n, S(0));
    const S* arow = a + i * k;
    for (int64_t p = 0; p < k; ++p) {
      const S av = arow[p];
      const S* brow = b + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename S>
inline std::vector<S> transposed(const S* a, int64_t rows, int64_t cols) {
  std::vector<S> t(static_cast<size_t>(rows * cols));
  for (int64_t r = 0; r < rows; ++r) {
    for (int64_t c = 0; c < cols; ++c) t[static_cast<size_t>(c * rows + r)] = a[r * cols + c];
  }
  return t;
}

template <typename S>
inline void accumulate_into(std::vector<S>& dst, const std::vector<S>& src) {
  for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

inline void check_same_shape(const char* op, const std::vector<int64_t>& a,
                             const std::vector<int64_t>& b) {
  if (a != b) {
    throw ShapeError(std::string(op) + ": shape mismatch: " + shape_str(a) + " vs " +
                     shape_str(b));
  }
}

}  // namespace detail

template <typename S>
inline bool all_finite(const Tensor<S>& t) {
  for (S v : t.values()) {
    if (!std::isfinite(static_cast<double>(v))) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape("add", a.shape(), b.shape());
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  if (detail::tracking<S>({&a, &b})) {
    detail::track(out, [a, b, out] {
      const std::vector<S>& g = out.node()->grad;
      if (a.requires_grad()) {
        auto& ga = const_cast<Tensor<S>&>(a).grad();
        detail::accumulate_into(ga, g);
      }
      if (b.requires_grad()) {
        auto& gb = const_cast<Tensor<S>&>(b).grad();
        detail::accumulate_into(gb, g);
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape("sub", a.shape(), b.shape());
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
  if (detail::tracking<S>({&a, &b})) {
    detail::track(out, [a, b, out] {
      const std::vector<S>& g = out.node()->grad;
      if (a.requires_grad()) {
        auto& ga = const_cast<Tensor<S>&>(a).grad();
        detail::accumulate_into(ga, g);
      }
      if (b.requires_grad()) {
        auto& gb = const_cast<Tensor<S>&>(b).grad();
        for (size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return out;
}

// Hadamard product.
template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape("mul", a.shape(), b.shape());
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
  if (detail::tracking<S>({&a, &b})) {
    detail::track(out, [a, b, out] {
      const std::vector<S>& g = out.node()->grad;
      if (a.requires_grad()) {
        auto& ga = const_cast<Tensor<S>&>(a).grad();
        const S* pb2 = b.data();
        for (size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * pb2[i];
      }
      if (b.requires_grad()) {
        auto& gb = const_cast<Tensor<S>&>(b).grad();
        const S* pa2 = a.data();
        for (size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * pa2[i];
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, double c) {
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  const S sc = static_cast<S>(c);
  const S* pa = a.data();
  S* po = out.data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * sc;
  if (detail::tracking<S>({&a})) {
    detail::track(out, [a, out, sc] {
      const std::vector<S>& g = out.node()->grad;
      auto& ga = const_cast<Tensor<S>&>(a).grad();
      for (size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * sc;
    });
  }
  return out;
}

// x[..., C] + b[C]; the only broadcast in the library.
template <typename S>
Tensor<S> bias_add(const Tensor<S>& x, const Tensor<S>& b) {
  if (b.ndim() != 1 || x.dim(x.ndim() - 1) != b.dim(0)) {
    throw ShapeError("bias_add: bias " + shape_str(b.shape()) + " does not match last dim of " +
                     shape_str(x.shape()));
  }
  const int64_t c = b.dim(0);
  const int64_t rows = x.numel() / c;
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  const S* px = x.data();
  const S* pb = b.data();
  S* po = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const S* xr = px + r * c;
    S* orow = po + r * c;
    for (int64_t j = 0; j < c; ++j) orow[j] = xr[j] + pb[j];
  }
  if (detail::tracking<S>({&x, &b})) {
    detail::track(out, [x, b, out, rows, c] {
      const std::vector<S>& g = out.node()->grad;
      if (x.requires_grad()) {
        auto& gx = const_cast<Tensor<S>&>(x).grad();
        detail::accumulate_into(gx, g);
      }
      if (b.requires_grad()) {
        auto& gb = const_cast<Tensor<S>&>(b).grad();
        for (int64_t r = 0; r < rows; ++r) {
          const S* grow = g.data() + r * c;
          for (int64_t j = 0; j < c; ++j) gb[static_cast<size_t>(j)] += grow[j];
        }
      }
    });
  }
  return out;
}

// out[r, :] = x[r, :] * s[r]
template <typename S>
Tensor<S> rowwise_mul(const Tensor<S>& x, const Tensor<S>& s) {
  if (x.ndim() != 2 || s.ndim() != 1 || x.dim(0) != s.dim(0)) {
    throw ShapeError("rowwise_mul: incompatible shapes " + shape_str(x.shape()) + " and " +
                     shape_str(s.shape()));
  }
  const int64_t rows = x.dim(0);
  const int64_t cols = x.dim(1);
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  const S* px = x.data();
  const S* ps = s.data();
  S* po = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const S sv = ps[r];
    for (int64_t j = 0; j < cols; ++j) po[r * cols + j] = px[r * cols + j] * sv;
  }
  if (detail::tracking<S>({&x, &s})) {
    detail::track(out, [x, s, out, rows, cols] {
      const std::vector<S>& g = out.node()->grad;
      if (x.requires_grad()) {
        auto& gx = const_cast<Tensor<S>&>(x).grad();
        const S* ps2 = s.data();
        for (int64_t r = 0; r < rows; ++r) {
          for (int64_t j = 0; j < cols; ++j) gx[static_cast<size_t>(r * cols + j)] += g[static_cast<size_t>(r * cols + j)] * ps2[r];
        }
      }
      if (s.requires_grad()) {
        auto& gs = const_cast<Tensor<S>&>(s).grad();
        const S* px2 = x.data();
        for (int64_t r = 0; r < rows; ++r) {
          S acc = S(0);
          for (int64_t j = 0; j < cols; ++j) acc += g[static_cast<size_t>(r * cols + j)] * px2[r * cols + j];
          gs[static_cast<size_t>(r)] += acc;
        }
      }
    });
  }
  return out;
}

// Tanh-approximation GELU (GPT-2 convention):
//   0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 x^3)))
template <typename S>
Tensor<S> gelu(const Tensor<S>& x) {
  static const S kC = static_cast<S>(0.7978845608028654);  // sqrt(2/pi)
  static const S kA = static_cast<S>(0.044715);
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  const S* px = x.data();
  S* po = out.data();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) {
    const S v = px[i];
    const S u = kC * (v + kA * v * v * v);
    po[i] = S(0.5) * v * (S(1) + std::tanh(u));
  }
  if (detail::tracking<S>({&x})) {
    detail::track(out, [x, out, n] {
      const std::vector<S>& g = out.node()->grad;
      auto& gx = const_cast<Tensor<S>&>(x).grad();
      const S* px2 = x.data();
      for (int64_t i = 0; i < n; ++i) {
        const S v = px2[i];
        const S u = kC * (v + kA * v * v * v);
        const S t = std::tanh(u);
        const S du = kC * (S(1) + S(3) * kA * v * v);
        const S dy = S(0.5) * (S(1) + t) + S(0.5) * v * (S(1) - t * t) * du;
        gx[static_cast<size_t>(i)] += g[static_cast<size_t>(i)] * dy;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> sum_all(const Tensor<S>& x) {
  S acc = S(0);
  const S* px = x.data();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) acc += px[i];
  Tensor<S> out = Tensor<S>::scalar(acc);
  if (detail::tracking<S>({&x})) {
    detail::track(out, [x, out] {
      const S g = out.node()->grad[0];
      auto& gx = const_cast<Tensor<S>&>(x).grad();
      for (S& v : gx) v += g;
    });
  }
  return out;
}

// Column means of a 2D tensor: out[j] = mean over rows of x[:, j].
template <typename S>
Tensor<S> mean_over_rows(const Tensor<S>& x) {
  if (x.ndim() != 2) throw ShapeError("mean_over_rows expects 2D, got " + shape_str(x.shape()));
  const int64_t rows = x.dim(0);
  const int64_t cols = x.dim(1);
  Tensor<S> out = Tensor<S>::zeros({cols});
  const S* px = x.data();
  S* po = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    for (int64_t j = 0; j < cols; ++j) po[j] += px[r * cols + j];
  }
  const S inv = S(1) / static_cast<S>(rows);
  for (int64_t j = 0; j < cols; ++j) po[j] *= inv;
  if (detail::tracking<S>({&x})) {
    detail::track(out, [x, out, rows, cols, inv] {
      const std::vector<S>& g = out.node()->grad;
      auto& gx = const_cast<Tensor<S>&>(x).grad();
      for (int64_t r = 0; r < rows; ++r) {
        for (int64_t j = 0; j < cols; ++j) gx[static_cast<size_t>(r * cols + j)] += g[static_cast<size_t>(j)] * inv;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// shape
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, std::vector<int64_t> new_shape) {
  int64_t count = 1;
  for (int64_t d : new_shape) count *= d;
  if (count != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                     shape_str(new_shape));
  }
  Tensor<S> out = Tensor<S>::from_vector(std::move(new_shape), x.values());
  if (detail::tracking<S>({&x})) {
    detail::track(out, [x, out] {
      const std::vector<S>& g = out.node()->grad;
      auto& gx = const_cast<Tensor<S>&>(x).grad();
      detail::accumulate_into(gx, g);
    });
  }
  return out;
}

namespace detail {
// dst[perm-reordered index] = src[index]; used forward and (inverted) backward.
template <typename S, typename Fn>
inline void permute_walk(const std::vector<int64_t>& in_shape, const std::vector<int>& perm,
                         Fn&& fn) {
  const int nd = static_cast<int>(in_shape.size());
  std::vector<int64_t> out_shape(nd);
  for (int i = 0; i < nd; ++i) out_shape[i] = in_shape[static_cast<size_t>(perm[i])];
  std::vector<int64_t> in_strides(nd, 1), out_strides(nd, 1);
  for (int i = nd - 2; i >= 0; --i) in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
  for (int i = nd - 2; i >= 0; --i) out_strides[i] = out_strides[i + 1] * out_shape[i + 1];
  int64_t total = 1;
  for (int64_t d : in_shape) total *= d;
  std::vector<int64_t> idx(nd, 0);
  for (int64_t lin = 0; lin < total; ++lin) {
    int64_t rem = lin;
    int64_t in_off = 0;
    for (int i = 0; i < nd; ++i) {
      idx[i] = rem / in_strides[i];
      rem %= in_strides[i];
      in_off += idx[i] * in_strides[i];
    }
    int64_t out_off = 0;
    for (int i = 0; i < nd; ++i) out_off += idx[static_cast<size_t>(perm[i])] * out_strides[i];
    fn(in_off, out_off);
  }
}
}  // namespace detail

template <typename S>
Tensor<S> permute(const Tensor<S>& x, std::vector<int> perm) {
  const int nd = x.ndim();
  if (static_cast<int>(perm.size()) != nd) {
    throw ShapeError("permute: order size does not match tensor rank " + shape_str(x.shape()));
  }
  std::vector<int64_t> out_shape(static_cast<size_t>(nd));
  for (int i = 0; i < nd; ++i) out_shape[static_cast<size_t>(i)] = x.dim(perm[static_cast<size_t>(i)]);
  Tensor<S> out = Tensor<S>::zeros(out_shape);
  const S* px = x.data();
  S* po = out.data();
  detail::permute_walk<S>(x.shape(), perm, [&](int64_t in_off, int64_t out_off) {
    po[out_off] = px[in_off];
  });
  if (detail::tracking<S>({&x})) {
    detail::track(out, [x, out, perm] {
      const std::vector<S>& g = out.node()->grad;
      auto& gx = const_cast<Tensor<S>&>(x).grad();
      detail::permute_walk<S>(x.shape(), perm, [&](int64_t in_off, int64_t out_off) {
        gx[static_cast<size_t>(in_off)] += g[static_cast<size_t>(out_off)];
      });
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

namespace detail {
template <typename S>
inline int64_t matmul_batches(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (a.ndim() != b.ndim() || a.ndim() < 2) {
    throw ShapeError(std::string(op) + ": rank mismatch: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  int64_t batch = 1;
  for (int i = 0; i + 2 < a.ndim(); ++i) {
    if (a.dim(i) != b.dim(i)) {
      throw ShapeError(std::string(op) + ": batch dimensions mismatch: " + shape_str(a.shape()) +
                       " x " + shape_str(b.shape()));
    }
    batch *= a.dim(i);
  }
  return batch;
}
}  // namespace detail

// a[..., m, k] * b[..., k, n] -> [..., m, n]
template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  const int64_t batch = detail::matmul_batches(a, b, "matmul");
  const int64_t m = a.dim(a.ndim() - 2);
  const int64_t k = a.dim(a.ndim() - 1);
  const int64_t k2 = b.dim(b.ndim() - 2);
  const int64_t n = b.dim(b.ndim() - 1);
  if (k != k2) {
    throw ShapeError("matmul: inner dimensions mismatch: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  std::vector<int64_t> out_shape(a.shape().begin(), a.shape().end() - 2);
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor<S> out = Tensor<S>::zeros(out_shape);
  for (int64_t p = 0; p < batch; ++p) {
    detail::gemm_nn(a.data() + p * m * k, b.data() + p * k * n, out.data() + p * m * n, m, k, n,
                    false);
  }
  if (detail::tracking<S>({&a, &b})) {
    detail::track(out, [a, b, out, batch, m, k, n] {
      const S* g = out.node()->grad.data();
      if (a.requires_grad()) {
        auto& ga = const_cast<Tensor<S>&>(a).grad();
        for (int64_t p = 0; p < batch; ++p) {
          // dA = dC * B^T
          auto bt = detail::transposed(b.data() + p * k * n, k, n);  // [n x k]
          detail::gemm_nn(g + p * m * n, bt.data(), ga.data() + p * m * k, m, n, k, true);
        }
      }
      if (b.requires_grad()) {
        auto& gb = const_cast<Tensor<S>&>(b).grad();
        for (int64_t p = 0; p < batch; ++p) {
          // dB = A^T * dC
          auto at = detail::transposed(a.data() + p * m * k, m, k);  // [k x m]
          detail::gemm_nn(at.data(), g + p * m * n, gb.data() + p * k * n, k, m, n, true);
        }
      }
    });
  }
  return out;
}

// a[..., m, k] * b[..., n, k]^T -> [..., m, n]
template <typename S>
Tensor<S> matmul_nt(const Tensor<S>& a, const Tensor<S>& b) {
  const int64_t batch = detail::matmul_batches(a, b, "matmul_nt");
  const int64_t m = a.dim(a.ndim() - 2);
  const int64_t k = a.dim(a.ndim() - 1);
  const int64_t n = b.dim(b.ndim() - 2);
  const int64_t k2 = b.dim(b.ndim() - 1);
  if (k != k2) {
    throw ShapeError("matmul_nt: inner dimensions mismatch: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  std::vector<int64_t> out_shape(a.shape().begin(), a.shape().end() - 2);
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor<S> out = Tensor<S>::zeros(out_shape);
  for (int64_t p = 0; p < batch; ++p) {
    auto bt = detail::transposed(b.data() + p * n * k, n, k);  // [k x n]
    detail::gemm_nn(a.data() + p * m * k, bt.data(), out.data() + p * m * n, m, k, n, false);
  }
  if (detail::tracking<S>({&a, &b})) {
    detail::track(out, [a, b, out, batch, m, k, n] {
      const S* g = out.node()->grad.data();
      if (a.requires_grad()) {
        auto& ga = const_cast<Tensor<S>&>(a).grad();
        for (int64_t p = 0; p < batch; ++p) {
          // dA = dC * B
          detail::gemm_nn(g + p * m * n, b.data() + p * n * k, ga.data() + p * m * k, m, n, k,
                          true);
        }
      }
      if (b.requires_grad()) {
        auto& gb = const_cast<Tensor<S>&>(b).grad();
        for (int64_t p = 0; p < batch; ++p) {
          // dB = dC^T * A
          auto gt = detail::transposed(g + p * m * n, m, n);  // [n x m]
          detail::gemm_nn(gt.data(), a.data() + p * m * k, gb.data() + p * n * k, n, m, k, true);
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// softmax / normalization / losses
// ---------------------------------------------------------------------------

// Max-subtracted softmax over the last dimension.
template <typename S>
Tensor<S> softmax_lastdim(const Tensor<S>& x) {
  if (x.ndim() < 1 || x.dim(x.ndim() - 1) < 1) {
    throw ShapeError("softmax_lastdim: need a non-empty last dimension, got " +
                     shape_str(x.shape()));
  }
  const int64_t c = x.dim(x.ndim() - 1);
  const int64_t rows = x.numel() / c;
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  const S* px = x.data();
  S* po = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const S* xr = px + r * c;
    S* orow = po + r * c;
    S mx = xr[0];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, xr[j]);
    S denom = S(0);
    for (int64_t j = 0; j < c; ++j) {
      orow[j] = std::exp(xr[j] - mx);
      denom += orow[j];
    }
    const S inv = S(1) / denom;
    for (int64_t j = 0; j < c; ++j) orow[j] *= inv;
  }
  if (detail::tracking<S>({&x})) {
    detail::track(out, [x, out, rows, c] {
      const std::vector<S>& g = out.node()->grad;
      auto& gx = const_cast<Tensor<S>&>(x).grad();
      const S* py = out.data();
      for (int64_t r = 0; r < rows; ++r) {
        const S* yr = py + r * c;
        const S* gr = g.data() + r * c;
        S dot = S(0);
        for (int64_t j = 0; j < c; ++j) dot += gr[j] * yr[j];
        for (int64_t j = 0; j < c; ++j) gx[static_cast<size_t>(r * c + j)] += yr[j] * (gr[j] - dot);
      }
    });
  }
  return out;
}

// Log-sum-exp over the last dimension of a 2D tensor: [R x C] -> [R].
template <typename S>
Tensor<S> logsumexp_lastdim(const Tensor<S>& x) {
  if (x.ndim() != 2) throw ShapeError("logsumexp_lastdim expects 2D, got " + shape_str(x.shape()));
  const int64_t rows = x.dim(0);
  const int64_t c = x.dim(1);
  Tensor<S> out = Tensor<S>::zeros({rows});
  const S* px = x.data();
  S* po = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const S* xr = px + r * c;
    S mx = xr[0];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, xr[j]);
    S acc = S(0);
    for (int64_t j = 0; j < c; ++j) acc += std::exp(xr[j] - mx);
    po[r] = mx + std::log(acc);
  }
  if (detail::tracking<S>({&x})) {
    detail::track(out, [x, out, rows, c] {
      const std::vector<S>& g = out.node()->grad;
      auto& gx = const_cast<Tensor<S>&>(x).grad();
      const S* px2 = x.data();
      const S* plse = out.data();
      for (int64_t r = 0; r < rows; ++r) {
        for (int64_t j = 0; j < c; ++j) {
          gx[static_cast<size_t>(r * c + j)] += g[static_cast<size_t>(r)] * std::exp(px2[r * c + j] - plse[r]);
        }
      }
    });
  }
  return out;
}

// Layer normalization over the last dimension with affine gain/bias.
template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias,
                     double eps = 1e-5) {
  const int64_t c = x.dim(x.ndim() - 1);
  if (gain.ndim() != 1 || bias.ndim() != 1 || gain.dim(0) != c || bias.dim(0) != c) {
    throw ShapeError("layer_norm: gain/bias must be [" + std::to_string(c) + "], got " +
                     shape_str(gain.shape()) + " and " + shape_str(bias.shape()));
  }
  const int64_t rows = x.numel() / c;
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  std::vector<S> xhat(static_cast<size_t>(x.numel()));
  std::vector<S> inv_std(static_cast<size_t>(rows));
  const S* px = x.data();
  const S* pg = gain.data();
  const S* pb = bias.data();
  S* po = out.data();
  const S se = static_cast<S>(eps);
  for (int64_t r = 0; r < rows; ++r) {
    const S* xr = px + r * c;
    S mean = S(0);
    for (int64_t j = 0; j < c; ++j) mean += xr[j];
    mean /= static_cast<S>(c);
    S var = S(0);
    for (int64_t j = 0; j < c; ++j) {
      const S d = xr[j] - mean;
      var += d * d;
    }
    var /= static_cast<S>(c);
    const S inv = S(1) / std::sqrt(var + se);
    inv_std[static_cast<size_t>(r)] = inv;
    for (int64_t j = 0; j < c; ++j) {
      const S h = (xr[j] - mean) * inv;
      xhat[static_cast<size_t>(r * c + j)] = h;
      po[r * c + j] = h * pg[j] + pb[j];
    }
  }
  if (detail::tracking<S>({&x, &gain, &bias})) {
    detail::track(out, [x, gain, bias, out, rows, c, xhat = std::move(xhat),
                        inv_std = std::move(inv_std)] {
      const std::vector<S>& g = out.node()->grad;
      const S* pg2 = gain.data();
      if (x.requires_grad()) {
        auto& gx = const_cast<Tensor<S>&>(x).grad();
        for (int64_t r = 0; r < rows; ++r) {
          const S* gr = g.data() + r * c;
          const S* hr = xhat.data() + r * c;
          S sum_dh = S(0), sum_dh_h = S(0);
          for (int64_t j = 0; j < c; ++j) {
            const S dh = gr[j] * pg2[j];
            sum_dh += dh;
            sum_dh_h += dh * hr[j];
          }
          const S invc = S(1) / static_cast<S>(c);
          const S inv = inv_std[static_cast<size_t>(r)];
          for (int64_t j = 0; j < c; ++j) {
            const S dh = gr[j] * pg2[j];
            gx[static_cast<size_t>(r * c + j)] +=
                inv * (dh - sum_dh * invc - hr[j] * sum_dh_h * invc);
          }
        }
      }
      if (gain.requires_grad()) {
        auto& gg = const_cast<Tensor<S>&>(gain).grad();
        for (int64_t r = 0; r < rows; ++r) {
          for (int64_t j = 0; j < c; ++j) gg[static_cast<size_t>(j)] += g[static_cast<size_t>(r * c + j)] * xhat[static_cast<size_t>(r * c + j)];
        }
      }
      if (bias.requires_grad()) {
        auto& gb = const_cast<Tensor<S>&>(bias).grad();
        for (int64_t r = 0; r < rows; ++r) {
          for (int64_t j = 0; j < c; ++j) gb[static_cast<size_t>(j)] += g[static_cast<size_t>(r * c + j)];
        }
      }
    });
  }
  return out;
}

// Mean next-token negative log-likelihood. logits is [B x T x V] (or [R x V]);
// targets covers the first n_positions of every sequence, n_positions <= T.
template <typename S>
Tensor<S> cross_entropy_mean(const Tensor<S>& logits, std::span<const int32_t> targets,
                             int64_t n_positions = -1) {
  int64_t bsz, tlen, vocab;
  if (logits.ndim() == 3) {
    bsz = logits.dim(0);
    tlen = logits.dim(1);
    vocab = logits.dim(2);
  } else if (logits.ndim() == 2) {
    bsz = 1;
    tlen = logits.dim(0);
    vocab = logits.dim(1);
  } else {
    throw ShapeError("cross_entropy_mean: logits must be 2D or 3D, got " +
                     shape_str(logits.shape()));
  }
  if (n_positions < 0) n_positions = tlen;
  if (n_positions > tlen || n_positions < 1) {
    throw ShapeError("cross_entropy_mean: n_positions " + std::to_string(n_positions) +
                     " out of range for T=" + std::to_string(tlen));
  }
  const int64_t count = bsz * n_positions;
  if (static_cast<int64_t>(targets.size()) != count) {
    throw ShapeError("cross_entropy_mean: expected " + std::to_string(count) + " targets, got " +
                     std::to_string(targets.size()));
  }
  std::vector<int32_t> tgt(targets.begin(), targets.end());
  for (int32_t t : tgt) {
    if (t < 0 || t >= vocab) {
      throw IndexError("cross_entropy_mean: target " + std::to_string(t) +
                       " outside vocabulary of size " + std::to_string(vocab));
    }
  }
  const S* pl = logits.data();
  S total = S(0);
  for (int64_t b = 0; b < bsz; ++b) {
    for (int64_t t = 0; t < n_positions; ++t) {
      const S* row = pl + (b * tlen + t) * vocab;
      S mx = row[0];
      for (int64_t v = 1; v < vocab; ++v) mx = std::max(mx, row[v]);
      S acc = S(0);
      for (int64_t v = 0; v < vocab; ++v) acc += std::exp(row[v] - mx);
      const S lse = mx + std::log(acc);
      total += lse - row[tgt[static_cast<size_t>(b * n_positions + t)]];
    }
  }
  Tensor<S> out = Tensor<S>::scalar(total / static_cast<S>(count));
  if (detail::tracking<S>({&logits})) {
    detail::track(out, [logits, out, tgt = std::move(tgt), bsz, tlen, vocab, n_positions, count] {
      const S gscale = out.node()->grad[0] / static_cast<S>(count);
      auto& gl = const_cast<Tensor<S>&>(logits).grad();
      const S* pl2 = logits.data();
      for (int64_t b = 0; b < bsz; ++b) {
        for (int64_t t = 0; t < n_positions; ++t) {
          const int64_t base = (b * tlen + t) * vocab;
          const S* row = pl2 + base;
          S mx = row[0];
          for (int64_t v = 1; v < vocab; ++v) mx = std::max(mx, row[v]);
          S acc = S(0);
          for (int64_t v = 0; v < vocab; ++v) acc += std::exp(row[v] - mx);
          const S inv = S(1) / acc;
          const int32_t target = tgt[static_cast<size_t>(b * n_positions + t)];
          for (int64_t v = 0; v < vocab; ++v) {
            S p = std::exp(row[v] - mx) * inv;
            if (v == target) p -= S(1);
            gl[static_cast<size_t>(base + v)] += gscale * p;
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// masking / indexing
// ---------------------------------------------------------------------------

// Sets scores[..., i, j] to a large negative constant for j > i.
template <typename S>
Tensor<S> causal_mask(const Tensor<S>& scores) {
  if (scores.ndim() < 2) {
    throw ShapeError("causal_mask expects >= 2D, got " + shape_str(scores.shape()));
  }
  const int64_t tq = scores.dim(scores.ndim() - 2);
  const int64_t tk = scores.dim(scores.ndim() - 1);
  const int64_t mats = scores.numel() / (tq * tk);
  static const S kNeg = static_cast<S>(-1e30);
  Tensor<S> out = Tensor<S>::from_vector(scores.shape(), scores.values());
  S* po = out.data();
  for (int64_t p = 0; p < mats; ++p) {
    for (int64_t i = 0; i < tq; ++i) {
      S* row = po + (p * tq + i) * tk;
      for (int64_t j = i + 1; j < tk; ++j) row[j] = kNeg;
    }
  }
  if (detail::tracking<S>({&scores})) {
    detail::track(out, [scores, out, mats, tq, tk] {
      const std::vector<S>& g = out.node()->grad;
      auto& gs = const_cast<Tensor<S>&>(scores).grad();
      for (int64_t p = 0; p < mats; ++p) {
        for (int64_t i = 0; i < tq; ++i) {
          const int64_t base = (p * tq + i) * tk;
          const int64_t lim = std::min(i + 1, tk);
          for (int64_t j = 0; j < lim; ++j) gs[static_cast<size_t>(base + j)] += g[static_cast<size_t>(base + j)];
        }
      }
    });
  }
  return out;
}

// Row lookup: out[r, :] = table[ids[r], :]
template <typename S>
Tensor<S> embedding_rows(const Tensor<S>& table, std::span<const int32_t> ids) {
  if (table.ndim() != 2) {
    throw ShapeError("embedding_rows: table must be 2D, got " + shape_str(table.shape()));
  }
  const int64_t v = table.dim(0);
  const int64_t d = table.dim(1);
  const int64_t n = static_cast<int64_t>(ids.size());
  std::vector<int32_t> idx(ids.begin(), ids.end());
  for (int32_t id : idx) {
    if (id < 0 || id >= v) {
      throw IndexError("embedding_rows: id " + std::to_string(id) + " outside table of size " +
                       std::to_string(v));
    }
  }
  Tensor<S> out = Tensor<S>::zeros({n, d});
  const S* pt = table.data();
  S* po = out.data();
  for (int64_t r = 0; r < n; ++r) {
    std::copy(pt + idx[static_cast<size_t>(r)] * d, pt + (idx[static_cast<size_t>(r)] + 1) * d, po + r * d);
  }
  if (detail::tracking<S>({&table})) {
    detail::track(out, [table, out, idx = std::move(idx), n, d] {
      const std::vector<S>& g = out.node()->grad;
      auto& gt = const_cast<Tensor<S>&>(table).grad();
      for (int64_t r = 0; r < n; ++r) {
        const int64_t dst = static_cast<int64_t>(idx[static_cast<size_t>(r)]) * d;
        for (int64_t j = 0; j < d; ++j) gt[static_cast<size_t>(dst + j)] += g[static_cast<size_t>(r * d + j)];
      }
    });
  }
  return out;
}

// gather_rows is embedding_rows under a dispatch-oriented name.
template <typename S>
Tensor<S> gather_rows(const Tensor<S>& x, std::span<const int32_t> rows) {
  return embedding_rows(x, rows);
}

// out[r] = x[rows[r], cols[r]]
template <typename S>
Tensor<S> gather_entries(const Tensor<S>& x, std::span<const int32_t> rows,
                         std::span<const int32_t> cols) {
  if (x.ndim() != 2) throw ShapeError("gather_entries expects 2D, got " + shape_str(x.shape()));
  if (rows.size() != cols.size()) {
    throw ShapeError("gather_entries: row/col index lengths differ");
  }
  const int64_t nr = x.dim(0);
  const int64_t nc = x.dim(1);
  const int64_t n = static_cast<int64_t>(rows.size());
  if (n == 0) throw ContractError("gather_entries: empty index list");
  std::vector<int32_t> ri(rows.begin(), rows.end());
  std::vector<int32_t> ci(cols.begin(), cols.end());
  for (int64_t i = 0; i < n; ++i) {
    if (ri[static_cast<size_t>(i)] < 0 || ri[static_cast<size_t>(i)] >= nr || ci[static_cast<size_t>(i)] < 0 ||
        ci[static_cast<size_t>(i)] >= nc) {
      throw IndexError("gather_entries: index out of range for " + shape_str(x.shape()));
    }
  }
  Tensor<S> out = Tensor<S>::zeros({n});
  S* po = out.data();
  const S* px = x.data();
  for (int64_t i = 0; i < n; ++i) po[i] = px[ri[static_cast<size_t>(i)] * nc + ci[static_cast<size_t>(i)]];
  if (detail::tracking<S>({&x})) {
    detail::track(out, [x, out, ri = std::move(ri), ci = std::move(ci), n, nc] {
      const std::vector<S>& g = out.node()->grad;
      auto& gx = const_cast<Tensor<S>&>(x).grad();
      for (int64_t i = 0; i < n; ++i) {
        gx[static_cast<size_t>(ri[static_cast<size_t>(i)] * nc + ci[static_cast<size_t>(i)])] += g[static_cast<size_t>(i)];
      }
    });
  }
  return out;
}

// y = zeros[n_rows x cols]; for each group in order, y[idx[r], :] += src[r, :].
template <typename S>
struct ScatterGroup {
  std::vector<int32_t> rows;
  Tensor<S> src;
};

template <typename S>
Tensor<S> scatter_add_groups(int64_t n_rows, int64_t cols,
                             const std::vector<ScatterGroup<S>>& groups) {
  Tensor<S> out = Tensor<S>::zeros({n_rows, cols});
  S* po = out.data();
  bool needs_grad = false;
  for (const auto& grp : groups) {
    if (grp.src.ndim() != 2 || grp.src.dim(1) != cols ||
        grp.src.dim(0) != static_cast<int64_t>(grp.rows.size())) {
      throw ShapeError("scatter_add_groups: group source " + shape_str(grp.src.shape()) +
                       " does not match " + std::to_string(grp.rows.size()) + " x " +
                       std::to_string(cols));
    }
    for (int32_t r : grp.rows) {
      if (r < 0 || r >= n_rows) {
        throw IndexError("scatter_add_groups: row " + std::to_string(r) + " outside [0, " +
                         std::to_string(n_rows) + ")");
      }
    }
    const S* ps = grp.src.data();
    for (size_t r = 0; r < grp.rows.size(); ++r) {
      S* dst = po + static_cast<int64_t>(grp.rows[r]) * cols;
      const S* srow = ps + static_cast<int64_t>(r) * cols;
      for (int64_t j = 0; j < cols; ++j) dst[j] += srow[j];
    }
    needs_grad = needs_grad || grp.src.requires_grad();
  }
  if (Tape<S>::current() && needs_grad) {
    detail::track(out, [out, groups, cols] {
      const std::vector<S>& g = out.node()->grad;
      for (const auto& grp : groups) {
        if (!grp.src.requires_grad()) continue;
        auto& gs = const_cast<Tensor<S>&>(grp.src).grad();
        for (size_t r = 0; r < grp.rows.size(); ++r) {
          const S* grow = g.data() + static_cast<int64_t>(grp.rows[r]) * cols;
          for (int64_t j = 0; j < cols; ++j) gs[static_cast<size_t>(static_cast<int64_t>(r) * cols + j)] += grow[j];
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// parameter slicing (nested expert widths)
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> slice_cols(const Tensor<S>& w, int64_t m) {
  if (w.ndim() != 2 || m < 1 || m > w.dim(1)) {
    throw ShapeError("slice_cols: cannot take first " + std::to_string(m) + " columns of " +
                     shape_str(w.shape()));
  }
  const int64_t rows = w.dim(0);
  const int64_t cols = w.dim(1);
  Tensor<S> out = Tensor<S>::zeros({rows, m});
  const S* pw = w.data();
  S* po = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    std::copy(pw + r * cols, pw + r * cols + m, po + r * m);
  }
  if (detail::tracking<S>({&w})) {
    detail::track(out, [w, out, rows, cols, m] {
      const std::vector<S>& g = out.node()->grad;
      auto& gw = const_cast<Tensor<S>&>(w).grad();
      for (int64_t r = 0; r < rows; ++r) {
        for (int64_t j = 0; j < m; ++j) gw[static_cast<size_t>(r * cols + j)] += g[static_cast<size_t>(r * m + j)];
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> slice_rows(const Tensor<S>& w, int64_t m) {
  if (w.ndim() != 2 || m < 1 || m > w.dim(0)) {
    throw ShapeError("slice_rows: cannot take first " + std::to_string(m) + " rows of " +
                     shape_str(w.shape()));
  }
  const int64_t cols = w.dim(1);
  Tensor<S> out = Tensor<S>::zeros({m, cols});
  std::copy(w.data(), w.data() + m * cols, out.data());
  if (detail::tracking<S>({&w})) {
    detail::track(out, [w, out, m, cols] {
      const std::vector<S>& g = out.node()->grad;
      auto& gw = const_cast<Tensor<S>&>(w).grad();
      for (int64_t i = 0; i < m * cols; ++i) gw[static_cast<size_t>(i)] += g[static_cast<size_t>(i)];
    });
  }
  return out;
}

template <typename S>
Tensor<S> slice_prefix(const Tensor<S>& v, int64_t m) {
  if (v.ndim() != 1 || m < 1 || m > v.dim(0)) {
    throw ShapeError("slice_prefix: cannot take first " + std::to_string(m) + " entries of " +
                     shape_str(v.shape()));
  }
  Tensor<S> out = Tensor<S>::zeros({m});
  std::copy(v.data(), v.data() + m, out.data());
  if (detail::tracking<S>({&v})) {
    detail::track(out, [v, out, m] {
      const std::vector<S>& g = out.node()->grad;
      auto& gv = const_cast<Tensor<S>&>(v).grad();
      for (int64_t i = 0; i < m; ++i) gv[static_cast<size_t>(i)] += g[static_cast<size_t>(i)];
    });
  }
  return out;
}

}  // namespace mose
