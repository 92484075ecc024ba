#pragma once

// Differentiable primitives. Every op checks its shape contract, computes
// the forward value eagerly and, when recorded, registers a closure that
// accumulates vector-Jacobian products into its inputs.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>

#include "dgn/tensor.hpp"

namespace dgn {

namespace detail {

// Per-element source offsets for a numpy-style broadcast of a and b.
struct BroadcastPlan {
  Shape out;
  std::vector<std::size_t> a_off;
  std::vector<std::size_t> b_off;
};

inline BroadcastPlan plan_broadcast(const std::string& op, const Shape& sa, const Shape& sb) {
  const std::size_t nd = std::max(sa.size(), sb.size());
  Shape out(nd);
  std::vector<std::size_t> ea(nd, 1), eb(nd, 1);
  for (std::size_t i = 0; i < nd; ++i) {
    const std::size_t da = i + sa.size() >= nd ? sa[i + sa.size() - nd] : 1;
    const std::size_t db = i + sb.size() >= nd ? sb[i + sb.size() - nd] : 1;
    if (da != db && da != 1 && db != 1) {
      throw DimensionError(op + ": cannot broadcast " + to_string(sa) + " with " + to_string(sb));
    }
    out[i] = std::max(da, db);
    ea[i] = da;
    eb[i] = db;
  }
  // Row-major strides with zero stride on broadcast axes.
  std::vector<std::size_t> stra(nd, 0), strb(nd, 0);
  std::size_t accA = 1, accB = 1;
  for (std::size_t i = nd; i-- > 0;) {
    stra[i] = ea[i] == 1 ? 0 : accA;
    strb[i] = eb[i] == 1 ? 0 : accB;
    accA *= ea[i];
    accB *= eb[i];
  }
  BroadcastPlan plan;
  plan.out = out;
  const std::size_t n = numel(out);
  plan.a_off.resize(n);
  plan.b_off.resize(n);
  std::vector<std::size_t> idx(nd, 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t i = 0; i < n; ++i) {
    plan.a_off[i] = oa;
    plan.b_off[i] = ob;
    for (std::size_t d = nd; d-- > 0;) {
      ++idx[d];
      oa += stra[d];
      ob += strb[d];
      if (idx[d] < out[d]) break;
      oa -= stra[d] * out[d];
      ob -= strb[d] * out[d];
      idx[d] = 0;
    }
  }
  return plan;
}

enum class BinaryKind { Add, Sub, Mul };

inline Tensor binary(const Tensor& a, const Tensor& b, BinaryKind kind) {
  const char* name = kind == BinaryKind::Add ? "add" : kind == BinaryKind::Sub ? "sub" : "mul";
  const auto& A = a.values();
  const auto& B = b.values();
  if (a.shape() == b.shape()) {
    std::vector<Real> out(A.size());
    for (std::size_t i = 0; i < A.size(); ++i) {
      out[i] = kind == BinaryKind::Add ? A[i] + B[i] : kind == BinaryKind::Sub ? A[i] - B[i] : A[i] * B[i];
    }
    return make_result(name, a.shape(), std::move(out), {a, b}, [kind](Node& n) {
      const auto& g = n.grad;
      const auto& av = n.parents[0]->data;
      const auto& bv = n.parents[1]->data;
      if (Real* ga = parent_grad(n, 0)) {
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += kind == BinaryKind::Mul ? g[i] * bv[i] : g[i];
      }
      if (Real* gb = parent_grad(n, 1)) {
        for (std::size_t i = 0; i < g.size(); ++i) {
          gb[i] += kind == BinaryKind::Mul ? g[i] * av[i] : kind == BinaryKind::Sub ? -g[i] : g[i];
        }
      }
    });
  }
  auto plan = std::make_shared<BroadcastPlan>(plan_broadcast(name, a.shape(), b.shape()));
  std::vector<Real> out(plan->a_off.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const Real x = A[plan->a_off[i]];
    const Real y = B[plan->b_off[i]];
    out[i] = kind == BinaryKind::Add ? x + y : kind == BinaryKind::Sub ? x - y : x * y;
  }
  return make_result(name, plan->out, std::move(out), {a, b}, [kind, plan](Node& n) {
    const auto& g = n.grad;
    const auto& av = n.parents[0]->data;
    const auto& bv = n.parents[1]->data;
    if (Real* ga = parent_grad(n, 0)) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        ga[plan->a_off[i]] += kind == BinaryKind::Mul ? g[i] * bv[plan->b_off[i]] : g[i];
      }
    }
    if (Real* gb = parent_grad(n, 1)) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        gb[plan->b_off[i]] += kind == BinaryKind::Mul   ? g[i] * av[plan->a_off[i]]
                              : kind == BinaryKind::Sub ? -g[i]
                                                        : g[i];
      }
    }
  });
}

// C[M,N] += A[M,K] * B[K,N], rows split across threads.
inline void gemm_acc(std::size_t M, std::size_t K, std::size_t N, const Real* A, const Real* B, Real* C) {
  parallel_for(M, 16, [=](std::size_t r0, std::size_t r1) {
    for (std::size_t i = r0; i < r1; ++i) {
      Real* c = C + i * N;
      const Real* a = A + i * K;
      for (std::size_t k = 0; k < K; ++k) {
        const Real aik = a[k];
        const Real* b = B + k * N;
        for (std::size_t j = 0; j < N; ++j) c[j] += aik * b[j];
      }
    }
  });
}

// dA[M,K] += dC[M,N] * B[K,N]^T
inline void gemm_grad_a(std::size_t M, std::size_t K, std::size_t N, const Real* dC, const Real* B, Real* dA) {
  parallel_for(M, 16, [=](std::size_t r0, std::size_t r1) {
    for (std::size_t i = r0; i < r1; ++i) {
      const Real* g = dC + i * N;
      for (std::size_t k = 0; k < K; ++k) {
        const Real* b = B + k * N;
        Real s = 0;
        for (std::size_t j = 0; j < N; ++j) s += g[j] * b[j];
        dA[i * K + k] += s;
      }
    }
  });
}

// dB[K,N] += A[M,K]^T * dC[M,N]
inline void gemm_grad_b(std::size_t M, std::size_t K, std::size_t N, const Real* A, const Real* dC, Real* dB) {
  parallel_for(K, 16, [=](std::size_t k0, std::size_t k1) {
    for (std::size_t i = 0; i < M; ++i) {
      const Real* g = dC + i * N;
      for (std::size_t k = k0; k < k1; ++k) {
        const Real aik = A[i * K + k];
        Real* d = dB + k * N;
        for (std::size_t j = 0; j < N; ++j) d[j] += aik * g[j];
      }
    }
  });
}

inline std::size_t normalize_axis(const std::string& op, long axis, std::size_t ndim) {
  const long nd = static_cast<long>(ndim);
  if (axis < -nd || axis >= nd) {
    throw DimensionError(op + ": axis " + std::to_string(axis) + " out of range for rank " + std::to_string(ndim));
  }
  return static_cast<std::size_t>(axis < 0 ? axis + nd : axis);
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) { return detail::binary(a, b, detail::BinaryKind::Add); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return detail::binary(a, b, detail::BinaryKind::Sub); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return detail::binary(a, b, detail::BinaryKind::Mul); }
inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

inline Tensor scale(const Tensor& x, Real s) {
  std::vector<Real> out(x.values());
  for (auto& v : out) v *= s;
  return detail::make_result("scale", x.shape(), std::move(out), {x}, [s](detail::Node& n) {
    Real* gx = detail::parent_grad(n, 0);
    for (std::size_t i = 0; i < n.grad.size(); ++i) gx[i] += s * n.grad[i];
  });
}

/// [.., M, K] x [.., K, N] -> [.., M, N]; leading (batch) axes broadcast.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2 || sa[sa.size() - 1] != sb[sb.size() - 2]) {
    throw DimensionError("matmul: incompatible shapes " + to_string(sa) + " and " + to_string(sb));
  }
  const std::size_t M = sa[sa.size() - 2], K = sa.back(), N = sb.back();
  const Shape ba(sa.begin(), sa.end() - 2);
  const Shape bb(sb.begin(), sb.end() - 2);

  // Batch offsets (in matrices) for each output batch.
  std::vector<std::size_t> a_batch, b_batch;
  Shape out_shape;
  if (bb.empty()) {
    // Fold all of a's batch axes into rows.
    a_batch = {0};
    b_batch = {0};
    out_shape = sa;
    out_shape.back() = N;
  } else {
    Shape ba1 = ba.empty() ? Shape{1} : ba;
    auto plan = detail::plan_broadcast("matmul", ba1, bb);
    a_batch = plan.a_off;
    b_batch = plan.b_off;
    out_shape = plan.out;
    out_shape.push_back(M);
    out_shape.push_back(N);
  }
  const std::size_t rows = bb.empty() ? a.numel() / K : M;
  const std::size_t batches = a_batch.size();
  std::vector<Real> out(batches * rows * N, Real(0));
  const Real* A = a.values().data();
  const Real* B = b.values().data();
  for (std::size_t t = 0; t < batches; ++t) {
    detail::gemm_acc(rows, K, N, A + a_batch[t] * rows * K, B + b_batch[t] * K * N, out.data() + t * rows * N);
  }
  add_macs(static_cast<std::uint64_t>(batches) * rows * K * N);
  return detail::make_result("matmul", out_shape, std::move(out), {a, b},
                             [rows, K, N, a_batch, b_batch](detail::Node& n) {
                               const Real* A = n.parents[0]->data.data();
                               const Real* B = n.parents[1]->data.data();
                               Real* gA = detail::parent_grad(n, 0);
                               Real* gB = detail::parent_grad(n, 1);
                               for (std::size_t t = 0; t < a_batch.size(); ++t) {
                                 const Real* g = n.grad.data() + t * rows * N;
                                 if (gA) detail::gemm_grad_a(rows, K, N, g, B + b_batch[t] * K * N, gA + a_batch[t] * rows * K);
                                 if (gB) detail::gemm_grad_b(rows, K, N, A + a_batch[t] * rows * K, g, gB + b_batch[t] * K * N);
                               }
                             });
}

/// x W + b with W [in, out] and optional b [out].
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias = Tensor()) {
  Tensor y = matmul(x, weight);
  return bias.defined() ? add(y, bias) : y;
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  return detail::make_result("reshape", std::move(shape), x.values(), {x}, [](detail::Node& n) {
    Real* gx = detail::parent_grad(n, 0);
    for (std::size_t i = 0; i < n.grad.size(); ++i) gx[i] += n.grad[i];
  });
}

/// Generic axis permutation: out axis i is input axis perm[i].
inline Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm) {
  const Shape& s = x.shape();
  const std::size_t nd = s.size();
  if (perm.size() != nd) throw DimensionError("permute: permutation rank mismatch for " + to_string(s));
  std::vector<bool> seen(nd, false);
  for (auto p : perm) {
    if (p >= nd || seen[p]) throw DimensionError("permute: invalid permutation for " + to_string(s));
    seen[p] = true;
  }
  std::vector<std::size_t> in_stride(nd, 1);
  for (std::size_t i = nd - 1; i-- > 0;) in_stride[i] = in_stride[i + 1] * s[i + 1];
  Shape out_shape(nd);
  std::vector<std::size_t> stride(nd);
  for (std::size_t i = 0; i < nd; ++i) {
    out_shape[i] = s[perm[i]];
    stride[i] = in_stride[perm[i]];
  }
  const std::size_t n = x.numel();
  auto src = std::make_shared<std::vector<std::size_t>>(n);
  std::vector<std::size_t> idx(nd, 0);
  std::size_t off = 0;
  for (std::size_t i = 0; i < n; ++i) {
    (*src)[i] = off;
    for (std::size_t d = nd; d-- > 0;) {
      ++idx[d];
      off += stride[d];
      if (idx[d] < out_shape[d]) break;
      off -= stride[d] * out_shape[d];
      idx[d] = 0;
    }
  }
  std::vector<Real> out(n);
  const auto& X = x.values();
  for (std::size_t i = 0; i < n; ++i) out[i] = X[(*src)[i]];
  return detail::make_result("permute", out_shape, std::move(out), {x}, [src](detail::Node& n) {
    Real* gx = detail::parent_grad(n, 0);
    for (std::size_t i = 0; i < n.grad.size(); ++i) gx[(*src)[i]] += n.grad[i];
  });
}

/// Swaps the last two axes.
inline Tensor transpose(const Tensor& x) {
  if (x.dim() < 2) throw DimensionError("transpose: rank < 2 for " + to_string(x.shape()));
  std::vector<std::size_t> perm(x.dim());
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm[x.dim() - 1], perm[x.dim() - 2]);
  return permute(x, perm);
}

inline Tensor sum(const Tensor& x) {
  Real s = 0;
  for (Real v : x.values()) s += v;
  return detail::make_result("sum", {1}, {s}, {x}, [](detail::Node& n) {
    Real* gx = detail::parent_grad(n, 0);
    const Real g = n.grad[0];
    const std::size_t m = n.parents[0]->data.size();
    for (std::size_t i = 0; i < m; ++i) gx[i] += g;
  });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), Real(1) / static_cast<Real>(x.numel())); }

/// Mean over one axis; the axis is removed (rank-1 inputs give shape [1]).
inline Tensor mean(const Tensor& x, long axis_in) {
  const Shape& s = x.shape();
  const std::size_t axis = detail::normalize_axis("mean", axis_in, s.size());
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  Shape out_shape;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i != axis) out_shape.push_back(s[i]);
  }
  if (out_shape.empty()) out_shape = {1};
  std::vector<Real> out(outer * inner, Real(0));
  const auto& X = x.values();
  const Real inv = Real(1) / static_cast<Real>(len);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t l = 0; l < len; ++l) {
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += X[(o * len + l) * inner + i];
    }
  }
  for (auto& v : out) v *= inv;
  return detail::make_result("mean_axis", out_shape, std::move(out), {x},
                             [outer, inner, len, inv](detail::Node& n) {
                               Real* gx = detail::parent_grad(n, 0);
                               for (std::size_t o = 0; o < outer; ++o) {
                                 for (std::size_t l = 0; l < len; ++l) {
                                   for (std::size_t i = 0; i < inner; ++i) {
                                     gx[(o * len + l) * inner + i] += n.grad[o * inner + i] * inv;
                                   }
                                 }
                               }
                             });
}

/// Numerically stable softmax along an axis (max subtraction).
inline Tensor softmax(const Tensor& x, long axis_in) {
  const Shape& s = x.shape();
  const std::size_t axis = detail::normalize_axis("softmax", axis_in, s.size());
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  const auto& X = x.values();
  std::vector<Real> y(X.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * len * inner + i;
      Real mx = X[base];
      for (std::size_t l = 1; l < len; ++l) mx = std::max(mx, X[base + l * inner]);
      Real z = 0;
      for (std::size_t l = 0; l < len; ++l) {
        const Real e = std::exp(X[base + l * inner] - mx);
        y[base + l * inner] = e;
        z += e;
      }
      for (std::size_t l = 0; l < len; ++l) y[base + l * inner] /= z;
    }
  }
  return detail::make_result("softmax", s, std::move(y), {x}, [outer, inner, len](detail::Node& n) {
    Real* gx = detail::parent_grad(n, 0);
    const auto& Y = n.data;
    const auto& G = n.grad;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = o * len * inner + i;
        Real dot = 0;
        for (std::size_t l = 0; l < len; ++l) dot += G[base + l * inner] * Y[base + l * inner];
        for (std::size_t l = 0; l < len; ++l) {
          const std::size_t k = base + l * inner;
          gx[k] += Y[k] * (G[k] - dot);
        }
      }
    }
  });
}

/// Layer normalization over the last axis with population variance.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, Real eps = Real(1e-5)) {
  const Shape& s = x.shape();
  const std::size_t D = s.back();
  if (gain.numel() != D || bias.numel() != D) {
    throw DimensionError("layer_norm: gain/bias " + to_string(gain.shape()) + "/" + to_string(bias.shape()) +
                         " do not match last axis of " + to_string(s));
  }
  if (!(eps > 0)) throw DimensionError("layer_norm: eps must be positive");
  const std::size_t rows = x.numel() / D;
  const auto& X = x.values();
  const auto& Gm = gain.values();
  const auto& Bt = bias.values();
  auto xhat = std::make_shared<std::vector<Real>>(X.size());
  auto rstd = std::make_shared<std::vector<Real>>(rows);
  std::vector<Real> y(X.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* xr = X.data() + r * D;
    Real mu = 0;
    for (std::size_t d = 0; d < D; ++d) mu += xr[d];
    mu /= static_cast<Real>(D);
    Real var = 0;
    for (std::size_t d = 0; d < D; ++d) var += (xr[d] - mu) * (xr[d] - mu);
    var /= static_cast<Real>(D);
    const Real rs = Real(1) / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t d = 0; d < D; ++d) {
      const Real h = (xr[d] - mu) * rs;
      (*xhat)[r * D + d] = h;
      y[r * D + d] = h * Gm[d] + Bt[d];
    }
  }
  return detail::make_result("layer_norm", s, std::move(y), {x, gain, bias}, [rows, D, xhat, rstd](detail::Node& n) {
    const auto& G = n.grad;
    const auto& gain_v = n.parents[1]->data;
    Real* gx = detail::parent_grad(n, 0);
    Real* gg = detail::parent_grad(n, 1);
    Real* gb = detail::parent_grad(n, 2);
    const auto& H = *xhat;
    for (std::size_t r = 0; r < rows; ++r) {
      const Real* g = G.data() + r * D;
      const Real* h = H.data() + r * D;
      if (gg || gb) {
        for (std::size_t d = 0; d < D; ++d) {
          if (gg) gg[d] += g[d] * h[d];
          if (gb) gb[d] += g[d];
        }
      }
      if (gx) {
        Real m1 = 0, m2 = 0;
        for (std::size_t d = 0; d < D; ++d) {
          const Real dh = g[d] * gain_v[d];
          m1 += dh;
          m2 += dh * h[d];
        }
        m1 /= static_cast<Real>(D);
        m2 /= static_cast<Real>(D);
        const Real rs = (*rstd)[r];
        for (std::size_t d = 0; d < D; ++d) {
          const Real dh = g[d] * gain_v[d];
          gx[r * D + d] += rs * (dh - m1 - h[d] * m2);
        }
      }
    }
  });
}

/// Exact erf-based GELU: x * Phi(x).
inline Tensor gelu(const Tensor& x) {
  const auto& X = x.values();
  std::vector<Real> y(X.size());
  constexpr Real inv_sqrt2 = Real(1) / std::numbers::sqrt2_v<Real>;
  for (std::size_t i = 0; i < X.size(); ++i) y[i] = Real(0.5) * X[i] * (Real(1) + std::erf(X[i] * inv_sqrt2));
  return detail::make_result("gelu", x.shape(), std::move(y), {x}, [](detail::Node& n) {
    Real* gx = detail::parent_grad(n, 0);
    const auto& X = n.parents[0]->data;
    constexpr Real inv_sqrt2 = Real(1) / std::numbers::sqrt2_v<Real>;
    constexpr Real inv_sqrt2pi = std::numbers::inv_sqrtpi_v<Real> * inv_sqrt2;
    for (std::size_t i = 0; i < X.size(); ++i) {
      const Real v = X[i];
      const Real cdf = Real(0.5) * (Real(1) + std::erf(v * inv_sqrt2));
      const Real pdf = inv_sqrt2pi * std::exp(Real(-0.5) * v * v);
      gx[i] += n.grad[i] * (cdf + v * pdf);
    }
  });
}

inline Real sigmoid_scalar(Real v) {
  if (v >= 0) return Real(1) / (Real(1) + std::exp(-v));
  const Real e = std::exp(v);
  return e / (Real(1) + e);
}

inline Tensor sigmoid(const Tensor& x) {
  const auto& X = x.values();
  std::vector<Real> y(X.size());
  for (std::size_t i = 0; i < X.size(); ++i) y[i] = sigmoid_scalar(X[i]);
  return detail::make_result("sigmoid", x.shape(), std::move(y), {x}, [](detail::Node& n) {
    Real* gx = detail::parent_grad(n, 0);
    for (std::size_t i = 0; i < n.data.size(); ++i) gx[i] += n.grad[i] * n.data[i] * (Real(1) - n.data[i]);
  });
}

/// Transposed convolution with kernel size == stride (non-overlapping):
/// x [C_in, H, W], kernel [C_in, C_out, k, k] -> [C_out, H*k, W*k].
inline Tensor conv_transpose2d(const Tensor& x, const Tensor& kernel, std::size_t stride) {
  const Shape& sx = x.shape();
  const Shape& sk = kernel.shape();
  if (sx.size() != 3 || sk.size() != 4) {
    throw DimensionError("conv_transpose2d: expected x [C,H,W] and kernel [Cin,Cout,k,k], got " + to_string(sx) +
                         " and " + to_string(sk));
  }
  if (sk[0] != sx[0]) {
    throw DimensionError("conv_transpose2d: input channels " + std::to_string(sx[0]) + " != kernel channels " +
                         std::to_string(sk[0]));
  }
  if (sk[2] != sk[3] || sk[2] != stride || stride == 0) {
    throw DimensionError("conv_transpose2d: kernel size must equal stride, got kernel " + to_string(sk) +
                         " stride " + std::to_string(stride));
  }
  const std::size_t Ci = sx[0], H = sx[1], W = sx[2], Co = sk[1], k = stride;
  const std::size_t OH = H * k, OW = W * k;
  const auto& X = x.values();
  const auto& Kw = kernel.values();
  std::vector<Real> out(Co * OH * OW, Real(0));
  parallel_for(Co, 1, [&](std::size_t c0, std::size_t c1) {
    for (std::size_t co = c0; co < c1; ++co) {
      Real* o = out.data() + co * OH * OW;
      for (std::size_t ci = 0; ci < Ci; ++ci) {
        const Real* xi = X.data() + ci * H * W;
        for (std::size_t ky = 0; ky < k; ++ky) {
          for (std::size_t kx = 0; kx < k; ++kx) {
            const Real w = Kw[((ci * Co + co) * k + ky) * k + kx];
            for (std::size_t y = 0; y < H; ++y) {
              Real* orow = o + (y * k + ky) * OW + kx;
              const Real* xrow = xi + y * W;
              for (std::size_t xx = 0; xx < W; ++xx) orow[xx * k] += w * xrow[xx];
            }
          }
        }
      }
    }
  });
  add_macs(static_cast<std::uint64_t>(Ci) * Co * k * k * H * W);
  return detail::make_result("conv_transpose2d", {Co, OH, OW}, std::move(out), {x, kernel},
                             [Ci, H, W, Co, k, OH, OW](detail::Node& n) {
                               const auto& X = n.parents[0]->data;
                               const auto& Kw = n.parents[1]->data;
                               const auto& G = n.grad;
                               if (Real* gx = detail::parent_grad(n, 0)) {
                                 for (std::size_t ci = 0; ci < Ci; ++ci) {
                                   for (std::size_t co = 0; co < Co; ++co) {
                                     const Real* g = G.data() + co * OH * OW;
                                     for (std::size_t ky = 0; ky < k; ++ky) {
                                       for (std::size_t kx = 0; kx < k; ++kx) {
                                         const Real w = Kw[((ci * Co + co) * k + ky) * k + kx];
                                         for (std::size_t y = 0; y < H; ++y) {
                                           const Real* grow = g + (y * k + ky) * OW + kx;
                                           Real* gxr = gx + ci * H * W + y * W;
                                           for (std::size_t xx = 0; xx < W; ++xx) gxr[xx] += w * grow[xx * k];
                                         }
                                       }
                                     }
                                   }
                                 }
                               }
                               if (Real* gk = detail::parent_grad(n, 1)) {
                                 for (std::size_t ci = 0; ci < Ci; ++ci) {
                                   const Real* xi = X.data() + ci * H * W;
                                   for (std::size_t co = 0; co < Co; ++co) {
                                     const Real* g = G.data() + co * OH * OW;
                                     for (std::size_t ky = 0; ky < k; ++ky) {
                                       for (std::size_t kx = 0; kx < k; ++kx) {
                                         Real s = 0;
                                         for (std::size_t y = 0; y < H; ++y) {
                                           const Real* grow = g + (y * k + ky) * OW + kx;
                                           const Real* xrow = xi + y * W;
                                           for (std::size_t xx = 0; xx < W; ++xx) s += xrow[xx] * grow[xx * k];
                                         }
                                         gk[((ci * Co + co) * k + ky) * k + kx] += s;
                                       }
                                     }
                                   }
                                 }
                               }
                             });
}

namespace detail {
// Source taps for bilinear 2x upsampling with half-pixel centers.
struct UpsampleTap {
  std::size_t i0, i1;
  Real w1;
};
inline std::vector<UpsampleTap> upsample_taps(std::size_t in) {
  std::vector<UpsampleTap> taps(2 * in);
  for (std::size_t o = 0; o < 2 * in; ++o) {
    Real src = (static_cast<Real>(o) + Real(0.5)) * Real(0.5) - Real(0.5);
    if (src < 0) src = 0;
    const auto i0 = static_cast<std::size_t>(src);
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    taps[o] = {i0, i1, src - static_cast<Real>(i0)};
  }
  return taps;
}
}  // namespace detail

/// Bilinear 2x upsampling of [C, H, W], corner alignment disabled.
inline Tensor upsample2x(const Tensor& x) {
  const Shape& s = x.shape();
  if (s.size() != 3) throw DimensionError("upsample2x: expected [C,H,W], got " + to_string(s));
  const std::size_t C = s[0], H = s[1], W = s[2];
  const auto ty = detail::upsample_taps(H);
  const auto tx = detail::upsample_taps(W);
  const auto& X = x.values();
  std::vector<Real> out(C * 4 * H * W);
  for (std::size_t c = 0; c < C; ++c) {
    const Real* xc = X.data() + c * H * W;
    for (std::size_t oy = 0; oy < 2 * H; ++oy) {
      const auto& a = ty[oy];
      for (std::size_t ox = 0; ox < 2 * W; ++ox) {
        const auto& b = tx[ox];
        const Real top = (Real(1) - b.w1) * xc[a.i0 * W + b.i0] + b.w1 * xc[a.i0 * W + b.i1];
        const Real bot = (Real(1) - b.w1) * xc[a.i1 * W + b.i0] + b.w1 * xc[a.i1 * W + b.i1];
        out[(c * 2 * H + oy) * 2 * W + ox] = (Real(1) - a.w1) * top + a.w1 * bot;
      }
    }
  }
  return detail::make_result("upsample2x", {C, 2 * H, 2 * W}, std::move(out), {x}, [C, H, W, ty, tx](detail::Node& n) {
    Real* gx = detail::parent_grad(n, 0);
    for (std::size_t c = 0; c < C; ++c) {
      Real* gc = gx + c * H * W;
      for (std::size_t oy = 0; oy < 2 * H; ++oy) {
        const auto& a = ty[oy];
        for (std::size_t ox = 0; ox < 2 * W; ++ox) {
          const auto& b = tx[ox];
          const Real g = n.grad[(c * 2 * H + oy) * 2 * W + ox];
          const Real gt = (Real(1) - a.w1) * g;
          const Real gb = a.w1 * g;
          gc[a.i0 * W + b.i0] += (Real(1) - b.w1) * gt;
          gc[a.i0 * W + b.i1] += b.w1 * gt;
          gc[a.i1 * W + b.i0] += (Real(1) - b.w1) * gb;
          gc[a.i1 * W + b.i1] += b.w1 * gb;
        }
      }
    }
  });
}

/// Scaled dot-product attention, fused:
///   q [B, M, d], k [B, N, d], v [B, N, dv] -> softmax(q k^T * scale) v  [B, M, dv].
/// In deterministic mode the keys are visited in a canonical order (rows of
/// k, then v, compared lexicographically), so permuting key/value rows
/// together leaves the output bit-identical. When weights_out is non-null it
/// receives the attention matrix [B, M, N] in the caller's key order.
inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, Real scale_factor,
                        std::vector<Real>* weights_out = nullptr) {
  const Shape& sq = q.shape();
  const Shape& sk = k.shape();
  const Shape& sv = v.shape();
  if (sq.size() != 3 || sk.size() != 3 || sv.size() != 3 || sq[0] != sk[0] || sk[0] != sv[0] || sq[2] != sk[2] ||
      sk[1] != sv[1]) {
    throw DimensionError("attention: incompatible q/k/v shapes " + to_string(sq) + ", " + to_string(sk) + ", " +
                         to_string(sv));
  }
  const std::size_t B = sq[0], M = sq[1], d = sq[2], N = sk[1], dv = sv[2];
  const auto& Q = q.values();
  const auto& K = k.values();
  const auto& V = v.values();

  // Key visiting order per batch.
  auto order = std::make_shared<std::vector<std::size_t>>(B * N);
  for (std::size_t b = 0; b < B; ++b) {
    auto first = order->begin() + static_cast<long>(b * N);
    std::iota(first, first + static_cast<long>(N), std::size_t{0});
    if (deterministic()) {
      const Real* kb = K.data() + b * N * d;
      const Real* vb = V.data() + b * N * dv;
      std::stable_sort(first, first + static_cast<long>(N), [=](std::size_t i, std::size_t j) {
        for (std::size_t c = 0; c < d; ++c) {
          if (kb[i * d + c] != kb[j * d + c]) return kb[i * d + c] < kb[j * d + c];
        }
        for (std::size_t c = 0; c < dv; ++c) {
          if (vb[i * dv + c] != vb[j * dv + c]) return vb[i * dv + c] < vb[j * dv + c];
        }
        return false;
      });
    }
  }

  auto A = std::make_shared<std::vector<Real>>(B * M * N);
  std::vector<Real> out(B * M * dv, Real(0));
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t* ord = order->data() + b * N;
    const Real* Kb = K.data() + b * N * d;
    const Real* Vb = V.data() + b * N * dv;
    parallel_for(M, 8, [&](std::size_t m0, std::size_t m1) {
      for (std::size_t m = m0; m < m1; ++m) {
        const Real* qm = Q.data() + (b * M + m) * d;
        Real* am = A->data() + (b * M + m) * N;
        Real mx = -std::numeric_limits<Real>::infinity();
        for (std::size_t j = 0; j < N; ++j) {
          Real s = 0;
          const Real* kj = Kb + j * d;
          for (std::size_t c = 0; c < d; ++c) s += qm[c] * kj[c];
          am[j] = s * scale_factor;
          mx = std::max(mx, am[j]);
        }
        Real z = 0;
        for (std::size_t t = 0; t < N; ++t) {
          const std::size_t j = ord[t];
          am[j] = std::exp(am[j] - mx);
          z += am[j];
        }
        for (std::size_t j = 0; j < N; ++j) am[j] /= z;
        Real* om = out.data() + (b * M + m) * dv;
        for (std::size_t t = 0; t < N; ++t) {
          const std::size_t j = ord[t];
          const Real a = am[j];
          const Real* vj = Vb + j * dv;
          for (std::size_t c = 0; c < dv; ++c) om[c] += a * vj[c];
        }
      }
    });
  }
  add_macs(static_cast<std::uint64_t>(B) * M * N * (d + dv));
  if (weights_out) *weights_out = *A;
  return detail::make_result(
      "attention", {B, M, dv}, std::move(out), {q, k, v}, [B, M, N, d, dv, A, scale_factor](detail::Node& n) {
        const auto& Q = n.parents[0]->data;
        const auto& K = n.parents[1]->data;
        const auto& V = n.parents[2]->data;
        Real* gq = detail::parent_grad(n, 0);
        Real* gk = detail::parent_grad(n, 1);
        Real* gv = detail::parent_grad(n, 2);
        std::vector<Real> dA(N), dS(N);
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t m = 0; m < M; ++m) {
            const Real* g = n.grad.data() + (b * M + m) * dv;
            const Real* am = A->data() + (b * M + m) * N;
            Real dot = 0;
            for (std::size_t j = 0; j < N; ++j) {
              const Real* vj = V.data() + (b * N + j) * dv;
              Real s = 0;
              for (std::size_t c = 0; c < dv; ++c) s += g[c] * vj[c];
              dA[j] = s;
              dot += am[j] * s;
              if (gv) {
                Real* gvj = gv + (b * N + j) * dv;
                for (std::size_t c = 0; c < dv; ++c) gvj[c] += am[j] * g[c];
              }
            }
            for (std::size_t j = 0; j < N; ++j) dS[j] = am[j] * (dA[j] - dot) * scale_factor;
            const Real* qm = Q.data() + (b * M + m) * d;
            if (gq) {
              Real* gqm = gq + (b * M + m) * d;
              for (std::size_t j = 0; j < N; ++j) {
                const Real* kj = K.data() + (b * N + j) * d;
                for (std::size_t c = 0; c < d; ++c) gqm[c] += dS[j] * kj[c];
              }
            }
            if (gk) {
              for (std::size_t j = 0; j < N; ++j) {
                Real* gkj = gk + (b * N + j) * d;
                for (std::size_t c = 0; c < d; ++c) gkj[c] += dS[j] * qm[c];
              }
            }
          }
        }
      });
}

}  // namespace dgn
