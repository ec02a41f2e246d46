#pragma once

// Forward ops with their backward rules. Broadcasting is limited to
// scalar-tensor pairs; everything else must agree in shape exactly.

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "gscd/tensor.hpp"

namespace gscd {

namespace detail {

// C (+)= op(A) * op(B), row-major. A is MxK (or KxM when trans_a),
// B is KxN (or NxK when trans_b). Loop order is fixed, so results are
// reproducible bit for bit.
inline void gemm(bool trans_a, bool trans_b, std::size_t M, std::size_t N, std::size_t K,
                 const double* A, const double* B, double* C, bool accumulate) {
  if (!accumulate) std::fill(C, C + M * N, 0.0);
  if (!trans_a && !trans_b) {
    for (std::size_t i = 0; i < M; ++i) {
      double* c = C + i * N;
      for (std::size_t k = 0; k < K; ++k) {
        const double a = A[i * K + k];
        if (a == 0.0) continue;
        const double* b = B + k * N;
        for (std::size_t j = 0; j < N; ++j) c[j] += a * b[j];
      }
    }
  } else if (trans_a && !trans_b) {
    for (std::size_t k = 0; k < K; ++k) {
      const double* b = B + k * N;
      for (std::size_t i = 0; i < M; ++i) {
        const double a = A[k * M + i];
        if (a == 0.0) continue;
        double* c = C + i * N;
        for (std::size_t j = 0; j < N; ++j) c[j] += a * b[j];
      }
    }
  } else if (!trans_a && trans_b) {
    for (std::size_t i = 0; i < M; ++i) {
      const double* a = A + i * K;
      for (std::size_t j = 0; j < N; ++j) {
        const double* b = B + j * K;
        double s = 0.0;
        for (std::size_t k = 0; k < K; ++k) s += a[k] * b[k];
        C[i * N + j] += s;
      }
    }
  } else {
    for (std::size_t i = 0; i < M; ++i) {
      for (std::size_t j = 0; j < N; ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < K; ++k) s += A[k * M + i] * B[j * K + k];
        C[i * N + j] += s;
      }
    }
  }
}

struct ConvGeom {
  std::size_t channels, height, width, kernel, stride, pad, out_h, out_w;
  std::size_t col_rows() const { return channels * kernel * kernel; }
  std::size_t col_cols() const { return out_h * out_w; }
};

inline void im2col(const double* x, const ConvGeom& g, double* col) {
  const std::size_t hw = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kernel; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel; ++kj) {
        double* row = col + ((c * g.kernel + ki) * g.kernel + kj) * hw;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(g.height) &&
                                ix < static_cast<long>(g.width);
            row[oy * g.out_w + ox] = inside ? x[(c * g.height + iy) * g.width + ix] : 0.0;
          }
        }
      }
    }
  }
}

inline void col2im(const double* col, const ConvGeom& g, double* x) {
  const std::size_t hw = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kernel; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel; ++kj) {
        const double* row = col + ((c * g.kernel + ki) * g.kernel + kj) * hw;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(g.width)) continue;
            x[(c * g.height + iy) * g.width + ix] += row[oy * g.out_w + ox];
          }
        }
      }
    }
  }
}

struct AxisSplit {
  std::size_t outer, n, inner;
};

inline AxisSplit split_at(const Shape& s, std::size_t axis, const char* op) {
  if (axis >= s.size()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  }
  AxisSplit a{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) a.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) a.inner *= s[i];
  return a;
}

inline void require_rank(const char* op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(t.shape()));
  }
}

inline void add_into(std::vector<double>* dst, const std::vector<double>& src) {
  if (!dst) return;
  for (std::size_t i = 0; i < src.size(); ++i) (*dst)[i] += src[i];
}

template <class F, class DF>
Tensor unary(const char* op, const Tensor& x, F f, DF df) {
  auto xd = x.data();
  std::vector<double> y(xd.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(xd[i]);
  auto xi = x.impl();
  std::vector<double> ysaved = x.requires_grad() ? y : std::vector<double>{};
  return make_result(op, x.shape(), std::move(y), {x},
                     [xi, ysaved = std::move(ysaved), df](const std::vector<double>& g, GradSlots& s) {
                       auto& gx = *s[0];
                       for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(xi->data[i], ysaved[i]);
                     });
}

enum class BinaryKind { Add, Sub, Mul, Div };

inline Tensor binary(const char* op, BinaryKind kind, const Tensor& a, const Tensor& b) {
  const bool same = a.shape() == b.shape();
  const bool a_scalar = a.numel() == 1, b_scalar = b.numel() == 1;
  if (!same && !a_scalar && !b_scalar) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const Shape out_shape = (same || b_scalar) ? a.shape() : b.shape();
  const std::size_t n = shape_numel(out_shape);
  auto ad = a.data();
  auto bd = b.data();
  auto at = [&](std::size_t i) { return ad[a.numel() == 1 ? 0 : i]; };
  auto bt = [&](std::size_t i) { return bd[b.numel() == 1 ? 0 : i]; };
  std::vector<double> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    switch (kind) {
      case BinaryKind::Add: y[i] = at(i) + bt(i); break;
      case BinaryKind::Sub: y[i] = at(i) - bt(i); break;
      case BinaryKind::Mul: y[i] = at(i) * bt(i); break;
      case BinaryKind::Div: y[i] = at(i) / bt(i); break;
    }
  }
  auto ai = a.impl();
  auto bi = b.impl();
  return make_result(op, out_shape, std::move(y), {a, b}, [ai, bi, kind](const std::vector<double>& g, GradSlots& s) {
    const bool as = ai->data.size() == 1, bs = bi->data.size() == 1;
    auto av = [&](std::size_t i) { return ai->data[as ? 0 : i]; };
    auto bv = [&](std::size_t i) { return bi->data[bs ? 0 : i]; };
    for (std::size_t i = 0; i < g.size(); ++i) {
      double da = 0.0, db = 0.0;
      switch (kind) {
        case BinaryKind::Add: da = g[i]; db = g[i]; break;
        case BinaryKind::Sub: da = g[i]; db = -g[i]; break;
        case BinaryKind::Mul: da = g[i] * bv(i); db = g[i] * av(i); break;
        case BinaryKind::Div: da = g[i] / bv(i); db = -g[i] * av(i) / (bv(i) * bv(i)); break;
      }
      if (s[0]) (*s[0])[as ? 0 : i] += da;
      if (s[1]) (*s[1])[bs ? 0 : i] += db;
    }
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) { return detail::binary("add", detail::BinaryKind::Add, a, b); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return detail::binary("sub", detail::BinaryKind::Sub, a, b); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return detail::binary("mul", detail::BinaryKind::Mul, a, b); }
inline Tensor div(const Tensor& a, const Tensor& b) { return detail::binary("div", detail::BinaryKind::Div, a, b); }

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }

/// a * x + b with constant a, b.
inline Tensor affine(const Tensor& x, double a, double b = 0.0) {
  return detail::unary(
      "affine", x, [a, b](double v) { return a * v + b; }, [a](double, double) { return a; });
}

inline Tensor relu(const Tensor& x) {
  return detail::unary(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary(
      "sigmoid", x,
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor exp(const Tensor& x) {
  return detail::unary(
      "exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& x) {
  return detail::unary(
      "log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

/// Subgradient 0 at the kink.
inline Tensor abs(const Tensor& x) {
  return detail::unary(
      "abs", x, [](double v) { return std::fabs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

// ---------------------------------------------------------------------------
// Linear algebra and layout

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank("matmul", a, 2);
  detail::require_rank("matmul", b, 2);
  if (a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: inner dims differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  std::vector<double> y(M * N);
  detail::gemm(false, false, M, N, K, a.data().data(), b.data().data(), y.data(), false);
  auto ai = a.impl();
  auto bi = b.impl();
  return detail::make_result("matmul", {M, N}, std::move(y), {a, b},
                             [ai, bi, M, N, K](const std::vector<double>& g, detail::GradSlots& s) {
                               if (s[0]) detail::gemm(false, true, M, K, N, g.data(), bi->data.data(), s[0]->data(), true);
                               if (s[1]) detail::gemm(true, false, K, N, M, ai->data.data(), g.data(), s[1]->data(), true);
                             });
}

inline Tensor transpose(const Tensor& a) {
  detail::require_rank("transpose", a, 2);
  const std::size_t R = a.dim(0), C = a.dim(1);
  auto ad = a.data();
  std::vector<double> y(R * C);
  for (std::size_t i = 0; i < R; ++i)
    for (std::size_t j = 0; j < C; ++j) y[j * R + i] = ad[i * C + j];
  return detail::make_result("transpose", {C, R}, std::move(y), {a},
                             [R, C](const std::vector<double>& g, detail::GradSlots& s) {
                               for (std::size_t i = 0; i < R; ++i)
                                 for (std::size_t j = 0; j < C; ++j) (*s[0])[i * C + j] += g[j * R + i];
                             });
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  return detail::make_result("reshape", std::move(shape), x.to_vector(), {x},
                             [](const std::vector<double>& g, detail::GradSlots& s) { detail::add_into(s[0], g); });
}

/// Output axis i is input axis dims[i].
inline Tensor permute(const Tensor& x, const std::vector<std::size_t>& dims) {
  const auto& in = x.shape();
  if (dims.size() != in.size()) throw ShapeError("permute: rank mismatch for " + shape_str(in));
  std::vector<bool> used(in.size(), false);
  Shape out(in.size());
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (dims[i] >= in.size() || used[dims[i]]) throw ShapeError("permute: invalid axis order for " + shape_str(in));
    used[dims[i]] = true;
    out[i] = in[dims[i]];
  }
  std::vector<std::size_t> in_strides(in.size(), 1);
  for (std::size_t i = in.size() - 1; i > 0; --i) in_strides[i - 1] = in_strides[i] * in[i];
  // Source offset of every output element, in output order.
  const std::size_t n = x.numel();
  auto src = std::make_shared<std::vector<std::size_t>>(n);
  std::vector<std::size_t> idx(out.size(), 0);
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < out.size(); ++i) off += idx[i] * in_strides[dims[i]];
    (*src)[k] = off;
    for (std::size_t i = out.size(); i-- > 0;) {
      if (++idx[i] < out[i]) break;
      idx[i] = 0;
    }
  }
  auto xd = x.data();
  std::vector<double> y(n);
  for (std::size_t k = 0; k < n; ++k) y[k] = xd[(*src)[k]];
  return detail::make_result("permute", out, std::move(y), {x},
                             [src](const std::vector<double>& g, detail::GradSlots& s) {
                               for (std::size_t k = 0; k < g.size(); ++k) (*s[0])[(*src)[k]] += g[k];
                             });
}

inline Tensor stack(const std::vector<Tensor>& ts, std::size_t axis) {
  if (ts.empty()) throw ShapeError("stack: no inputs");
  const Shape base = ts[0].shape();
  for (const auto& t : ts) {
    if (t.shape() != base) throw ShapeError("stack: shape mismatch " + shape_str(base) + " vs " + shape_str(t.shape()));
  }
  if (axis > base.size()) throw ShapeError("stack: axis out of range for " + shape_str(base));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= base[i];
  for (std::size_t i = axis; i < base.size(); ++i) inner *= base[i];
  const std::size_t L = ts.size();
  Shape out = base;
  out.insert(out.begin() + static_cast<long>(axis), L);
  std::vector<double> y(outer * L * inner);
  for (std::size_t l = 0; l < L; ++l) {
    auto d = ts[l].data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(d.data() + o * inner, inner, y.data() + (o * L + l) * inner);
  }
  return detail::make_result("stack", out, std::move(y), ts,
                             [outer, inner, L](const std::vector<double>& g, detail::GradSlots& s) {
                               for (std::size_t l = 0; l < L; ++l) {
                                 if (!s[l]) continue;
                                 for (std::size_t o = 0; o < outer; ++o)
                                   for (std::size_t i = 0; i < inner; ++i) (*s[l])[o * inner + i] += g[(o * L + l) * inner + i];
                               }
                             });
}

inline Tensor concat(const std::vector<Tensor>& ts, std::size_t axis) {
  if (ts.empty()) throw ShapeError("concat: no inputs");
  Shape out = ts[0].shape();
  if (axis >= out.size()) throw ShapeError("concat: axis out of range for " + shape_str(out));
  out[axis] = 0;
  for (const auto& t : ts) {
    bool ok = t.rank() == out.size();
    for (std::size_t i = 0; ok && i < out.size(); ++i) ok = i == axis || t.dim(i) == out[i];
    if (!ok) throw ShapeError("concat: shape mismatch " + shape_str(ts[0].shape()) + " vs " + shape_str(t.shape()));
    out[axis] += t.dim(axis);
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= out[i];
  for (std::size_t i = axis + 1; i < out.size(); ++i) inner *= out[i];
  std::vector<std::size_t> widths, offsets;
  std::size_t total = 0;
  for (const auto& t : ts) {
    widths.push_back(t.dim(axis) * inner);
    offsets.push_back(total);
    total += t.dim(axis) * inner;
  }
  std::vector<double> y(outer * total);
  for (std::size_t k = 0; k < ts.size(); ++k) {
    auto d = ts[k].data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(d.data() + o * widths[k], widths[k], y.data() + o * total + offsets[k]);
  }
  return detail::make_result("concat", out, std::move(y), ts,
                             [outer, total, widths, offsets](const std::vector<double>& g, detail::GradSlots& s) {
                               for (std::size_t k = 0; k < widths.size(); ++k) {
                                 if (!s[k]) continue;
                                 for (std::size_t o = 0; o < outer; ++o)
                                   for (std::size_t i = 0; i < widths[k]; ++i)
                                     (*s[k])[o * widths[k] + i] += g[o * total + offsets[k] + i];
                               }
                             });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  return detail::make_result("sum", {1}, {acc}, {x}, [](const std::vector<double>& g, detail::GradSlots& s) {
    for (auto& v : *s[0]) v += g[0];
  });
}

inline Tensor mean(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  const double n = static_cast<double>(x.numel());
  return detail::make_result("mean", {1}, {acc / n}, {x}, [n](const std::vector<double>& g, detail::GradSlots& s) {
    for (auto& v : *s[0]) v += g[0] / n;
  });
}

namespace detail {
inline Shape drop_axis(const Shape& s, std::size_t axis) {
  Shape out = s;
  out.erase(out.begin() + static_cast<long>(axis));
  if (out.empty()) out.push_back(1);
  return out;
}
}  // namespace detail

/// Sums out one axis (the axis is removed).
inline Tensor sum_axis(const Tensor& x, std::size_t axis) {
  const auto sp = detail::split_at(x.shape(), axis, "sum_axis");
  auto xd = x.data();
  std::vector<double> y(sp.outer * sp.inner, 0.0);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t k = 0; k < sp.n; ++k)
      for (std::size_t i = 0; i < sp.inner; ++i) y[o * sp.inner + i] += xd[(o * sp.n + k) * sp.inner + i];
  return detail::make_result("sum_axis", detail::drop_axis(x.shape(), axis), std::move(y), {x},
                             [sp](const std::vector<double>& g, detail::GradSlots& s) {
                               for (std::size_t o = 0; o < sp.outer; ++o)
                                 for (std::size_t k = 0; k < sp.n; ++k)
                                   for (std::size_t i = 0; i < sp.inner; ++i)
                                     (*s[0])[(o * sp.n + k) * sp.inner + i] += g[o * sp.inner + i];
                             });
}

/// Euclidean norm along one axis (the axis is removed). Gradient is 0 where the norm is 0.
inline Tensor l2_norm(const Tensor& x, std::size_t axis) {
  const auto sp = detail::split_at(x.shape(), axis, "l2_norm");
  auto xd = x.data();
  std::vector<double> y(sp.outer * sp.inner, 0.0);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t k = 0; k < sp.n; ++k)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const double v = xd[(o * sp.n + k) * sp.inner + i];
        y[o * sp.inner + i] += v * v;
      }
  for (auto& v : y) v = std::sqrt(v);
  auto xi = x.impl();
  auto norms = y;
  return detail::make_result("l2_norm", detail::drop_axis(x.shape(), axis), std::move(y), {x},
                             [sp, xi, norms](const std::vector<double>& g, detail::GradSlots& s) {
                               for (std::size_t o = 0; o < sp.outer; ++o)
                                 for (std::size_t i = 0; i < sp.inner; ++i) {
                                   const double nrm = norms[o * sp.inner + i];
                                   if (nrm == 0.0) continue;
                                   for (std::size_t k = 0; k < sp.n; ++k) {
                                     const std::size_t idx = (o * sp.n + k) * sp.inner + i;
                                     (*s[0])[idx] += g[o * sp.inner + i] * xi->data[idx] / nrm;
                                   }
                                 }
                             });
}

/// x / max(||x||, eps) along one axis.
inline Tensor normalize(const Tensor& x, std::size_t axis, double eps = 1e-12) {
  const auto sp = detail::split_at(x.shape(), axis, "normalize");
  auto xd = x.data();
  std::vector<double> denom(sp.outer * sp.inner, 0.0);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t k = 0; k < sp.n; ++k)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const double v = xd[(o * sp.n + k) * sp.inner + i];
        denom[o * sp.inner + i] += v * v;
      }
  std::vector<bool> clamped(denom.size());
  for (std::size_t j = 0; j < denom.size(); ++j) {
    const double nrm = std::sqrt(denom[j]);
    clamped[j] = nrm < eps;
    denom[j] = clamped[j] ? eps : nrm;
  }
  std::vector<double> y(x.numel());
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t k = 0; k < sp.n; ++k)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t idx = (o * sp.n + k) * sp.inner + i;
        y[idx] = xd[idx] / denom[o * sp.inner + i];
      }
  auto ysaved = y;
  return detail::make_result(
      "normalize", x.shape(), std::move(y), {x},
      [sp, denom, clamped, ysaved](const std::vector<double>& g, detail::GradSlots& s) {
        for (std::size_t o = 0; o < sp.outer; ++o)
          for (std::size_t i = 0; i < sp.inner; ++i) {
            const std::size_t j = o * sp.inner + i;
            double dot = 0.0;
            if (!clamped[j]) {
              for (std::size_t k = 0; k < sp.n; ++k) {
                const std::size_t idx = (o * sp.n + k) * sp.inner + i;
                dot += g[idx] * ysaved[idx];
              }
            }
            for (std::size_t k = 0; k < sp.n; ++k) {
              const std::size_t idx = (o * sp.n + k) * sp.inner + i;
              (*s[0])[idx] += (g[idx] - dot * ysaved[idx]) / denom[j];
            }
          }
      });
}

/// Cosine similarity of a and b along `axis`, kept as a size-1 axis:
/// a.b / max(|a||b|, eps), so an all-zero pair maps to 0.
inline Tensor cosine_similarity(const Tensor& a, const Tensor& b, std::size_t axis, double eps = 1e-8) {
  if (a.shape() != b.shape()) {
    throw ShapeError("cosine_similarity: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const auto sp = detail::split_at(a.shape(), axis, "cosine_similarity");
  auto ad = a.data();
  auto bd = b.data();
  const std::size_t m = sp.outer * sp.inner;
  std::vector<double> dot(m, 0.0), na(m, 0.0), nb(m, 0.0);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t k = 0; k < sp.n; ++k)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t idx = (o * sp.n + k) * sp.inner + i, j = o * sp.inner + i;
        dot[j] += ad[idx] * bd[idx];
        na[j] += ad[idx] * ad[idx];
        nb[j] += bd[idx] * bd[idx];
      }
  std::vector<double> y(m);
  for (std::size_t j = 0; j < m; ++j) {
    na[j] = std::sqrt(na[j]);
    nb[j] = std::sqrt(nb[j]);
    y[j] = dot[j] / std::max(na[j] * nb[j], eps);
  }
  Shape out = a.shape();
  out[axis] = 1;
  auto ai = a.impl();
  auto bi = b.impl();
  auto cos = y;
  return detail::make_result(
      "cosine_similarity", out, std::move(y), {a, b},
      [sp, ai, bi, na, nb, cos, eps](const std::vector<double>& g, detail::GradSlots& s) {
        for (std::size_t o = 0; o < sp.outer; ++o)
          for (std::size_t i = 0; i < sp.inner; ++i) {
            const std::size_t j = o * sp.inner + i;
            const double prod = na[j] * nb[j];
            for (std::size_t k = 0; k < sp.n; ++k) {
              const std::size_t idx = (o * sp.n + k) * sp.inner + i;
              const double av = ai->data[idx], bv = bi->data[idx];
              double da, db;
              if (prod > eps) {
                da = bv / prod - cos[j] * av / (na[j] * na[j]);
                db = av / prod - cos[j] * bv / (nb[j] * nb[j]);
              } else {
                da = bv / eps;
                db = av / eps;
              }
              if (s[0]) (*s[0])[idx] += g[j] * da;
              if (s[1]) (*s[1])[idx] += g[j] * db;
            }
          }
      });
}

// ---------------------------------------------------------------------------
// Softmax family

inline Tensor softmax(const Tensor& x, std::size_t axis) {
  const auto sp = detail::split_at(x.shape(), axis, "softmax");
  auto xd = x.data();
  std::vector<double> y(x.numel());
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < sp.n; ++k) mx = std::max(mx, xd[(o * sp.n + k) * sp.inner + i]);
      double z = 0.0;
      for (std::size_t k = 0; k < sp.n; ++k) {
        const std::size_t idx = (o * sp.n + k) * sp.inner + i;
        y[idx] = std::exp(xd[idx] - mx);
        z += y[idx];
      }
      for (std::size_t k = 0; k < sp.n; ++k) y[(o * sp.n + k) * sp.inner + i] /= z;
    }
  auto ysaved = y;
  return detail::make_result("softmax", x.shape(), std::move(y), {x},
                             [sp, ysaved](const std::vector<double>& g, detail::GradSlots& s) {
                               for (std::size_t o = 0; o < sp.outer; ++o)
                                 for (std::size_t i = 0; i < sp.inner; ++i) {
                                   double dot = 0.0;
                                   for (std::size_t k = 0; k < sp.n; ++k) {
                                     const std::size_t idx = (o * sp.n + k) * sp.inner + i;
                                     dot += g[idx] * ysaved[idx];
                                   }
                                   for (std::size_t k = 0; k < sp.n; ++k) {
                                     const std::size_t idx = (o * sp.n + k) * sp.inner + i;
                                     (*s[0])[idx] += ysaved[idx] * (g[idx] - dot);
                                   }
                                 }
                             });
}

inline Tensor log_softmax(const Tensor& x, std::size_t axis) {
  const auto sp = detail::split_at(x.shape(), axis, "log_softmax");
  auto xd = x.data();
  std::vector<double> y(x.numel());
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < sp.n; ++k) mx = std::max(mx, xd[(o * sp.n + k) * sp.inner + i]);
      double z = 0.0;
      for (std::size_t k = 0; k < sp.n; ++k) z += std::exp(xd[(o * sp.n + k) * sp.inner + i] - mx);
      const double lse = mx + std::log(z);
      for (std::size_t k = 0; k < sp.n; ++k) {
        const std::size_t idx = (o * sp.n + k) * sp.inner + i;
        y[idx] = xd[idx] - lse;
      }
    }
  auto ysaved = y;
  return detail::make_result("log_softmax", x.shape(), std::move(y), {x},
                             [sp, ysaved](const std::vector<double>& g, detail::GradSlots& s) {
                               for (std::size_t o = 0; o < sp.outer; ++o)
                                 for (std::size_t i = 0; i < sp.inner; ++i) {
                                   double gs = 0.0;
                                   for (std::size_t k = 0; k < sp.n; ++k) gs += g[(o * sp.n + k) * sp.inner + i];
                                   for (std::size_t k = 0; k < sp.n; ++k) {
                                     const std::size_t idx = (o * sp.n + k) * sp.inner + i;
                                     (*s[0])[idx] += g[idx] - std::exp(ysaved[idx]) * gs;
                                   }
                                 }
                             });
}

/// Mean negative log-likelihood. `log_probs` has the class axis at 1
/// (N x C or N x C x H x W); `labels` holds one class id per N*H*W position.
inline Tensor nll_mean(const Tensor& log_probs, const std::vector<int>& labels) {
  if (log_probs.rank() < 2) throw ShapeError("nll_mean: needs a class axis, got " + shape_str(log_probs.shape()));
  const auto sp = detail::split_at(log_probs.shape(), 1, "nll_mean");
  if (labels.size() != sp.outer * sp.inner) {
    throw ShapeError("nll_mean: " + std::to_string(labels.size()) + " labels for log-probs " +
                     shape_str(log_probs.shape()));
  }
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= sp.n) {
      throw ValueError("nll_mean: label " + std::to_string(l) + " outside [0, " + std::to_string(sp.n) + ")");
    }
  }
  auto ld = log_probs.data();
  double acc = 0.0;
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i)
      acc -= ld[(o * sp.n + static_cast<std::size_t>(labels[o * sp.inner + i])) * sp.inner + i];
  const double count = static_cast<double>(labels.size());
  return detail::make_result("nll_mean", {1}, {acc / count}, {log_probs},
                             [sp, labels, count](const std::vector<double>& g, detail::GradSlots& s) {
                               for (std::size_t o = 0; o < sp.outer; ++o)
                                 for (std::size_t i = 0; i < sp.inner; ++i) {
                                   const auto c = static_cast<std::size_t>(labels[o * sp.inner + i]);
                                   (*s[0])[(o * sp.n + c) * sp.inner + i] -= g[0] / count;
                                 }
                             });
}

// ---------------------------------------------------------------------------
// Convolution family (NCHW)

/// weight: Cout x Cin x k x k; bias optional (Cout).
inline Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride = 1,
                     std::size_t pad = 0) {
  detail::require_rank("conv2d", x, 4);
  detail::require_rank("conv2d", weight, 4);
  const std::size_t B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Cout = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != Cin || weight.dim(3) != k) {
    throw ShapeError("conv2d: weight " + shape_str(weight.shape()) + " incompatible with input " + shape_str(x.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != Cout)) {
    throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " for " + std::to_string(Cout) + " output channels");
  }
  if (H + 2 * pad < k || W + 2 * pad < k || stride == 0) {
    throw ShapeError("conv2d: kernel " + std::to_string(k) + " does not fit input " + shape_str(x.shape()));
  }
  const detail::ConvGeom geom{Cin, H, W, k, stride, pad, (H + 2 * pad - k) / stride + 1,
                              (W + 2 * pad - k) / stride + 1};
  const bool pointwise = k == 1 && stride == 1 && pad == 0;
  const std::size_t rows = geom.col_rows(), cols = geom.col_cols();
  std::vector<double> y(B * Cout * cols);
  std::vector<double> col(pointwise ? 0 : rows * cols);
  auto xd = x.data();
  auto wd = weight.data();
  for (std::size_t b = 0; b < B; ++b) {
    const double* xb = xd.data() + b * Cin * H * W;
    const double* src = xb;
    if (!pointwise) {
      detail::im2col(xb, geom, col.data());
      src = col.data();
    }
    double* yb = y.data() + b * Cout * cols;
    detail::gemm(false, false, Cout, cols, rows, wd.data(), src, yb, false);
    if (bias.defined()) {
      for (std::size_t c = 0; c < Cout; ++c)
        for (std::size_t p = 0; p < cols; ++p) yb[c * cols + p] += bias[c];
    }
  }
  auto xi = x.impl();
  auto wi = weight.impl();
  std::vector<Tensor> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return detail::make_result(
      "conv2d", {B, Cout, geom.out_h, geom.out_w}, std::move(y), inputs,
      [xi, wi, geom, B, Cout, pointwise](const std::vector<double>& g, detail::GradSlots& s) {
        const std::size_t rows = geom.col_rows(), cols = geom.col_cols();
        const std::size_t in_sz = geom.channels * geom.height * geom.width;
        std::vector<double> col(pointwise ? 0 : rows * cols), gcol(rows * cols);
        for (std::size_t b = 0; b < B; ++b) {
          const double* gb = g.data() + b * Cout * cols;
          const double* xb = xi->data.data() + b * in_sz;
          if (s[1]) {
            const double* src = xb;
            if (!pointwise) {
              detail::im2col(xb, geom, col.data());
              src = col.data();
            }
            detail::gemm(false, true, Cout, rows, cols, gb, src, s[1]->data(), true);
          }
          if (s[0]) {
            if (pointwise) {
              detail::gemm(true, false, rows, cols, Cout, wi->data.data(), gb, s[0]->data() + b * in_sz, true);
            } else {
              detail::gemm(true, false, rows, cols, Cout, wi->data.data(), gb, gcol.data(), false);
              detail::col2im(gcol.data(), geom, s[0]->data() + b * in_sz);
            }
          }
          if (s.size() > 2 && s[2]) {
            for (std::size_t c = 0; c < Cout; ++c)
              for (std::size_t p = 0; p < cols; ++p) (*s[2])[c] += gb[c * cols + p];
          }
        }
      });
}

/// Transposed convolution, the adjoint of conv2d. weight: Cin x Cout x k x k.
/// Output spatial size (H - 1) * stride - 2 * pad + k.
inline Tensor conv_transpose2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride,
                               std::size_t pad) {
  detail::require_rank("conv_transpose2d", x, 4);
  detail::require_rank("conv_transpose2d", weight, 4);
  const std::size_t B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Cout = weight.dim(1), k = weight.dim(2);
  if (weight.dim(0) != Cin || weight.dim(3) != k) {
    throw ShapeError("conv_transpose2d: weight " + shape_str(weight.shape()) + " incompatible with input " +
                     shape_str(x.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != Cout)) {
    throw ShapeError("conv_transpose2d: bias " + shape_str(bias.shape()) + " for " + std::to_string(Cout) +
                     " output channels");
  }
  if ((H - 1) * stride + k <= 2 * pad || (W - 1) * stride + k <= 2 * pad) {
    throw ShapeError("conv_transpose2d: empty output for input " + shape_str(x.shape()));
  }
  const std::size_t Ho = (H - 1) * stride + k - 2 * pad, Wo = (W - 1) * stride + k - 2 * pad;
  // Geometry of the forward conv whose adjoint this is: Ho x Wo -> H x W.
  const detail::ConvGeom geom{Cout, Ho, Wo, k, stride, pad, H, W};
  const std::size_t rows = geom.col_rows(), cols = H * W;
  std::vector<double> y(B * Cout * Ho * Wo, 0.0), col(rows * cols);
  auto xd = x.data();
  auto wd = weight.data();
  for (std::size_t b = 0; b < B; ++b) {
    detail::gemm(true, false, rows, cols, Cin, wd.data(), xd.data() + b * Cin * cols, col.data(), false);
    double* yb = y.data() + b * Cout * Ho * Wo;
    detail::col2im(col.data(), geom, yb);
    if (bias.defined()) {
      for (std::size_t c = 0; c < Cout; ++c)
        for (std::size_t p = 0; p < Ho * Wo; ++p) yb[c * Ho * Wo + p] += bias[c];
    }
  }
  auto xi = x.impl();
  auto wi = weight.impl();
  std::vector<Tensor> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return detail::make_result(
      "conv_transpose2d", {B, Cout, Ho, Wo}, std::move(y), inputs,
      [xi, wi, geom, B, Cin](const std::vector<double>& g, detail::GradSlots& s) {
        const std::size_t rows = geom.col_rows(), cols = geom.out_h * geom.out_w;
        const std::size_t out_sz = geom.channels * geom.height * geom.width;
        std::vector<double> gcol(rows * cols);
        for (std::size_t b = 0; b < B; ++b) {
          const double* gb = g.data() + b * out_sz;
          detail::im2col(gb, geom, gcol.data());
          if (s[0]) detail::gemm(false, false, Cin, cols, rows, wi->data.data(), gcol.data(), s[0]->data() + b * Cin * cols, true);
          if (s[1]) detail::gemm(false, true, Cin, rows, cols, xi->data.data() + b * Cin * cols, gcol.data(), s[1]->data(), true);
          if (s.size() > 2 && s[2]) {
            for (std::size_t c = 0; c < geom.channels; ++c)
              for (std::size_t p = 0; p < geom.height * geom.width; ++p)
                (*s[2])[c] += gb[c * geom.height * geom.width + p];
          }
        }
      });
}

namespace detail {
struct InterpTaps {
  std::vector<std::size_t> lo, hi;
  std::vector<double> w_lo, w_hi;
};

// Half-pixel source mapping with edge clamping (align_corners = false).
inline InterpTaps interp_taps(std::size_t in, std::size_t out) {
  InterpTaps t;
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    if (src < 0.0) src = 0.0;
    auto i0 = static_cast<std::size_t>(src);
    if (i0 > in - 1) i0 = in - 1;
    const std::size_t i1 = i0 + 1 < in ? i0 + 1 : i0;
    const double lam = i1 == i0 ? 0.0 : src - static_cast<double>(i0);
    t.lo.push_back(i0);
    t.hi.push_back(i1);
    t.w_lo.push_back(1.0 - lam);
    t.w_hi.push_back(lam);
  }
  return t;
}
}  // namespace detail

/// Bilinear resize of the two trailing axes of an NCHW tensor.
inline Tensor interpolate_bilinear(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  detail::require_rank("interpolate_bilinear", x, 4);
  if (out_h == 0 || out_w == 0) throw ShapeError("interpolate_bilinear: empty target size");
  const std::size_t planes = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto ty = detail::interp_taps(H, out_h);
  const auto tx = detail::interp_taps(W, out_w);
  auto xd = x.data();
  std::vector<double> y(planes * out_h * out_w);
  for (std::size_t p = 0; p < planes; ++p) {
    const double* src = xd.data() + p * H * W;
    double* dst = y.data() + p * out_h * out_w;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const double* r0 = src + ty.lo[oy] * W;
      const double* r1 = src + ty.hi[oy] * W;
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const double top = tx.w_lo[ox] * r0[tx.lo[ox]] + tx.w_hi[ox] * r0[tx.hi[ox]];
        const double bot = tx.w_lo[ox] * r1[tx.lo[ox]] + tx.w_hi[ox] * r1[tx.hi[ox]];
        dst[oy * out_w + ox] = ty.w_lo[oy] * top + ty.w_hi[oy] * bot;
      }
    }
  }
  return detail::make_result("interpolate_bilinear", {x.dim(0), x.dim(1), out_h, out_w}, std::move(y), {x},
                             [ty, tx, planes, H, W, out_h, out_w](const std::vector<double>& g, detail::GradSlots& s) {
                               for (std::size_t p = 0; p < planes; ++p) {
                                 double* dst = s[0]->data() + p * H * W;
                                 const double* gp = g.data() + p * out_h * out_w;
                                 for (std::size_t oy = 0; oy < out_h; ++oy) {
                                   double* r0 = dst + ty.lo[oy] * W;
                                   double* r1 = dst + ty.hi[oy] * W;
                                   for (std::size_t ox = 0; ox < out_w; ++ox) {
                                     const double v = gp[oy * out_w + ox];
                                     r0[tx.lo[ox]] += ty.w_lo[oy] * tx.w_lo[ox] * v;
                                     r0[tx.hi[ox]] += ty.w_lo[oy] * tx.w_hi[ox] * v;
                                     r1[tx.lo[ox]] += ty.w_hi[oy] * tx.w_lo[ox] * v;
                                     r1[tx.hi[ox]] += ty.w_hi[oy] * tx.w_hi[ox] * v;
                                   }
                                 }
                               }
                             });
}

/// Per-channel batch normalization of an NCHW tensor followed by the
/// gamma/beta affine. Training mode normalizes with batch statistics and
/// updates the running buffers in place; eval mode uses the buffers.
inline Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                         Tensor& running_var, bool training, double momentum = 0.1, double eps = 1e-5) {
  detail::require_rank("batch_norm", x, 4);
  const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  for (const Tensor* t : std::initializer_list<const Tensor*>{&gamma, &beta, &running_mean, &running_var}) {
    if (t->numel() != C) {
      throw ShapeError("batch_norm: per-channel tensor " + shape_str(t->shape()) + " for " + std::to_string(C) +
                       " channels");
    }
  }
  auto xd = x.data();
  const double n = static_cast<double>(B * HW);
  std::vector<double> mu(C, 0.0), inv_std(C, 0.0);
  if (training) {
    std::vector<double> var(C, 0.0);
    for (std::size_t c = 0; c < C; ++c) {
      double acc = 0.0;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t p = 0; p < HW; ++p) acc += xd[(b * C + c) * HW + p];
      mu[c] = acc / n;
      double sq = 0.0;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t p = 0; p < HW; ++p) {
          const double d = xd[(b * C + c) * HW + p] - mu[c];
          sq += d * d;
        }
      var[c] = sq / n;
      inv_std[c] = 1.0 / std::sqrt(var[c] + eps);
    }
    auto rm = running_mean.mutable_data();
    auto rv = running_var.mutable_data();
    const double unbias = n > 1.0 ? n / (n - 1.0) : 1.0;
    for (std::size_t c = 0; c < C; ++c) {
      rm[c] = (1.0 - momentum) * rm[c] + momentum * mu[c];
      rv[c] = (1.0 - momentum) * rv[c] + momentum * var[c] * unbias;
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mu[c] = running_mean[c];
      inv_std[c] = 1.0 / std::sqrt(running_var[c] + eps);
    }
  }
  std::vector<double> xhat(x.numel()), y(x.numel());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < HW; ++p) {
        const std::size_t idx = (b * C + c) * HW + p;
        xhat[idx] = (xd[idx] - mu[c]) * inv_std[c];
        y[idx] = gamma[c] * xhat[idx] + beta[c];
      }
  auto gi = gamma.impl();
  return detail::make_result(
      "batch_norm", x.shape(), std::move(y), {x, gamma, beta},
      [gi, xhat = std::move(xhat), inv_std, B, C, HW, n, training](const std::vector<double>& g, detail::GradSlots& s) {
        for (std::size_t c = 0; c < C; ++c) {
          double sum_g = 0.0, sum_gx = 0.0;
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t p = 0; p < HW; ++p) {
              const std::size_t idx = (b * C + c) * HW + p;
              sum_g += g[idx];
              sum_gx += g[idx] * xhat[idx];
            }
          if (s[1]) (*s[1])[c] += sum_gx;
          if (s[2]) (*s[2])[c] += sum_g;
          if (!s[0]) continue;
          const double gam = gi->data[c];
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t p = 0; p < HW; ++p) {
              const std::size_t idx = (b * C + c) * HW + p;
              if (training) {
                (*s[0])[idx] += gam * inv_std[c] / n * (n * g[idx] - sum_g - xhat[idx] * sum_gx);
              } else {
                (*s[0])[idx] += gam * inv_std[c] * g[idx];
              }
            }
        }
      });
}

/// Learned fusion over the level axis of a B x L x C x H x W stack.
/// weight is (L) with bias (1) for per-level scalars, or (C, L) with bias
/// (C) for per-channel level weights.
inline Tensor level_fc(const Tensor& stacked, const Tensor& weight, const Tensor& bias) {
  detail::require_rank("level_fc", stacked, 5);
  const std::size_t B = stacked.dim(0), L = stacked.dim(1), C = stacked.dim(2), HW = stacked.dim(3) * stacked.dim(4);
  const bool per_channel = weight.rank() == 2;
  if (per_channel ? (weight.dim(0) != C || weight.dim(1) != L || bias.numel() != C)
                  : (weight.numel() != L || bias.numel() != 1)) {
    throw ShapeError("level_fc: weight " + shape_str(weight.shape()) + " / bias " + shape_str(bias.shape()) +
                     " incompatible with stack " + shape_str(stacked.shape()));
  }
  auto sd = stacked.data();
  auto wd = weight.data();
  auto bd = bias.data();
  std::vector<double> y(B * C * HW);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      double* dst = y.data() + (b * C + c) * HW;
      const double b0 = bd[per_channel ? c : 0];
      for (std::size_t p = 0; p < HW; ++p) dst[p] = b0;
      for (std::size_t l = 0; l < L; ++l) {
        const double w = wd[per_channel ? c * L + l : l];
        const double* src = sd.data() + ((b * L + l) * C + c) * HW;
        for (std::size_t p = 0; p < HW; ++p) dst[p] += w * src[p];
      }
    }
  auto si = stacked.impl();
  auto wi = weight.impl();
  return detail::make_result(
      "level_fc", {B, C, stacked.dim(3), stacked.dim(4)}, std::move(y), {stacked, weight, bias},
      [si, wi, B, L, C, HW, per_channel](const std::vector<double>& g, detail::GradSlots& s) {
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t c = 0; c < C; ++c) {
            const double* gp = g.data() + (b * C + c) * HW;
            if (s[2]) {
              double acc = 0.0;
              for (std::size_t p = 0; p < HW; ++p) acc += gp[p];
              (*s[2])[per_channel ? c : 0] += acc;
            }
            for (std::size_t l = 0; l < L; ++l) {
              const std::size_t widx = per_channel ? c * L + l : l;
              const std::size_t off = ((b * L + l) * C + c) * HW;
              if (s[1]) {
                double acc = 0.0;
                for (std::size_t p = 0; p < HW; ++p) acc += gp[p] * si->data[off + p];
                (*s[1])[widx] += acc;
              }
              if (s[0]) {
                const double w = wi->data[widx];
                for (std::size_t p = 0; p < HW; ++p) (*s[0])[off + p] += w * gp[p];
              }
            }
          }
      });
}

// ---------------------------------------------------------------------------
// Graph ops

/// Gaussian-kernel adjacency over the rows of F (N x d):
/// A[m][n] = exp(-dist(f_m, f_n) / (2 sigma^2)), where dist is the Euclidean
/// distance, or its square when `squared` is set. sigma is a constant.
inline Tensor gaussian_adjacency(const Tensor& F, double sigma, bool squared) {
  detail::require_rank("gaussian_adjacency", F, 2);
  if (!(sigma > 0.0) || !std::isfinite(sigma)) {
    throw ValueError("gaussian_adjacency: sigma must be positive, got " + std::to_string(sigma));
  }
  const std::size_t N = F.dim(0), d = F.dim(1);
  auto fd = F.data();
  const double inv = 1.0 / (2.0 * sigma * sigma);
  std::vector<double> dist(N * N, 0.0), A(N * N, 1.0);
  for (std::size_t m = 0; m < N; ++m)
    for (std::size_t n = m + 1; n < N; ++n) {
      double sq = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = fd[m * d + k] - fd[n * d + k];
        sq += diff * diff;
      }
      const double dd = squared ? sq : std::sqrt(sq);
      dist[m * N + n] = dist[n * N + m] = dd;
      A[m * N + n] = A[n * N + m] = std::exp(-dd * inv);
    }
  auto fi = F.impl();
  auto Asaved = A;
  return detail::make_result(
      "gaussian_adjacency", {N, N}, std::move(A), {F},
      [fi, dist, Asaved, N, d, inv, squared](const std::vector<double>& g, detail::GradSlots& s) {
        auto& gf = *s[0];
        for (std::size_t m = 0; m < N; ++m)
          for (std::size_t n = 0; n < N; ++n) {
            if (m == n) continue;
            const double dd = dist[m * N + n];
            if (!squared && dd == 0.0) continue;
            const double c = -g[m * N + n] * Asaved[m * N + n] * inv * (squared ? 2.0 : 1.0 / dd);
            for (std::size_t k = 0; k < d; ++k) {
              const double u = c * (fi->data[m * d + k] - fi->data[n * d + k]);
              gf[m * d + k] += u;
              gf[n * d + k] -= u;
            }
          }
      });
}

/// Symmetric GCN normalization D^-1/2 (A + I) D^-1/2 with D the row sums of A + I.
inline Tensor gcn_normalize(const Tensor& A) {
  detail::require_rank("gcn_normalize", A, 2);
  const std::size_t N = A.dim(0);
  if (A.dim(1) != N) throw ShapeError("gcn_normalize: adjacency must be square, got " + shape_str(A.shape()));
  auto ad = A.data();
  std::vector<double> deg(N, 0.0);
  for (std::size_t m = 0; m < N; ++m) {
    for (std::size_t n = 0; n < N; ++n) deg[m] += ad[m * N + n] + (m == n ? 1.0 : 0.0);
    if (!(deg[m] > 0.0)) throw NumericError("gcn_normalize: non-positive degree at node " + std::to_string(m));
  }
  std::vector<double> S(N * N);
  for (std::size_t m = 0; m < N; ++m)
    for (std::size_t n = 0; n < N; ++n)
      S[m * N + n] = (ad[m * N + n] + (m == n ? 1.0 : 0.0)) / std::sqrt(deg[m] * deg[n]);
  auto Ssaved = S;
  return detail::make_result("gcn_normalize", {N, N}, std::move(S), {A},
                             [deg, Ssaved, N](const std::vector<double>& g, detail::GradSlots& s) {
                               std::vector<double> gdeg(N, 0.0);
                               for (std::size_t m = 0; m < N; ++m)
                                 for (std::size_t n = 0; n < N; ++n) {
                                   const double gs = g[m * N + n] * Ssaved[m * N + n];
                                   gdeg[m] -= 0.5 * gs / deg[m];
                                   gdeg[n] -= 0.5 * gs / deg[n];
                                 }
                               for (std::size_t m = 0; m < N; ++m)
                                 for (std::size_t n = 0; n < N; ++n)
                                   (*s[0])[m * N + n] += g[m * N + n] / std::sqrt(deg[m] * deg[n]) + gdeg[m];
                             });
}

}  // namespace gscd
