#include "irstd/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>

namespace irstd::ops {

using detail::grad_of;
using detail::make_result;

namespace {

using MatR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using CVecMap = Eigen::Map<const Eigen::VectorXd>;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

std::vector<double> copy_data(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.data().begin(), a.data().end());
  const double* pb = b.ptr();
  for (size_t i = 0; i < out.size(); ++i) out[i] += pb[i];
  return make_result(a.shape(), std::move(out), {&a, &b}, [a, b](TensorImpl& o) {
    for (const Tensor* t : {&a, &b})
      if (double* g = grad_of(*t))
        for (size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.data().begin(), a.data().end());
  const double* pb = b.ptr();
  for (size_t i = 0; i < out.size(); ++i) out[i] -= pb[i];
  return make_result(a.shape(), std::move(out), {&a, &b}, [a, b](TensorImpl& o) {
    if (double* g = grad_of(a))
      for (size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
    if (double* g = grad_of(b))
      for (size_t i = 0; i < o.grad.size(); ++i) g[i] -= o.grad[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(static_cast<size_t>(a.numel()));
  const double* pa = a.ptr();
  const double* pb = b.ptr();
  for (size_t i = 0; i < out.size(); ++i) out[i] = pa[i] * pb[i];
  OpCounter::add_extra(a.numel());
  return make_result(a.shape(), std::move(out), {&a, &b}, [a, b](TensorImpl& o) {
    const double* pa = a.ptr();
    const double* pb = b.ptr();
    if (double* g = grad_of(a))
      for (size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * pb[i];
    if (double* g = grad_of(b))
      for (size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * pa[i];
  });
}

Tensor scale(const Tensor& a, double s) {
  std::vector<double> out = copy_data(a);
  for (double& v : out) v *= s;
  OpCounter::add_extra(a.numel());
  return make_result(a.shape(), std::move(out), {&a}, [a, s](TensorImpl& o) {
    if (double* g = grad_of(a))
      for (size_t i = 0; i < o.grad.size(); ++i) g[i] += s * o.grad[i];
  });
}

Tensor add_scalar(const Tensor& a, double s) {
  std::vector<double> out = copy_data(a);
  for (double& v : out) v += s;
  return make_result(a.shape(), std::move(out), {&a}, [a](TensorImpl& o) {
    if (double* g = grad_of(a))
      for (size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
  });
}

Tensor add_broadcast(const Tensor& a, const Tensor& b) {
  Shape bs = b.shape();
  while (!bs.empty() && bs.front() == 1) bs.erase(bs.begin());
  const Shape& as = a.shape();
  if (bs.size() > as.size() || !std::equal(bs.rbegin(), bs.rend(), as.rbegin()))
    throw ShapeError("add_broadcast: " + shape_str(b.shape()) + " does not trail " +
                     shape_str(as));
  const int64_t inner = b.numel();
  const int64_t outer = a.numel() / std::max<int64_t>(inner, 1);
  std::vector<double> out = copy_data(a);
  const double* pb = b.ptr();
  for (int64_t r = 0; r < outer; ++r)
    for (int64_t i = 0; i < inner; ++i) out[static_cast<size_t>(r * inner + i)] += pb[i];
  return make_result(as, std::move(out), {&a, &b}, [a, b, inner, outer](TensorImpl& o) {
    if (double* g = grad_of(a))
      for (size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
    if (double* g = grad_of(b))
      for (int64_t r = 0; r < outer; ++r)
        for (int64_t i = 0; i < inner; ++i) g[i] += o.grad[static_cast<size_t>(r * inner + i)];
  });
}

namespace {
struct Mat3 {
  int64_t batch, rows, cols;
};
Mat3 as_mat3(const Tensor& t, const char* what) {
  if (t.rank() == 2) return {1, t.dim(0), t.dim(1)};
  if (t.rank() == 3) return {t.dim(0), t.dim(1), t.dim(2)};
  throw ShapeError(std::string("matmul: ") + what + " must be 2-D or 3-D, got " +
                   shape_str(t.shape()));
}
}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  if (trans_a && trans_b) throw std::invalid_argument("matmul: double transpose unsupported");
  const Mat3 ma = as_mat3(a, "lhs");
  const Mat3 mb = as_mat3(b, "rhs");
  if (ma.batch != mb.batch)
    throw ShapeError("matmul: batch mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  const int64_t m = trans_a ? ma.cols : ma.rows;
  const int64_t k = trans_a ? ma.rows : ma.cols;
  const int64_t kb = trans_b ? mb.cols : mb.rows;
  const int64_t n = trans_b ? mb.rows : mb.cols;
  if (k != kb)
    throw ShapeError("matmul: inner dim mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  const int64_t batch = ma.batch;
  std::vector<double> out(static_cast<size_t>(batch * m * n));
  for (int64_t i = 0; i < batch; ++i) {
    CMapR A(a.ptr() + i * ma.rows * ma.cols, ma.rows, ma.cols);
    CMapR B(b.ptr() + i * mb.rows * mb.cols, mb.rows, mb.cols);
    MapR C(out.data() + i * m * n, m, n);
    if (trans_a)
      C.noalias() = A.transpose() * B;
    else if (trans_b)
      C.noalias() = A * B.transpose();
    else
      C.noalias() = A * B;
  }
  OpCounter::add_macs(batch * m * n * k);
  Shape shape = (a.rank() == 2 && b.rank() == 2) ? Shape{m, n} : Shape{batch, m, n};
  return make_result(shape, std::move(out), {&a, &b},
                     [a, b, ma, mb, m, n, trans_a, trans_b](TensorImpl& o) {
                       double* ga = grad_of(a);
                       double* gb = grad_of(b);
                       for (int64_t i = 0; i < ma.batch; ++i) {
                         CMapR A(a.ptr() + i * ma.rows * ma.cols, ma.rows, ma.cols);
                         CMapR B(b.ptr() + i * mb.rows * mb.cols, mb.rows, mb.cols);
                         CMapR G(o.grad.data() + i * m * n, m, n);
                         if (ga) {
                           MapR GA(ga + i * ma.rows * ma.cols, ma.rows, ma.cols);
                           if (trans_a)
                             GA.noalias() += B * G.transpose();
                           else if (trans_b)
                             GA.noalias() += G * B;
                           else
                             GA.noalias() += G * B.transpose();
                         }
                         if (gb) {
                           MapR GB(gb + i * mb.rows * mb.cols, mb.rows, mb.cols);
                           if (trans_a)
                             GB.noalias() += A * G;
                           else if (trans_b)
                             GB.noalias() += G.transpose() * A;
                           else
                             GB.noalias() += A.transpose() * G;
                         }
                       }
                     });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (weight.rank() != 2) throw ShapeError("linear: weight must be 2-D");
  const int64_t out_f = weight.dim(0);
  const int64_t in_f = weight.dim(1);
  if (x.rank() < 1 || x.dim(-1) != in_f)
    throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                     shape_str(weight.shape()));
  if (bias.defined() && bias.numel() != out_f) throw ShapeError("linear: bias size mismatch");
  const int64_t rows = x.numel() / in_f;
  std::vector<double> out(static_cast<size_t>(rows * out_f));
  {
    CMapR X(x.ptr(), rows, in_f);
    CMapR Wt(weight.ptr(), out_f, in_f);
    MapR Y(out.data(), rows, out_f);
    Y.noalias() = X * Wt.transpose();
    if (bias.defined()) Y.rowwise() += CVecMap(bias.ptr(), out_f).transpose();
  }
  OpCounter::add_macs(rows * in_f * out_f);
  Shape shape = x.shape();
  shape.back() = out_f;
  std::vector<Tensor> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result(shape, std::move(out), inputs,
                     [x, weight, bias, rows, in_f, out_f](TensorImpl& o) {
                       CMapR G(o.grad.data(), rows, out_f);
                       if (double* gx = grad_of(x))
                         MapR(gx, rows, in_f).noalias() += G * CMapR(weight.ptr(), out_f, in_f);
                       if (double* gw = grad_of(weight))
                         MapR(gw, out_f, in_f).noalias() += G.transpose() * CMapR(x.ptr(), rows, in_f);
                       if (bias.defined())
                         if (double* gb = grad_of(bias))
                           VecMap(gb, out_f) += G.colwise().sum().transpose();
                     });
}

namespace {

struct ConvGeom {
  int64_t batch, cin, h, w, cout, k, oh, ow, stride, pad, groups, cin_g, cout_g;
};

// col: (cin_g * k * k, oh * ow) for one image and one group.
void im2col(const double* x, const ConvGeom& g, int64_t group, double* col) {
  const int64_t hw = g.oh * g.ow;
  for (int64_t c = 0; c < g.cin_g; ++c) {
    const double* xc = x + (group * g.cin_g + c) * g.h * g.w;
    for (int64_t ky = 0; ky < g.k; ++ky)
      for (int64_t kx = 0; kx < g.k; ++kx) {
        double* row = col + ((c * g.k + ky) * g.k + kx) * hw;
        for (int64_t oy = 0; oy < g.oh; ++oy) {
          const int64_t iy = oy * g.stride - g.pad + ky;
          for (int64_t ox = 0; ox < g.ow; ++ox) {
            const int64_t ix = ox * g.stride - g.pad + kx;
            row[oy * g.ow + ox] =
                (iy >= 0 && iy < g.h && ix >= 0 && ix < g.w) ? xc[iy * g.w + ix] : 0.0;
          }
        }
      }
  }
}

void col2im(const double* col, const ConvGeom& g, int64_t group, double* gx) {
  const int64_t hw = g.oh * g.ow;
  for (int64_t c = 0; c < g.cin_g; ++c) {
    double* xc = gx + (group * g.cin_g + c) * g.h * g.w;
    for (int64_t ky = 0; ky < g.k; ++ky)
      for (int64_t kx = 0; kx < g.k; ++kx) {
        const double* row = col + ((c * g.k + ky) * g.k + kx) * hw;
        for (int64_t oy = 0; oy < g.oh; ++oy) {
          const int64_t iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          for (int64_t ox = 0; ox < g.ow; ++ox) {
            const int64_t ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.w) xc[iy * g.w + ix] += row[oy * g.ow + ox];
          }
        }
      }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Conv2dOptions opt) {
  if (x.rank() != 4 || weight.rank() != 4)
    throw ShapeError("conv2d: expected 4-D input and weight, got " + shape_str(x.shape()) +
                     " and " + shape_str(weight.shape()));
  ConvGeom g{};
  g.batch = x.dim(0);
  g.cin = x.dim(1);
  g.h = x.dim(2);
  g.w = x.dim(3);
  g.cout = weight.dim(0);
  g.k = weight.dim(2);
  g.stride = opt.stride;
  g.pad = opt.padding;
  g.groups = opt.groups;
  if (g.groups < 1 || g.cin % g.groups || g.cout % g.groups)
    throw ShapeError("conv2d: channels not divisible by groups");
  g.cin_g = g.cin / g.groups;
  g.cout_g = g.cout / g.groups;
  if (weight.dim(1) != g.cin_g || weight.dim(3) != g.k)
    throw ShapeError("conv2d: weight " + shape_str(weight.shape()) + " incompatible with input " +
                     shape_str(x.shape()));
  if (bias.defined() && bias.numel() != g.cout) throw ShapeError("conv2d: bias size mismatch");
  g.oh = (g.h + 2 * g.pad - g.k) / g.stride + 1;
  g.ow = (g.w + 2 * g.pad - g.k) / g.stride + 1;
  if (g.oh <= 0 || g.ow <= 0) throw ShapeError("conv2d: input too small");

  const int64_t ohw = g.oh * g.ow;
  const int64_t kk = g.cin_g * g.k * g.k;
  std::vector<double> out(static_cast<size_t>(g.batch * g.cout * ohw), 0.0);
  std::vector<double> col(static_cast<size_t>(kk * ohw));
  for (int64_t b = 0; b < g.batch; ++b) {
    const double* xb = x.ptr() + b * g.cin * g.h * g.w;
    for (int64_t gr = 0; gr < g.groups; ++gr) {
      im2col(xb, g, gr, col.data());
      CMapR W(weight.ptr() + gr * g.cout_g * kk, g.cout_g, kk);
      MapR Y(out.data() + (b * g.cout + gr * g.cout_g) * ohw, g.cout_g, ohw);
      Y.noalias() = W * CMapR(col.data(), kk, ohw);
    }
    if (bias.defined())
      for (int64_t c = 0; c < g.cout; ++c) {
        double* yc = out.data() + (b * g.cout + c) * ohw;
        const double bv = bias.ptr()[c];
        for (int64_t i = 0; i < ohw; ++i) yc[i] += bv;
      }
  }
  OpCounter::add_macs(g.batch * g.cout * ohw * kk);
  std::vector<Tensor> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result(Shape{g.batch, g.cout, g.oh, g.ow}, std::move(out), inputs,
                     [x, weight, bias, g](TensorImpl& o) {
                       const int64_t ohw = g.oh * g.ow;
                       const int64_t kk = g.cin_g * g.k * g.k;
                       double* gx = grad_of(x);
                       double* gw = grad_of(weight);
                       std::vector<double> col(static_cast<size_t>(kk * ohw));
                       for (int64_t b = 0; b < g.batch; ++b) {
                         const double* xb = x.ptr() + b * g.cin * g.h * g.w;
                         for (int64_t gr = 0; gr < g.groups; ++gr) {
                           CMapR G(o.grad.data() + (b * g.cout + gr * g.cout_g) * ohw, g.cout_g,
                                   ohw);
                           if (gw) {
                             im2col(xb, g, gr, col.data());
                             MapR(gw + gr * g.cout_g * kk, g.cout_g, kk).noalias() +=
                                 G * CMapR(col.data(), kk, ohw).transpose();
                           }
                           if (gx) {
                             MapR C(col.data(), kk, ohw);
                             C.noalias() =
                                 CMapR(weight.ptr() + gr * g.cout_g * kk, g.cout_g, kk).transpose() * G;
                             col2im(col.data(), g, gr, gx + b * g.cin * g.h * g.w);
                           }
                         }
                       }
                       if (bias.defined())
                         if (double* gb = grad_of(bias))
                           for (int64_t b = 0; b < g.batch; ++b)
                             for (int64_t c = 0; c < g.cout; ++c) {
                               const double* gc = o.grad.data() + (b * g.cout + c) * ohw;
                               double s = 0.0;
                               for (int64_t i = 0; i < ohw; ++i) s += gc[i];
                               gb[c] += s;
                             }
                     });
}

namespace {

// Normalizes `groups` contiguous segments of length `len`; affine parameters
// are indexed by `affine_index(segment, offset)`.
template <class AffineIndex>
Tensor normalize_segments(const Tensor& x, int64_t segments, int64_t len, const Tensor& gamma,
                          const Tensor& beta, double eps, AffineIndex affine_index) {
  std::vector<double> out(static_cast<size_t>(x.numel()));
  std::vector<double> xhat(out.size());
  std::vector<double> inv_std(static_cast<size_t>(segments));
  const double* px = x.ptr();
  for (int64_t s = 0; s < segments; ++s) {
    const double* xs = px + s * len;
    double mu = 0.0;
    for (int64_t i = 0; i < len; ++i) mu += xs[i];
    mu /= static_cast<double>(len);
    double var = 0.0;
    for (int64_t i = 0; i < len; ++i) var += (xs[i] - mu) * (xs[i] - mu);
    var /= static_cast<double>(len);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<size_t>(s)] = is;
    for (int64_t i = 0; i < len; ++i) {
      const size_t idx = static_cast<size_t>(s * len + i);
      xhat[idx] = (xs[i] - mu) * is;
      const int64_t a = affine_index(s, i);
      out[idx] = xhat[idx] * gamma.ptr()[a] + beta.ptr()[a];
    }
  }
  OpCounter::add_extra(4 * x.numel());
  return make_result(x.shape(), std::move(out), {&x, &gamma, &beta},
                     [x, gamma, beta, segments, len, xhat = std::move(xhat),
                      inv_std = std::move(inv_std), affine_index](TensorImpl& o) {
                       double* gx = grad_of(x);
                       double* gg = grad_of(gamma);
                       double* gb = grad_of(beta);
                       std::vector<double> dxhat(static_cast<size_t>(len));
                       for (int64_t s = 0; s < segments; ++s) {
                         double m1 = 0.0, m2 = 0.0;
                         for (int64_t i = 0; i < len; ++i) {
                           const size_t idx = static_cast<size_t>(s * len + i);
                           const int64_t a = affine_index(s, i);
                           const double go = o.grad[idx];
                           if (gg) gg[a] += go * xhat[idx];
                           if (gb) gb[a] += go;
                           dxhat[static_cast<size_t>(i)] = go * gamma.ptr()[a];
                           m1 += dxhat[static_cast<size_t>(i)];
                           m2 += dxhat[static_cast<size_t>(i)] * xhat[idx];
                         }
                         if (!gx) continue;
                         m1 /= static_cast<double>(len);
                         m2 /= static_cast<double>(len);
                         const double is = inv_std[static_cast<size_t>(s)];
                         for (int64_t i = 0; i < len; ++i) {
                           const size_t idx = static_cast<size_t>(s * len + i);
                           gx[idx] += is * (dxhat[static_cast<size_t>(i)] - m1 - xhat[idx] * m2);
                         }
                       }
                     });
}

}  // namespace

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const int64_t d = x.dim(-1);
  if (gamma.numel() != d || beta.numel() != d) throw ShapeError("layer_norm: affine size mismatch");
  return normalize_segments(x, x.numel() / d, d, gamma, beta, eps,
                            [](int64_t, int64_t i) { return i; });
}

Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta,
                  double eps) {
  if (x.rank() != 4) throw ShapeError("group_norm: expected (B,C,H,W)");
  const int64_t c = x.dim(1);
  if (groups < 1 || c % groups) throw ShapeError("group_norm: channels not divisible by groups");
  if (gamma.numel() != c || beta.numel() != c) throw ShapeError("group_norm: affine size mismatch");
  const int64_t hw = x.dim(2) * x.dim(3);
  const int64_t cpg = c / groups;
  const int64_t len = cpg * hw;
  return normalize_segments(x, x.dim(0) * groups, len, gamma, beta, eps,
                            [groups, cpg, hw](int64_t s, int64_t i) {
                              return (s % groups) * cpg + i / hw;
                            });
}

namespace {
template <class F, class DF>
Tensor unary(const Tensor& x, F f, DF df) {
  std::vector<double> out(static_cast<size_t>(x.numel()));
  const double* px = x.ptr();
  for (size_t i = 0; i < out.size(); ++i) out[i] = f(px[i]);
  OpCounter::add_extra(x.numel());
  return make_result(x.shape(), std::move(out), {&x}, [x, df](TensorImpl& o) {
    if (double* g = grad_of(x)) {
      const double* px = x.ptr();
      for (size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * df(px[i], o.data[i]);
    }
  });
}
}  // namespace

Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  return unary(
      x, [=](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [=](double v, double) {
        return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
      });
}

Tensor relu(const Tensor& x) {
  return unary(
      x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x,
      [](double v) {
        return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor softmax(const Tensor& x) {
  const int64_t d = x.dim(-1);
  const int64_t rows = x.numel() / d;
  std::vector<double> out(static_cast<size_t>(x.numel()));
  const double* px = x.ptr();
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = px + r * d;
    double* yr = out.data() + r * d;
    const double mx = *std::max_element(xr, xr + d);
    double s = 0.0;
    for (int64_t i = 0; i < d; ++i) s += (yr[i] = std::exp(xr[i] - mx));
    for (int64_t i = 0; i < d; ++i) yr[i] /= s;
  }
  OpCounter::add_extra(3 * x.numel());
  return make_result(x.shape(), std::move(out), {&x}, [x, rows, d](TensorImpl& o) {
    if (double* g = grad_of(x))
      for (int64_t r = 0; r < rows; ++r) {
        const double* yr = o.data.data() + r * d;
        const double* gr = o.grad.data() + r * d;
        double dot = 0.0;
        for (int64_t i = 0; i < d; ++i) dot += yr[i] * gr[i];
        for (int64_t i = 0; i < d; ++i) g[r * d + i] += yr[i] * (gr[i] - dot);
      }
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  int64_t known = 1;
  int infer = -1;
  for (size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (infer >= 0) throw ShapeError("reshape: more than one -1");
      infer = static_cast<int>(i);
    } else {
      known *= shape[i];
    }
  }
  if (infer >= 0) shape[static_cast<size_t>(infer)] = known ? x.numel() / known : 0;
  if (shape_numel(shape) != x.numel())
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  return make_result(std::move(shape), copy_data(x), {&x}, [x](TensorImpl& o) {
    if (double* g = grad_of(x))
      for (size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
  });
}

Tensor permute(const Tensor& x, const std::vector<int>& perm) {
  const int r = x.rank();
  if (static_cast<int>(perm.size()) != r) throw ShapeError("permute: rank mismatch");
  std::vector<int64_t> in_strides(static_cast<size_t>(r), 1);
  for (int i = r - 2; i >= 0; --i) in_strides[i] = in_strides[i + 1] * x.dim(i + 1);
  Shape out_shape(static_cast<size_t>(r));
  std::vector<int64_t> src_strides(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) {
    out_shape[i] = x.dim(perm[i]);
    src_strides[i] = in_strides[perm[i]];
  }
  // Flat map from output index to input index.
  const int64_t n = x.numel();
  std::vector<int64_t> src(static_cast<size_t>(n));
  std::vector<int64_t> idx(static_cast<size_t>(r), 0);
  int64_t off = 0;
  for (int64_t i = 0; i < n; ++i) {
    src[static_cast<size_t>(i)] = off;
    for (int a = r - 1; a >= 0; --a) {
      if (++idx[a] < out_shape[a]) {
        off += src_strides[a];
        break;
      }
      off -= src_strides[a] * (out_shape[a] - 1);
      idx[a] = 0;
    }
  }
  std::vector<double> out(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = x.ptr()[src[static_cast<size_t>(i)]];
  return make_result(out_shape, std::move(out), {&x}, [x, src = std::move(src)](TensorImpl& o) {
    if (double* g = grad_of(x))
      for (size_t i = 0; i < o.grad.size(); ++i) g[src[i]] += o.grad[i];
  });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const int r = parts[0].rank();
  if (axis < 0) axis += r;
  Shape shape = parts[0].shape();
  int64_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != r) throw ShapeError("concat: rank mismatch");
    for (int i = 0; i < r; ++i)
      if (i != axis && p.dim(i) != shape[i])
        throw ShapeError("concat: shape mismatch " + shape_str(p.shape()) + " vs " +
                         shape_str(shape));
    total += p.dim(axis);
  }
  shape[axis] = total;
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= shape[i];
  for (int i = axis + 1; i < r; ++i) inner *= shape[i];
  std::vector<double> out(static_cast<size_t>(shape_numel(shape)));
  int64_t offset = 0;
  for (const auto& p : parts) {
    const int64_t block = p.dim(axis) * inner;
    for (int64_t o = 0; o < outer; ++o)
      std::copy_n(p.ptr() + o * block, block, out.data() + o * total * inner + offset);
    offset += block;
  }
  return make_result(shape, std::move(out), parts, [parts, outer, inner, total, axis](TensorImpl& o) {
    int64_t offset = 0;
    for (const auto& p : parts) {
      const int64_t block = p.dim(axis) * inner;
      if (double* g = grad_of(p))
        for (int64_t ob = 0; ob < outer; ++ob)
          for (int64_t i = 0; i < block; ++i)
            g[ob * block + i] += o.grad[static_cast<size_t>(ob * total * inner + offset + i)];
      offset += block;
    }
  });
}

Tensor slice(const Tensor& x, int axis, int64_t start, int64_t length) {
  const int r = x.rank();
  if (axis < 0) axis += r;
  if (start < 0 || length < 0 || start + length > x.dim(axis))
    throw ShapeError("slice: range out of bounds for " + shape_str(x.shape()));
  Shape shape = x.shape();
  const int64_t full = shape[axis];
  shape[axis] = length;
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= shape[i];
  for (int i = axis + 1; i < r; ++i) inner *= shape[i];
  std::vector<double> out(static_cast<size_t>(shape_numel(shape)));
  for (int64_t o = 0; o < outer; ++o)
    std::copy_n(x.ptr() + (o * full + start) * inner, length * inner,
                out.data() + o * length * inner);
  return make_result(shape, std::move(out), {&x},
                     [x, outer, inner, full, start, length](TensorImpl& o) {
                       if (double* g = grad_of(x))
                         for (int64_t ob = 0; ob < outer; ++ob)
                           for (int64_t i = 0; i < length * inner; ++i)
                             g[(ob * full + start) * inner + i] +=
                                 o.grad[static_cast<size_t>(ob * length * inner + i)];
                     });
}

Tensor clone(const Tensor& x) {
  return make_result(x.shape(), copy_data(x), {&x}, [x](TensorImpl& o) {
    if (double* g = grad_of(x))
      for (size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
  });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return make_result(Shape{}, {s}, {&x}, [x](TensorImpl& o) {
    if (double* g = grad_of(x))
      for (int64_t i = 0; i < x.numel(); ++i) g[i] += o.grad[0];
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor map_to_tokens(const Tensor& x) {
  if (x.rank() != 4) throw ShapeError("map_to_tokens: expected (B,C,H,W)");
  const int64_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  return reshape(permute(reshape(x, {b, c, hw}), {0, 2, 1}), {b, hw, c});
}

Tensor tokens_to_map(const Tensor& t, int64_t height, int64_t width) {
  if (t.rank() != 3 || t.dim(1) != height * width)
    throw ShapeError("tokens_to_map: " + shape_str(t.shape()) + " vs " + std::to_string(height) +
                     "x" + std::to_string(width));
  const int64_t b = t.dim(0), c = t.dim(2);
  return reshape(permute(t, {0, 2, 1}), {b, c, height, width});
}

Tensor resize_nearest(const Tensor& x, int64_t height, int64_t width) {
  if (x.rank() != 4) throw ShapeError("resize_nearest: expected (B,C,H,W)");
  const int64_t planes = x.dim(0) * x.dim(1), ih = x.dim(2), iw = x.dim(3);
  if (height == ih && width == iw) return clone(x);
  std::vector<int64_t> src(static_cast<size_t>(height * width));
  for (int64_t y = 0; y < height; ++y) {
    const int64_t sy = std::min(ih - 1, (y * ih) / height);
    for (int64_t xx = 0; xx < width; ++xx)
      src[static_cast<size_t>(y * width + xx)] = sy * iw + std::min(iw - 1, (xx * iw) / width);
  }
  std::vector<double> out(static_cast<size_t>(planes * height * width));
  for (int64_t p = 0; p < planes; ++p)
    for (size_t i = 0; i < src.size(); ++i) out[p * src.size() + i] = x.ptr()[p * ih * iw + src[i]];
  return make_result(Shape{x.dim(0), x.dim(1), height, width}, std::move(out), {&x},
                     [x, planes, ih, iw, src = std::move(src)](TensorImpl& o) {
                       if (double* g = grad_of(x))
                         for (int64_t p = 0; p < planes; ++p)
                           for (size_t i = 0; i < src.size(); ++i)
                             g[p * ih * iw + src[i]] += o.grad[p * src.size() + i];
                     });
}

namespace {
struct Tap {
  int64_t i0, i1;
  double w0, w1;
};
std::vector<Tap> bilinear_taps(int64_t in, int64_t out) {
  std::vector<Tap> taps(static_cast<size_t>(out));
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (int64_t o = 0; o < out; ++o) {
    double s = (static_cast<double>(o) + 0.5) * scale - 0.5;
    if (s < 0.0) s = 0.0;
    int64_t i0 = static_cast<int64_t>(std::floor(s));
    if (i0 > in - 1) i0 = in - 1;
    const int64_t i1 = std::min(i0 + 1, in - 1);
    const double f = s - static_cast<double>(i0);
    taps[static_cast<size_t>(o)] = {i0, i1, 1.0 - f, f};
  }
  return taps;
}
}  // namespace

Tensor resize_bilinear(const Tensor& x, int64_t height, int64_t width) {
  if (x.rank() != 4) throw ShapeError("resize_bilinear: expected (B,C,H,W)");
  const int64_t planes = x.dim(0) * x.dim(1), ih = x.dim(2), iw = x.dim(3);
  if (height == ih && width == iw) return clone(x);
  auto ty = bilinear_taps(ih, height);
  auto tx = bilinear_taps(iw, width);
  std::vector<double> out(static_cast<size_t>(planes * height * width));
  for (int64_t p = 0; p < planes; ++p) {
    const double* xp = x.ptr() + p * ih * iw;
    double* op = out.data() + p * height * width;
    for (int64_t y = 0; y < height; ++y) {
      const Tap& a = ty[static_cast<size_t>(y)];
      for (int64_t xx = 0; xx < width; ++xx) {
        const Tap& b = tx[static_cast<size_t>(xx)];
        op[y * width + xx] = a.w0 * (b.w0 * xp[a.i0 * iw + b.i0] + b.w1 * xp[a.i0 * iw + b.i1]) +
                             a.w1 * (b.w0 * xp[a.i1 * iw + b.i0] + b.w1 * xp[a.i1 * iw + b.i1]);
      }
    }
  }
  OpCounter::add_extra(4 * static_cast<int64_t>(out.size()));
  return make_result(Shape{x.dim(0), x.dim(1), height, width}, std::move(out), {&x},
                     [x, planes, ih, iw, height, width, ty = std::move(ty),
                      tx = std::move(tx)](TensorImpl& o) {
                       double* g = grad_of(x);
                       if (!g) return;
                       for (int64_t p = 0; p < planes; ++p) {
                         double* gp = g + p * ih * iw;
                         const double* go = o.grad.data() + p * height * width;
                         for (int64_t y = 0; y < height; ++y) {
                           const Tap& a = ty[static_cast<size_t>(y)];
                           for (int64_t xx = 0; xx < width; ++xx) {
                             const Tap& b = tx[static_cast<size_t>(xx)];
                             const double v = go[y * width + xx];
                             gp[a.i0 * iw + b.i0] += a.w0 * b.w0 * v;
                             gp[a.i0 * iw + b.i1] += a.w0 * b.w1 * v;
                             gp[a.i1 * iw + b.i0] += a.w1 * b.w0 * v;
                             gp[a.i1 * iw + b.i1] += a.w1 * b.w1 * v;
                           }
                         }
                       }
                     });
}

Tensor point_sample(const Tensor& x, const Tensor& points) {
  if (x.rank() != 4 || points.rank() != 3 || points.dim(2) != 2 || points.dim(0) != x.dim(0))
    throw ShapeError("point_sample: expected (B,C,H,W) and (B,P,2), got " + shape_str(x.shape()) +
                     " and " + shape_str(points.shape()));
  const int64_t batch = x.dim(0), ch = x.dim(1), h = x.dim(2), w = x.dim(3), np = points.dim(1);
  struct Corner {
    int64_t idx[4];
    double wt[4];
  };
  std::vector<Corner> corners(static_cast<size_t>(batch * np));
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t p = 0; p < np; ++p) {
      const double* pt = points.ptr() + (b * np + p) * 2;
      const double px = std::clamp(pt[0] * static_cast<double>(w) - 0.5, 0.0, static_cast<double>(w - 1));
      const double py = std::clamp(pt[1] * static_cast<double>(h) - 0.5, 0.0, static_cast<double>(h - 1));
      const int64_t x0 = std::min<int64_t>(static_cast<int64_t>(px), w - 1);
      const int64_t y0 = std::min<int64_t>(static_cast<int64_t>(py), h - 1);
      const int64_t x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
      const double fx = px - static_cast<double>(x0), fy = py - static_cast<double>(y0);
      corners[static_cast<size_t>(b * np + p)] = {
          {y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1},
          {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy}};
    }
  std::vector<double> out(static_cast<size_t>(batch * ch * np));
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t c = 0; c < ch; ++c) {
      const double* plane = x.ptr() + (b * ch + c) * h * w;
      for (int64_t p = 0; p < np; ++p) {
        const Corner& cr = corners[static_cast<size_t>(b * np + p)];
        double v = 0.0;
        for (int j = 0; j < 4; ++j) v += cr.wt[j] * plane[cr.idx[j]];
        out[static_cast<size_t>((b * ch + c) * np + p)] = v;
      }
    }
  return make_result(Shape{batch, ch, np}, std::move(out), {&x},
                     [x, batch, ch, h, w, np, corners = std::move(corners)](TensorImpl& o) {
                       double* g = grad_of(x);
                       if (!g) return;
                       for (int64_t b = 0; b < batch; ++b)
                         for (int64_t c = 0; c < ch; ++c) {
                           double* plane = g + (b * ch + c) * h * w;
                           for (int64_t p = 0; p < np; ++p) {
                             const Corner& cr = corners[static_cast<size_t>(b * np + p)];
                             const double go = o.grad[static_cast<size_t>((b * ch + c) * np + p)];
                             for (int j = 0; j < 4; ++j) plane[cr.idx[j]] += cr.wt[j] * go;
                           }
                         }
                     });
}

Tensor deform_sample(const Tensor& value, const std::vector<LevelShape>& levels,
                     const Tensor& locations, const Tensor& weights) {
  if (value.rank() != 4 || locations.rank() != 6 || weights.rank() != 5)
    throw ShapeError("deform_sample: unexpected ranks");
  const int64_t batch = value.dim(0), nv = value.dim(1), heads = value.dim(2), hd = value.dim(3);
  const int64_t nq = locations.dim(1);
  const int64_t nl = static_cast<int64_t>(levels.size());
  const int64_t np = locations.dim(4);
  if (locations.dim(0) != batch || locations.dim(2) != heads || locations.dim(3) != nl ||
      locations.dim(5) != 2)
    throw ShapeError("deform_sample: locations " + shape_str(locations.shape()));
  if (weights.dim(0) != batch || weights.dim(1) != nq || weights.dim(2) != heads ||
      weights.dim(3) != nl || weights.dim(4) != np)
    throw ShapeError("deform_sample: weights " + shape_str(weights.shape()));
  std::vector<int64_t> start(static_cast<size_t>(nl));
  int64_t total = 0;
  for (int64_t l = 0; l < nl; ++l) {
    start[static_cast<size_t>(l)] = total;
    total += levels[static_cast<size_t>(l)].height * levels[static_cast<size_t>(l)].width;
  }
  if (total != nv) throw ShapeError("deform_sample: level sizes do not sum to value length");

  // Visits each (b, q, h, l, k) sample with its bilinear corners.
  // Captures by value: it is reused inside the backward closure.
  auto for_each_sample = [levels, start, locations, batch, nq, heads, nl, np, nv, hd](auto&& fn) {
    for (int64_t b = 0; b < batch; ++b)
      for (int64_t q = 0; q < nq; ++q)
        for (int64_t hh = 0; hh < heads; ++hh)
          for (int64_t l = 0; l < nl; ++l) {
            const LevelShape& ls = levels[static_cast<size_t>(l)];
            for (int64_t k = 0; k < np; ++k) {
              const int64_t sidx = (((b * nq + q) * heads + hh) * nl + l) * np + k;
              const double* loc = locations.ptr() + sidx * 2;
              const double px = loc[0] * static_cast<double>(ls.width) - 0.5;
              const double py = loc[1] * static_cast<double>(ls.height) - 0.5;
              const double fx0 = std::floor(px), fy0 = std::floor(py);
              const int64_t x0 = static_cast<int64_t>(fx0), y0 = static_cast<int64_t>(fy0);
              const double fx = px - fx0, fy = py - fy0;
              // corner order: (x0,y0) (x1,y0) (x0,y1) (x1,y1); -1 when outside
              int64_t rows[4];
              const int64_t cx[4] = {x0, x0 + 1, x0, x0 + 1};
              const int64_t cy[4] = {y0, y0, y0 + 1, y0 + 1};
              for (int j = 0; j < 4; ++j)
                rows[j] = (cx[j] >= 0 && cx[j] < ls.width && cy[j] >= 0 && cy[j] < ls.height)
                              ? ((b * nv + start[static_cast<size_t>(l)] + cy[j] * ls.width + cx[j]) *
                                     heads + hh) * hd
                              : -1;
              fn(b, q, hh, l, k, sidx, rows, fx, fy, ls);
            }
          }
  };

  std::vector<double> out(static_cast<size_t>(batch * nq * heads * hd), 0.0);
  const double* pv = value.ptr();
  for_each_sample([&](int64_t b, int64_t q, int64_t hh, int64_t, int64_t, int64_t sidx,
                      const int64_t* rows, double fx, double fy, const LevelShape&) {
    const double a = weights.ptr()[sidx];
    const double cw[4] = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
    double* o = out.data() + ((b * nq + q) * heads + hh) * hd;
    for (int j = 0; j < 4; ++j) {
      if (rows[j] < 0) continue;
      const double s = a * cw[j];
      for (int64_t c = 0; c < hd; ++c) o[c] += s * pv[rows[j] + c];
    }
  });
  OpCounter::add_macs(batch * nq * heads * nl * np * 5 * hd);

  return make_result(
      Shape{batch, nq, heads * hd}, std::move(out), {&value, &locations, &weights},
      [value, locations, weights, for_each_sample, nq, heads, hd](TensorImpl& o) {
        double* gv = grad_of(value);
        double* gl = grad_of(locations);
        double* gw = grad_of(weights);
        const double* pv = value.ptr();
        for_each_sample([&](int64_t b, int64_t q, int64_t hh, int64_t, int64_t, int64_t sidx,
                            const int64_t* rows, double fx, double fy, const LevelShape& ls) {
          const double a = weights.ptr()[sidx];
          const double* go = o.grad.data() + ((b * nq + q) * heads + hh) * hd;
          const double cw[4] = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
          // <go, v_corner> for each corner
          double dots[4] = {0, 0, 0, 0};
          for (int j = 0; j < 4; ++j) {
            if (rows[j] < 0) continue;
            for (int64_t c = 0; c < hd; ++c) dots[j] += go[c] * pv[rows[j] + c];
            if (gv) {
              const double s = a * cw[j];
              for (int64_t c = 0; c < hd; ++c) gv[rows[j] + c] += s * go[c];
            }
          }
          if (gw) gw[sidx] += cw[0] * dots[0] + cw[1] * dots[1] + cw[2] * dots[2] + cw[3] * dots[3];
          if (gl) {
            const double dpx = (1 - fy) * (dots[1] - dots[0]) + fy * (dots[3] - dots[2]);
            const double dpy = (1 - fx) * (dots[2] - dots[0]) + fx * (dots[3] - dots[1]);
            gl[sidx * 2] += a * dpx * static_cast<double>(ls.width);
            gl[sidx * 2 + 1] += a * dpy * static_cast<double>(ls.height);
          }
        });
      });
}

Tensor sine_position_encoding(int64_t height, int64_t width, int64_t dim) {
  if (dim % 4 != 0) throw ShapeError("sine_position_encoding: dim must be divisible by 4");
  const int64_t quarter = dim / 4;
  std::vector<double> out(static_cast<size_t>(height * width * dim));
  for (int64_t y = 0; y < height; ++y)
    for (int64_t x = 0; x < width; ++x) {
      double* row = out.data() + (y * width + x) * dim;
      const double ny = (static_cast<double>(y) + 0.5) / static_cast<double>(height);
      const double nx = (static_cast<double>(x) + 0.5) / static_cast<double>(width);
      for (int64_t i = 0; i < quarter; ++i) {
        const double freq = 2.0 * std::numbers::pi * std::pow(10000.0, -static_cast<double>(i) / quarter);
        row[i] = std::sin(nx * freq);
        row[quarter + i] = std::cos(nx * freq);
        row[2 * quarter + i] = std::sin(ny * freq);
        row[3 * quarter + i] = std::cos(ny * freq);
      }
    }
  return Tensor(Shape{1, height * width, dim}, std::move(out));
}

}  // namespace irstd::ops
