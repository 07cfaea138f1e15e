#pragma once

// Differentiable op set. Each op has a raw forward (plain tensors) and a
// traced form taking a GradientGroup*; pass nullptr (or an idle group) for
// eval mode. Backward functions are closures recorded on the group's trace.
//
// Conventions:
//   matrices     (1, 1, rows, cols)
//   channel vecs (1, C, 1, 1)
//   feature vecs (B, D, 1, 1)
// ReLU uses the x > 0 mask, so the subgradient at 0 is 0.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "bicovg/tape.hpp"
#include "bicovg/tensor.hpp"

namespace bicovg {

namespace detail {

inline bool rec_on(GradientGroup* g) { return g && g->recording(); }

inline void check_owner(GradientGroup* g, const Val& v, const char* op) {
  if (v.tracked() && v.owner != g)
    throw std::logic_error(std::string(op) +
                           ": input value belongs to a different group");
}

// out[y][x] += k * in[y+dy][x+dx] over the in-range window. dy, dx in
// {-1, 0, 1}. The inner loop is contiguous in x on both sides.
inline void acc_shifted(double* out, const double* in, double k, int64_t h,
                        int64_t w, int dy, int dx) {
  int64_t y0 = std::max<int64_t>(0, -dy), y1 = std::min(h, h - dy);
  int64_t x0 = std::max<int64_t>(0, -dx), x1 = std::min(w, w - dx);
  int64_t n = x1 - x0;
  for (int64_t y = y0; y < y1; ++y) {
    double* o = out + y * w + x0;
    const double* i = in + (y + dy) * w + (x0 + dx);
    for (int64_t x = 0; x < n; ++x) o[x] += k * i[x];
  }
}

// sum over y,x of a[y][x] * b[y+dy][x+dx] over the in-range window.
inline double dot_shifted(const double* a, const double* b, int64_t h,
                          int64_t w, int dy, int dx) {
  int64_t y0 = std::max<int64_t>(0, -dy), y1 = std::min(h, h - dy);
  int64_t x0 = std::max<int64_t>(0, -dx), x1 = std::min(w, w - dx);
  int64_t n = x1 - x0;
  double s = 0.0;
  for (int64_t y = y0; y < y1; ++y) {
    const double* pa = a + y * w + x0;
    const double* pb = b + (y + dy) * w + (x0 + dx);
    for (int64_t x = 0; x < n; ++x) s += pa[x] * pb[x];
  }
  return s;
}

}  // namespace detail

// ---- conv 3x3, stride 1, pad 1 -------------------------------------------

inline Tensor4 conv3x3_fwd(const Tensor4& x, const Tensor4& w,
                           const Tensor4& bias) {
  const Shape4& xs = x.shape();
  const Shape4& ws = w.shape();
  if (ws.h != 3 || ws.w != 3)
    throw std::invalid_argument("conv3x3: kernel spatial dims must be 3x3, got " +
                                ws.str());
  if (ws.c != xs.c)
    throw std::invalid_argument(
        "conv3x3: input channels " + std::to_string(xs.c) +
        " do not match kernel input channels " + std::to_string(ws.c));
  if (bias.shape() != Shape4{1, ws.b, 1, 1})
    throw std::invalid_argument("conv3x3: bias shape " + bias.shape().str() +
                                " must be (1," + std::to_string(ws.b) +
                                ",1,1)");
  int64_t B = xs.b, Ci = xs.c, Co = ws.b, H = xs.h, W = xs.w, hw = H * W;
  Tensor4 out = Tensor4::zeros({B, Co, H, W});
  const double* xp = x.data();
  const double* wp = w.data();
  const double* bp = bias.data();
  double* op = out.data();
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t oc = 0; oc < Co; ++oc) {
      double* oplane = op + (b * Co + oc) * hw;
      double bv = bp[oc];
      for (int64_t i = 0; i < hw; ++i) oplane[i] = bv;
      for (int64_t ic = 0; ic < Ci; ++ic) {
        const double* iplane = xp + (b * Ci + ic) * hw;
        const double* k = wp + (oc * Ci + ic) * 9;
        for (int ky = 0; ky < 3; ++ky)
          for (int kx = 0; kx < 3; ++kx)
            detail::acc_shifted(oplane, iplane, k[ky * 3 + kx], H, W, ky - 1,
                                kx - 1);
      }
    }
  }
  return out;
}

inline Val conv3x3(GradientGroup* g, const Val& x, const Val& w,
                   const Val& bias) {
  detail::check_owner(g, x, "conv3x3");
  detail::check_owner(g, w, "conv3x3");
  detail::check_owner(g, bias, "conv3x3");
  Tensor4 out = conv3x3_fwd(x.t, w.t, bias.t);
  if (!detail::rec_on(g) || (!x.tracked() && !w.tracked() && !bias.tracked()))
    return Val(std::move(out));
  int sx = g->save(x.t), sw = g->save(w.t);
  int xn = x.node, wn = w.node, bn = bias.node;
  int id = g->record([sx, sw, xn, wn, bn](GradientGroup& gg,
                                          const Tensor4& go) {
    const Tensor4& xt = gg.saved(sx);
    const Tensor4& wt = gg.saved(sw);
    int64_t B = xt.shape().b, Ci = xt.shape().c, Co = wt.shape().b;
    int64_t H = xt.shape().h, W = xt.shape().w, hw = H * W;
    const double* gp = go.data();
    const double* xp = xt.data();
    const double* wp = wt.data();
    if (gg.wants(xn)) {
      Tensor4 gx = Tensor4::zeros(xt.shape());
      double* gxp = gx.data();
      for (int64_t b = 0; b < B; ++b)
        for (int64_t ic = 0; ic < Ci; ++ic) {
          double* iplane = gxp + (b * Ci + ic) * hw;
          for (int64_t oc = 0; oc < Co; ++oc) {
            const double* gplane = gp + (b * Co + oc) * hw;
            const double* k = wp + (oc * Ci + ic) * 9;
            for (int ky = 0; ky < 3; ++ky)
              for (int kx = 0; kx < 3; ++kx)
                detail::acc_shifted(iplane, gplane, k[ky * 3 + kx], H, W,
                                    1 - ky, 1 - kx);
          }
        }
      gg.add_grad(xn, std::move(gx));
    }
    if (gg.wants(wn)) {
      Tensor4 gw = Tensor4::zeros(wt.shape());
      double* gwp = gw.data();
      for (int64_t oc = 0; oc < Co; ++oc)
        for (int64_t ic = 0; ic < Ci; ++ic) {
          double* k = gwp + (oc * Ci + ic) * 9;
          for (int64_t b = 0; b < B; ++b) {
            const double* gplane = gp + (b * Co + oc) * hw;
            const double* iplane = xp + (b * Ci + ic) * hw;
            for (int ky = 0; ky < 3; ++ky)
              for (int kx = 0; kx < 3; ++kx)
                k[ky * 3 + kx] += detail::dot_shifted(gplane, iplane, H, W,
                                                      ky - 1, kx - 1);
          }
        }
      gg.add_grad(wn, std::move(gw));
    }
    if (gg.wants(bn)) {
      Tensor4 gb = Tensor4::zeros({1, Co, 1, 1});
      double* gbp = gb.data();
      for (int64_t b = 0; b < B; ++b)
        for (int64_t oc = 0; oc < Co; ++oc) {
          const double* gplane = gp + (b * Co + oc) * hw;
          double s = 0.0;
          for (int64_t i = 0; i < hw; ++i) s += gplane[i];
          gbp[oc] += s;
        }
      gg.add_grad(bn, std::move(gb));
    }
  });
  return Val(std::move(out), id, g);
}

// ---- relu ------------------------------------------------------------------

inline Tensor4 relu_fwd(const Tensor4& x) {
  Tensor4 out = Tensor4::zeros(x.shape());
  const double* xp = x.data();
  double* op = out.data();
  int64_t n = x.elems();
  for (int64_t i = 0; i < n; ++i) op[i] = xp[i] > 0.0 ? xp[i] : 0.0;
  return out;
}

inline Val relu(GradientGroup* g, const Val& x) {
  detail::check_owner(g, x, "relu");
  Tensor4 out = relu_fwd(x.t);
  if (!detail::rec_on(g) || !x.tracked()) return Val(std::move(out));
  int s = g->save(out);
  int xn = x.node;
  int id = g->record([s, xn](GradientGroup& gg, const Tensor4& go) {
    if (!gg.wants(xn)) return;
    const Tensor4& o = gg.saved(s);
    Tensor4 gx = Tensor4::zeros(o.shape());
    const double* op = o.data();
    const double* gp = go.data();
    double* gxp = gx.data();
    int64_t n = o.elems();
    for (int64_t i = 0; i < n; ++i) gxp[i] = op[i] > 0.0 ? gp[i] : 0.0;
    gg.add_grad(xn, std::move(gx));
  });
  return Val(std::move(out), id, g);
}

// ---- pooling ----------------------------------------------------------------

constexpr double kRmsPoolEps = 1e-12;

inline void check_even_pool(const Shape4& s, const char* op) {
  if (s.h % 2 != 0 || s.w % 2 != 0)
    throw std::invalid_argument(std::string(op) + ": spatial dims " + s.str() +
                                " must be even for 2x2 stride-2 pooling");
}

// RMS pooling: sqrt of the mean square over each 2x2 window.
inline Tensor4 rms_pool2x2_fwd(const Tensor4& x) {
  check_even_pool(x.shape(), "rms_pool2x2");
  int64_t B = x.shape().b, C = x.shape().c, H = x.shape().h, W = x.shape().w;
  int64_t Ho = H / 2, Wo = W / 2;
  Tensor4 out = Tensor4::zeros({B, C, Ho, Wo});
  const double* xp = x.data();
  double* op = out.data();
  for (int64_t bc = 0; bc < B * C; ++bc) {
    const double* ip = xp + bc * H * W;
    double* o = op + bc * Ho * Wo;
    for (int64_t y = 0; y < Ho; ++y)
      for (int64_t xx = 0; xx < Wo; ++xx) {
        const double* p0 = ip + (2 * y) * W + 2 * xx;
        const double* p1 = p0 + W;
        double s = p0[0] * p0[0] + p0[1] * p0[1] + p1[0] * p1[0] +
                   p1[1] * p1[1];
        o[y * Wo + xx] = std::sqrt(s / 4.0);
      }
  }
  return out;
}

inline Val rms_pool2x2(GradientGroup* g, const Val& x) {
  detail::check_owner(g, x, "rms_pool2x2");
  Tensor4 out = rms_pool2x2_fwd(x.t);
  if (!detail::rec_on(g) || !x.tracked()) return Val(std::move(out));
  int sx = g->save(x.t), so = g->save(out);
  int xn = x.node;
  int id = g->record([sx, so, xn](GradientGroup& gg, const Tensor4& go) {
    if (!gg.wants(xn)) return;
    const Tensor4& xt = gg.saved(sx);
    const Tensor4& ot = gg.saved(so);
    int64_t B = xt.shape().b, C = xt.shape().c, H = xt.shape().h,
            W = xt.shape().w;
    int64_t Ho = H / 2, Wo = W / 2;
    Tensor4 gx = Tensor4::zeros(xt.shape());
    const double* xp = xt.data();
    const double* op = ot.data();
    const double* gp = go.data();
    double* gxp = gx.data();
    for (int64_t bc = 0; bc < B * C; ++bc) {
      const double* ip = xp + bc * H * W;
      double* gi = gxp + bc * H * W;
      const double* o = op + bc * Ho * Wo;
      const double* gr = gp + bc * Ho * Wo;
      for (int64_t y = 0; y < Ho; ++y)
        for (int64_t xx = 0; xx < Wo; ++xx) {
          double denom = 4.0 * std::max(o[y * Wo + xx], kRmsPoolEps);
          double gov = gr[y * Wo + xx] / denom;
          int64_t base = (2 * y) * W + 2 * xx;
          gi[base] += gov * ip[base];
          gi[base + 1] += gov * ip[base + 1];
          gi[base + W] += gov * ip[base + W];
          gi[base + W + 1] += gov * ip[base + W + 1];
        }
    }
    gg.add_grad(xn, std::move(gx));
  });
  return Val(std::move(out), id, g);
}

inline Tensor4 avg_pool2x2_fwd(const Tensor4& x) {
  check_even_pool(x.shape(), "avg_pool2x2");
  int64_t B = x.shape().b, C = x.shape().c, H = x.shape().h, W = x.shape().w;
  int64_t Ho = H / 2, Wo = W / 2;
  Tensor4 out = Tensor4::zeros({B, C, Ho, Wo});
  const double* xp = x.data();
  double* op = out.data();
  for (int64_t bc = 0; bc < B * C; ++bc) {
    const double* ip = xp + bc * H * W;
    double* o = op + bc * Ho * Wo;
    for (int64_t y = 0; y < Ho; ++y)
      for (int64_t xx = 0; xx < Wo; ++xx) {
        const double* p0 = ip + (2 * y) * W + 2 * xx;
        const double* p1 = p0 + W;
        o[y * Wo + xx] = (p0[0] + p0[1] + p1[0] + p1[1]) / 4.0;
      }
  }
  return out;
}

inline Val avg_pool2x2(GradientGroup* g, const Val& x) {
  detail::check_owner(g, x, "avg_pool2x2");
  Tensor4 out = avg_pool2x2_fwd(x.t);
  if (!detail::rec_on(g) || !x.tracked()) return Val(std::move(out));
  Shape4 xs = x.t.shape();
  int xn = x.node;
  int id = g->record([xs, xn](GradientGroup& gg, const Tensor4& go) {
    if (!gg.wants(xn)) return;
    int64_t B = xs.b, C = xs.c, H = xs.h, W = xs.w, Ho = H / 2, Wo = W / 2;
    Tensor4 gx = Tensor4::zeros(xs);
    const double* gp = go.data();
    double* gxp = gx.data();
    for (int64_t bc = 0; bc < B * C; ++bc) {
      double* gi = gxp + bc * H * W;
      const double* gr = gp + bc * Ho * Wo;
      for (int64_t y = 0; y < Ho; ++y)
        for (int64_t xx = 0; xx < Wo; ++xx) {
          double v = gr[y * Wo + xx] / 4.0;
          int64_t base = (2 * y) * W + 2 * xx;
          gi[base] += v;
          gi[base + 1] += v;
          gi[base + W] += v;
          gi[base + W + 1] += v;
        }
    }
    gg.add_grad(xn, std::move(gx));
  });
  return Val(std::move(out), id, g);
}

// ---- norms ------------------------------------------------------------------

constexpr double kRmsNormEps = 1e-6;

// Per-sample RMS over all of C, H, W: y = x / (rms + eps).
inline Tensor4 rms_norm_fwd(const Tensor4& x, Tensor4* rms_out = nullptr) {
  int64_t B = x.shape().b, n = x.shape().c * x.shape().h * x.shape().w;
  Tensor4 out = Tensor4::zeros(x.shape());
  Tensor4 rms = Tensor4::zeros({B, 1, 1, 1});
  const double* xp = x.data();
  double* op = out.data();
  double* rp = rms.data();
  for (int64_t b = 0; b < B; ++b) {
    const double* px = xp + b * n;
    double s = 0.0;
    for (int64_t i = 0; i < n; ++i) s += px[i] * px[i];
    double r = std::sqrt(s / static_cast<double>(n));
    rp[b] = r;
    double inv = 1.0 / (r + kRmsNormEps);
    double* po = op + b * n;
    for (int64_t i = 0; i < n; ++i) po[i] = px[i] * inv;
  }
  if (rms_out) *rms_out = rms;
  return out;
}

inline Val rms_norm(GradientGroup* g, const Val& x) {
  detail::check_owner(g, x, "rms_norm");
  Tensor4 rms;
  Tensor4 out = rms_norm_fwd(x.t, &rms);
  if (!detail::rec_on(g) || !x.tracked()) return Val(std::move(out));
  int sx = g->save(x.t), sr = g->save(rms);
  int xn = x.node;
  int id = g->record([sx, sr, xn](GradientGroup& gg, const Tensor4& go) {
    if (!gg.wants(xn)) return;
    const Tensor4& xt = gg.saved(sx);
    const Tensor4& rt = gg.saved(sr);
    int64_t B = xt.shape().b,
            n = xt.shape().c * xt.shape().h * xt.shape().w;
    Tensor4 gx = Tensor4::zeros(xt.shape());
    const double* xp = xt.data();
    const double* rp = rt.data();
    const double* gp = go.data();
    double* gxp = gx.data();
    for (int64_t b = 0; b < B; ++b) {
      const double* px = xp + b * n;
      const double* pg = gp + b * n;
      double* pgx = gxp + b * n;
      double r = rp[b];
      double inv = 1.0 / (r + kRmsNormEps);
      double dot = 0.0;
      for (int64_t i = 0; i < n; ++i) dot += pg[i] * px[i];
      double k = dot * inv * inv /
                 (static_cast<double>(n) * std::max(r, kRmsPoolEps));
      for (int64_t i = 0; i < n; ++i) pgx[i] = pg[i] * inv - px[i] * k;
    }
    gg.add_grad(xn, std::move(gx));
  });
  return Val(std::move(out), id, g);
}

// Batch norm without affine parameters. Running stats are plain tensors the
// caller owns (registered as non-trainable parameters); training mode
// normalizes by batch statistics and updates them in place.
constexpr double kBatchNormEps = 1e-5;

inline Val batch_norm(GradientGroup* g, const Val& x, Tensor4& running_mean,
                      Tensor4& running_var, bool training,
                      double momentum = 0.1) {
  detail::check_owner(g, x, "batch_norm");
  const Shape4& xs = x.t.shape();
  int64_t B = xs.b, C = xs.c, H = xs.h, W = xs.w, n = B * H * W, hw = H * W;
  if (running_mean.shape() != Shape4{1, C, 1, 1} ||
      running_var.shape() != Shape4{1, C, 1, 1})
    throw std::invalid_argument("batch_norm: running stats must be (1," +
                                std::to_string(C) + ",1,1)");
  Tensor4 out = Tensor4::zeros(xs);
  Tensor4 inv_std = Tensor4::zeros({1, C, 1, 1});
  const double* xp = x.t.data();
  double* op = out.data();
  double* ivp = inv_std.data();
  if (training) {
    if (n < 2)
      throw std::invalid_argument(
          "batch_norm: training needs at least 2 values per channel");
    double* rm = running_mean.data();
    double* rv = running_var.data();
    for (int64_t c = 0; c < C; ++c) {
      double mean = 0.0;
      for (int64_t b = 0; b < B; ++b) {
        const double* p = xp + (b * C + c) * hw;
        for (int64_t i = 0; i < hw; ++i) mean += p[i];
      }
      mean /= static_cast<double>(n);
      double var = 0.0;
      for (int64_t b = 0; b < B; ++b) {
        const double* p = xp + (b * C + c) * hw;
        for (int64_t i = 0; i < hw; ++i) {
          double d = p[i] - mean;
          var += d * d;
        }
      }
      var /= static_cast<double>(n);
      double inv = 1.0 / std::sqrt(var + kBatchNormEps);
      ivp[c] = inv;
      for (int64_t b = 0; b < B; ++b) {
        const double* p = xp + (b * C + c) * hw;
        double* o = op + (b * C + c) * hw;
        for (int64_t i = 0; i < hw; ++i) o[i] = (p[i] - mean) * inv;
      }
      rm[c] = (1.0 - momentum) * rm[c] + momentum * mean;
      double unbiased = var * static_cast<double>(n) /
                        static_cast<double>(n - 1);
      rv[c] = (1.0 - momentum) * rv[c] + momentum * unbiased;
    }
  } else {
    const double* rm = running_mean.data();
    const double* rv = running_var.data();
    for (int64_t c = 0; c < C; ++c) {
      double inv = 1.0 / std::sqrt(rv[c] + kBatchNormEps);
      double mean = rm[c];
      for (int64_t b = 0; b < B; ++b) {
        const double* p = xp + (b * C + c) * hw;
        double* o = op + (b * C + c) * hw;
        for (int64_t i = 0; i < hw; ++i) o[i] = (p[i] - mean) * inv;
      }
    }
  }
  if (!detail::rec_on(g) || !x.tracked() || !training)
    return Val(std::move(out));
  int so = g->save(out), si = g->save(inv_std);
  int xn = x.node;
  int id = g->record([so, si, xn](GradientGroup& gg, const Tensor4& go) {
    if (!gg.wants(xn)) return;
    const Tensor4& xhat = gg.saved(so);
    const Tensor4& ivt = gg.saved(si);
    int64_t B = xhat.shape().b, C = xhat.shape().c, hw2 = xhat.shape().h *
                                                          xhat.shape().w;
    int64_t n = B * hw2;
    Tensor4 gx = Tensor4::zeros(xhat.shape());
    const double* hp = xhat.data();
    const double* gp = go.data();
    const double* ivp2 = ivt.data();
    double* gxp = gx.data();
    for (int64_t c = 0; c < C; ++c) {
      double sum_g = 0.0, sum_gh = 0.0;
      for (int64_t b = 0; b < B; ++b) {
        const double* pg = gp + (b * C + c) * hw2;
        const double* ph = hp + (b * C + c) * hw2;
        for (int64_t i = 0; i < hw2; ++i) {
          sum_g += pg[i];
          sum_gh += pg[i] * ph[i];
        }
      }
      double inv = ivp2[c] / static_cast<double>(n);
      for (int64_t b = 0; b < B; ++b) {
        const double* pg = gp + (b * C + c) * hw2;
        const double* ph = hp + (b * C + c) * hw2;
        double* pgx = gxp + (b * C + c) * hw2;
        for (int64_t i = 0; i < hw2; ++i)
          pgx[i] = inv * (static_cast<double>(n) * pg[i] - sum_g -
                          ph[i] * sum_gh);
      }
    }
    gg.add_grad(xn, std::move(gx));
  });
  return Val(std::move(out), id, g);
}

// ---- global average pool, linear, broadcast add ----------------------------

inline Tensor4 global_avg_pool_fwd(const Tensor4& x) {
  int64_t B = x.shape().b, C = x.shape().c, hw = x.shape().h * x.shape().w;
  Tensor4 out = Tensor4::zeros({B, C, 1, 1});
  const double* xp = x.data();
  double* op = out.data();
  for (int64_t bc = 0; bc < B * C; ++bc) {
    const double* p = xp + bc * hw;
    double s = 0.0;
    for (int64_t i = 0; i < hw; ++i) s += p[i];
    op[bc] = s / static_cast<double>(hw);
  }
  return out;
}

inline Val global_avg_pool(GradientGroup* g, const Val& x) {
  detail::check_owner(g, x, "global_avg_pool");
  Tensor4 out = global_avg_pool_fwd(x.t);
  if (!detail::rec_on(g) || !x.tracked()) return Val(std::move(out));
  Shape4 xs = x.t.shape();
  int xn = x.node;
  int id = g->record([xs, xn](GradientGroup& gg, const Tensor4& go) {
    if (!gg.wants(xn)) return;
    int64_t hw = xs.h * xs.w;
    Tensor4 gx = Tensor4::zeros(xs);
    const double* gp = go.data();
    double* gxp = gx.data();
    for (int64_t bc = 0; bc < xs.b * xs.c; ++bc) {
      double v = gp[bc] / static_cast<double>(hw);
      double* p = gxp + bc * hw;
      for (int64_t i = 0; i < hw; ++i) p[i] = v;
    }
    gg.add_grad(xn, std::move(gx));
  });
  return Val(std::move(out), id, g);
}

// y = W x (+ b). x is (B, *, *, *) read as B rows of length Din; W is
// (1, 1, Dout, Din); b, when present, is (1, 1, Dout, 1).
inline Tensor4 linear_fwd(const Tensor4& x, const Tensor4& w,
                          const Tensor4* bias) {
  int64_t B = x.shape().b, din = x.elems() / B;
  int64_t dout = w.shape().h;
  if (w.shape().w != din)
    throw std::invalid_argument(
        "linear: weight expects input dim " + std::to_string(w.shape().w) +
        " but input rows have " + std::to_string(din));
  if (bias && bias->shape() != Shape4{1, 1, dout, 1})
    throw std::invalid_argument("linear: bias shape " + bias->shape().str() +
                                " must be (1,1," + std::to_string(dout) +
                                ",1)");
  Tensor4 out = Tensor4::zeros({B, dout, 1, 1});
  const double* xp = x.data();
  const double* wp = w.data();
  const double* bp = bias ? bias->data() : nullptr;
  double* op = out.data();
  for (int64_t b = 0; b < B; ++b) {
    const double* xr = xp + b * din;
    double* orow = op + b * dout;
    for (int64_t o = 0; o < dout; ++o) {
      const double* wr = wp + o * din;
      double s = bp ? bp[o] : 0.0;
      for (int64_t i = 0; i < din; ++i) s += wr[i] * xr[i];
      orow[o] = s;
    }
  }
  return out;
}

inline Val linear(GradientGroup* g, const Val& x, const Val& w,
                  const Val* bias = nullptr) {
  detail::check_owner(g, x, "linear");
  detail::check_owner(g, w, "linear");
  if (bias) detail::check_owner(g, *bias, "linear");
  Tensor4 out = linear_fwd(x.t, w.t, bias ? &bias->t : nullptr);
  bool any = x.tracked() || w.tracked() || (bias && bias->tracked());
  if (!detail::rec_on(g) || !any) return Val(std::move(out));
  int sx = g->save(x.t), sw = g->save(w.t);
  int xn = x.node, wn = w.node, bn = bias ? bias->node : -1;
  int id = g->record([sx, sw, xn, wn, bn](GradientGroup& gg,
                                          const Tensor4& go) {
    const Tensor4& xt = gg.saved(sx);
    const Tensor4& wt = gg.saved(sw);
    int64_t B = xt.shape().b, din = xt.elems() / B, dout = wt.shape().h;
    const double* gp = go.data();
    const double* xp = xt.data();
    const double* wp = wt.data();
    if (gg.wants(xn)) {
      Tensor4 gx = Tensor4::zeros(xt.shape());
      double* gxp = gx.data();
      for (int64_t b = 0; b < B; ++b) {
        const double* grow = gp + b * dout;
        double* gxr = gxp + b * din;
        for (int64_t o = 0; o < dout; ++o) {
          const double* wr = wp + o * din;
          double gv = grow[o];
          for (int64_t i = 0; i < din; ++i) gxr[i] += gv * wr[i];
        }
      }
      gg.add_grad(xn, std::move(gx));
    }
    if (gg.wants(wn)) {
      Tensor4 gw = Tensor4::zeros(wt.shape());
      double* gwp = gw.data();
      for (int64_t b = 0; b < B; ++b) {
        const double* grow = gp + b * dout;
        const double* xr = xp + b * din;
        for (int64_t o = 0; o < dout; ++o) {
          double gv = grow[o];
          double* wr = gwp + o * din;
          for (int64_t i = 0; i < din; ++i) wr[i] += gv * xr[i];
        }
      }
      gg.add_grad(wn, std::move(gw));
    }
    if (bn >= 0 && gg.wants(bn)) {
      Tensor4 gb = Tensor4::zeros({1, 1, dout, 1});
      double* gbp = gb.data();
      for (int64_t b = 0; b < B; ++b) {
        const double* grow = gp + b * dout;
        for (int64_t o = 0; o < dout; ++o) gbp[o] += grow[o];
      }
      gg.add_grad(bn, std::move(gb));
    }
  });
  return Val(std::move(out), id, g);
}

// h (B,C,H,W) + d (B,C,1,1) broadcast over space.
inline Val broadcast_channel_add(GradientGroup* g, const Val& h,
                                 const Val& d) {
  detail::check_owner(g, h, "broadcast_channel_add");
  detail::check_owner(g, d, "broadcast_channel_add");
  const Shape4& hs = h.t.shape();
  if (d.t.shape() != Shape4{hs.b, hs.c, 1, 1})
    throw std::invalid_argument("broadcast_channel_add: addend shape " +
                                d.t.shape().str() + " must be (" +
                                std::to_string(hs.b) + "," +
                                std::to_string(hs.c) + ",1,1)");
  int64_t hw = hs.h * hs.w;
  Tensor4 out = Tensor4::zeros(hs);
  const double* hp = h.t.data();
  const double* dp = d.t.data();
  double* op = out.data();
  for (int64_t bc = 0; bc < hs.b * hs.c; ++bc) {
    double v = dp[bc];
    const double* ph = hp + bc * hw;
    double* po = op + bc * hw;
    for (int64_t i = 0; i < hw; ++i) po[i] = ph[i] + v;
  }
  if (!detail::rec_on(g) || (!h.tracked() && !d.tracked()))
    return Val(std::move(out));
  Shape4 shape = hs;
  int hn = h.node, dn = d.node;
  int id = g->record([shape, hn, dn](GradientGroup& gg, const Tensor4& go) {
    if (gg.wants(hn)) gg.add_grad(hn, go);
    if (gg.wants(dn)) {
      int64_t hw = shape.h * shape.w;
      Tensor4 gd = Tensor4::zeros({shape.b, shape.c, 1, 1});
      const double* gp = go.data();
      double* gdp = gd.data();
      for (int64_t bc = 0; bc < shape.b * shape.c; ++bc) {
        const double* p = gp + bc * hw;
        double s = 0.0;
        for (int64_t i = 0; i < hw; ++i) s += p[i];
        gdp[bc] = s;
      }
      gg.add_grad(dn, std::move(gd));
    }
  });
  return Val(std::move(out), id, g);
}

// ---- regions ---------------------------------------------------------------

// Partition of an axis of length n into s contiguous regions: region i covers
// [floor(i*n/s), floor((i+1)*n/s)). Exact tiling, no overlap.
inline std::vector<std::pair<int64_t, int64_t>> region_partition(int64_t n,
                                                                 int64_t s) {
  if (s < 1 || s > n)
    throw std::invalid_argument("region_partition: scale " + std::to_string(s) +
                                " must be in [1, " + std::to_string(n) + "]");
  std::vector<std::pair<int64_t, int64_t>> r(static_cast<std::size_t>(s));
  for (int64_t i = 0; i < s; ++i)
    r[static_cast<std::size_t>(i)] = {i * n / s, (i + 1) * n / s};
  return r;
}

// Mean of squared entries over each region of an s x s spatial grid,
// per channel: out[b,c,i,j] = mean over region (i,j) of x^2.
inline Tensor4 region_sq_mean_fwd(const Tensor4& x, int64_t s) {
  int64_t B = x.shape().b, C = x.shape().c, H = x.shape().h, W = x.shape().w;
  auto rows = region_partition(H, s);
  auto cols = region_partition(W, s);
  Tensor4 out = Tensor4::zeros({B, C, s, s});
  const double* xp = x.data();
  double* op = out.data();
  for (int64_t bc = 0; bc < B * C; ++bc) {
    const double* p = xp + bc * H * W;
    double* o = op + bc * s * s;
    for (int64_t i = 0; i < s; ++i)
      for (int64_t j = 0; j < s; ++j) {
        double acc = 0.0;
        for (int64_t y = rows[i].first; y < rows[i].second; ++y)
          for (int64_t xx = cols[j].first; xx < cols[j].second; ++xx) {
            double v = p[y * W + xx];
            acc += v * v;
          }
        int64_t cnt = (rows[i].second - rows[i].first) *
                      (cols[j].second - cols[j].first);
        o[i * s + j] = acc / static_cast<double>(cnt);
      }
  }
  return out;
}

inline Val region_sq_mean(GradientGroup* g, const Val& x, int64_t s) {
  detail::check_owner(g, x, "region_sq_mean");
  Tensor4 out = region_sq_mean_fwd(x.t, s);
  if (!detail::rec_on(g) || !x.tracked()) return Val(std::move(out));
  int sx = g->save(x.t);
  int xn = x.node;
  int id = g->record([sx, xn, s](GradientGroup& gg, const Tensor4& go) {
    if (!gg.wants(xn)) return;
    const Tensor4& xt = gg.saved(sx);
    int64_t B = xt.shape().b, C = xt.shape().c, H = xt.shape().h,
            W = xt.shape().w;
    auto rows = region_partition(H, s);
    auto cols = region_partition(W, s);
    Tensor4 gx = Tensor4::zeros(xt.shape());
    const double* xp = xt.data();
    const double* gp = go.data();
    double* gxp = gx.data();
    for (int64_t bc = 0; bc < B * C; ++bc) {
      const double* p = xp + bc * H * W;
      double* gi = gxp + bc * H * W;
      const double* gr = gp + bc * s * s;
      for (int64_t i = 0; i < s; ++i)
        for (int64_t j = 0; j < s; ++j) {
          int64_t cnt = (rows[i].second - rows[i].first) *
                        (cols[j].second - cols[j].first);
          double k = 2.0 * gr[i * s + j] / static_cast<double>(cnt);
          for (int64_t y = rows[i].first; y < rows[i].second; ++y)
            for (int64_t xx = cols[j].first; xx < cols[j].second; ++xx)
              gi[y * W + xx] += k * p[y * W + xx];
        }
    }
    gg.add_grad(xn, std::move(gx));
  });
  return Val(std::move(out), id, g);
}

// z[b,n,:,:] = sum_c W[n,c] x[b,c,:,:]  (a 1x1 conv; W is (1,1,N,C)).
inline Tensor4 channel_project_fwd(const Tensor4& x, const Tensor4& w) {
  int64_t B = x.shape().b, C = x.shape().c, hw = x.shape().h * x.shape().w;
  int64_t N = w.shape().h;
  if (w.shape().w != C)
    throw std::invalid_argument(
        "channel_project: weight expects " + std::to_string(w.shape().w) +
        " channels but input has " + std::to_string(C));
  Tensor4 out = Tensor4::zeros({B, N, x.shape().h, x.shape().w});
  const double* xp = x.data();
  const double* wp = w.data();
  double* op = out.data();
  for (int64_t b = 0; b < B; ++b)
    for (int64_t n = 0; n < N; ++n) {
      double* o = op + (b * N + n) * hw;
      const double* wr = wp + n * C;
      for (int64_t c = 0; c < C; ++c) {
        double k = wr[c];
        const double* p = xp + (b * C + c) * hw;
        for (int64_t i = 0; i < hw; ++i) o[i] += k * p[i];
      }
    }
  return out;
}

inline Val channel_project(GradientGroup* g, const Val& x, const Val& w) {
  detail::check_owner(g, x, "channel_project");
  detail::check_owner(g, w, "channel_project");
  Tensor4 out = channel_project_fwd(x.t, w.t);
  if (!detail::rec_on(g) || (!x.tracked() && !w.tracked()))
    return Val(std::move(out));
  int sx = g->save(x.t), sw = g->save(w.t);
  int xn = x.node, wn = w.node;
  int id = g->record([sx, sw, xn, wn](GradientGroup& gg, const Tensor4& go) {
    const Tensor4& xt = gg.saved(sx);
    const Tensor4& wt = gg.saved(sw);
    int64_t B = xt.shape().b, C = xt.shape().c,
            hw = xt.shape().h * xt.shape().w;
    int64_t N = wt.shape().h;
    const double* gp = go.data();
    const double* xp = xt.data();
    const double* wp = wt.data();
    if (gg.wants(xn)) {
      Tensor4 gx = Tensor4::zeros(xt.shape());
      double* gxp = gx.data();
      for (int64_t b = 0; b < B; ++b)
        for (int64_t n = 0; n < N; ++n) {
          const double* pg = gp + (b * N + n) * hw;
          const double* wr = wp + n * C;
          for (int64_t c = 0; c < C; ++c) {
            double k = wr[c];
            double* p = gxp + (b * C + c) * hw;
            for (int64_t i = 0; i < hw; ++i) p[i] += k * pg[i];
          }
        }
      gg.add_grad(xn, std::move(gx));
    }
    if (gg.wants(wn)) {
      Tensor4 gw = Tensor4::zeros(wt.shape());
      double* gwp = gw.data();
      for (int64_t b = 0; b < B; ++b)
        for (int64_t n = 0; n < N; ++n) {
          const double* pg = gp + (b * N + n) * hw;
          double* wr = gwp + n * C;
          for (int64_t c = 0; c < C; ++c) {
            const double* p = xp + (b * C + c) * hw;
            double s = 0.0;
            for (int64_t i = 0; i < hw; ++i) s += pg[i] * p[i];
            wr[c] += s;
          }
        }
      gg.add_grad(wn, std::move(gw));
    }
  });
  return Val(std::move(out), id, g);
}

// Concatenate per-sample feature rows: each part (B, Ci, hi, wi) contributes
// Ci*hi*wi entries in its own row-major order; output is (B, D, 1, 1).
inline Val concat_features(GradientGroup* g, const std::vector<Val>& parts) {
  if (parts.empty())
    throw std::invalid_argument("concat_features: no parts given");
  int64_t B = parts[0].t.shape().b;
  int64_t D = 0;
  for (const auto& p : parts) {
    detail::check_owner(g, p, "concat_features");
    if (p.t.shape().b != B)
      throw std::invalid_argument(
          "concat_features: batch mismatch, part has " +
          std::to_string(p.t.shape().b) + " rows but expected " +
          std::to_string(B));
    D += p.t.elems() / B;
  }
  Tensor4 out = Tensor4::zeros({B, D, 1, 1});
  double* op = out.data();
  int64_t off = 0;
  for (const auto& p : parts) {
    int64_t d = p.t.elems() / B;
    const double* pp = p.t.data();
    for (int64_t b = 0; b < B; ++b)
      std::copy(pp + b * d, pp + (b + 1) * d, op + b * D + off);
    off += d;
  }
  bool any = false;
  for (const auto& p : parts) any = any || p.tracked();
  if (!detail::rec_on(g) || !any) return Val(std::move(out));
  std::vector<int> nodes;
  std::vector<Shape4> shapes;
  for (const auto& p : parts) {
    nodes.push_back(p.node);
    shapes.push_back(p.t.shape());
  }
  int id = g->record([nodes, shapes, B, D](GradientGroup& gg,
                                           const Tensor4& go) {
    const double* gp = go.data();
    int64_t off = 0;
    for (std::size_t k = 0; k < nodes.size(); ++k) {
      int64_t d = shapes[k].elems() / B;
      if (gg.wants(nodes[k])) {
        Tensor4 gpart = Tensor4::zeros(shapes[k]);
        double* pg = gpart.data();
        for (int64_t b = 0; b < B; ++b)
          std::copy(gp + b * D + off, gp + b * D + off + d, pg + b * d);
        gg.add_grad(nodes[k], std::move(gpart));
      }
      off += d;
    }
  });
  return Val(std::move(out), id, g);
}

// ---- dropout ----------------------------------------------------------------

// Inverted dropout mask: entries are 0 with probability p, else 1/(1-p).
inline Tensor4 make_dropout_mask(Shape4 s, double p, std::mt19937_64& rng) {
  if (p < 0.0 || p >= 1.0)
    throw std::invalid_argument("dropout: rate " + std::to_string(p) +
                                " must be in [0, 1)");
  Tensor4 m = Tensor4::zeros(s);
  double keep = 1.0 / (1.0 - p);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double* mp = m.data();
  int64_t n = m.elems();
  for (int64_t i = 0; i < n; ++i) mp[i] = u(rng) < p ? 0.0 : keep;
  return m;
}

inline Val dropout_apply(GradientGroup* g, const Val& x, const Tensor4& mask) {
  detail::check_owner(g, x, "dropout");
  if (mask.shape() != x.t.shape())
    throw std::invalid_argument("dropout: mask shape " + mask.shape().str() +
                                " does not match input " +
                                x.t.shape().str());
  Tensor4 out = Tensor4::zeros(x.t.shape());
  const double* xp = x.t.data();
  const double* mp = mask.data();
  double* op = out.data();
  int64_t n = out.elems();
  for (int64_t i = 0; i < n; ++i) op[i] = xp[i] * mp[i];
  if (!detail::rec_on(g) || !x.tracked()) return Val(std::move(out));
  int sm = g->save(mask);
  int xn = x.node;
  int id = g->record([sm, xn](GradientGroup& gg, const Tensor4& go) {
    if (!gg.wants(xn)) return;
    const Tensor4& m = gg.saved(sm);
    Tensor4 gx = Tensor4::zeros(m.shape());
    const double* mp = m.data();
    const double* gp = go.data();
    double* gxp = gx.data();
    int64_t n = m.elems();
    for (int64_t i = 0; i < n; ++i) gxp[i] = gp[i] * mp[i];
    gg.add_grad(xn, std::move(gx));
  });
  return Val(std::move(out), id, g);
}

// ---- losses -----------------------------------------------------------------

// Mean softmax cross-entropy over the batch. Logits (B, K, 1, 1).
inline Val softmax_cross_entropy(GradientGroup* g, const Val& logits,
                                 const std::vector<int>& labels) {
  detail::check_owner(g, logits, "softmax_cross_entropy");
  int64_t B = logits.t.shape().b, K = logits.t.shape().c;
  if (logits.t.shape().h != 1 || logits.t.shape().w != 1)
    throw std::invalid_argument("softmax_cross_entropy: logits must be (B,K,1,1), got " +
                                logits.t.shape().str());
  if (static_cast<int64_t>(labels.size()) != B)
    throw std::invalid_argument("softmax_cross_entropy: " +
                                std::to_string(labels.size()) +
                                " labels for batch of " + std::to_string(B));
  for (int v : labels)
    if (v < 0 || v >= K)
      throw std::invalid_argument("softmax_cross_entropy: label " +
                                  std::to_string(v) + " outside [0, " +
                                  std::to_string(K) + ")");
  Tensor4 probs = Tensor4::zeros(logits.t.shape());
  const double* zp = logits.t.data();
  double* pp = probs.data();
  double loss = 0.0;
  for (int64_t b = 0; b < B; ++b) {
    const double* z = zp + b * K;
    double* p = pp + b * K;
    double mx = z[0];
    for (int64_t k = 1; k < K; ++k) mx = std::max(mx, z[k]);
    double sum = 0.0;
    for (int64_t k = 0; k < K; ++k) {
      p[k] = std::exp(z[k] - mx);
      sum += p[k];
    }
    for (int64_t k = 0; k < K; ++k) p[k] /= sum;
    loss += std::log(sum) + mx - z[labels[static_cast<std::size_t>(b)]];
  }
  loss /= static_cast<double>(B);
  Tensor4 out = Tensor4::full({1, 1, 1, 1}, loss);
  if (!detail::rec_on(g) || !logits.tracked()) return Val(std::move(out));
  int sp = g->save(probs);
  int zn = logits.node;
  std::vector<int> lab = labels;
  int id = g->record([sp, zn, lab](GradientGroup& gg, const Tensor4& go) {
    if (!gg.wants(zn)) return;
    const Tensor4& p = gg.saved(sp);
    int64_t B = p.shape().b, K = p.shape().c;
    double gs = go.flat(0) / static_cast<double>(B);
    Tensor4 gz = Tensor4::zeros(p.shape());
    const double* pp = p.data();
    double* gp = gz.data();
    for (int64_t b = 0; b < B; ++b) {
      const double* pr = pp + b * K;
      double* gr = gp + b * K;
      for (int64_t k = 0; k < K; ++k) gr[k] = gs * pr[k];
      gr[lab[static_cast<std::size_t>(b)]] -= gs;
    }
    gg.add_grad(zn, std::move(gz));
  });
  return Val(std::move(out), id, g);
}

// Dot with a fixed weight tensor, reduced to a scalar. Test utility loss.
inline Val weighted_sum(GradientGroup* g, const Val& x, const Tensor4& wts) {
  detail::check_owner(g, x, "weighted_sum");
  if (wts.shape() != x.t.shape())
    throw std::invalid_argument("weighted_sum: weight shape " +
                                wts.shape().str() + " does not match " +
                                x.t.shape().str());
  const double* xp = x.t.data();
  const double* wp = wts.data();
  double s = 0.0;
  for (int64_t i = 0; i < x.t.elems(); ++i) s += xp[i] * wp[i];
  Tensor4 out = Tensor4::full({1, 1, 1, 1}, s);
  if (!detail::rec_on(g) || !x.tracked()) return Val(std::move(out));
  int sw = g->save(wts);
  int xn = x.node;
  int id = g->record([sw, xn](GradientGroup& gg, const Tensor4& go) {
    if (!gg.wants(xn)) return;
    Tensor4 gx = gg.saved(sw);  // shared storage; scale into a copy
    Tensor4 scaled = Tensor4::zeros(gx.shape());
    const double* wp = gx.data();
    double* sp = scaled.data();
    double k = go.flat(0);
    for (int64_t i = 0; i < gx.elems(); ++i) sp[i] = k * wp[i];
    gg.add_grad(xn, std::move(scaled));
  });
  return Val(std::move(out), id, g);
}

}  // namespace bicovg
