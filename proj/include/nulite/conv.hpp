#pragma once

#include <cblas.h>

#include "nulite/autograd.hpp"

namespace nulite {

struct ConvGeom {
  int stride = 1;
  int pad = 0;
  int groups = 1;
};

inline int64_t conv_out_dim(int64_t in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

namespace detail {

// im2col for one group slice: x [Cg,H,W] -> col [Cg*kh*kw, rows*Wo], output rows [r0, r0+rows).
inline void im2col_rows(const float* x, int64_t Cg, int64_t H, int64_t W, int kh, int kw,
                        int stride, int pad, int64_t Wo, int64_t r0, int64_t rows, float* col) {
  const int64_t block = rows * Wo;
  for (int64_t c = 0; c < Cg; ++c) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        float* dst = col + ((c * kh + ky) * kw + kx) * block;
        for (int64_t oy = r0; oy < r0 + rows; ++oy) {
          int64_t iy = oy * stride - pad + ky;
          float* drow = dst + (oy - r0) * Wo;
          if (iy < 0 || iy >= H) {
            std::fill(drow, drow + Wo, 0.f);
            continue;
          }
          const float* srow = x + (c * H + iy) * W;
          int64_t ox = 0;
          // leading columns that fall off the left edge
          for (; ox < Wo; ++ox) {
            int64_t ix = ox * stride - pad + kx;
            if (ix >= 0) break;
            drow[ox] = 0.f;
          }
          if (stride == 1) {
            int64_t ix = ox - pad + kx;
            int64_t run = std::min(Wo - ox, W - ix);
            if (run > 0) std::memcpy(drow + ox, srow + ix, sizeof(float) * size_t(run));
            ox += std::max<int64_t>(run, 0);
          } else {
            for (; ox < Wo; ++ox) {
              int64_t ix = ox * stride - pad + kx;
              if (ix >= W) break;
              drow[ox] = srow[ix];
            }
          }
          for (; ox < Wo; ++ox) drow[ox] = 0.f;
        }
      }
    }
  }
}

// Scatter-add transpose of im2col_rows.
inline void col2im_rows(const float* col, int64_t Cg, int64_t H, int64_t W, int kh, int kw,
                        int stride, int pad, int64_t Wo, int64_t r0, int64_t rows, float* x) {
  const int64_t block = rows * Wo;
  for (int64_t c = 0; c < Cg; ++c) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        const float* src = col + ((c * kh + ky) * kw + kx) * block;
        for (int64_t oy = r0; oy < r0 + rows; ++oy) {
          int64_t iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) continue;
          const float* srow = src + (oy - r0) * Wo;
          float* drow = x + (c * H + iy) * W;
          for (int64_t ox = 0; ox < Wo; ++ox) {
            int64_t ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < W) drow[ix] += srow[ox];
          }
        }
      }
    }
  }
}

// Output-row block size keeping the im2col buffer under ~64 MB.
inline int64_t conv_row_block(int64_t colw, int64_t Wo, int64_t Ho) {
  const int64_t budget = 64ll << 20;
  int64_t rows = budget / (colw * Wo * int64_t(sizeof(float)));
  return std::clamp<int64_t>(rows, 1, Ho);
}

inline bool is_depthwise(int64_t Cin, int64_t Cout, int groups) {
  return groups == Cin && Cout % Cin == 0;
}

// Direct depthwise (multiplier) convolution, one sample.
inline void depthwise_fwd(const float* x, const float* w, int64_t Cin, int64_t H, int64_t W,
                          int64_t mult, int kh, int kw, int stride, int pad, int64_t Ho,
                          int64_t Wo, float* y) {
  for (int64_t g = 0; g < Cin; ++g) {
    const float* xc = x + g * H * W;
    for (int64_t m = 0; m < mult; ++m) {
      int64_t co = g * mult + m;
      const float* wc = w + co * kh * kw;
      float* yc = y + co * Ho * Wo;
      for (int64_t oy = 0; oy < Ho; ++oy) {
        for (int64_t ox = 0; ox < Wo; ++ox) {
          float acc = 0.f;
          int64_t iy0 = oy * stride - pad;
          int64_t ix0 = ox * stride - pad;
          for (int ky = 0; ky < kh; ++ky) {
            int64_t iy = iy0 + ky;
            if (iy < 0 || iy >= H) continue;
            const float* xr = xc + iy * W;
            const float* wr = wc + ky * kw;
            for (int kx = 0; kx < kw; ++kx) {
              int64_t ix = ix0 + kx;
              if (ix >= 0 && ix < W) acc += wr[kx] * xr[ix];
            }
          }
          yc[oy * Wo + ox] = acc;
        }
      }
    }
  }
}

inline void depthwise_bwd_input(const float* gy, const float* w, int64_t Cin, int64_t H,
                                int64_t W, int64_t mult, int kh, int kw, int stride, int pad,
                                int64_t Ho, int64_t Wo, float* gx) {
  for (int64_t g = 0; g < Cin; ++g) {
    float* gxc = gx + g * H * W;
    for (int64_t m = 0; m < mult; ++m) {
      int64_t co = g * mult + m;
      const float* wc = w + co * kh * kw;
      const float* gyc = gy + co * Ho * Wo;
      for (int64_t oy = 0; oy < Ho; ++oy) {
        for (int64_t ox = 0; ox < Wo; ++ox) {
          float gv = gyc[oy * Wo + ox];
          if (gv == 0.f) continue;
          int64_t iy0 = oy * stride - pad;
          int64_t ix0 = ox * stride - pad;
          for (int ky = 0; ky < kh; ++ky) {
            int64_t iy = iy0 + ky;
            if (iy < 0 || iy >= H) continue;
            for (int kx = 0; kx < kw; ++kx) {
              int64_t ix = ix0 + kx;
              if (ix >= 0 && ix < W) gxc[iy * W + ix] += gv * wc[ky * kw + kx];
            }
          }
        }
      }
    }
  }
}

inline void depthwise_bwd_weight(const float* x, const float* gy, int64_t Cin, int64_t H,
                                 int64_t W, int64_t mult, int kh, int kw, int stride, int pad,
                                 int64_t Ho, int64_t Wo, float* gw) {
  for (int64_t g = 0; g < Cin; ++g) {
    const float* xc = x + g * H * W;
    for (int64_t m = 0; m < mult; ++m) {
      int64_t co = g * mult + m;
      const float* gyc = gy + co * Ho * Wo;
      float* gwc = gw + co * kh * kw;
      for (int ky = 0; ky < kh; ++ky) {
        for (int kx = 0; kx < kw; ++kx) {
          double acc = 0;
          for (int64_t oy = 0; oy < Ho; ++oy) {
            int64_t iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= H) continue;
            const float* xr = xc + iy * W;
            const float* gr = gyc + oy * Wo;
            for (int64_t ox = 0; ox < Wo; ++ox) {
              int64_t ix = ox * stride - pad + kx;
              if (ix >= 0 && ix < W) acc += double(gr[ox]) * xr[ix];
            }
          }
          gwc[ky * kw + kx] += static_cast<float>(acc);
        }
      }
    }
  }
}

}  // namespace detail

// x [N,Cin,H,W], w [Cout,Cin/groups,kh,kw], bias [Cout] or undefined.
inline Tensor conv2d_fwd(const Tensor& x, const Tensor& w, const Tensor& bias,
                         const ConvGeom& g) {
  const int64_t N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t Cout = w.dim(0), Cg = w.dim(1);
  const int kh = int(w.dim(2)), kw = int(w.dim(3));
  if (Cin / g.groups != Cg) throw std::invalid_argument("conv2d: channel/group mismatch");
  const int64_t Ho = conv_out_dim(H, kh, g.stride, g.pad);
  const int64_t Wo = conv_out_dim(W, kw, g.stride, g.pad);
  if (Ho <= 0 || Wo <= 0) throw std::invalid_argument("conv2d: empty output");
  Tensor y({N, Cout, Ho, Wo});

  const int64_t Cog = Cout / g.groups;
  if (detail::is_depthwise(Cin, Cout, g.groups)) {
    for (int64_t n = 0; n < N; ++n)
      detail::depthwise_fwd(x.data() + n * Cin * H * W, w.data(), Cin, H, W, Cout / Cin, kh, kw,
                            g.stride, g.pad, Ho, Wo, y.data() + n * Cout * Ho * Wo);
  } else if (kh == 1 && kw == 1 && g.stride == 1 && g.pad == 0 && g.groups == 1) {
    // pointwise: y = W [Cout,Cin] * x [Cin,HW]
    for (int64_t n = 0; n < N; ++n)
      cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, int(Cout), int(H * W), int(Cin),
                  1.f, w.data(), int(Cin), x.data() + n * Cin * H * W, int(H * W), 0.f,
                  y.data() + n * Cout * Ho * Wo, int(H * W));
  } else {
    const int64_t colw = Cg * kh * kw;
    const int64_t rows_max = detail::conv_row_block(colw, Wo, Ho);
    std::vector<float> col(size_t(colw * rows_max * Wo), 0.f);
    for (int64_t n = 0; n < N; ++n) {
      for (int64_t gr = 0; gr < g.groups; ++gr) {
        const float* xg = x.data() + (n * Cin + gr * Cg) * H * W;
        const float* wg = w.data() + gr * Cog * colw;
        float* yg = y.data() + (n * Cout + gr * Cog) * Ho * Wo;
        for (int64_t r0 = 0; r0 < Ho; r0 += rows_max) {
          int64_t rows = std::min(rows_max, Ho - r0);
          detail::im2col_rows(xg, Cg, H, W, kh, kw, g.stride, g.pad, Wo, r0, rows, col.data());
          // yg rows are full-width; block starts at output row r0
          cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, int(Cog), int(rows * Wo),
                      int(colw), 1.f, wg, int(colw), col.data(), int(rows * Wo), 0.f,
                      yg + r0 * Wo, int(Ho * Wo));
        }
      }
    }
  }
  if (bias.defined()) {
    for (int64_t n = 0; n < N; ++n)
      for (int64_t c = 0; c < Cout; ++c) {
        float b = bias[c];
        float* p = y.data() + (n * Cout + c) * Ho * Wo;
        for (int64_t i = 0; i < Ho * Wo; ++i) p[i] += b;
      }
  }
  return y;
}

inline Tensor conv2d_bwd_input(const Tensor& gy, const Tensor& w, int64_t H, int64_t W,
                               const ConvGeom& g) {
  const int64_t N = gy.dim(0), Cout = gy.dim(1), Ho = gy.dim(2), Wo = gy.dim(3);
  const int64_t Cg = w.dim(1);
  const int kh = int(w.dim(2)), kw = int(w.dim(3));
  const int64_t Cin = Cg * g.groups;
  const int64_t Cog = Cout / g.groups;
  Tensor gx({N, Cin, H, W});

  if (detail::is_depthwise(Cin, Cout, g.groups)) {
    for (int64_t n = 0; n < N; ++n)
      detail::depthwise_bwd_input(gy.data() + n * Cout * Ho * Wo, w.data(), Cin, H, W,
                                  Cout / Cin, kh, kw, g.stride, g.pad, Ho, Wo,
                                  gx.data() + n * Cin * H * W);
    return gx;
  }
  if (kh == 1 && kw == 1 && g.stride == 1 && g.pad == 0 && g.groups == 1) {
    for (int64_t n = 0; n < N; ++n)
      cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, int(Cin), int(Ho * Wo), int(Cout),
                  1.f, w.data(), int(Cin), gy.data() + n * Cout * Ho * Wo, int(Ho * Wo), 0.f,
                  gx.data() + n * Cin * H * W, int(Ho * Wo));
    return gx;
  }
  const int64_t colw = Cg * kh * kw;
  const int64_t rows_max = detail::conv_row_block(colw, Wo, Ho);
  std::vector<float> col(size_t(colw * rows_max * Wo), 0.f);
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t gr = 0; gr < g.groups; ++gr) {
      const float* gyg = gy.data() + (n * Cout + gr * Cog) * Ho * Wo;
      const float* wg = w.data() + gr * Cog * colw;
      float* gxg = gx.data() + (n * Cin + gr * Cg) * H * W;
      for (int64_t r0 = 0; r0 < Ho; r0 += rows_max) {
        int64_t rows = std::min(rows_max, Ho - r0);
        cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, int(colw), int(rows * Wo),
                    int(Cog), 1.f, wg, int(colw), gyg + r0 * Wo, int(Ho * Wo), 0.f, col.data(),
                    int(rows * Wo));
        detail::col2im_rows(col.data(), Cg, H, W, kh, kw, g.stride, g.pad, Wo, r0, rows, gxg);
      }
    }
  }
  return gx;
}

inline void conv2d_bwd_weight(const Tensor& x, const Tensor& gy, Tensor& gw, const ConvGeom& g) {
  const int64_t N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t Cout = gy.dim(1), Ho = gy.dim(2), Wo = gy.dim(3);
  const int64_t Cg = gw.dim(1);
  const int kh = int(gw.dim(2)), kw = int(gw.dim(3));
  const int64_t Cog = Cout / g.groups;

  if (detail::is_depthwise(Cin, Cout, g.groups)) {
    for (int64_t n = 0; n < N; ++n)
      detail::depthwise_bwd_weight(x.data() + n * Cin * H * W, gy.data() + n * Cout * Ho * Wo,
                                   Cin, H, W, Cout / Cin, kh, kw, g.stride, g.pad, Ho, Wo,
                                   gw.data());
    return;
  }
  if (kh == 1 && kw == 1 && g.stride == 1 && g.pad == 0 && g.groups == 1) {
    for (int64_t n = 0; n < N; ++n)
      cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans, int(Cout), int(Cin), int(Ho * Wo),
                  1.f, gy.data() + n * Cout * Ho * Wo, int(Ho * Wo), x.data() + n * Cin * H * W,
                  int(Ho * Wo), 1.f, gw.data(), int(Cin));
    return;
  }
  const int64_t colw = Cg * kh * kw;
  const int64_t rows_max = detail::conv_row_block(colw, Wo, Ho);
  std::vector<float> col(size_t(colw * rows_max * Wo), 0.f);
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t gr = 0; gr < g.groups; ++gr) {
      const float* xg = x.data() + (n * Cin + gr * Cg) * H * W;
      const float* gyg = gy.data() + (n * Cout + gr * Cog) * Ho * Wo;
      float* gwg = gw.data() + gr * Cog * colw;
      for (int64_t r0 = 0; r0 < Ho; r0 += rows_max) {
        int64_t rows = std::min(rows_max, Ho - r0);
        detail::im2col_rows(xg, Cg, H, W, kh, kw, g.stride, g.pad, Wo, r0, rows, col.data());
        cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans, int(Cog), int(colw),
                    int(rows * Wo), 1.f, gyg + r0 * Wo, int(Ho * Wo), col.data(),
                    int(rows * Wo), 1.f, gwg, int(colw));
      }
    }
  }
}

inline void conv2d_bwd_bias(const Tensor& gy, Tensor& gb) {
  const int64_t N = gy.dim(0), Cout = gy.dim(1), HW = gy.dim(2) * gy.dim(3);
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < Cout; ++c) {
      const float* p = gy.data() + (n * Cout + c) * HW;
      double acc = 0;
      for (int64_t i = 0; i < HW; ++i) acc += p[i];
      gb[c] += static_cast<float>(acc);
    }
}

// Autograd wrapper. `bias` may be null.
inline Var conv2d(const Var& x, const Var& w, const Var& bias, const ConvGeom& g) {
  Tensor y = conv2d_fwd(x->value, w->value, bias ? bias->value : Tensor(), g);
  std::vector<Var> parents{x, w};
  if (bias) parents.push_back(bias);
  Var vx = x, vw = w, vb = bias;
  int64_t H = x->value.dim(2), W = x->value.dim(3);
  return make_op(std::move(y), std::move(parents), [vx, vw, vb, g, H, W](Node& n) {
    if (vx->requires_grad) vx->ensure_grad().add_(conv2d_bwd_input(n.grad, vw->value, H, W, g));
    if (vw->requires_grad) conv2d_bwd_weight(vx->value, n.grad, vw->ensure_grad(), g);
    if (vb && vb->requires_grad) conv2d_bwd_bias(n.grad, vb->ensure_grad());
  });
}

// Transposed convolution, weight [Cin,Cout,kh,kw], stride = k upsampling geometry.
inline Tensor conv_transpose2d_fwd(const Tensor& x, const Tensor& w, const Tensor& bias,
                                   int stride) {
  const int64_t H = x.dim(2), W = x.dim(3);
  const int kh = int(w.dim(2));
  const int64_t Ho = (H - 1) * stride + kh;
  const int64_t Wo = (W - 1) * stride + int(w.dim(3));
  ConvGeom g{stride, 0, 1};
  Tensor y = conv2d_bwd_input(x, w, Ho, Wo, g);
  if (bias.defined()) {
    const int64_t N = y.dim(0), C = y.dim(1), HW = Ho * Wo;
    for (int64_t n = 0; n < N; ++n)
      for (int64_t c = 0; c < C; ++c) {
        float b = bias[c];
        float* p = y.data() + (n * C + c) * HW;
        for (int64_t i = 0; i < HW; ++i) p[i] += b;
      }
  }
  return y;
}

inline Var conv_transpose2d(const Var& x, const Var& w, const Var& bias, int stride) {
  Tensor y = conv_transpose2d_fwd(x->value, w->value, bias ? bias->value : Tensor(), stride);
  std::vector<Var> parents{x, w};
  if (bias) parents.push_back(bias);
  Var vx = x, vw = w, vb = bias;
  ConvGeom g{stride, 0, 1};
  return make_op(std::move(y), std::move(parents), [vx, vw, vb, g](Node& n) {
    if (vx->requires_grad)
      vx->ensure_grad().add_(conv2d_fwd(n.grad, vw->value, Tensor(), g));
    if (vw->requires_grad) conv2d_bwd_weight(n.grad, vx->value, vw->ensure_grad(), g);
    if (vb && vb->requires_grad) conv2d_bwd_bias(n.grad, vb->ensure_grad());
  });
}

}  // namespace nulite
