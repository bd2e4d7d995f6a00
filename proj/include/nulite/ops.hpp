#pragma once

#include <cmath>

#include "nulite/autograd.hpp"

namespace nulite {

inline Var add(const Var& a, const Var& b) {
  if (!a->value.same_shape(b->value)) throw std::invalid_argument("add: shape mismatch");
  Tensor out(a->value.shape());
  const float* pa = a->value.data();
  const float* pb = b->value.data();
  float* po = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] + pb[i];
  Var va = a, vb = b;
  return make_op(std::move(out), {a, b}, [va, vb](Node& n) {
    if (va->requires_grad) va->ensure_grad().add_(n.grad);
    if (vb->requires_grad) vb->ensure_grad().add_(n.grad);
  });
}

inline Var sub(const Var& a, const Var& b) {
  if (!a->value.same_shape(b->value)) throw std::invalid_argument("sub: shape mismatch");
  Tensor out(a->value.shape());
  const float* pa = a->value.data();
  const float* pb = b->value.data();
  float* po = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] - pb[i];
  Var va = a, vb = b;
  return make_op(std::move(out), {a, b}, [va, vb](Node& n) {
    if (va->requires_grad) va->ensure_grad().add_(n.grad);
    if (vb->requires_grad) {
      Tensor& g = vb->ensure_grad();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] -= n.grad[i];
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  if (!a->value.same_shape(b->value)) throw std::invalid_argument("mul: shape mismatch");
  Tensor out(a->value.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] * b->value[i];
  Var va = a, vb = b;
  return make_op(std::move(out), {a, b}, [va, vb](Node& n) {
    if (va->requires_grad) {
      Tensor& g = va->ensure_grad();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * vb->value[i];
    }
    if (vb->requires_grad) {
      Tensor& g = vb->ensure_grad();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * va->value[i];
    }
  });
}

inline Var mul_scalar(const Var& a, float s) {
  Tensor out(a->value.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] * s;
  Var va = a;
  return make_op(std::move(out), {a}, [va, s](Node& n) {
    if (!va->requires_grad) return;
    Tensor& g = va->ensure_grad();
    for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * s;
  });
}

// x [N,C,H,W] scaled per channel by s [C] (layer scale).
inline Var mul_channel(const Var& x, const Var& s) {
  const auto& xs = x->value.shape();
  int64_t N = xs[0], C = xs[1], HW = x->value.numel() / (xs[0] * xs[1]);
  if (s->value.numel() != C) throw std::invalid_argument("mul_channel: scale size != C");
  Tensor out(xs);
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      const float sv = s->value[c];
      const float* px = x->value.data() + (n * C + c) * HW;
      float* po = out.data() + (n * C + c) * HW;
      for (int64_t i = 0; i < HW; ++i) po[i] = px[i] * sv;
    }
  Var vx = x, vs = s;
  return make_op(std::move(out), {x, s}, [vx, vs, N, C, HW](Node& n) {
    if (vx->requires_grad) {
      Tensor& g = vx->ensure_grad();
      for (int64_t b = 0; b < N; ++b)
        for (int64_t c = 0; c < C; ++c) {
          const float sv = vs->value[c];
          const float* pg = n.grad.data() + (b * C + c) * HW;
          float* pt = g.data() + (b * C + c) * HW;
          for (int64_t i = 0; i < HW; ++i) pt[i] += pg[i] * sv;
        }
    }
    if (vs->requires_grad) {
      Tensor& g = vs->ensure_grad();
      for (int64_t b = 0; b < N; ++b)
        for (int64_t c = 0; c < C; ++c) {
          const float* pg = n.grad.data() + (b * C + c) * HW;
          const float* px = vx->value.data() + (b * C + c) * HW;
          double acc = 0;
          for (int64_t i = 0; i < HW; ++i) acc += double(pg[i]) * px[i];
          g[c] += static_cast<float>(acc);
        }
    }
  });
}

inline Var relu(const Var& x) {
  Tensor out(x->value.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = x->value[i] > 0.f ? x->value[i] : 0.f;
  Var vx = x;
  return make_op(std::move(out), {x}, [vx](Node& n) {
    if (!vx->requires_grad) return;
    Tensor& g = vx->ensure_grad();
    for (int64_t i = 0; i < g.numel(); ++i)
      if (vx->value[i] > 0.f) g[i] += n.grad[i];
  });
}

// Exact (erf) GELU.
inline float gelu_scalar(float v) {
  return 0.5f * v * (1.f + std::erf(v * 0.70710678118654752440f));
}

inline Var gelu(const Var& x) {
  Tensor out(x->value.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = gelu_scalar(x->value[i]);
  Var vx = x;
  return make_op(std::move(out), {x}, [vx](Node& n) {
    if (!vx->requires_grad) return;
    Tensor& g = vx->ensure_grad();
    constexpr float kInvSqrt2 = 0.70710678118654752440f;
    constexpr float kInvSqrt2Pi = 0.39894228040143267794f;
    for (int64_t i = 0; i < g.numel(); ++i) {
      float v = vx->value[i];
      float cdf = 0.5f * (1.f + std::erf(v * kInvSqrt2));
      float pdf = kInvSqrt2Pi * std::exp(-0.5f * v * v);
      g[i] += n.grad[i] * (cdf + v * pdf);
    }
  });
}

// Softmax over dim 1 of [N,C,...] with max subtraction.
inline Var softmax_channel(const Var& x) {
  const auto& s = x->value.shape();
  int64_t N = s[0], C = s[1], HW = x->value.numel() / (N * C);
  Tensor out(s);
  for (int64_t n = 0; n < N; ++n) {
    const float* px = x->value.data() + n * C * HW;
    float* po = out.data() + n * C * HW;
    for (int64_t i = 0; i < HW; ++i) {
      float m = px[i];
      for (int64_t c = 1; c < C; ++c) m = std::max(m, px[c * HW + i]);
      float z = 0.f;
      for (int64_t c = 0; c < C; ++c) {
        float e = std::exp(px[c * HW + i] - m);
        po[c * HW + i] = e;
        z += e;
      }
      float inv = 1.f / z;
      for (int64_t c = 0; c < C; ++c) po[c * HW + i] *= inv;
    }
  }
  Var vx = x;
  return make_op(std::move(out), {x}, [vx, N, C, HW](Node& n) {
    if (!vx->requires_grad) return;
    Tensor& g = vx->ensure_grad();
    for (int64_t b = 0; b < N; ++b) {
      const float* p = n.value.data() + b * C * HW;
      const float* gy = n.grad.data() + b * C * HW;
      float* gx = g.data() + b * C * HW;
      for (int64_t i = 0; i < HW; ++i) {
        float dot = 0.f;
        for (int64_t c = 0; c < C; ++c) dot += p[c * HW + i] * gy[c * HW + i];
        for (int64_t c = 0; c < C; ++c)
          gx[c * HW + i] += p[c * HW + i] * (gy[c * HW + i] - dot);
      }
    }
  });
}

inline Var concat_channel(const Var& a, const Var& b) {
  const auto& sa = a->value.shape();
  const auto& sb = b->value.shape();
  if (sa.size() != 4 || sb.size() != 4 || sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3])
    throw std::invalid_argument("concat_channel: incompatible shapes " + a->value.shape_str() +
                                " vs " + b->value.shape_str());
  int64_t N = sa[0], Ca = sa[1], Cb = sb[1], HW = sa[2] * sa[3];
  Tensor out({N, Ca + Cb, sa[2], sa[3]});
  for (int64_t n = 0; n < N; ++n) {
    std::memcpy(out.data() + n * (Ca + Cb) * HW, a->value.data() + n * Ca * HW,
                sizeof(float) * size_t(Ca * HW));
    std::memcpy(out.data() + (n * (Ca + Cb) + Ca) * HW, b->value.data() + n * Cb * HW,
                sizeof(float) * size_t(Cb * HW));
  }
  Var va = a, vb = b;
  return make_op(std::move(out), {a, b}, [va, vb, N, Ca, Cb, HW](Node& n) {
    if (va->requires_grad) {
      Tensor& g = va->ensure_grad();
      for (int64_t b2 = 0; b2 < N; ++b2) {
        const float* src = n.grad.data() + b2 * (Ca + Cb) * HW;
        float* dst = g.data() + b2 * Ca * HW;
        for (int64_t i = 0; i < Ca * HW; ++i) dst[i] += src[i];
      }
    }
    if (vb->requires_grad) {
      Tensor& g = vb->ensure_grad();
      for (int64_t b2 = 0; b2 < N; ++b2) {
        const float* src = n.grad.data() + (b2 * (Ca + Cb) + Ca) * HW;
        float* dst = g.data() + b2 * Cb * HW;
        for (int64_t i = 0; i < Cb * HW; ++i) dst[i] += src[i];
      }
    }
  });
}

// [N,C,H,W] -> [N,C] mean over spatial dims.
inline Var global_avg_pool(const Var& x) {
  const auto& s = x->value.shape();
  int64_t N = s[0], C = s[1], HW = s[2] * s[3];
  Tensor out({N, C});
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      const float* p = x->value.data() + (n * C + c) * HW;
      double acc = 0;
      for (int64_t i = 0; i < HW; ++i) acc += p[i];
      out[n * C + c] = static_cast<float>(acc / HW);
    }
  Var vx = x;
  return make_op(std::move(out), {x}, [vx, N, C, HW](Node& n) {
    if (!vx->requires_grad) return;
    Tensor& g = vx->ensure_grad();
    for (int64_t b = 0; b < N; ++b)
      for (int64_t c = 0; c < C; ++c) {
        float gv = n.grad[b * C + c] / HW;
        float* p = g.data() + (b * C + c) * HW;
        for (int64_t i = 0; i < HW; ++i) p[i] += gv;
      }
  });
}

// Reflection padding (no edge repeat), [N,C,H,W] -> [N,C,H+2p,W+2p].
inline Var reflect_pad(const Var& x, int p) {
  const auto& s = x->value.shape();
  int64_t N = s[0], C = s[1], H = s[2], W = s[3];
  if (H <= p || W <= p) throw std::invalid_argument("reflect_pad: input smaller than pad");
  int64_t Ho = H + 2 * p, Wo = W + 2 * p;
  auto reflect = [](int64_t i, int64_t n) {
    if (i < 0) return -i;
    if (i >= n) return 2 * n - 2 - i;
    return i;
  };
  Tensor out({N, C, Ho, Wo});
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const float* src = x->value.data() + nc * H * W;
    float* dst = out.data() + nc * Ho * Wo;
    for (int64_t y = 0; y < Ho; ++y) {
      int64_t sy = reflect(y - p, H);
      for (int64_t xx = 0; xx < Wo; ++xx) dst[y * Wo + xx] = src[sy * W + reflect(xx - p, W)];
    }
  }
  Var vx = x;
  return make_op(std::move(out), {x}, [vx, p, N, C, H, W, Ho, Wo, reflect](Node& n) {
    if (!vx->requires_grad) return;
    Tensor& g = vx->ensure_grad();
    for (int64_t nc = 0; nc < N * C; ++nc) {
      const float* src = n.grad.data() + nc * Ho * Wo;
      float* dst = g.data() + nc * H * W;
      for (int64_t y = 0; y < Ho; ++y) {
        int64_t sy = reflect(y - p, H);
        for (int64_t xx = 0; xx < Wo; ++xx) dst[sy * W + reflect(xx - p, W)] += src[y * Wo + xx];
      }
    }
  });
}

inline Var sum_all(const Var& x) {
  double acc = 0;
  for (int64_t i = 0; i < x->value.numel(); ++i) acc += x->value[i];
  Tensor out({1});
  out[0] = static_cast<float>(acc);
  Var vx = x;
  return make_op(std::move(out), {x}, [vx](Node& n) {
    if (!vx->requires_grad) return;
    Tensor& g = vx->ensure_grad();
    float gv = n.grad[0];
    for (int64_t i = 0; i < g.numel(); ++i) g[i] += gv;
  });
}

inline Var mean_all(const Var& x) { return mul_scalar(sum_all(x), 1.f / x->value.numel()); }

inline Var add_scalar(const Var& x, float s) {
  Tensor out(x->value.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = x->value[i] + s;
  Var vx = x;
  return make_op(std::move(out), {x}, [vx](Node& n) {
    if (vx->requires_grad) vx->ensure_grad().add_(n.grad);
  });
}

}  // namespace nulite
