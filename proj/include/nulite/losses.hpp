#pragma once

#include <map>

#include "nulite/hv.hpp"
#include "nulite/network.hpp"

namespace nulite {

struct FtlParams {
  float alpha = 0.7f;  // false-negative weight
  float beta = 0.3f;   // false-positive weight
  float gamma = 4.f / 3.f;
  float smooth = 1e-5f;
};

struct LossWeights {
  float np_ftl = 1.f;
  float np_dice = 1.f;
  float hv_mse = 1.f;
  float hv_msge = 2.f;
  float nt_ftl = 1.f;
  float nt_dice = 1.f;
  float nt_bce = 1.f;
  float tc_ce = 0.5f;
  FtlParams ftl;

  void validate() const {
    for (float v : {np_ftl, np_dice, hv_mse, hv_msge, nt_ftl, nt_dice, nt_bce, tc_ce})
      if (!(v >= 0.f) || !std::isfinite(v))
        throw std::invalid_argument("loss weights must be finite and >= 0");
    if (np_ftl + np_dice <= 0.f || hv_mse + hv_msge <= 0.f ||
        nt_ftl + nt_dice + nt_bce <= 0.f || tc_ce <= 0.f)
      throw std::invalid_argument("each head needs at least one positive loss weight");
  }
};

struct LossBreakdown {
  Var total;
  std::map<std::string, float> terms;  // weighted per-term values
};

// Soft Dice loss on class probabilities: 1 - mean_c 2*sum(p t)/(sum p + sum t),
// sums taken jointly over batch and space. `target` is one-hot, same shape.
inline Var dice_loss(const Var& probs, const Tensor& target, float smooth = 1e-5f) {
  const auto& s = probs->value.shape();
  if (!probs->value.same_shape(target)) throw std::invalid_argument("dice_loss: shape mismatch");
  const int64_t N = s[0], C = s[1], HW = probs->value.numel() / (N * C);
  std::vector<double> num(size_t(C), 0.0), den(size_t(C), 0.0);
  for (int64_t c = 0; c < C; ++c) {
    double pt = 0, ps = 0, ts = 0;
    for (int64_t n = 0; n < N; ++n) {
      const float* p = probs->value.data() + (n * C + c) * HW;
      const float* t = target.data() + (n * C + c) * HW;
      for (int64_t i = 0; i < HW; ++i) {
        pt += double(p[i]) * t[i];
        ps += p[i];
        ts += t[i];
      }
    }
    num[size_t(c)] = 2 * pt + smooth;
    den[size_t(c)] = ps + ts + smooth;
  }
  double loss = 1;
  for (int64_t c = 0; c < C; ++c) loss -= num[size_t(c)] / den[size_t(c)] / C;
  Tensor out({1});
  out[0] = float(loss);
  Var vp = probs;
  Tensor tgt = target;
  return make_op(std::move(out), {probs}, [vp, tgt, num, den, N, C, HW](Node& nd) {
    if (!vp->requires_grad) return;
    Tensor& g = vp->ensure_grad();
    const float gy = nd.grad[0];
    for (int64_t n = 0; n < N; ++n)
      for (int64_t c = 0; c < C; ++c) {
        const double nu = num[size_t(c)], de = den[size_t(c)];
        const float* t = tgt.data() + (n * C + c) * HW;
        float* pg = g.data() + (n * C + c) * HW;
        for (int64_t i = 0; i < HW; ++i) {
          // d(1 - nu/de)/dp = -(2 t de - nu)/de^2, averaged over classes
          pg[i] += gy * float(-(2.0 * t[i] * de - nu) / (de * de) / C);
        }
      }
  });
}

// Focal Tversky loss: mean_c (1 - TI_c)^gamma with
// TI = (2 TP + s)/(2 (TP + alpha FN + beta FP) + s), sums joint over
// batch/space. The smoothing placement makes TI coincide exactly with the
// soft Dice coefficient at alpha = beta = 1/2.
inline Var focal_tversky_loss(const Var& probs, const Tensor& target, const FtlParams& fp) {
  const auto& s = probs->value.shape();
  if (!probs->value.same_shape(target)) throw std::invalid_argument("ftl: shape mismatch");
  const int64_t N = s[0], C = s[1], HW = probs->value.numel() / (N * C);
  std::vector<double> nu(size_t(C), 0.0), de(size_t(C), 0.0), ti(size_t(C), 0.0);
  for (int64_t c = 0; c < C; ++c) {
    double tp = 0, fn = 0, fpv = 0;
    for (int64_t n = 0; n < N; ++n) {
      const float* p = probs->value.data() + (n * C + c) * HW;
      const float* t = target.data() + (n * C + c) * HW;
      for (int64_t i = 0; i < HW; ++i) {
        tp += double(p[i]) * t[i];
        fn += (1.0 - p[i]) * t[i];
        fpv += double(p[i]) * (1.0 - t[i]);
      }
    }
    nu[size_t(c)] = 2 * tp + fp.smooth;
    de[size_t(c)] = 2 * (tp + fp.alpha * fn + fp.beta * fpv) + fp.smooth;
    ti[size_t(c)] = nu[size_t(c)] / de[size_t(c)];
  }
  double loss = 0;
  for (int64_t c = 0; c < C; ++c) loss += std::pow(std::max(0.0, 1.0 - ti[size_t(c)]), double(fp.gamma)) / C;
  Tensor out({1});
  out[0] = float(loss);
  Var vp = probs;
  Tensor tgt = target;
  return make_op(std::move(out), {probs}, [vp, tgt, nu, de, ti, fp, N, C, HW](Node& nd) {
    if (!vp->requires_grad) return;
    Tensor& g = vp->ensure_grad();
    const float gy = nd.grad[0];
    for (int64_t c = 0; c < C; ++c) {
      double base = std::max(0.0, 1.0 - ti[size_t(c)]);
      double outer = base > 0 ? double(fp.gamma) * std::pow(base, double(fp.gamma) - 1.0) : 0.0;
      for (int64_t n = 0; n < N; ++n) {
        const float* t = tgt.data() + (n * C + c) * HW;
        float* pg = g.data() + (n * C + c) * HW;
        for (int64_t i = 0; i < HW; ++i) {
          double dN = 2.0 * t[i];
          double dD = 2.0 * (t[i] - fp.alpha * t[i] + fp.beta * (1.0 - t[i]));
          double dTI = (dN * de[size_t(c)] - nu[size_t(c)] * dD) / (de[size_t(c)] * de[size_t(c)]);
          pg[i] += gy * float(-outer * dTI / C);
        }
      }
    }
  });
}

// Mean per-element binary cross-entropy against one-hot targets, evaluated on
// softmaxed channels.
inline Var bce_channels(const Var& probs, const Tensor& target) {
  if (!probs->value.same_shape(target)) throw std::invalid_argument("bce: shape mismatch");
  const int64_t M = probs->value.numel();
  constexpr double kEps = 1e-7;
  double loss = 0;
  for (int64_t i = 0; i < M; ++i) {
    double p = probs->value[i];
    double t = target[i];
    loss += -(t * std::log(p + kEps) + (1.0 - t) * std::log(1.0 - p + kEps));
  }
  Tensor out({1});
  out[0] = float(loss / M);
  Var vp = probs;
  Tensor tgt = target;
  return make_op(std::move(out), {probs}, [vp, tgt, M](Node& nd) {
    if (!vp->requires_grad) return;
    Tensor& g = vp->ensure_grad();
    const float gy = nd.grad[0];
    for (int64_t i = 0; i < M; ++i) {
      double p = vp->value[i];
      double t = tgt[i];
      g[i] += gy * float((-(t / (p + kEps)) + (1.0 - t) / (1.0 - p + kEps)) / M);
    }
  });
}

// Softmax cross-entropy on [N,K] logits against integer labels.
inline Var cross_entropy(const Var& logits, const std::vector<int>& labels) {
  const int64_t N = logits->value.dim(0), K = logits->value.dim(1);
  if (int64_t(labels.size()) != N) throw std::invalid_argument("cross_entropy: label count");
  Tensor probs({N, K});
  double loss = 0;
  for (int64_t n = 0; n < N; ++n) {
    const float* z = logits->value.data() + n * K;
    float m = z[0];
    for (int64_t k = 1; k < K; ++k) m = std::max(m, z[k]);
    double sum = 0;
    for (int64_t k = 0; k < K; ++k) sum += std::exp(double(z[k]) - m);
    double lse = m + std::log(sum);
    int l = labels[size_t(n)];
    if (l < 0 || l >= K) throw std::invalid_argument("cross_entropy: label out of range");
    loss += lse - z[l];
    for (int64_t k = 0; k < K; ++k) probs[n * K + k] = float(std::exp(double(z[k]) - lse));
  }
  Tensor out({1});
  out[0] = float(loss / N);
  Var vl = logits;
  return make_op(std::move(out), {logits}, [vl, probs, labels, N, K](Node& nd) {
    if (!vl->requires_grad) return;
    Tensor& g = vl->ensure_grad();
    const float gy = nd.grad[0];
    for (int64_t n = 0; n < N; ++n) {
      const float* p = probs.data() + n * K;
      float* pg = g.data() + n * K;
      for (int64_t k = 0; k < K; ++k)
        pg[k] += gy * (p[k] - (k == labels[size_t(n)] ? 1.f : 0.f)) / N;
    }
  });
}

// Mean squared error against a constant target.
inline Var mse_loss(const Var& pred, const Tensor& target) {
  if (!pred->value.same_shape(target)) throw std::invalid_argument("mse: shape mismatch");
  const int64_t M = pred->value.numel();
  double loss = 0;
  for (int64_t i = 0; i < M; ++i) {
    double d = double(pred->value[i]) - target[i];
    loss += d * d;
  }
  Tensor out({1});
  out[0] = float(loss / M);
  Var vp = pred;
  Tensor tgt = target;
  return make_op(std::move(out), {pred}, [vp, tgt, M](Node& nd) {
    if (!vp->requires_grad) return;
    Tensor& g = vp->ensure_grad();
    const float gy = nd.grad[0];
    for (int64_t i = 0; i < M; ++i)
      g[i] += gy * 2.f * (vp->value[i] - tgt[i]) / M;
  });
}

// Masked MSE over nuclear pixels; mask [N,H,W] broadcasts over channels.
// Defined as 0 when the mask is empty.
inline Var masked_mse(const Var& pred, const Tensor& target, const Tensor& mask) {
  const auto& s = pred->value.shape();
  const int64_t N = s[0], C = s[1], HW = s[2] * s[3];
  if (!pred->value.same_shape(target)) throw std::invalid_argument("masked_mse: shape mismatch");
  if (mask.numel() != N * HW) throw std::invalid_argument("masked_mse: mask shape mismatch");
  double msum = 0;
  for (int64_t i = 0; i < N * HW; ++i) msum += mask[i];
  const double count = msum * C;
  double loss = 0;
  if (count > 0) {
    for (int64_t n = 0; n < N; ++n)
      for (int64_t c = 0; c < C; ++c) {
        const float* p = pred->value.data() + (n * C + c) * HW;
        const float* t = target.data() + (n * C + c) * HW;
        const float* m = mask.data() + n * HW;
        for (int64_t i = 0; i < HW; ++i) {
          double d = double(p[i]) - t[i];
          loss += m[i] * d * d;
        }
      }
    loss /= count;
  }
  Tensor out({1});
  out[0] = float(loss);
  Var vp = pred;
  Tensor tgt = target, msk = mask;
  return make_op(std::move(out), {pred}, [vp, tgt, msk, N, C, HW, count](Node& nd) {
    if (!vp->requires_grad || count <= 0) return;
    Tensor& g = vp->ensure_grad();
    const float gy = nd.grad[0];
    for (int64_t n = 0; n < N; ++n)
      for (int64_t c = 0; c < C; ++c) {
        const float* p = vp->value.data() + (n * C + c) * HW;
        const float* t = tgt.data() + (n * C + c) * HW;
        const float* m = msk.data() + n * HW;
        float* pg = g.data() + (n * C + c) * HW;
        for (int64_t i = 0; i < HW; ++i)
          pg[i] += gy * float(2.0 * m[i] * (double(p[i]) - t[i]) / count);
      }
  });
}

// Directional HV derivatives with autograd: reflect-pad then depthwise-conv
// against the fixed 5-tap kernel. Same kernel as the watershed energy.
inline Var hv_gradients_var(const Var& hv) {
  static thread_local Var kernel = make_var(hv_gradient_kernel(), false);
  Var padded = reflect_pad(hv, 2);
  return conv2d(padded, kernel, nullptr, ConvGeom{1, 0, 2});
}

inline Tensor one_hot_channels(const Tensor& labels, int64_t C) {
  // labels [N,H,W] integer-valued -> [N,C,H,W]
  const int64_t N = labels.dim(0), H = labels.dim(1), W = labels.dim(2);
  Tensor out({N, C, H, W});
  for (int64_t n = 0; n < N; ++n)
    for (int64_t i = 0; i < H * W; ++i) {
      int64_t c = int64_t(labels[n * H * W + i]);
      if (c < 0 || c >= C)
        throw std::invalid_argument("one_hot: class index " + std::to_string(c) +
                                    " out of range for C=" + std::to_string(C));
      out[(n * C + c) * H * W + i] = 1.f;
    }
  return out;
}

// L_NP = lambda_FTL * FTL(softmax(np_logits), t) + lambda_DICE * Dice(...)
inline Var loss_np(const Var& np_logits, const Tensor& np_target_onehot, const LossWeights& w,
                   LossBreakdown* bd = nullptr) {
  Var probs = softmax_channel(np_logits);
  Var ftl = focal_tversky_loss(probs, np_target_onehot, w.ftl);
  Var dice = dice_loss(probs, np_target_onehot, w.ftl.smooth);
  Var total = add(mul_scalar(ftl, w.np_ftl), mul_scalar(dice, w.np_dice));
  if (bd) {
    bd->terms["np_ftl"] = w.np_ftl * ftl->value[0];
    bd->terms["np_dice"] = w.np_dice * dice->value[0];
  }
  return total;
}

// L_HV = lambda_MSE * MSE(pred, target) + lambda_MSGE * masked gradient MSE.
inline Var loss_hv(const Var& hv_pred, const Tensor& hv_target, const Tensor& np_mask,
                   const LossWeights& w, LossBreakdown* bd = nullptr) {
  Var mse = mse_loss(hv_pred, hv_target);
  Tensor target_4d = hv_target;  // same storage; shapes must match
  Var grad_pred = hv_gradients_var(hv_pred);
  // target gradients are constant; evaluate per sample with the plain kernel
  const auto& s = hv_target.shape();
  Tensor grad_tgt(s);
  for (int64_t n = 0; n < s[0]; ++n) {
    Tensor slice({2, s[2], s[3]});
    std::memcpy(slice.data(), hv_target.data() + n * 2 * s[2] * s[3],
                sizeof(float) * size_t(2 * s[2] * s[3]));
    Tensor gs = hv_gradients(slice);
    std::memcpy(grad_tgt.data() + n * 2 * s[2] * s[3], gs.data(),
                sizeof(float) * size_t(2 * s[2] * s[3]));
  }
  Var msge = masked_mse(grad_pred, grad_tgt, np_mask);
  Var total = add(mul_scalar(mse, w.hv_mse), mul_scalar(msge, w.hv_msge));
  if (bd) {
    bd->terms["hv_mse"] = w.hv_mse * mse->value[0];
    bd->terms["hv_msge"] = w.hv_msge * msge->value[0];
  }
  return total;
}

// L_NT = lambda_FTL * FTL + lambda_DICE * Dice + lambda_BCE * per-channel BCE.
inline Var loss_nt(const Var& nt_logits, const Tensor& nt_target_onehot, const LossWeights& w,
                   LossBreakdown* bd = nullptr) {
  Var probs = softmax_channel(nt_logits);
  Var ftl = focal_tversky_loss(probs, nt_target_onehot, w.ftl);
  Var dice = dice_loss(probs, nt_target_onehot, w.ftl.smooth);
  Var bce = bce_channels(probs, nt_target_onehot);
  Var total = add(add(mul_scalar(ftl, w.nt_ftl), mul_scalar(dice, w.nt_dice)),
                  mul_scalar(bce, w.nt_bce));
  if (bd) {
    bd->terms["nt_ftl"] = w.nt_ftl * ftl->value[0];
    bd->terms["nt_dice"] = w.nt_dice * dice->value[0];
    bd->terms["nt_bce"] = w.nt_bce * bce->value[0];
  }
  return total;
}

struct TrainingTargets {
  Tensor np_target;      // [N,H,W] binary
  Tensor hv_target;      // [N,2,H,W] in [-1,1]
  Tensor nt_target;      // [N,H,W] class indices
  std::vector<int> tissue_target;
};

// L_total = L_NP + L_HV + L_NT + L_TC. Any nonnegative weights are accepted
// here; training configs enforce the per-head positivity invariant.
inline LossBreakdown loss_total(const NetworkOutput& out, const TrainingTargets& t,
                                const LossWeights& w) {
  LossBreakdown bd;
  const int64_t C = out.nt_logits->value.dim(1);
  Tensor np_onehot = one_hot_channels(t.np_target, 2);
  Tensor nt_onehot = one_hot_channels(t.nt_target, C);
  Var l_np = loss_np(out.np_logits, np_onehot, w, &bd);
  Var l_hv = loss_hv(out.hv_map, t.hv_target, t.np_target, w, &bd);
  Var l_nt = loss_nt(out.nt_logits, nt_onehot, w, &bd);
  Var ce = cross_entropy(out.tissue_logits, t.tissue_target);
  Var l_tc = mul_scalar(ce, w.tc_ce);
  bd.terms["tc_ce"] = w.tc_ce * ce->value[0];
  bd.total = add(add(l_np, l_hv), add(l_nt, l_tc));
  return bd;
}

}  // namespace nulite
