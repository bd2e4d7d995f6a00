#pragma once

#include "nulite/autograd.hpp"

namespace nulite {

// Decoupled weight decay Adam (PyTorch AdamW semantics).
struct AdamW {
  float lr = 3e-4f;
  float beta1 = 0.85f;
  float beta2 = 0.95f;
  float eps = 1e-8f;
  float weight_decay = 1e-4f;
  int64_t step_count = 0;
  std::vector<Tensor> m, v;

  void attach(const std::vector<Var>& params) {
    m.clear();
    v.clear();
    for (const auto& p : params) {
      m.emplace_back(p->value.shape());
      v.emplace_back(p->value.shape());
    }
  }

  void step(std::vector<Var>& params) {
    if (m.size() != params.size()) throw std::logic_error("AdamW: attach() first");
    ++step_count;
    const float bc1 = 1.f - std::pow(beta1, float(step_count));
    const float bc2 = 1.f - std::pow(beta2, float(step_count));
    for (size_t i = 0; i < params.size(); ++i) {
      Var& p = params[i];
      if (!p->grad.defined()) continue;
      float* w = p->value.data();
      const float* g = p->grad.data();
      float* mi = m[i].data();
      float* vi = v[i].data();
      const int64_t n = p->value.numel();
      for (int64_t j = 0; j < n; ++j) {
        w[j] -= lr * weight_decay * w[j];
        mi[j] = beta1 * mi[j] + (1.f - beta1) * g[j];
        vi[j] = beta2 * vi[j] + (1.f - beta2) * g[j] * g[j];
        float mhat = mi[j] / bc1;
        float vhat = vi[j] / bc2;
        w[j] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
    }
  }
};

// lr for epoch k under exponential decay: lr0 * gamma^k.
inline float exponential_lr(float lr0, float gamma, int64_t epoch) {
  return lr0 * std::pow(gamma, float(epoch));
}

// Scales gradients so their global L2 norm is at most max_norm; returns the
// pre-clip norm.
inline double clip_grad_norm(std::vector<Var>& params, double max_norm) {
  double sq = 0;
  for (auto& p : params) {
    if (!p->grad.defined()) continue;
    const float* g = p->grad.data();
    for (int64_t i = 0; i < p->value.numel(); ++i) sq += double(g[i]) * g[i];
  }
  double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    float s = float(max_norm / (norm + 1e-12));
    for (auto& p : params) {
      if (!p->grad.defined()) continue;
      p->grad.scale_(s);
    }
  }
  return norm;
}

}  // namespace nulite
