#pragma once

#include <functional>

#include "nulite/autograd.hpp"

namespace testutil {

using nulite::Rng;
using nulite::Tensor;
using nulite::Var;

inline Tensor random_tensor(std::vector<int64_t> shape, Rng& rng, float lo = -1.f,
                            float hi = 1.f) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = nulite::rand_uniform(rng, lo, hi);
  return t;
}

// Central finite differences of a scalar function at x, elementwise.
inline Tensor numeric_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                           float h = 1e-3f) {
  Tensor g(x.shape());
  Tensor xp = x.clone();
  for (int64_t i = 0; i < x.numel(); ++i) {
    float orig = xp[i];
    xp[i] = orig + h;
    double fp = f(xp);
    xp[i] = orig - h;
    double fm = f(xp);
    xp[i] = orig;
    g[i] = float((fp - fm) / (2.0 * h));
  }
  return g;
}

// Relative error on the top-k magnitude entries of the analytic gradient.
inline double topk_rel_error(const Tensor& analytic, const Tensor& numeric, int k) {
  std::vector<int64_t> idx(size_t(analytic.numel()));
  for (int64_t i = 0; i < analytic.numel(); ++i) idx[size_t(i)] = i;
  std::sort(idx.begin(), idx.end(), [&](int64_t a, int64_t b) {
    return std::abs(analytic[a]) > std::abs(analytic[b]);
  });
  double worst = 0;
  int n = std::min<int>(k, int(idx.size()));
  for (int i = 0; i < n; ++i) {
    int64_t j = idx[size_t(i)];
    double denom = std::max(std::abs(double(analytic[j])), 1e-4);
    worst = std::max(worst, std::abs(double(analytic[j]) - numeric[j]) / denom);
  }
  return worst;
}

}  // namespace testutil
