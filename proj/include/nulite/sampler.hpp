#pragma once

#include "nulite/data.hpp"

namespace nulite {

struct SamplerParams {
  float gamma_s = 1.f;   // tissue-frequency exponent
  float beta_r = 0.1f;   // rare-class boost per nucleus
  int rare_class = 4;    // Dead under the PanNuke convention
};

// Class- and tissue-balanced sampling: weight(image) is proportional to
// (1/freq(tissue))^gamma_s * (1 + beta_r * count_rare_nuclei(image)).
// Produces an infinite reproducible index stream.
class BalancedSampler {
 public:
  BalancedSampler(const std::vector<AnnotatedImage>& images, const SamplerParams& p,
                  uint64_t seed)
      : rng_(seed) {
    if (images.empty()) throw std::invalid_argument("balanced_sampler: empty dataset");
    std::map<int, int64_t> tissue_count;
    for (const auto& a : images) ++tissue_count[a.tissue_label];
    weights_.reserve(images.size());
    for (const auto& a : images) {
      double freq = double(tissue_count[a.tissue_label]) / double(images.size());
      int64_t rare = 0;
      std::map<int32_t, int> inst_cls;
      for (size_t i = 0; i < a.inst.ids.size(); ++i)
        if (a.inst.ids[i] > 0 && a.type_map[i] == p.rare_class) inst_cls[a.inst.ids[i]] = 1;
      rare = int64_t(inst_cls.size());
      double w = std::pow(1.0 / freq, double(p.gamma_s)) * (1.0 + double(p.beta_r) * rare);
      weights_.push_back(w);
    }
    dist_ = std::discrete_distribution<size_t>(weights_.begin(), weights_.end());
  }

  size_t next() { return dist_(rng_); }

  const std::vector<double>& weights() const { return weights_; }

 private:
  Rng rng_;
  std::vector<double> weights_;
  std::discrete_distribution<size_t> dist_;
};

}  // namespace nulite
