#pragma once

#include <nlohmann/json.hpp>

#include "nulite/augment.hpp"
#include "nulite/checkpoint.hpp"
#include "nulite/config.hpp"
#include "nulite/sampler.hpp"
#include "nulite/tiling.hpp"

namespace nulite {

struct BatchTensors {
  Tensor images;  // [B,3,H,W], normalized
  TrainingTargets targets;
};

inline BatchTensors assemble_batch(const std::vector<AnnotatedImage>& images,
                                   const std::vector<size_t>& indices, const RgbNorm& norm) {
  if (indices.empty()) throw std::invalid_argument("empty batch");
  const int64_t H = images[indices[0]].inst.height;
  const int64_t W = images[indices[0]].inst.width;
  const int64_t B = int64_t(indices.size());
  BatchTensors b;
  b.images = Tensor({B, 3, H, W});
  b.targets.np_target = Tensor({B, H, W});
  b.targets.hv_target = Tensor({B, 2, H, W});
  b.targets.nt_target = Tensor({B, H, W});
  for (int64_t k = 0; k < B; ++k) {
    const AnnotatedImage& a = images[indices[size_t(k)]];
    if (a.inst.height != H || a.inst.width != W)
      throw std::invalid_argument("batch images must share a size");
    Tensor in = image_to_input(a.rgb, norm);
    std::memcpy(b.images.data() + k * 3 * H * W, in.data(), sizeof(float) * size_t(3 * H * W));
    ImageTargets t = make_targets(a);
    std::memcpy(b.targets.np_target.data() + k * H * W, t.np.data(),
                sizeof(float) * size_t(H * W));
    std::memcpy(b.targets.hv_target.data() + k * 2 * H * W, t.hv.data(),
                sizeof(float) * size_t(2 * H * W));
    std::memcpy(b.targets.nt_target.data() + k * H * W, t.nt.data(),
                sizeof(float) * size_t(H * W));
    b.targets.tissue_target.push_back(t.tissue);
  }
  return b;
}

struct EpochStats {
  int64_t epoch = 0;
  float lr = 0;
  double mean_total = 0;
  int64_t steps = 0;
};

struct TrainCallbacks {
  // once per optimization step; record is a JSON object with the breakdown
  std::function<void(const nlohmann::json&)> on_step;
  // once per epoch after checkpointing
  std::function<void(const EpochStats&)> on_epoch;
};

// Epochs of sampled, augmented batches with per-step loss logging and a
// checkpoint per epoch. One epoch draws dataset-size samples from the
// balanced stream. Aborts on non-finite loss, naming the offending term.
inline std::vector<EpochStats> train(Network& net, const std::vector<AnnotatedImage>& dataset,
                                     const TrainConfig& cfg,
                                     const std::string& checkpoint_dir = "",
                                     const TrainCallbacks& cb = {}) {
  cfg.validate();
  if (dataset.empty()) throw std::invalid_argument("train: empty dataset");

  auto params = net.parameters();
  AdamW opt;
  opt.beta1 = cfg.beta1;
  opt.beta2 = cfg.beta2;
  opt.weight_decay = cfg.weight_decay;
  opt.attach(params);

  BalancedSampler sampler(dataset, cfg.sampler, cfg.seed + 1);
  Rng aug_rng(cfg.seed + 2);

  const int64_t steps_per_epoch =
      std::max<int64_t>(1, int64_t(dataset.size()) / cfg.batch_size);
  std::vector<EpochStats> history;

  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    opt.lr = exponential_lr(cfg.lr, cfg.scheduler_gamma, epoch);
    EpochStats es;
    es.epoch = epoch;
    es.lr = opt.lr;
    for (int64_t step = 0; step < steps_per_epoch; ++step) {
      std::vector<size_t> idx;
      std::vector<AnnotatedImage> batch_imgs;
      for (int64_t k = 0; k < cfg.batch_size; ++k) {
        size_t i = sampler.next();
        batch_imgs.push_back(augment(dataset[i], cfg.augment, aug_rng));
        idx.push_back(size_t(k));
      }
      BatchTensors batch = assemble_batch(batch_imgs, idx, cfg.norm);

      zero_grad(params);
      Var x = make_var(batch.images);
      NetworkOutput out = net.forward(x, true);
      LossBreakdown bd = loss_total(out, batch.targets, cfg.loss);
      for (const auto& [name, value] : bd.terms)
        if (!std::isfinite(value))
          throw std::runtime_error("training aborted: loss term " + name + " is not finite");
      backward(bd.total);
      if (cfg.grad_clip > 0) clip_grad_norm(params, cfg.grad_clip);
      opt.step(params);

      es.mean_total += bd.total->value[0];
      ++es.steps;
      if (cb.on_step) {
        nlohmann::json rec{{"epoch", epoch},
                           {"step", step},
                           {"lr", opt.lr},
                           {"total", bd.total->value[0]}};
        for (const auto& [name, value] : bd.terms) rec[name] = value;
        cb.on_step(rec);
      }
    }
    es.mean_total /= double(es.steps);
    if (!checkpoint_dir.empty())
      save_checkpoint(checkpoint_dir + "/epoch_" + std::to_string(epoch) + ".ckpt", net, epoch,
                      cfg.norm, &opt);
    if (cb.on_epoch) cb.on_epoch(es);
    history.push_back(es);
  }
  return history;
}

}  // namespace nulite
