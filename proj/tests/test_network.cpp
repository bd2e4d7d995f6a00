#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "nulite/checkpoint.hpp"
#include "nulite/losses.hpp"
#include "test_util.hpp"

using namespace nulite;
using testutil::random_tensor;

namespace {

NetworkConfig small_config(EncoderVariant v, int64_t classes = 6, int64_t tissues = 19) {
  NetworkConfig cfg;
  cfg.encoder = EncoderConfig::make(v);
  cfg.num_nuclei_classes = classes;
  cfg.num_tissue_classes = tissues;
  return cfg;
}

void expect_trace_row(const std::vector<LayerTrace>& trace, const std::string& name,
                      std::vector<int64_t> in, std::vector<int64_t> out) {
  for (const auto& row : trace)
    if (row.name == name) {
      INFO(name);
      REQUIRE(row.in_shape == in);
      REQUIRE(row.out_shape == out);
      return;
    }
  FAIL("trace row missing: " << name);
}

TrainingTargets random_targets(int64_t B, int64_t H, int64_t W, int64_t C, int64_t tissues,
                               Rng& rng) {
  TrainingTargets t;
  t.np_target = Tensor({B, H, W});
  t.nt_target = Tensor({B, H, W});
  t.hv_target = random_tensor({B, 2, H, W}, rng);
  for (int64_t i = 0; i < B * H * W; ++i) {
    int cls = int(rand_uniform(rng, 0.f, float(C) - 0.001f));
    t.nt_target[i] = float(cls);
    t.np_target[i] = cls > 0 ? 1.f : 0.f;
  }
  for (int64_t b = 0; b < B; ++b)
    t.tissue_target.push_back(int(rand_uniform(rng, 0.f, float(tissues) - 0.001f)));
  return t;
}

}  // namespace

TEST_CASE("decoder and heads match the layer table row for row") {
  // all eight rows at 256^2 for every decoder base width
  for (EncoderVariant v : {EncoderVariant::T8, EncoderVariant::S12, EncoderVariant::MA36}) {
    Network net(small_config(v));
    net.init(1);
    const int64_t z = net.config().encoder.base_width;
    Rng rng(2);
    NoGradGuard ng;
    net.forward(make_var(random_tensor({1, 3, 256, 256}, rng)), false);
    const auto& tr = net.last_trace();
    expect_trace_row(tr, "DEC.1", {8 * z, 8, 8}, {4 * z, 16, 16});
    expect_trace_row(tr, "DEC.2", {8 * z, 16, 16}, {2 * z, 32, 32});
    expect_trace_row(tr, "DEC.3", {4 * z, 32, 32}, {z, 64, 64});
    expect_trace_row(tr, "DEC.4", {2 * z, 64, 64}, {z, 128, 128});
    expect_trace_row(tr, "DEC.5", {z, 128, 128}, {z, 256, 256});
    expect_trace_row(tr, "NP.HEAD", {2 * z, 256, 256}, {2, 256, 256});
    expect_trace_row(tr, "HV.HEAD", {2 * z, 256, 256}, {2, 256, 256});
    expect_trace_row(tr, "NC.HEAD", {2 * z, 256, 256}, {6, 256, 256});
  }
}

TEST_CASE("network output shapes track the input resolution") {
  Network net(small_config(EncoderVariant::T8, 6, 19));
  net.init(3);
  Rng rng(4);
  NoGradGuard ng;
  for (int64_t hw : {64, 96}) {
    NetworkOutput out = net.forward(make_var(random_tensor({1, 3, hw, hw}, rng)), false);
    REQUIRE(out.np_logits->value.shape() == std::vector<int64_t>{1, 2, hw, hw});
    REQUIRE(out.hv_map->value.shape() == std::vector<int64_t>{1, 2, hw, hw});
    REQUIRE(out.nt_logits->value.shape() == std::vector<int64_t>{1, 6, hw, hw});
    REQUIRE(out.tissue_logits->value.shape() == std::vector<int64_t>{1, 19});
  }
  REQUIRE_THROWS_WITH(net.forward(make_var(Tensor({1, 3, 40, 64})), false),
                      Catch::Matchers::ContainsSubstring("40"));
}

TEST_CASE("minimal config: C=2, Z=48, 32x32") {
  Network net(small_config(EncoderVariant::T8, 2, 2));
  net.init(5);
  Rng rng(6);
  NoGradGuard ng;
  NetworkOutput out = net.forward(make_var(random_tensor({1, 3, 32, 32}, rng)), false);
  REQUIRE(out.nt_logits->value.shape() == std::vector<int64_t>{1, 2, 32, 32});
}

TEST_CASE("variant presets resolve backbones") {
  REQUIRE(network_variant("NuLite-T").encoder.variant == EncoderVariant::S12);
  REQUIRE(network_variant("NuLite-M").encoder.variant == EncoderVariant::SA24);
  REQUIRE(network_variant("NuLite-H").encoder.variant == EncoderVariant::SA36);
  REQUIRE(network_variant("NuLite-M-alt").encoder.variant == EncoderVariant::SA36);
  REQUIRE(network_variant("NuLite-H-alt").encoder.variant == EncoderVariant::MA36);
  REQUIRE(network_variant("NuLite-T").encoder.base_width == 64);
  REQUIRE_THROWS(network_variant("NuLite-X"));
}

TEST_CASE("gradient liveness: every parameter receives gradient") {
  for (EncoderVariant v : {EncoderVariant::T8, EncoderVariant::SA12}) {
    Network net(small_config(v, 4, 5));
    net.init(7);
    Rng rng(8);
    Var x = make_var(random_tensor({2, 3, 64, 64}, rng), false);
    NetworkOutput out = net.forward(x, true);
    TrainingTargets targets = random_targets(2, 64, 64, 4, 5, rng);
    LossBreakdown bd = loss_total(out, targets, LossWeights{});
    backward(bd.total);
    auto named = net.named_parameters();
    int64_t dead = 0;
    for (auto& [name, p] : named) {
      bool live = p->grad.defined();
      if (live) {
        live = false;
        for (int64_t i = 0; i < p->grad.numel(); ++i)
          if (p->grad[i] != 0.f) {
            live = true;
            break;
          }
      }
      if (!live) {
        ++dead;
        UNSCOPED_INFO("dead parameter: " << name);
      }
    }
    REQUIRE(dead == 0);
  }
}

TEST_CASE("head independence: zeroing the NP head changes NP logits only") {
  Network net(small_config(EncoderVariant::T8, 6, 19));
  net.init(9);
  Rng rng(10);
  Tensor x = random_tensor({1, 3, 64, 64}, rng);
  NoGradGuard ng;
  NetworkOutput a = net.forward(make_var(x), false);
  Tensor np0 = a.np_logits->value.clone();
  Tensor hv0 = a.hv_map->value.clone();
  Tensor nt0 = a.nt_logits->value.clone();
  Tensor tc0 = a.tissue_logits->value.clone();

  for (auto& [name, p] : net.named_parameters())
    if (name.rfind("np_head", 0) == 0) p->value.fill(0.f);
  NetworkOutput b = net.forward(make_var(x), false);
  REQUIRE(max_abs_diff(np0, b.np_logits->value) > 0.f);
  REQUIRE(bit_equal(hv0, b.hv_map->value));
  REQUIRE(bit_equal(nt0, b.nt_logits->value));
  REQUIRE(bit_equal(tc0, b.tissue_logits->value));
}

TEST_CASE("zero image through zeroed heads gives zero logit maps") {
  Network net(small_config(EncoderVariant::T8, 6, 19));
  net.init(11);
  for (auto& [name, p] : net.named_parameters())
    if (name.find("_head.out") != std::string::npos) p->value.fill(0.f);
  NoGradGuard ng;
  NetworkOutput out = net.forward(make_var(Tensor({1, 3, 32, 32})), false);
  for (int64_t i = 0; i < out.np_logits->value.numel(); ++i)
    REQUIRE(out.np_logits->value[i] == 0.f);
  for (int64_t i = 0; i < out.nt_logits->value.numel(); ++i)
    REQUIRE(out.nt_logits->value[i] == 0.f);
}

TEST_CASE("checkpoint round trip is bit exact") {
  namespace fs = std::filesystem;
  fs::create_directories("test_tmp");
  Network net(small_config(EncoderVariant::T8, 6, 19));
  net.init(12);
  Rng rng(13);
  Tensor x = random_tensor({1, 3, 64, 64}, rng);
  // populate BN statistics and optimizer state so buffers round trip too
  net.forward(make_var(x), true);
  auto params = net.parameters();
  AdamW opt;
  opt.attach(params);
  RgbNorm norm;
  norm.mean = {0.1f, 0.2f, 0.3f};
  norm.std = {0.8f, 0.9f, 1.0f};
  save_checkpoint("test_tmp/rt.ckpt", net, 17, norm, &opt);

  LoadedCheckpoint ck = load_checkpoint("test_tmp/rt.ckpt");
  REQUIRE(ck.epoch == 17);
  REQUIRE(ck.norm.mean[2] == 0.3f);
  REQUIRE(ck.has_optimizer);
  NoGradGuard ng;
  NetworkOutput a = net.forward(make_var(x), false);
  NetworkOutput b = ck.network.forward(make_var(x), false);
  REQUIRE(bit_equal(a.np_logits->value, b.np_logits->value));
  REQUIRE(bit_equal(a.hv_map->value, b.hv_map->value));
  REQUIRE(bit_equal(a.nt_logits->value, b.nt_logits->value));
  REQUIRE(bit_equal(a.tissue_logits->value, b.tissue_logits->value));

  SECTION("fused checkpoints reload into the fused form") {
    net.reparameterize();
    NetworkOutput f = net.forward(make_var(x), false);
    save_checkpoint("test_tmp/rt_fused.ckpt", net, 18, norm, nullptr);
    LoadedCheckpoint fck = load_checkpoint("test_tmp/rt_fused.ckpt");
    REQUIRE(fck.network.reparameterized());
    NetworkOutput g = fck.network.forward(make_var(x), false);
    REQUIRE(bit_equal(f.np_logits->value, g.np_logits->value));
  }
}

TEST_CASE("network-level reparameterization preserves outputs") {
  Network net(small_config(EncoderVariant::T8, 6, 19));
  net.init(14);
  Rng rng(15);
  Tensor x = random_tensor({1, 3, 64, 64}, rng);
  net.forward(make_var(x), true);  // calibration
  NoGradGuard ng;
  NetworkOutput a = net.forward(make_var(x), false);
  int64_t before = net.num_parameters();
  net.reparameterize();
  int64_t after = net.num_parameters();
  REQUIRE(after < before);
  NetworkOutput b = net.forward(make_var(x), false);
  REQUIRE(max_abs_diff(a.np_logits->value, b.np_logits->value) < 1e-4f);
  REQUIRE(max_abs_diff(a.hv_map->value, b.hv_map->value) < 1e-4f);
}
