#include <catch2/catch_amalgamated.hpp>

#include "nulite/encoder.hpp"
#include "test_util.hpp"

using namespace nulite;
using testutil::random_tensor;

namespace {

FeaturePyramid run_eval(Encoder& e, const Tensor& x) {
  NoGradGuard ng;
  return e.forward(make_var(x), false);
}

// one training-mode pass to populate normalization statistics
void calibrate(Encoder& e, const Tensor& x) { e.forward(make_var(x), true); }

}  // namespace

TEST_CASE("encoder variant table") {
  for (auto [v, z, s4] : std::initializer_list<std::tuple<EncoderVariant, int64_t, int64_t>>{
           {EncoderVariant::T8, 48, 384},
           {EncoderVariant::T12, 64, 512},
           {EncoderVariant::S12, 64, 512},
           {EncoderVariant::SA12, 64, 512},
           {EncoderVariant::SA24, 64, 512},
           {EncoderVariant::SA36, 64, 512},
           {EncoderVariant::MA36, 76, 608}}) {
    EncoderConfig c = EncoderConfig::make(v);
    REQUIRE(c.base_width == z);
    REQUIRE(c.final_width() == s4);
    REQUIRE(c.stage_widths == std::array<int64_t, 4>{z, 2 * z, 4 * z, 8 * z});
  }
  REQUIRE_THROWS(EncoderConfig::make("T99"));
  REQUIRE(EncoderConfig::make("FastViT-S12").variant == EncoderVariant::S12);
}

TEST_CASE("stage output shape contract across variants and sizes") {
  // strides 4/8/16/32 with widths Z,2Z,4Z,8Z over every variant
  for (EncoderVariant v : {EncoderVariant::T8, EncoderVariant::T12, EncoderVariant::S12,
                           EncoderVariant::SA12, EncoderVariant::SA24, EncoderVariant::SA36,
                           EncoderVariant::MA36}) {
    EncoderConfig cfg = EncoderConfig::make(v);
    Encoder enc = build_encoder(cfg, 1);
    for (int64_t hw : {64, 96}) {
      Rng rng(2);
      FeaturePyramid p = run_eval(enc, random_tensor({1, 3, hw, hw}, rng));
      const int64_t z = cfg.base_width;
      REQUIRE(p.stem->value.shape() == std::vector<int64_t>{1, z, hw / 4, hw / 4});
      REQUIRE(p.s1->value.shape() == std::vector<int64_t>{1, z, hw / 4, hw / 4});
      REQUIRE(p.s2->value.shape() == std::vector<int64_t>{1, 2 * z, hw / 8, hw / 8});
      REQUIRE(p.s3->value.shape() == std::vector<int64_t>{1, 4 * z, hw / 16, hw / 16});
      REQUIRE(p.s4->value.shape() == std::vector<int64_t>{1, 8 * z, hw / 32, hw / 32});
      REQUIRE(p.pooled->value.shape() == std::vector<int64_t>{1, 8 * z});
    }
  }
}

TEST_CASE("encoder examples: S12/T8/MA36 final-stage shapes") {
  {
    Encoder enc = build_encoder(EncoderConfig::make(EncoderVariant::S12), 3);
    Rng rng(4);
    FeaturePyramid p = run_eval(enc, random_tensor({1, 3, 256, 256}, rng));
    REQUIRE(p.s4->value.shape() == std::vector<int64_t>{1, 512, 8, 8});
  }
  {
    Encoder enc = build_encoder(EncoderConfig::make(EncoderVariant::T8), 3);
    Rng rng(4);
    FeaturePyramid p = run_eval(enc, random_tensor({1, 3, 256, 256}, rng));
    REQUIRE(p.s4->value.shape() == std::vector<int64_t>{1, 384, 8, 8});
    REQUIRE(p.s1->value.shape() == std::vector<int64_t>{1, 48, 64, 64});
  }
  {
    Encoder enc = build_encoder(EncoderConfig::make(EncoderVariant::MA36), 3);
    Rng rng(4);
    FeaturePyramid p = run_eval(enc, random_tensor({1, 3, 32, 32}, rng));
    REQUIRE(p.s4->value.shape() == std::vector<int64_t>{1, 608, 1, 1});
  }
}

TEST_CASE("encoder rejects non-divisible inputs with a shape error") {
  Encoder enc = build_encoder(EncoderConfig::make(EncoderVariant::T8), 5);
  Rng rng(6);
  Tensor bad = random_tensor({1, 3, 40, 64}, rng);
  REQUIRE_THROWS_WITH(run_eval(enc, bad), Catch::Matchers::ContainsSubstring("height"));
  Tensor bad2 = random_tensor({1, 3, 64, 40}, rng);
  REQUIRE_THROWS_WITH(run_eval(enc, bad2), Catch::Matchers::ContainsSubstring("width"));
}

TEST_CASE("reparameterization preserves the forward map") {
  for (EncoderVariant v : {EncoderVariant::T8, EncoderVariant::S12, EncoderVariant::SA12}) {
    for (uint64_t seed : {1ull, 2ull, 3ull}) {
      Encoder enc = build_encoder(EncoderConfig::make(v), seed);
      Rng rng(seed + 100);
      Tensor calib = random_tensor({2, 3, 64, 64}, rng);
      calibrate(enc, calib);
      Tensor x = random_tensor({1, 3, 64, 64}, rng);
      FeaturePyramid before = run_eval(enc, x);
      enc.reparameterize();
      REQUIRE(enc.reparameterized());
      FeaturePyramid after = run_eval(enc, x);
      INFO("variant " << variant_name(v) << " seed " << seed);
      REQUIRE(max_abs_diff(before.s4->value, after.s4->value) < 1e-4f);
      REQUIRE(max_abs_diff(before.s1->value, after.s1->value) < 1e-4f);
    }
  }
}

TEST_CASE("fusion drops parameters and is idempotent") {
  Encoder enc = build_encoder(EncoderConfig::make(EncoderVariant::T8), 7);
  Rng rng(8);
  calibrate(enc, random_tensor({2, 3, 64, 64}, rng));
  auto params_before = enc.parameters();
  int64_t count_before = param_count(params_before);
  enc.reparameterize();
  auto params_after = enc.parameters();
  int64_t count_after = param_count(params_after);
  REQUIRE(count_after < count_before);

  // fuse twice: parameter-identical no-op
  std::vector<Tensor> snap;
  for (auto& p : params_after) snap.push_back(p->value.clone());
  enc.reparameterize();
  auto params_again = enc.parameters();
  REQUIRE(params_again.size() == params_after.size());
  for (size_t i = 0; i < snap.size(); ++i) REQUIRE(bit_equal(snap[i], params_again[i]->value));
}

TEST_CASE("fusion without calibration raises the statistics error") {
  Encoder enc = build_encoder(EncoderConfig::make(EncoderVariant::T8), 9);
  REQUIRE_THROWS_WITH(enc.reparameterize(), Catch::Matchers::ContainsSubstring("calibration"));
}

TEST_CASE("zeroed side branches reduce MobileOne fusion to the folded main kernel") {
  MobileOneBlock blk(4, 4, 3, 1, 1, 1, false);
  Rng rng(11);
  blk.init(rng);
  // zero the 1x1 scale branch and neutralize the identity branch
  blk.scale.weight->value.fill(0.f);
  blk.skip_bn.gamma->value.fill(0.f);
  // populate statistics so folding is defined
  Tensor x = random_tensor({4, 4, 8, 8}, rng);
  blk.forward(make_var(x), true);
  Tensor wmain = blk.conv.weight->value.clone();
  Tensor rm = blk.conv_bn.running_mean.clone(), rv = blk.conv_bn.running_var.clone();
  Tensor g = blk.conv_bn.gamma->value.clone(), b = blk.conv_bn.beta->value.clone();
  blk.fuse();
  for (int64_t co = 0; co < 4; ++co) {
    float scale = g[co] / std::sqrt(rv[co] + 1e-5f);
    for (int64_t i = 0; i < 4 * 9; ++i)
      REQUIRE_THAT(double(blk.rep.weight->value[co * 36 + i]),
                   Catch::Matchers::WithinAbs(double(wmain[co * 36 + i] * scale), 1e-6));
    REQUIRE_THAT(double(blk.rep.bias->value[co]),
                 Catch::Matchers::WithinAbs(double(b[co] - rm[co] * scale), 1e-6));
  }
}

TEST_CASE("deterministic forward given identical weights and input") {
  Encoder a = build_encoder(EncoderConfig::make(EncoderVariant::T8), 42);
  Encoder b = build_encoder(EncoderConfig::make(EncoderVariant::T8), 42);
  Rng rng(12);
  Tensor x = random_tensor({1, 3, 64, 64}, rng);
  FeaturePyramid pa = run_eval(a, x);
  FeaturePyramid pb = run_eval(b, x);
  REQUIRE(bit_equal(pa.s4->value, pb.s4->value));
  FeaturePyramid pa2 = run_eval(a, x);
  REQUIRE(bit_equal(pa.s4->value, pa2.s4->value));
}

TEST_CASE("tissue logits") {
  Encoder enc = build_encoder(EncoderConfig::make(EncoderVariant::S12), 13);
  TissueHead head(512, 19);
  Rng hrng(14);
  head.fc.init(hrng);
  Rng rng(15);
  FeaturePyramid p = run_eval(enc, random_tensor({3, 3, 64, 64}, rng));
  Var logits = tissue_logits(p, head);
  REQUIRE(logits->value.shape() == std::vector<int64_t>{3, 19});

  // zero pooled vector with zero bias -> zero logits
  FeaturePyramid zero_p;
  zero_p.pooled = make_var(Tensor({2, 512}));
  Var z = tissue_logits(zero_p, head);
  for (int64_t i = 0; i < z->value.numel(); ++i) REQUIRE(z->value[i] == 0.f);

  REQUIRE_THROWS(TissueHead(512, 1));
}
