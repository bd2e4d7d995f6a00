#include <catch2/catch_amalgamated.hpp>

#include "nulite/losses.hpp"
#include "test_util.hpp"

using namespace nulite;
using testutil::numeric_grad;
using testutil::random_tensor;

namespace {

// independent scalar re-computations used as oracles
double dice_oracle(const Tensor& p, const Tensor& t, float smooth) {
  const int64_t N = p.dim(0), C = p.dim(1), HW = p.numel() / (N * C);
  double loss = 1;
  for (int64_t c = 0; c < C; ++c) {
    double pt = 0, ps = 0, ts = 0;
    for (int64_t n = 0; n < N; ++n)
      for (int64_t i = 0; i < HW; ++i) {
        double pv = p[(n * C + c) * HW + i], tv = t[(n * C + c) * HW + i];
        pt += pv * tv;
        ps += pv;
        ts += tv;
      }
    loss -= (2 * pt + smooth) / (ps + ts + smooth) / C;
  }
  return loss;
}

double ftl_oracle(const Tensor& p, const Tensor& t, const FtlParams& fp) {
  const int64_t N = p.dim(0), C = p.dim(1), HW = p.numel() / (N * C);
  double loss = 0;
  for (int64_t c = 0; c < C; ++c) {
    double tp = 0, fn = 0, fpv = 0;
    for (int64_t n = 0; n < N; ++n)
      for (int64_t i = 0; i < HW; ++i) {
        double pv = p[(n * C + c) * HW + i], tv = t[(n * C + c) * HW + i];
        tp += pv * tv;
        fn += (1 - pv) * tv;
        fpv += pv * (1 - tv);
      }
    double ti = (2 * tp + fp.smooth) / (2 * (tp + fp.alpha * fn + fp.beta * fpv) + fp.smooth);
    loss += std::pow(1 - ti, double(fp.gamma)) / C;
  }
  return loss;
}

Tensor softmax_of(const Tensor& logits) {
  Var p = softmax_channel(make_var(logits.clone()));
  return p->value;
}

// direct-loop 5-tap derivative with reflection, independent of the conv path
Tensor grad_oracle(const Tensor& hv) {
  const int64_t N = hv.dim(0), H = hv.dim(2), W = hv.dim(3);
  const double c[5] = {1.0 / 12, -8.0 / 12, 0.0, 8.0 / 12, -1.0 / 12};
  auto refl = [](int64_t i, int64_t n) { return i < 0 ? -i : (i >= n ? 2 * n - 2 - i : i); };
  Tensor out({N, 2, H, W});
  for (int64_t n = 0; n < N; ++n)
    for (int64_t r = 0; r < H; ++r)
      for (int64_t cc = 0; cc < W; ++cc) {
        double gx = 0, gy = 0;
        for (int k = -2; k <= 2; ++k) {
          gx += c[k + 2] * hv[((n * 2 + 0) * H + r) * W + refl(cc + k, W)];
          gy += c[k + 2] * hv[((n * 2 + 1) * H + refl(r + k, H)) * W + cc];
        }
        out[((n * 2 + 0) * H + r) * W + cc] = float(gx);
        out[((n * 2 + 1) * H + r) * W + cc] = float(gy);
      }
  return out;
}

double hv_oracle(const Tensor& pred, const Tensor& target, const Tensor& mask,
                 const LossWeights& w) {
  const int64_t M = pred.numel();
  double mse = 0;
  for (int64_t i = 0; i < M; ++i) {
    double d = double(pred[i]) - target[i];
    mse += d * d;
  }
  mse /= M;
  Tensor gp = grad_oracle(pred), gt = grad_oracle(target);
  const int64_t N = pred.dim(0), HW = pred.dim(2) * pred.dim(3);
  double msum = 0, acc = 0;
  for (int64_t i = 0; i < N * HW; ++i) msum += mask[i];
  if (msum > 0) {
    for (int64_t n = 0; n < N; ++n)
      for (int64_t ch = 0; ch < 2; ++ch)
        for (int64_t i = 0; i < HW; ++i) {
          double d = double(gp[(n * 2 + ch) * HW + i]) - gt[(n * 2 + ch) * HW + i];
          acc += mask[n * HW + i] * d * d;
        }
    acc /= (msum * 2);
  }
  return w.hv_mse * mse + w.hv_msge * acc;
}

}  // namespace

TEST_CASE("dice closed forms") {
  // disjoint prediction/target -> loss 1
  Tensor p = Tensor::from({1, 1, 1, 4}, {1, 1, 0, 0});
  Tensor t = Tensor::from({1, 1, 1, 4}, {0, 0, 1, 1});
  REQUIRE_THAT(double(dice_loss(make_var(p), t)->value[0]),
               Catch::Matchers::WithinAbs(1.0, 1e-6));
  // agreement on half of the pixels -> 1 - 2*1/(2+2) = 0.5
  Tensor p2 = Tensor::from({1, 1, 1, 4}, {1, 0, 1, 0});
  Tensor t2 = Tensor::from({1, 1, 1, 4}, {1, 1, 0, 0});
  REQUIRE_THAT(double(dice_loss(make_var(p2), t2)->value[0]),
               Catch::Matchers::WithinAbs(0.5, 1e-5));
  // identical -> ~0
  REQUIRE(double(dice_loss(make_var(t2.clone()), t2)->value[0]) < 1e-5);
}

TEST_CASE("loss_np approaches zero under saturation and is monotone in it") {
  Rng rng(3);
  Tensor target({1, 6, 6});
  for (int64_t i = 0; i < 36; ++i) target[i] = i % 3 == 0 ? 1.f : 0.f;
  Tensor onehot = one_hot_channels(target, 2);
  LossWeights w;
  double prev = 1e9;
  for (float scale : {1.f, 3.f, 9.f, 27.f}) {
    Tensor logits({1, 2, 6, 6});
    for (int64_t i = 0; i < 36; ++i) {
      logits[i] = target[i] > 0 ? -scale : scale;
      logits[36 + i] = target[i] > 0 ? scale : -scale;
    }
    double v = loss_np(make_var(logits), onehot, w)->value[0];
    REQUIRE(v < prev);
    prev = v;
  }
  REQUIRE(prev < 1e-3);
}

TEST_CASE("ftl matches oracle and reduces to dice at alpha=beta=1/2, gamma=1") {
  Rng rng(5);
  Tensor logits = random_tensor({2, 3, 6, 6}, rng, -2.f, 2.f);
  Tensor labels({2, 6, 6});
  for (int64_t i = 0; i < labels.numel(); ++i)
    labels[i] = float(int(rand_uniform(rng, 0.f, 2.999f)));
  Tensor onehot = one_hot_channels(labels, 3);
  Tensor probs = softmax_of(logits);

  FtlParams fp;
  REQUIRE_THAT(double(focal_tversky_loss(make_var(probs.clone()), onehot, fp)->value[0]),
               Catch::Matchers::WithinAbs(ftl_oracle(probs, onehot, fp), 1e-6));

  FtlParams half;
  half.alpha = half.beta = 0.5f;
  half.gamma = 1.f;
  double ftl = focal_tversky_loss(make_var(probs.clone()), onehot, half)->value[0];
  double dice = dice_loss(make_var(probs.clone()), onehot, half.smooth)->value[0];
  REQUIRE_THAT(ftl, Catch::Matchers::WithinAbs(dice, 1e-6));
}

TEST_CASE("loss ranges on random probes") {
  Rng rng(7);
  for (int rep = 0; rep < 20; ++rep) {
    Tensor logits = random_tensor({1, 4, 5, 5}, rng, -4.f, 4.f);
    Tensor labels({1, 5, 5});
    for (int64_t i = 0; i < 25; ++i) labels[i] = float(int(rand_uniform(rng, 0.f, 3.999f)));
    Tensor onehot = one_hot_channels(labels, 4);
    Tensor probs = softmax_of(logits);
    double d = dice_loss(make_var(probs.clone()), onehot)->value[0];
    FtlParams fp;  // gamma 4/3 >= 1
    double f = focal_tversky_loss(make_var(probs.clone()), onehot, fp)->value[0];
    double b = bce_channels(make_var(probs.clone()), onehot)->value[0];
    REQUIRE(d >= 0.0);
    REQUIRE(d <= 1.0 + 1e-6);
    REQUIRE(f >= 0.0);
    REQUIRE(f <= 1.0 + 1e-6);
    REQUIRE(b >= 0.0);
  }
}

TEST_CASE("hv loss closed forms and oracle") {
  Rng rng(9);
  LossWeights w;  // mse 1, msge 2

  SECTION("identical prediction gives zero") {
    Tensor hv = random_tensor({1, 2, 8, 8}, rng);
    Tensor mask = Tensor::full({1, 8, 8}, 1.f);
    REQUIRE(double(loss_hv(make_var(hv.clone()), hv, mask, w)->value[0]) < 1e-10);
  }

  SECTION("constant offset: MSE only, gradients unaffected") {
    Tensor hv = random_tensor({1, 2, 8, 8}, rng);
    Tensor shifted = hv.clone();
    for (int64_t i = 0; i < shifted.numel(); ++i) shifted[i] += 0.1f;
    Tensor mask = Tensor::full({1, 8, 8}, 1.f);
    LossBreakdown bd;
    double v = loss_hv(make_var(shifted), hv, mask, w, &bd)->value[0];
    REQUIRE_THAT(bd.terms["hv_mse"], Catch::Matchers::WithinAbs(0.01, 1e-5));
    REQUIRE_THAT(bd.terms["hv_msge"], Catch::Matchers::WithinAbs(0.0, 1e-6));
    REQUIRE_THAT(v, Catch::Matchers::WithinAbs(0.01, 1e-5));
  }

  SECTION("MSGE invariant to adding one constant to both sides") {
    Tensor pred = random_tensor({1, 2, 8, 8}, rng);
    Tensor target = random_tensor({1, 2, 8, 8}, rng);
    Tensor mask({1, 8, 8});
    for (int64_t i = 0; i < 64; ++i) mask[i] = rand_uniform(rng, 0, 1) < 0.5f ? 1.f : 0.f;
    LossWeights gonly;
    gonly.hv_mse = 0.f;
    gonly.hv_msge = 1.f;
    double base = loss_hv(make_var(pred.clone()), target, mask, gonly)->value[0];
    Tensor pred2 = pred.clone(), target2 = target.clone();
    for (int64_t i = 0; i < pred2.numel(); ++i) {
      pred2[i] += 0.37f;
      target2[i] += 0.37f;
    }
    double shifted = loss_hv(make_var(pred2), target2, mask, gonly)->value[0];
    REQUIRE_THAT(shifted, Catch::Matchers::WithinAbs(base, 1e-5));
  }

  SECTION("random pair matches the scalar oracle") {
    Tensor pred = random_tensor({1, 2, 8, 8}, rng);
    Tensor target = random_tensor({1, 2, 8, 8}, rng);
    Tensor mask({1, 8, 8});
    for (int64_t i = 0; i < 64; ++i) mask[i] = rand_uniform(rng, 0, 1) < 0.6f ? 1.f : 0.f;
    double got = loss_hv(make_var(pred.clone()), target, mask, w)->value[0];
    REQUIRE_THAT(got, Catch::Matchers::WithinAbs(hv_oracle(pred, target, mask, w), 1e-6));
  }

  SECTION("empty mask defines MSGE as zero") {
    Tensor pred = random_tensor({1, 2, 8, 8}, rng);
    Tensor target = random_tensor({1, 2, 8, 8}, rng);
    Tensor mask({1, 8, 8});
    LossBreakdown bd;
    loss_hv(make_var(pred), target, mask, w, &bd);
    REQUIRE(bd.terms["hv_msge"] == 0.f);
  }
}

TEST_CASE("nt loss: perfect prediction, uniform BCE, oracle") {
  Rng rng(11);
  LossWeights w;

  SECTION("saturated one-hot logits drive every term to zero") {
    Tensor labels({1, 6, 6});
    for (int64_t i = 0; i < 36; ++i) labels[i] = float(i % 4);
    Tensor onehot = one_hot_channels(labels, 4);
    Tensor logits({1, 4, 6, 6});
    for (int64_t i = 0; i < logits.numel(); ++i) logits[i] = onehot[i] > 0 ? 30.f : -30.f;
    LossBreakdown bd;
    double v = loss_nt(make_var(logits), onehot, w, &bd)->value[0];
    REQUIRE(v < 1e-4);
  }

  SECTION("uniform logits, two balanced classes: BCE = ln 2") {
    Tensor logits({1, 2, 6, 6});  // all zeros -> p = 0.5 everywhere
    Tensor labels({1, 6, 6});
    for (int64_t i = 0; i < 36; ++i) labels[i] = float(i % 2);
    Tensor onehot = one_hot_channels(labels, 2);
    Var probs = softmax_channel(make_var(logits));
    double bce = bce_channels(probs, onehot)->value[0];
    REQUIRE_THAT(bce, Catch::Matchers::WithinAbs(std::log(2.0), 1e-5));
  }

  SECTION("random 4-class 8x8 matches the term-by-term oracle") {
    Tensor logits = random_tensor({1, 4, 8, 8}, rng, -2.f, 2.f);
    Tensor labels({1, 8, 8});
    for (int64_t i = 0; i < 64; ++i) labels[i] = float(int(rand_uniform(rng, 0.f, 3.999f)));
    Tensor onehot = one_hot_channels(labels, 4);
    Tensor probs = softmax_of(logits);
    double expected = w.nt_ftl * ftl_oracle(probs, onehot, w.ftl) +
                      w.nt_dice * dice_oracle(probs, onehot, w.ftl.smooth);
    double bce = 0;
    for (int64_t i = 0; i < probs.numel(); ++i) {
      double p = probs[i], t = onehot[i];
      bce += -(t * std::log(p + 1e-7) + (1 - t) * std::log(1 - p + 1e-7));
    }
    expected += w.nt_bce * bce / probs.numel();
    double got = loss_nt(make_var(logits.clone()), onehot, w)->value[0];
    REQUIRE_THAT(got, Catch::Matchers::WithinAbs(expected, 1e-6));
  }
}

TEST_CASE("total loss composition") {
  Rng rng(13);
  NetworkOutput out;
  out.np_logits = make_var(random_tensor({1, 2, 6, 6}, rng));
  out.hv_map = make_var(random_tensor({1, 2, 6, 6}, rng));
  out.nt_logits = make_var(random_tensor({1, 4, 6, 6}, rng));
  out.tissue_logits = make_var(random_tensor({1, 5}, rng));
  TrainingTargets t;
  t.np_target = Tensor({1, 6, 6});
  t.nt_target = Tensor({1, 6, 6});
  for (int64_t i = 0; i < 36; ++i) {
    int cls = int(rand_uniform(rng, 0.f, 3.999f));
    t.nt_target[i] = float(cls);
    t.np_target[i] = cls > 0 ? 1.f : 0.f;
  }
  t.hv_target = random_tensor({1, 2, 6, 6}, rng);
  t.tissue_target = {2};

  LossWeights w;
  LossBreakdown bd = loss_total(out, t, w);
  double sum = 0;
  for (auto& [k, v] : bd.terms) sum += v;
  REQUIRE(bd.terms.size() == 8);
  REQUIRE_THAT(double(bd.total->value[0]), Catch::Matchers::WithinAbs(sum, 1e-6));

  SECTION("doubling every weight doubles the total") {
    LossWeights w2 = w;
    w2.np_ftl *= 2;
    w2.np_dice *= 2;
    w2.hv_mse *= 2;
    w2.hv_msge *= 2;
    w2.nt_ftl *= 2;
    w2.nt_dice *= 2;
    w2.nt_bce *= 2;
    w2.tc_ce *= 2;
    LossBreakdown bd2 = loss_total(out, t, w2);
    REQUIRE_THAT(double(bd2.total->value[0]),
                 Catch::Matchers::WithinAbs(2.0 * bd.total->value[0], 1e-5));
  }

  SECTION("tissue-only weights with a saturated correct prediction go to zero") {
    LossWeights w0;
    w0.np_ftl = w0.np_dice = w0.hv_mse = w0.hv_msge = 0.f;
    w0.nt_ftl = w0.nt_dice = w0.nt_bce = 0.f;
    w0.tc_ce = 1.f;
    NetworkOutput sat = out;
    Tensor tl({1, 5});
    for (int64_t i = 0; i < 5; ++i) tl[i] = i == 2 ? 40.f : -40.f;
    sat.tissue_logits = make_var(tl);
    LossBreakdown bd0 = loss_total(sat, t, w0);
    REQUIRE(double(bd0.total->value[0]) < 1e-6);
  }
}

TEST_CASE("analytic gradients match central differences on 2-class 6x6 inputs") {
  Rng rng(17);
  Tensor labels({1, 6, 6});
  for (int64_t i = 0; i < 36; ++i) labels[i] = float(int(rand_uniform(rng, 0.f, 1.999f)));
  Tensor onehot = one_hot_channels(labels, 2);
  Tensor logits = random_tensor({1, 2, 6, 6}, rng, -2.f, 2.f);
  LossWeights w;

  auto check = [&](const char* name, const std::function<Var(const Var&)>& loss_fn,
                   const Tensor& x0) {
    Var x = make_var(x0.clone(), true);
    Var loss = loss_fn(x);
    backward(loss);
    auto f = [&](const Tensor& t) { return double(loss_fn(make_var(t.clone()))->value[0]); };
    Tensor num = numeric_grad(f, x0, 1e-3f);
    INFO(name);
    REQUIRE(testutil::topk_rel_error(x->grad, num, 50) < 1e-2);
  };

  check("np (ftl + dice on softmax)", [&](const Var& x) { return loss_np(x, onehot, w); },
        logits);
  check("ftl alone",
        [&](const Var& x) { return focal_tversky_loss(softmax_channel(x), onehot, w.ftl); },
        logits);
  check("dice alone", [&](const Var& x) { return dice_loss(softmax_channel(x), onehot); },
        logits);
  check("bce alone", [&](const Var& x) { return bce_channels(softmax_channel(x), onehot); },
        logits);

  Tensor hv_target = random_tensor({1, 2, 6, 6}, rng);
  Tensor mask({1, 6, 6});
  for (int64_t i = 0; i < 36; ++i) mask[i] = labels[i];
  check("hv (mse + msge)", [&](const Var& x) { return loss_hv(x, hv_target, mask, w); },
        random_tensor({1, 2, 6, 6}, rng));

  Tensor tl = random_tensor({2, 5}, rng);
  std::vector<int> tlabels{1, 3};
  check("tissue cross entropy", [&](const Var& x) { return cross_entropy(x, tlabels); }, tl);
}
