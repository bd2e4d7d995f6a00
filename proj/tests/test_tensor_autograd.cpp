#include <catch2/catch_amalgamated.hpp>

#include "nulite/ops.hpp"
#include "test_util.hpp"

using namespace nulite;
using testutil::numeric_grad;
using testutil::random_tensor;

TEST_CASE("tensor basics") {
  Tensor t({2, 3});
  REQUIRE(t.numel() == 6);
  t.at({1, 2}) = 5.f;
  REQUIRE(t[5] == 5.f);
  Tensor c = t.clone();
  c[0] = 1.f;
  REQUIRE(t[0] == 0.f);
  REQUIRE_THROWS(t.reshaped({4, 2}));
  REQUIRE(t.reshaped({3, 2}).dim(0) == 3);
}

TEST_CASE("elementwise op gradients match finite differences") {
  Rng rng(11);
  Tensor xa = random_tensor({2, 3, 4, 4}, rng);
  Tensor xb = random_tensor({2, 3, 4, 4}, rng);

  SECTION("mul") {
    auto f = [&](const Tensor& x) {
      double s = 0;
      for (int64_t i = 0; i < x.numel(); ++i) s += double(x[i]) * xb[i];
      return s;
    };
    Var a = make_var(xa.clone(), true);
    Var b = make_var(xb.clone(), false);
    Var out = sum_all(mul(a, b));
    backward(out);
    Tensor num = numeric_grad(f, xa);
    REQUIRE(testutil::topk_rel_error(a->grad, num, 20) < 1e-2);
  }

  SECTION("gelu") {
    auto f = [&](const Tensor& x) {
      double s = 0;
      for (int64_t i = 0; i < x.numel(); ++i) s += gelu_scalar(x[i]);
      return s;
    };
    Var a = make_var(xa.clone(), true);
    backward(sum_all(gelu(a)));
    Tensor num = numeric_grad(f, xa);
    REQUIRE(testutil::topk_rel_error(a->grad, num, 20) < 1e-2);
  }

  SECTION("mul_channel accumulates over spatial dims") {
    Var a = make_var(xa.clone(), true);
    Var s = make_var(random_tensor({3}, rng), true);
    backward(sum_all(mul_channel(a, s)));
    for (int64_t c = 0; c < 3; ++c) {
      double expect = 0;
      for (int64_t n = 0; n < 2; ++n)
        for (int64_t i = 0; i < 16; ++i) expect += xa[(n * 3 + c) * 16 + i];
      REQUIRE_THAT(double(s->grad[c]), Catch::Matchers::WithinAbs(expect, 1e-4));
    }
  }
}

TEST_CASE("softmax_channel") {
  Rng rng(5);
  Tensor x = random_tensor({1, 4, 2, 2}, rng, -3.f, 3.f);
  Var v = make_var(x.clone(), true);
  Var p = softmax_channel(v);

  SECTION("rows sum to one") {
    for (int64_t i = 0; i < 4; ++i) {
      double s = 0;
      for (int64_t c = 0; c < 4; ++c) s += p->value[c * 4 + i];
      REQUIRE_THAT(s, Catch::Matchers::WithinAbs(1.0, 1e-6));
    }
  }

  SECTION("gradient matches finite differences on a weighted sum") {
    Tensor w = random_tensor({1, 4, 2, 2}, rng);
    Var loss = sum_all(mul(p, make_var(w)));
    backward(loss);
    auto f = [&](const Tensor& xx) {
      Var vv = make_var(xx.clone());
      Var pp = softmax_channel(vv);
      double s = 0;
      for (int64_t i = 0; i < pp->value.numel(); ++i) s += double(pp->value[i]) * w[i];
      return s;
    };
    Tensor num = numeric_grad(f, x, 5e-3f);
    REQUIRE(testutil::topk_rel_error(v->grad, num, 30) < 1e-2);
  }
}

TEST_CASE("concat_channel splits gradients") {
  Rng rng(3);
  Var a = make_var(random_tensor({2, 2, 3, 3}, rng), true);
  Var b = make_var(random_tensor({2, 5, 3, 3}, rng), true);
  Var c = concat_channel(a, b);
  REQUIRE(c->value.shape() == std::vector<int64_t>{2, 7, 3, 3});
  backward(sum_all(c));
  for (int64_t i = 0; i < a->grad.numel(); ++i) REQUIRE(a->grad[i] == 1.f);
  for (int64_t i = 0; i < b->grad.numel(); ++i) REQUIRE(b->grad[i] == 1.f);
  REQUIRE_THROWS(concat_channel(a, make_var(Tensor({2, 2, 4, 3}))));
}

TEST_CASE("reflect_pad round trip and gradient") {
  Rng rng(9);
  Tensor x = random_tensor({1, 1, 4, 5}, rng);
  Var v = make_var(x.clone(), true);
  Var p = reflect_pad(v, 2);
  REQUIRE(p->value.shape() == std::vector<int64_t>{1, 1, 8, 9});
  // interior equals the source
  for (int64_t r = 0; r < 4; ++r)
    for (int64_t c = 0; c < 5; ++c)
      REQUIRE(p->value.at({0, 0, r + 2, c + 2}) == x.at({0, 0, r, c}));
  // mirrored edge: pad row 1 reflects source row 1 (no edge repeat)
  REQUIRE(p->value.at({0, 0, 1, 2}) == x.at({0, 0, 1, 0}));
  backward(sum_all(p));
  double total = 0;
  for (int64_t i = 0; i < v->grad.numel(); ++i) total += v->grad[i];
  REQUIRE_THAT(total, Catch::Matchers::WithinAbs(8.0 * 9.0, 1e-5));
}

TEST_CASE("global_avg_pool") {
  Tensor x({1, 2, 2, 2});
  for (int64_t i = 0; i < 8; ++i) x[i] = float(i);
  Var v = make_var(x, true);
  Var p = global_avg_pool(v);
  REQUIRE_THAT(double(p->value[0]), Catch::Matchers::WithinAbs(1.5, 1e-6));
  REQUIRE_THAT(double(p->value[1]), Catch::Matchers::WithinAbs(5.5, 1e-6));
  backward(sum_all(p));
  for (int64_t i = 0; i < 8; ++i)
    REQUIRE_THAT(double(v->grad[i]), Catch::Matchers::WithinAbs(0.25, 1e-6));
}

TEST_CASE("no-grad mode detaches") {
  Var a = make_var(Tensor::full({2}, 1.f), true);
  {
    NoGradGuard ng;
    Var b = mul_scalar(a, 2.f);
    REQUIRE_FALSE(b->requires_grad);
    REQUIRE(b->parents.empty());
  }
  Var c = mul_scalar(a, 2.f);
  REQUIRE(c->requires_grad);
}
