#include <catch2/catch_amalgamated.hpp>

#include "nulite/conv.hpp"
#include "nulite/ops.hpp"
#include "test_util.hpp"

using namespace nulite;
using testutil::numeric_grad;
using testutil::random_tensor;

namespace {

// Straight-loop reference convolution.
Tensor conv_reference(const Tensor& x, const Tensor& w, const Tensor& b, const ConvGeom& g) {
  const int64_t N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t Cout = w.dim(0), Cg = w.dim(1);
  const int kh = int(w.dim(2)), kw = int(w.dim(3));
  const int64_t Ho = conv_out_dim(H, kh, g.stride, g.pad);
  const int64_t Wo = conv_out_dim(W, kw, g.stride, g.pad);
  const int64_t Cog = Cout / g.groups;
  Tensor y({N, Cout, Ho, Wo});
  for (int64_t n = 0; n < N; ++n)
    for (int64_t co = 0; co < Cout; ++co) {
      int64_t grp = co / Cog;
      for (int64_t oy = 0; oy < Ho; ++oy)
        for (int64_t ox = 0; ox < Wo; ++ox) {
          double acc = b.defined() ? b[co] : 0.0;
          for (int64_t ci = 0; ci < Cg; ++ci)
            for (int ky = 0; ky < kh; ++ky)
              for (int kx = 0; kx < kw; ++kx) {
                int64_t iy = oy * g.stride - g.pad + ky;
                int64_t ix = ox * g.stride - g.pad + kx;
                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                acc += double(w.at({co, ci, ky, kx})) *
                       x.at({n, grp * Cg + ci, iy, ix});
              }
          y.at({n, co, oy, ox}) = float(acc);
        }
    }
  return y;
}

}  // namespace

TEST_CASE("conv2d forward matches reference over configurations") {
  Rng rng(17);
  struct Case {
    int64_t cin, cout;
    int k, stride, pad, groups;
  };
  for (Case cs : std::initializer_list<Case>{{3, 8, 3, 1, 1, 1},
                                             {4, 6, 3, 2, 1, 1},
                                             {8, 8, 3, 1, 1, 8},
                                             {4, 8, 7, 2, 3, 4},
                                             {6, 6, 1, 1, 0, 1},
                                             {5, 10, 5, 1, 2, 1},
                                             {8, 16, 3, 2, 1, 8}}) {
    ConvGeom g{cs.stride, cs.pad, cs.groups};
    Tensor x = random_tensor({2, cs.cin, 9, 11}, rng);
    Tensor w = random_tensor({cs.cout, cs.cin / cs.groups, cs.k, cs.k}, rng);
    Tensor b = random_tensor({cs.cout}, rng);
    Tensor got = conv2d_fwd(x, w, b, g);
    Tensor ref = conv_reference(x, w, b, g);
    INFO("cin=" << cs.cin << " cout=" << cs.cout << " k=" << cs.k << " s=" << cs.stride
                << " g=" << cs.groups);
    REQUIRE(got.shape() == ref.shape());
    REQUIRE(max_abs_diff(got, ref) < 2e-4f);
  }
}

TEST_CASE("conv2d single 3x3 kernel known value") {
  // identity kernel reproduces the input away from borders
  Tensor x({1, 1, 4, 4});
  for (int64_t i = 0; i < 16; ++i) x[i] = float(i);
  Tensor w({1, 1, 3, 3});
  w.at({0, 0, 1, 1}) = 1.f;
  Tensor y = conv2d_fwd(x, w, Tensor(), ConvGeom{1, 1, 1});
  REQUIRE(max_abs_diff(y, x) == 0.f);
}

TEST_CASE("conv2d gradients match finite differences") {
  Rng rng(23);
  for (auto [groups, k, stride] : std::initializer_list<std::tuple<int, int, int>>{
           {1, 3, 1}, {4, 3, 2}, {1, 1, 1}, {2, 5, 1}}) {
    ConvGeom g{stride, (k - 1) / 2, groups};
    Tensor x = random_tensor({1, 4, 6, 6}, rng);
    Tensor w = random_tensor({4, 4 / groups, k, k}, rng, -0.5f, 0.5f);
    Tensor wsum = random_tensor({1}, rng);  // unused scalar to vary seeds
    (void)wsum;
    Var vx = make_var(x.clone(), true);
    Var vw = make_var(w.clone(), true);
    Var vb = make_var(Tensor({4}), true);
    Var y = conv2d(vx, vw, vb, g);
    backward(sum_all(y));

    auto fx = [&](const Tensor& t) {
      Tensor y2 = conv2d_fwd(t, w, vb->value, g);
      double s = 0;
      for (int64_t i = 0; i < y2.numel(); ++i) s += y2[i];
      return s;
    };
    auto fw = [&](const Tensor& t) {
      Tensor y2 = conv2d_fwd(x, t, vb->value, g);
      double s = 0;
      for (int64_t i = 0; i < y2.numel(); ++i) s += y2[i];
      return s;
    };
    INFO("groups=" << groups << " k=" << k << " stride=" << stride);
    REQUIRE(testutil::topk_rel_error(vx->grad, numeric_grad(fx, x), 30) < 1e-2);
    REQUIRE(testutil::topk_rel_error(vw->grad, numeric_grad(fw, w), 30) < 1e-2);
    // bias grad is the output count per channel
    int64_t per = y->value.numel() / 4;
    for (int64_t c = 0; c < 4; ++c)
      REQUIRE_THAT(double(vb->grad[c]), Catch::Matchers::WithinAbs(double(per), 1e-3));
  }
}

TEST_CASE("conv_transpose2d is the adjoint upsampler") {
  Rng rng(31);
  Tensor x = random_tensor({2, 3, 5, 4}, rng);
  Tensor w = random_tensor({3, 6, 2, 2}, rng);  // [Cin, Cout, k, k]
  Tensor b = random_tensor({6}, rng);
  Tensor y = conv_transpose2d_fwd(x, w, b, 2);
  REQUIRE(y.shape() == std::vector<int64_t>{2, 6, 10, 8});
  // stride-2 k2: each output pixel gets exactly one kernel tap
  for (int64_t n = 0; n < 2; ++n)
    for (int64_t co = 0; co < 6; ++co)
      for (int64_t oy = 0; oy < 10; ++oy)
        for (int64_t ox = 0; ox < 8; ++ox) {
          double acc = b[co];
          int64_t iy = oy / 2, ix = ox / 2;
          int ky = int(oy % 2), kx = int(ox % 2);
          for (int64_t ci = 0; ci < 3; ++ci)
            acc += double(w.at({ci, co, ky, kx})) * x.at({n, ci, iy, ix});
          REQUIRE_THAT(double(y.at({n, co, oy, ox})), Catch::Matchers::WithinAbs(acc, 1e-4));
        }

  SECTION("gradients") {
    Var vx = make_var(x.clone(), true);
    Var vw = make_var(w.clone(), true);
    Var vb = make_var(b.clone(), true);
    backward(sum_all(conv_transpose2d(vx, vw, vb, 2)));
    auto fx = [&](const Tensor& t) {
      Tensor y2 = conv_transpose2d_fwd(t, w, b, 2);
      double s = 0;
      for (int64_t i = 0; i < y2.numel(); ++i) s += y2[i];
      return s;
    };
    auto fw = [&](const Tensor& t) {
      Tensor y2 = conv_transpose2d_fwd(x, t, b, 2);
      double s = 0;
      for (int64_t i = 0; i < y2.numel(); ++i) s += y2[i];
      return s;
    };
    REQUIRE(testutil::topk_rel_error(vx->grad, numeric_grad(fx, x), 30) < 1e-2);
    REQUIRE(testutil::topk_rel_error(vw->grad, numeric_grad(fw, w), 30) < 1e-2);
  }
}

TEST_CASE("conv rejects bad geometry") {
  Tensor x({1, 4, 8, 8});
  Tensor w({8, 2, 3, 3});  // expects groups=2
  REQUIRE_THROWS(conv2d_fwd(x, w, Tensor(), ConvGeom{1, 1, 1}));
}
