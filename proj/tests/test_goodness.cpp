// Statistics-encoder tests: dimensions, layout, loop oracle, gradients.

#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "bicovg/goodness.hpp"
#include "bicovg/rng.hpp"
#include "gradcheck.hpp"

using namespace bicovg;

namespace {

Tensor4 rand_tensor(Shape4 s, std::uint64_t seed, double lo = -1.0,
                    double hi = 1.0) {
  auto rng = stream_rng(seed, "test-rand");
  return uniform_tensor(s, lo, hi, rng);
}

// Loop oracle: region mean-of-squares with floor-boundary tiling, then the
// documented concat order [pcs(s1) | cc(s1) | pcs(s2) | cc(s2)].
std::vector<double> oracle_encode(const Tensor4& f, const GoodnessSpec& spec,
                                  const Tensor4* w_cc) {
  auto fs = f.shape();
  Tensor4 z = Tensor4::zeros({1, 1, 1, 1});
  if (spec.include_cc) {
    int64_t N = spec.proj_channels();
    z = Tensor4::zeros({fs.b, N, fs.h, fs.w});
    for (int64_t b = 0; b < fs.b; ++b)
      for (int64_t n = 0; n < N; ++n)
        for (int64_t y = 0; y < fs.h; ++y)
          for (int64_t x = 0; x < fs.w; ++x) {
            double acc = 0;
            for (int64_t c = 0; c < fs.c; ++c)
              acc += w_cc->at(0, 0, n, c) * f.at(b, c, y, x);
            z.set(b, n, y, x, acc);
          }
  }
  auto stat = [](const Tensor4& t, int64_t s, int64_t b,
                 std::vector<double>& out) {
    auto ts = t.shape();
    auto ry = region_partition(ts.h, s);
    auto rx = region_partition(ts.w, s);
    for (int64_t c = 0; c < ts.c; ++c)
      for (int64_t i = 0; i < s; ++i)
        for (int64_t j = 0; j < s; ++j) {
          double acc = 0;
          int64_t cnt = 0;
          for (int64_t y = ry[i].first; y < ry[i].second; ++y)
            for (int64_t x = rx[j].first; x < rx[j].second; ++x) {
              double v = t.at(b, c, y, x);
              acc += v * v;
              ++cnt;
            }
          out.push_back(acc / static_cast<double>(cnt));
        }
  };
  std::vector<double> flat;
  for (int64_t b = 0; b < fs.b; ++b)
    for (int64_t s : spec.active_scales()) {
      stat(f, s, b, flat);
      if (spec.include_cc) stat(z, s, b, flat);
    }
  return flat;
}

}  // namespace

TEST(Goodness, DimsForWidePreset) {
  // 16-block ladder: 128ch at scales (2,4), 256ch and 512ch at (1,2), r = 8.
  GoodnessSpec a{128, 2, 4, 8, true, true};
  GoodnessSpec b{256, 1, 2, 8, true, true};
  GoodnessSpec c{512, 1, 2, 8, true, true};
  EXPECT_EQ(a.dim(), 2880);
  EXPECT_EQ(b.dim(), 1440);
  EXPECT_EQ(c.dim(), 2880);
}

TEST(Goodness, AblationDims) {
  GoodnessSpec full{64, 1, 2, 8, true, true};
  EXPECT_EQ(full.dim(), (64 + 8) * (1 + 4));
  GoodnessSpec no_cc{64, 1, 2, 8, false, true};
  EXPECT_EQ(no_cc.dim(), 64 * 5);
  GoodnessSpec no_ms{64, 1, 2, 8, true, false};
  EXPECT_EQ(no_ms.dim(), 72);
  GoodnessSpec baseline{64, 1, 2, 8, false, false};
  EXPECT_EQ(baseline.dim(), 64);  // plain per-channel mean of squares
}

TEST(Goodness, SpecValidation) {
  EXPECT_THROW((GoodnessSpec{0, 1, 2, 8, true, true}).dim(),
               std::invalid_argument);
  EXPECT_THROW((GoodnessSpec{64, 2, 2, 8, true, true}).dim(),
               std::invalid_argument);  // scales must increase
  EXPECT_THROW((GoodnessSpec{60, 1, 2, 8, true, true}).dim(),
               std::invalid_argument);  // 8 does not divide 60
  EXPECT_NO_THROW((GoodnessSpec{60, 1, 2, 8, false, true}).dim());
  EXPECT_THROW((GoodnessSpec{64, 3, 2, 8, true, true}).dim(),
               std::invalid_argument);
}

TEST(Goodness, EncodeMatchesLoopOracle) {
  GoodnessSpec spec{8, 2, 3, 4, true, true};
  Tensor4 f = rand_tensor({2, 8, 5, 7}, 211);
  Tensor4 w = rand_tensor({1, 1, 2, 8}, 212);
  Tensor4 got = encode_goodness_fwd(f, spec, &w);
  auto want = oracle_encode(f, spec, &w);
  ASSERT_EQ(got.elems(), static_cast<int64_t>(want.size()));
  ASSERT_EQ(got.shape().c, spec.dim());
  for (int64_t i = 0; i < got.elems(); ++i)
    EXPECT_NEAR(got.flat(i), want[static_cast<std::size_t>(i)], 1e-12)
        << "flat index " << i;
}

TEST(Goodness, BaselineIsPerChannelMeanSquare) {
  GoodnessSpec spec{4, 1, 2, 8, false, false};
  Tensor4 f = rand_tensor({1, 4, 3, 3}, 221);
  Tensor4 got = encode_goodness_fwd(f, spec, nullptr);
  ASSERT_EQ(got.shape().c, 4);
  for (int64_t c = 0; c < 4; ++c) {
    double acc = 0;
    for (int64_t y = 0; y < 3; ++y)
      for (int64_t x = 0; x < 3; ++x) acc += f.at(0, c, y, x) * f.at(0, c, y, x);
    EXPECT_NEAR(got.at(0, c, 0, 0), acc / 9.0, 1e-12);
  }
}

TEST(Goodness, LayoutIsChannelMajorPerScale) {
  // Constant-per-channel input: pcs entries for channel c all equal c^2, so
  // the flat (c, i, j) ordering is directly visible.
  GoodnessSpec spec{3, 2, 3, 8, false, true};
  Tensor4 f = Tensor4::zeros({1, 3, 6, 6});
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t y = 0; y < 6; ++y)
      for (int64_t x = 0; x < 6; ++x) f.set(0, c, y, x, static_cast<double>(c));
  Tensor4 got = encode_goodness_fwd(f, spec, nullptr);
  ASSERT_EQ(got.elems(), 3 * 4 + 3 * 9);
  int64_t k = 0;
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t cell = 0; cell < 4; ++cell)
      EXPECT_DOUBLE_EQ(got.flat(k++), static_cast<double>(c * c));
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t cell = 0; cell < 9; ++cell)
      EXPECT_DOUBLE_EQ(got.flat(k++), static_cast<double>(c * c));
}

TEST(Goodness, ReadoutHandValue) {
  // logits = W g + b with W = [[2], [-1]], b = [0.5, 0], g = [3]
  Tensor4 g = Tensor4::from_vector({1, 1, 1, 1}, {3.0});
  Tensor4 w = Tensor4::from_vector({1, 1, 2, 1}, {2.0, -1.0});
  Tensor4 b = Tensor4::from_vector({1, 1, 2, 1}, {0.5, 0.0});
  Tensor4 logits = linear_fwd(g, w, &b);
  EXPECT_DOUBLE_EQ(logits.flat(0), 6.5);
  EXPECT_DOUBLE_EQ(logits.flat(1), -3.0);
}

TEST(Goodness, GradCheckThroughEncoderAndReadout) {
  GoodnessSpec spec{6, 1, 2, 3, true, true};
  GradientGroup g("good");
  auto rng = stream_rng(42, "init");
  ParamId wcc = g.add_param(
      "wcc", uniform_tensor({1, 1, 2, 6}, -0.5, 0.5, rng));
  ParamId w = g.add_param(
      "w", uniform_tensor({1, 1, 3, spec.dim()}, -0.3, 0.3, rng));
  ParamId b = g.add_param("b", uniform_tensor({1, 1, 3, 1}, -0.3, 0.3, rng));
  Tensor4 f = rand_tensor({2, 6, 4, 4}, 231, 0.1, 1.0);  // post-activation-like
  std::vector<int> labels{2, 0};
  auto build = [&](GradientGroup* t) {
    Val fv = t ? t->leaf(f) : Val(f);
    Val wccv = t ? t->use(wcc) : Val(g.value(wcc));
    Val gv = encode_goodness(t, fv, spec, &wccv);
    Val wv = t ? t->use(w) : Val(g.value(w));
    Val bv = t ? t->use(b) : Val(g.value(b));
    Val logits = linear(t, gv, wv, &bv);
    return softmax_cross_entropy(t, logits, labels);
  };
  gradcheck::expect_param_grads_match(g, {wcc, w, b}, build, 1e-5, 1e-5,
                                      "goodness-head");
}

TEST(Goodness, InputGradThroughEncoder) {
  GoodnessSpec spec{4, 1, 2, 2, true, true};
  GradientGroup g("good-in");
  Tensor4 f = rand_tensor({1, 4, 4, 4}, 241, 0.1, 1.0);
  Tensor4 wcc = rand_tensor({1, 1, 2, 4}, 242, -0.5, 0.5);
  Tensor4 wts = rand_tensor({1, spec.dim(), 1, 1}, 243);
  auto build = [&](GradientGroup* t, const Tensor4& in) {
    Val fv = t ? t->leaf(in, true) : Val(in);
    Val wv(wcc);
    Val gv = encode_goodness(t, fv, spec, &wv);
    return weighted_sum(t, gv, wts);
  };
  gradcheck::expect_input_grad_matches(f, build, g, 1e-5, 1e-5,
                                       "goodness-input");
}
