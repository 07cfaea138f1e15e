// Tensor, trace, and op-level tests. Gradients are validated against central
// finite differences; conv against an independent nested-loop oracle.

#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "bicovg/ops.hpp"
#include "bicovg/rng.hpp"
#include "bicovg/tape.hpp"
#include "bicovg/tensor.hpp"
#include "gradcheck.hpp"

using namespace bicovg;

namespace {

// Uniform values with |x| in [0.25, 1.25]: bounded away from ReLU kinks.
Tensor4 kink_free(Shape4 s, std::uint64_t seed) {
  auto rng = stream_rng(seed, "test-kink-free");
  std::uniform_real_distribution<double> mag(0.25, 1.25);
  std::bernoulli_distribution sign(0.5);
  Tensor4 t = Tensor4::zeros(s);
  double* p = t.data();
  for (int64_t i = 0; i < t.elems(); ++i)
    p[i] = (sign(rng) ? 1.0 : -1.0) * mag(rng);
  return t;
}

Tensor4 rand_tensor(Shape4 s, std::uint64_t seed, double lo = -1.0,
                    double hi = 1.0) {
  auto rng = stream_rng(seed, "test-rand");
  return uniform_tensor(s, lo, hi, rng);
}

// Independent convolution oracle: plain nested loops, explicit padding test.
Tensor4 conv_oracle(const Tensor4& x, const Tensor4& w, const Tensor4& bias) {
  int64_t B = x.shape().b, Ci = x.shape().c, H = x.shape().h, W = x.shape().w;
  int64_t Co = w.shape().b;
  Tensor4 out = Tensor4::zeros({B, Co, H, W});
  for (int64_t b = 0; b < B; ++b)
    for (int64_t oc = 0; oc < Co; ++oc)
      for (int64_t y = 0; y < H; ++y)
        for (int64_t xx = 0; xx < W; ++xx) {
          double s = bias.at(0, oc, 0, 0);
          for (int64_t ic = 0; ic < Ci; ++ic)
            for (int64_t ky = 0; ky < 3; ++ky)
              for (int64_t kx = 0; kx < 3; ++kx) {
                int64_t yy = y + ky - 1, xc = xx + kx - 1;
                if (yy < 0 || yy >= H || xc < 0 || xc >= W) continue;
                s += x.at(b, ic, yy, xc) * w.at(oc, ic, ky, kx);
              }
          out.set(b, oc, y, xx, s);
        }
  return out;
}

}  // namespace

// ---- tensor basics ----------------------------------------------------------

TEST(Tensor, RejectsNonFiniteExternalData) {
  std::vector<double> v{1.0, std::nan(""), 3.0, 4.0};
  EXPECT_THROW(Tensor4::from_vector({1, 1, 2, 2}, v), std::invalid_argument);
  v[1] = std::numeric_limits<double>::infinity();
  EXPECT_THROW(Tensor4::from_vector({1, 1, 2, 2}, v), std::invalid_argument);
  v[1] = 2.0;
  EXPECT_NO_THROW(Tensor4::from_vector({1, 1, 2, 2}, v));
}

TEST(Tensor, ShapeAndIndexErrors) {
  EXPECT_THROW(Tensor4::zeros({0, 1, 1, 1}), std::invalid_argument);
  std::vector<double> v{1, 2};
  EXPECT_THROW(Tensor4::from_vector({1, 1, 2, 2}, v), std::invalid_argument);
  Tensor4 t = Tensor4::zeros({1, 2, 3, 4});
  EXPECT_THROW(t.at(0, 2, 0, 0), std::out_of_range);
  EXPECT_THROW(t.at(0, 0, 0, 4), std::out_of_range);
  EXPECT_NO_THROW(t.at(0, 1, 2, 3));
}

TEST(Tensor, RowMajorWFastest) {
  Tensor4 t = Tensor4::zeros({2, 2, 2, 2});
  EXPECT_EQ(t.index(0, 0, 0, 1), 1);
  EXPECT_EQ(t.index(0, 0, 1, 0), 2);
  EXPECT_EQ(t.index(0, 1, 0, 0), 4);
  EXPECT_EQ(t.index(1, 0, 0, 0), 8);
}

TEST(Tensor, F32StorageModeWidensExactly) {
  std::vector<double> v{0.5, -1.25, 2.0, 3.5};
  Tensor4 t32 = Tensor4::from_vector({1, 1, 2, 2}, v, Scalar::f32);
  EXPECT_EQ(t32.scalar(), Scalar::f32);
  EXPECT_EQ(t32.bytes(), 16);
  EXPECT_THROW(t32.data(), std::logic_error);
  Tensor4 widened = t32.as_f64();
  for (int i = 0; i < 4; ++i) EXPECT_EQ(widened.flat(i), v[i]);
  // narrow -> widen -> narrow is stable
  Tensor4 again = widened.to_scalar(Scalar::f32);
  EXPECT_TRUE(bitwise_equal(again.as_f64(), widened));
}

TEST(Tensor, AllocLedgerTracksBytes) {
  int64_t before = AllocLedger::current_bytes();
  {
    Tensor4 a = Tensor4::zeros({1, 1, 10, 10});          // 800 bytes
    Tensor4 b = a;                                        // shared, no alloc
    Tensor4 c = Tensor4::zeros({1, 1, 5, 5}, Scalar::f32);  // 100 bytes
    EXPECT_EQ(AllocLedger::current_bytes() - before, 900);
    (void)b;
  }
  EXPECT_EQ(AllocLedger::current_bytes(), before);
}

// ---- rng streams -------------------------------------------------------------

TEST(Rng, StreamsAreIndependentAndStable) {
  auto a1 = stream_rng(7, "dropout", 3, 10);
  auto a2 = stream_rng(7, "dropout", 3, 10);
  auto b = stream_rng(7, "dropout", 4, 10);
  auto c = stream_rng(7, "init", 3, 10);
  EXPECT_EQ(a1(), a2());
  auto a3 = stream_rng(7, "dropout", 3, 10);
  EXPECT_NE(a3(), b());
  EXPECT_NE(stream_rng(7, "dropout", 3, 10)(), c());
  EXPECT_NE(stream_seed(7, "x"), stream_seed(8, "x"));
}

// ---- region partition ---------------------------------------------------------

TEST(Regions, ExhaustiveExactTiling) {
  for (int64_t n = 1; n <= 12; ++n)
    for (int64_t s = 1; s <= n; ++s) {
      auto r = region_partition(n, s);
      ASSERT_EQ(static_cast<int64_t>(r.size()), s);
      EXPECT_EQ(r.front().first, 0);
      EXPECT_EQ(r.back().second, n);
      int64_t lo = n / s, hi = (n + s - 1) / s;
      for (std::size_t i = 0; i < r.size(); ++i) {
        if (i > 0) EXPECT_EQ(r[i].first, r[i - 1].second);  // no gap/overlap
        int64_t len = r[i].second - r[i].first;
        EXPECT_GE(len, lo);
        EXPECT_LE(len, hi);
      }
    }
}

TEST(Regions, ScaleOutOfRangeThrows) {
  EXPECT_THROW(region_partition(4, 0), std::invalid_argument);
  EXPECT_THROW(region_partition(4, 5), std::invalid_argument);
  EXPECT_NO_THROW(region_partition(4, 4));
}

TEST(Regions, FourByFourScaleTwo) {
  auto r = region_partition(4, 2);
  EXPECT_EQ(r[0].first, 0);
  EXPECT_EQ(r[0].second, 2);
  EXPECT_EQ(r[1].first, 2);
  EXPECT_EQ(r[1].second, 4);
}

// ---- op forwards against oracles / hand values --------------------------------

TEST(Ops, ConvMatchesOracle) {
  Tensor4 x = rand_tensor({2, 3, 5, 6}, 11);
  Tensor4 w = rand_tensor({4, 3, 3, 3}, 12);
  Tensor4 b = rand_tensor({1, 4, 1, 1}, 13);
  Tensor4 fast = conv3x3_fwd(x, w, b);
  Tensor4 slow = conv_oracle(x, w, b);
  ASSERT_EQ(fast.shape(), slow.shape());
  for (int64_t i = 0; i < fast.elems(); ++i)
    EXPECT_NEAR(fast.flat(i), slow.flat(i), 1e-12);
}

TEST(Ops, ConvShapeErrors) {
  Tensor4 x = Tensor4::zeros({1, 3, 4, 4});
  Tensor4 w_badc = Tensor4::zeros({4, 2, 3, 3});
  Tensor4 w_badk = Tensor4::zeros({4, 3, 5, 5});
  Tensor4 w = Tensor4::zeros({4, 3, 3, 3});
  Tensor4 b = Tensor4::zeros({1, 4, 1, 1});
  Tensor4 b_bad = Tensor4::zeros({1, 3, 1, 1});
  EXPECT_THROW(conv3x3_fwd(x, w_badc, b), std::invalid_argument);
  EXPECT_THROW(conv3x3_fwd(x, w_badk, b), std::invalid_argument);
  EXPECT_THROW(conv3x3_fwd(x, w, b_bad), std::invalid_argument);
  EXPECT_NO_THROW(conv3x3_fwd(x, w, b));
}

TEST(Ops, RmsPoolHandValue) {
  // 2x2 region [3,4;0,0] -> sqrt((9+16)/4) = 2.5
  std::vector<double> v{3, 4, 0, 0};
  Tensor4 x = Tensor4::from_vector({1, 1, 2, 2}, v);
  Tensor4 out = rms_pool2x2_fwd(x);
  EXPECT_DOUBLE_EQ(out.flat(0), 2.5);
}

TEST(Ops, RmsPoolRejectsOddSpatial) {
  EXPECT_THROW(rms_pool2x2_fwd(Tensor4::zeros({1, 1, 3, 4})),
               std::invalid_argument);
  EXPECT_THROW(rms_pool2x2_fwd(Tensor4::zeros({1, 1, 4, 5})),
               std::invalid_argument);
}

TEST(Ops, RmsNormZeroTensorIsStable) {
  Tensor4 x = Tensor4::zeros({2, 3, 2, 2});
  Tensor4 y = rms_norm_fwd(x);
  for (int64_t i = 0; i < y.elems(); ++i) EXPECT_EQ(y.flat(i), 0.0);
}

TEST(Ops, RmsNormUnitScale) {
  // constant tensor with value v: rms = |v|, output = v / (|v| + eps)
  Tensor4 x = Tensor4::full({1, 2, 2, 2}, 3.0);
  Tensor4 y = rms_norm_fwd(x);
  for (int64_t i = 0; i < y.elems(); ++i)
    EXPECT_NEAR(y.flat(i), 3.0 / (3.0 + kRmsNormEps), 1e-15);
}

TEST(Ops, SoftmaxCrossEntropyUniformIsLogK) {
  GradientGroup g("t");
  Tensor4 z = Tensor4::zeros({4, 7, 1, 1});
  std::vector<int> labels{0, 3, 6, 2};
  Val loss = softmax_cross_entropy(nullptr, Val(z), labels);
  EXPECT_NEAR(loss.t.flat(0), std::log(7.0), 1e-12);
}

TEST(Ops, SoftmaxCrossEntropyLabelRange) {
  Tensor4 z = Tensor4::zeros({2, 3, 1, 1});
  std::vector<int> bad{0, 3};
  EXPECT_THROW(softmax_cross_entropy(nullptr, Val(z), bad),
               std::invalid_argument);
}

TEST(Ops, DropoutMaskStatistics) {
  auto rng = stream_rng(5, "dropout", 0, 0);
  Tensor4 m = make_dropout_mask({1, 8, 32, 32}, 0.1, rng);
  int64_t zeros = 0;
  for (int64_t i = 0; i < m.elems(); ++i) {
    double v = m.flat(i);
    EXPECT_TRUE(v == 0.0 || std::fabs(v - 1.0 / 0.9) < 1e-12);
    if (v == 0.0) ++zeros;
  }
  double frac = static_cast<double>(zeros) / static_cast<double>(m.elems());
  EXPECT_NEAR(frac, 0.1, 0.02);
}

// ---- gradient checks -----------------------------------------------------------

TEST(GradCheck, Conv) {
  GradientGroup g("conv");
  Tensor4 x = kink_free({2, 2, 4, 5}, 21);
  ParamId w = g.add_param("w", kink_free({3, 2, 3, 3}, 22));
  ParamId b = g.add_param("b", kink_free({1, 3, 1, 1}, 23));
  Tensor4 wts = rand_tensor({2, 3, 4, 5}, 24);
  auto build = [&](GradientGroup* t) {
    Val xv = t ? t->leaf(x) : Val(x);
    Val out = conv3x3(t, xv, t ? t->use(w) : Val(g.value(w)),
                      t ? t->use(b) : Val(g.value(b)));
    return weighted_sum(t, out, wts);
  };
  gradcheck::expect_param_grads_match(g, {w, b}, build, 1e-5, 1e-5, "conv");
}

TEST(GradCheck, ConvInputGrad) {
  GradientGroup g("conv-in");
  Tensor4 x = kink_free({1, 2, 4, 4}, 31);
  Tensor4 w = kink_free({2, 2, 3, 3}, 32);
  Tensor4 b = kink_free({1, 2, 1, 1}, 33);
  Tensor4 wts = rand_tensor({1, 2, 4, 4}, 34);
  auto build = [&](GradientGroup* t, const Tensor4& in) {
    Val xv = t ? t->leaf(in, true) : Val(in);
    Val out = conv3x3(t, xv, Val(w), Val(b));
    return weighted_sum(t, out, wts);
  };
  gradcheck::expect_input_grad_matches(x, build, g, 1e-5, 1e-5, "conv-input");
}

TEST(GradCheck, ReluAwayFromKink) {
  GradientGroup g("relu");
  ParamId p = g.add_param("x", kink_free({2, 3, 3, 3}, 41));
  Tensor4 wts = rand_tensor({2, 3, 3, 3}, 42);
  auto build = [&](GradientGroup* t) {
    Val x = t ? t->use(p) : Val(g.value(p));
    return weighted_sum(t, relu(t, x), wts);
  };
  gradcheck::expect_param_grads_match(g, {p}, build, 1e-5, 1e-5, "relu");
}

TEST(GradCheck, RmsPool) {
  GradientGroup g("rmspool");
  ParamId p = g.add_param("x", kink_free({2, 2, 4, 6}, 51));
  Tensor4 wts = rand_tensor({2, 2, 2, 3}, 52);
  auto build = [&](GradientGroup* t) {
    Val x = t ? t->use(p) : Val(g.value(p));
    return weighted_sum(t, rms_pool2x2(t, x), wts);
  };
  gradcheck::expect_param_grads_match(g, {p}, build, 1e-5, 1e-5, "rms_pool");
}

TEST(GradCheck, AvgPool) {
  GradientGroup g("avgpool");
  ParamId p = g.add_param("x", kink_free({1, 3, 4, 4}, 61));
  Tensor4 wts = rand_tensor({1, 3, 2, 2}, 62);
  auto build = [&](GradientGroup* t) {
    Val x = t ? t->use(p) : Val(g.value(p));
    return weighted_sum(t, avg_pool2x2(t, x), wts);
  };
  gradcheck::expect_param_grads_match(g, {p}, build, 1e-5, 1e-5, "avg_pool");
}

TEST(GradCheck, RmsNorm) {
  GradientGroup g("rmsnorm");
  ParamId p = g.add_param("x", kink_free({3, 2, 3, 3}, 71));
  Tensor4 wts = rand_tensor({3, 2, 3, 3}, 72);
  auto build = [&](GradientGroup* t) {
    Val x = t ? t->use(p) : Val(g.value(p));
    return weighted_sum(t, rms_norm(t, x), wts);
  };
  gradcheck::expect_param_grads_match(g, {p}, build, 1e-5, 1e-5, "rms_norm");
}

TEST(GradCheck, BatchNorm) {
  GradientGroup g("bn");
  ParamId p = g.add_param("x", kink_free({4, 2, 3, 3}, 81));
  Tensor4 rm = Tensor4::zeros({1, 2, 1, 1});
  Tensor4 rv = Tensor4::full({1, 2, 1, 1}, 1.0);
  Tensor4 wts = rand_tensor({4, 2, 3, 3}, 82);
  auto build = [&](GradientGroup* t) {
    Val x = t ? t->use(p) : Val(g.value(p));
    return weighted_sum(t, batch_norm(t, x, rm, rv, true), wts);
  };
  gradcheck::expect_param_grads_match(g, {p}, build, 1e-5, 1e-4, "batch_norm");
}

TEST(GradCheck, GlobalAvgPoolLinearBroadcastChain) {
  // The FAL-shaped composite: gap -> linear -> relu -> linear -> broadcast add.
  GradientGroup g("fal-chain");
  Tensor4 h = kink_free({2, 3, 4, 4}, 91);
  ParamId w1 = g.add_param("w1", kink_free({1, 1, 5, 3}, 92));
  ParamId w2 = g.add_param("w2", kink_free({1, 1, 3, 5}, 93));
  Tensor4 wts = rand_tensor({2, 3, 4, 4}, 94);
  auto build = [&](GradientGroup* t) {
    Val hv = t ? t->leaf(h) : Val(h);
    Val pooled = global_avg_pool(t, hv);
    Val a = linear(t, pooled, t ? t->use(w1) : Val(g.value(w1)));
    Val r = relu(t, a);
    Val d = linear(t, r, t ? t->use(w2) : Val(g.value(w2)));
    // linear yields (B, C, 1, 1) which broadcast_channel_add expects
    Val out = broadcast_channel_add(t, hv, d);
    return weighted_sum(t, out, wts);
  };
  gradcheck::expect_param_grads_match(g, {w1, w2}, build, 1e-5, 1e-5,
                                      "fal-chain");
}

TEST(GradCheck, Linear) {
  GradientGroup g("linear");
  Tensor4 x = kink_free({3, 4, 1, 1}, 101);
  ParamId w = g.add_param("w", kink_free({1, 1, 5, 4}, 102));
  ParamId b = g.add_param("b", kink_free({1, 1, 5, 1}, 103));
  Tensor4 wts = rand_tensor({3, 5, 1, 1}, 104);
  auto build = [&](GradientGroup* t) {
    Val xv = t ? t->leaf(x) : Val(x);
    Val wv = t ? t->use(w) : Val(g.value(w));
    Val bv = t ? t->use(b) : Val(g.value(b));
    return weighted_sum(t, linear(t, xv, wv, &bv), wts);
  };
  gradcheck::expect_param_grads_match(g, {w, b}, build, 1e-5, 1e-5, "linear");
}

TEST(GradCheck, RegionSqMean) {
  GradientGroup g("regions");
  ParamId p = g.add_param("x", kink_free({2, 3, 5, 7}, 111));
  Tensor4 wts = rand_tensor({2, 3, 2, 2}, 112);
  auto build = [&](GradientGroup* t) {
    Val x = t ? t->use(p) : Val(g.value(p));
    return weighted_sum(t, region_sq_mean(t, x, 2), wts);
  };
  gradcheck::expect_param_grads_match(g, {p}, build, 1e-5, 1e-5,
                                      "region_sq_mean");
}

TEST(GradCheck, ChannelProjectAndConcat) {
  GradientGroup g("proj");
  Tensor4 x = kink_free({2, 4, 3, 3}, 121);
  ParamId w = g.add_param("w", kink_free({1, 1, 2, 4}, 122));
  Tensor4 wts = rand_tensor({2, 4 * 9 + 2 * 9, 1, 1}, 123);
  auto build = [&](GradientGroup* t) {
    Val xv = t ? t->leaf(x) : Val(x);
    Val z = channel_project(t, xv, t ? t->use(w) : Val(g.value(w)));
    Val cat = concat_features(t, {xv, z});
    return weighted_sum(t, cat, wts);
  };
  gradcheck::expect_param_grads_match(g, {w}, build, 1e-5, 1e-5,
                                      "channel_project");
}

TEST(GradCheck, SoftmaxCrossEntropy) {
  GradientGroup g("ce");
  ParamId z = g.add_param("logits", kink_free({4, 5, 1, 1}, 131));
  std::vector<int> labels{1, 0, 4, 2};
  auto build = [&](GradientGroup* t) {
    Val zv = t ? t->use(z) : Val(g.value(z));
    return softmax_cross_entropy(t, zv, labels);
  };
  gradcheck::expect_param_grads_match(g, {z}, build, 1e-5, 1e-5, "softmax_ce");
}

TEST(GradCheck, DropoutFrozenMask) {
  GradientGroup g("dropout");
  ParamId p = g.add_param("x", kink_free({2, 3, 4, 4}, 141));
  auto rng = stream_rng(9, "dropout", 0, 0);
  Tensor4 mask = make_dropout_mask({2, 3, 4, 4}, 0.25, rng);
  Tensor4 wts = rand_tensor({2, 3, 4, 4}, 142);
  auto build = [&](GradientGroup* t) {
    Val x = t ? t->use(p) : Val(g.value(p));
    return weighted_sum(t, dropout_apply(t, x, mask), wts);
  };
  gradcheck::expect_param_grads_match(g, {p}, build, 1e-5, 1e-5, "dropout");
}

// ---- trace mechanics ------------------------------------------------------------

TEST(Tape, GradientIsolationAcrossGroups) {
  GradientGroup a("a"), b("b");
  ParamId pa = a.add_param("w", rand_tensor({1, 1, 3, 3}, 151));
  ParamId pb = b.add_param("w", rand_tensor({1, 1, 3, 3}, 152));
  Tensor4 x = rand_tensor({2, 3, 1, 1}, 153);
  Tensor4 wts = rand_tensor({2, 3, 1, 1}, 154);

  b.begin_recording();
  Val out = linear(&b, b.leaf(x), b.use(pb));
  b.backward(weighted_sum(&b, out, wts));

  // a never participated: all its gradients are bitwise zero
  const Tensor4& ga = a.grad(pa);
  for (int64_t i = 0; i < ga.elems(); ++i) {
    double v = ga.flat(i);
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof(bits));
    EXPECT_EQ(bits, 0u);
  }
  // b's gradient is nonzero
  double s = 0;
  for (int64_t i = 0; i < b.grad(pb).elems(); ++i)
    s += std::fabs(b.grad(pb).flat(i));
  EXPECT_GT(s, 0.0);
}

TEST(Tape, TraceReleasedAfterBackward) {
  int64_t before = AllocLedger::trace_count();
  GradientGroup g("t");
  ParamId p = g.add_param("w", rand_tensor({1, 1, 2, 2}, 161));
  Tensor4 x = rand_tensor({1, 2, 1, 1}, 162);
  Tensor4 wts = rand_tensor({1, 2, 1, 1}, 163);
  for (int step = 0; step < 3; ++step) {
    g.begin_recording();
    Val out = linear(&g, g.leaf(x), g.use(p));
    Val loss = weighted_sum(&g, out, wts);
    EXPECT_GT(AllocLedger::trace_count(), before);
    g.backward(loss);
    EXPECT_EQ(AllocLedger::trace_count(), before);
    EXPECT_EQ(g.trace_nodes(), 0);
  }
}

TEST(Tape, DetachSharesStorageAndDropsHistory) {
  GradientGroup g("t");
  g.begin_recording();
  Val x = g.leaf(rand_tensor({1, 2, 2, 2}, 171));
  Val y = relu(&g, x);
  Val d = detach(y);
  EXPECT_TRUE(d.t.shares_storage(y.t));
  EXPECT_FALSE(d.tracked());
  EXPECT_TRUE(bitwise_equal(d.t, y.t));
  g.release_trace();
}

TEST(Tape, CrossGroupValueRejected) {
  GradientGroup a("a"), b("b");
  a.begin_recording();
  b.begin_recording();
  Val xa = a.leaf(rand_tensor({1, 1, 2, 2}, 181));
  Val ra = relu(&a, xa);
  EXPECT_THROW(relu(&b, ra), std::logic_error);
  a.release_trace();
  b.release_trace();
}

TEST(Tape, BackwardNeedsScalarAndOwnership) {
  GradientGroup g("t");
  g.begin_recording();
  Val x = g.leaf(rand_tensor({1, 1, 2, 2}, 191));
  Val y = relu(&g, x);
  EXPECT_THROW(g.backward(y), std::invalid_argument);  // not scalar
  GradientGroup other("o");
  Tensor4 w = Tensor4::full({1, 1, 2, 2}, 1.0);
  Val loss = weighted_sum(&g, y, w);
  EXPECT_THROW(other.backward(loss), std::logic_error);
  g.backward(loss);
  EXPECT_THROW(g.backward(loss), std::logic_error);  // released trace
}

TEST(Tape, SecondBackwardAccumulatesParamGrads) {
  GradientGroup g("t");
  ParamId p = g.add_param("w", Tensor4::full({1, 1, 1, 1}, 2.0));
  Tensor4 x = Tensor4::full({1, 1, 1, 1}, 3.0);
  Tensor4 wts = Tensor4::full({1, 1, 1, 1}, 1.0);
  for (int i = 0; i < 2; ++i) {
    g.begin_recording();
    Val out = linear(&g, g.leaf(x), g.use(p));
    g.backward(weighted_sum(&g, out, wts));
  }
  // d(wx)/dw = x = 3, accumulated twice
  EXPECT_DOUBLE_EQ(g.grad(p).flat(0), 6.0);
  g.zero_grads();
  EXPECT_DOUBLE_EQ(g.grad(p).flat(0), 0.0);
}
