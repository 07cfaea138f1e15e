// Block pipeline and feedback adapter tests.

#include <cmath>
#include <cstring>
#include <vector>

#include <gtest/gtest.h>

#include "bicovg/blocks.hpp"
#include "bicovg/rng.hpp"
#include "gradcheck.hpp"

using namespace bicovg;

namespace {

Tensor4 rand_tensor(Shape4 s, std::uint64_t seed, double lo = -1.0,
                    double hi = 1.0) {
  auto rng = stream_rng(seed, "test-rand");
  return uniform_tensor(s, lo, hi, rng);
}

bool all_bits_zero(const Tensor4& t) {
  for (int64_t i = 0; i < t.elems(); ++i) {
    double v = t.flat(i);
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof(bits));
    if (bits != 0) return false;
  }
  return true;
}

}  // namespace

TEST(Adapter, FreshAdapterIsBitwiseIdentity) {
  auto rng = stream_rng(3, "init");
  Tensor4 h = rand_tensor({3, 8, 5, 5}, 301);
  Val w1(adapter_w1_init(16, 8, rng));
  Val w2(adapter_w2_init(8, 16));
  Val out = apply_adapter(nullptr, Val(h), w1, w2);
  ASSERT_EQ(out.t.shape(), h.shape());
  EXPECT_TRUE(bitwise_equal(out.t, h));  // zero absolute error, not approx
}

TEST(Adapter, PerturbsOnceSecondMatrixIsNonzero) {
  auto rng = stream_rng(4, "init");
  Tensor4 h = rand_tensor({2, 4, 3, 3}, 311, 0.2, 1.0);
  Val w1(adapter_w1_init(8, 4, rng));
  Tensor4 w2t = rand_tensor({1, 1, 4, 8}, 312, 0.01, 0.1);
  Val out = apply_adapter(nullptr, Val(h), w1, Val(w2t));
  EXPECT_FALSE(bitwise_equal(out.t, h));
  // the perturbation is constant across spatial positions of a channel
  double d00 = out.t.at(0, 1, 0, 0) - h.at(0, 1, 0, 0);
  double d22 = out.t.at(0, 1, 2, 2) - h.at(0, 1, 2, 2);
  EXPECT_NEAR(d00, d22, 1e-12);
}

TEST(Adapter, GradCheck) {
  GradientGroup g("adapter");
  auto rng = stream_rng(5, "init");
  Tensor4 h = rand_tensor({2, 4, 3, 3}, 321, 0.2, 1.0);
  ParamId w1 = g.add_param("w1", adapter_w1_init(6, 4, rng));
  ParamId w2 = g.add_param("w2", rand_tensor({1, 1, 4, 6}, 322, -0.3, 0.3));
  Tensor4 wts = rand_tensor({2, 4, 3, 3}, 323);
  auto build = [&](GradientGroup* t) {
    Val hv = t ? t->leaf(h) : Val(h);
    Val out = apply_adapter(t, hv, t ? t->use(w1) : Val(g.value(w1)),
                            t ? t->use(w2) : Val(g.value(w2)));
    return weighted_sum(t, out, wts);
  };
  gradcheck::expect_param_grads_match(g, {w1, w2}, build, 1e-5, 1e-5,
                                      "adapter");
}

TEST(Adapter, ZeroInitGetsNonzeroGradient) {
  // w2 = 0 blocks the forward perturbation but not the gradient: training can
  // move off the identity.
  GradientGroup g("adapter0");
  auto rng = stream_rng(6, "init");
  ParamId w1 = g.add_param("w1", adapter_w1_init(6, 4, rng));
  ParamId w2 = g.add_param("w2", adapter_w2_init(4, 6));
  Tensor4 h = rand_tensor({2, 4, 3, 3}, 331, 0.2, 1.0);
  Tensor4 wts = rand_tensor({2, 4, 3, 3}, 332, 0.5, 1.0);
  g.begin_recording();
  Val out = apply_adapter(&g, g.leaf(h), g.use(w1), g.use(w2));
  g.backward(weighted_sum(&g, out, wts));
  double s = 0;
  for (int64_t i = 0; i < g.grad(w2).elems(); ++i)
    s += std::fabs(g.grad(w2).flat(i));
  EXPECT_GT(s, 0.0);
  // w1 sits behind the zero matrix, so its gradient stays zero on this step
  EXPECT_TRUE(all_bits_zero(g.grad(w1)));
}

TEST(Block, ShapeFlowWithAndWithoutPool) {
  BlockShape bs;
  bs.in_channels = 3;
  bs.out_channels = 8;
  bs.pool = true;
  bs.goodness = GoodnessSpec{8, 1, 2, 4, true, true};
  bs.validate();
  auto rng = stream_rng(7, "init");
  Val w(conv_weight_init(8, 3, rng));
  Val b(conv_bias_init(8, 3, rng));
  Tensor4 x = rand_tensor({2, 3, 8, 8}, 341);
  Val f = conv_relu(nullptr, Val(x), w, b);
  ASSERT_EQ(f.t.shape(), (Shape4{2, 8, 8, 8}));
  Val h = pipeline_tail(nullptr, f, bs, nullptr, nullptr, false);
  EXPECT_EQ(h.t.shape(), (Shape4{2, 8, 4, 4}));
  bs.pool = false;
  Val h2 = pipeline_tail(nullptr, f, bs, nullptr, nullptr, false);
  EXPECT_EQ(h2.t.shape(), (Shape4{2, 8, 8, 8}));
}

TEST(Block, ValidateRejectsBadConfigs) {
  BlockShape bs;
  bs.in_channels = 3;
  bs.out_channels = 8;
  bs.goodness = GoodnessSpec{8, 1, 2, 4, true, true};
  bs.dropout = 1.0;
  EXPECT_THROW(bs.validate(), std::invalid_argument);
  bs.dropout = 0.1;
  bs.goodness.channels = 4;  // mismatch with out_channels
  EXPECT_THROW(bs.validate(), std::invalid_argument);
  bs.goodness.channels = 8;
  EXPECT_NO_THROW(bs.validate());
}

TEST(Block, FullPipelineGradCheckRmsNorm) {
  BlockShape bs;
  bs.in_channels = 2;
  bs.out_channels = 4;
  bs.pool = true;
  bs.dropout = 0.2;
  bs.norm = NormKind::rms;
  bs.goodness = GoodnessSpec{4, 1, 2, 2, true, true};
  GradientGroup g("block");
  auto rng = stream_rng(8, "init");
  ParamId w = g.add_param("w", conv_weight_init(4, 2, rng));
  ParamId b = g.add_param("b", conv_bias_init(4, 2, rng));
  Tensor4 x = rand_tensor({2, 2, 4, 4}, 351, 0.3, 1.0);
  auto drng = stream_rng(8, "dropout", 0, 0);
  Tensor4 mask = make_dropout_mask({2, 4, 2, 2}, bs.dropout, drng);
  Tensor4 wts = rand_tensor({2, 4, 2, 2}, 352);
  auto build = [&](GradientGroup* t) {
    Val xv = t ? t->leaf(x) : Val(x);
    Val f = conv_relu(t, xv, t ? t->use(w) : Val(g.value(w)),
                      t ? t->use(b) : Val(g.value(b)));
    Val h = pipeline_tail(t, f, bs, nullptr, &mask, true);
    return weighted_sum(t, h, wts);
  };
  gradcheck::expect_param_grads_match(g, {w, b}, build, 1e-5, 1e-4,
                                      "block-rms");
}

TEST(Block, FullPipelineGradCheckBatchNorm) {
  BlockShape bs;
  bs.in_channels = 2;
  bs.out_channels = 3;
  bs.pool = false;
  bs.dropout = 0.0;
  bs.norm = NormKind::batch;
  bs.goodness = GoodnessSpec{3, 1, 2, 3, true, true};
  GradientGroup g("block-bn");
  auto rng = stream_rng(9, "init");
  ParamId w = g.add_param("w", conv_weight_init(3, 2, rng));
  ParamId b = g.add_param("b", conv_bias_init(3, 2, rng));
  BatchNormState bn = BatchNormState::fresh(3);
  Tensor4 x = rand_tensor({4, 2, 3, 3}, 361, 0.3, 1.0);
  Tensor4 wts = rand_tensor({4, 3, 3, 3}, 362);
  auto build = [&](GradientGroup* t) {
    Val xv = t ? t->leaf(x) : Val(x);
    Val f = conv_relu(t, xv, t ? t->use(w) : Val(g.value(w)),
                      t ? t->use(b) : Val(g.value(b)));
    Val h = pipeline_tail(t, f, bs, &bn, nullptr, true);
    return weighted_sum(t, h, wts);
  };
  gradcheck::expect_param_grads_match(g, {w, b}, build, 1e-5, 1e-4,
                                      "block-bn");
}

TEST(Block, BatchNormRunningStatsTorchSemantics) {
  // One training pass from fresh stats: mean' = 0.9*0 + 0.1*batch_mean,
  // var' = 0.9*1 + 0.1*unbiased_batch_var; normalization inside the pass uses
  // the biased batch variance. Eval then uses the running buffers.
  Tensor4 x = Tensor4::zeros({2, 1, 1, 2});
  x.set(0, 0, 0, 0, 1.0);
  x.set(0, 0, 0, 1, 2.0);
  x.set(1, 0, 0, 0, 3.0);
  x.set(1, 0, 0, 1, 6.0);
  // batch mean 3, biased var ((4+1+0+9)/4)=3.5, unbiased 14/3
  Tensor4 rm = Tensor4::zeros({1, 1, 1, 1});
  Tensor4 rv = Tensor4::full({1, 1, 1, 1}, 1.0);
  Val out = batch_norm(nullptr, Val(x), rm, rv, true);
  EXPECT_NEAR(rm.flat(0), 0.3, 1e-12);
  EXPECT_NEAR(rv.flat(0), 0.9 + 0.1 * (14.0 / 3.0), 1e-12);
  double denom = std::sqrt(3.5 + kBatchNormEps);
  EXPECT_NEAR(out.t.at(0, 0, 0, 0), (1.0 - 3.0) / denom, 1e-12);
  // eval pass: uses running stats, does not touch them
  double rm_before = rm.flat(0), rv_before = rv.flat(0);
  Val ev = batch_norm(nullptr, Val(x), rm, rv, false);
  EXPECT_EQ(rm.flat(0), rm_before);
  EXPECT_EQ(rv.flat(0), rv_before);
  EXPECT_NEAR(ev.t.at(0, 0, 0, 0),
              (1.0 - rm_before) / std::sqrt(rv_before + kBatchNormEps), 1e-12);
}

TEST(Block, TwoBlockIsolationProbe) {
  // Block A feeds block B across a detach; a loss on B's side must leave every
  // gradient in A's group bitwise zero.
  GradientGroup ga("a"), gb("b");
  auto rng = stream_rng(10, "init");
  ParamId wa = ga.add_param("w", conv_weight_init(4, 2, rng));
  ParamId ba = ga.add_param("b", conv_bias_init(4, 2, rng));
  ParamId wb = gb.add_param("w", conv_weight_init(4, 4, rng));
  ParamId bb = gb.add_param("b", conv_bias_init(4, 4, rng));
  Tensor4 x = rand_tensor({2, 2, 4, 4}, 371, 0.1, 1.0);
  Tensor4 wts = rand_tensor({2, 4, 4, 4}, 372);

  ga.begin_recording();
  gb.begin_recording();
  Val fa = conv_relu(&ga, ga.leaf(x), ga.use(wa), ga.use(ba));
  Val ha = rms_norm(&ga, fa);
  Val carried = detach(ha);  // group boundary
  Val fb = conv_relu(&gb, gb.leaf(carried.t), gb.use(wb), gb.use(bb));
  gb.backward(weighted_sum(&gb, fb, wts));
  ga.release_trace();

  EXPECT_TRUE(all_bits_zero(ga.grad(wa)));
  EXPECT_TRUE(all_bits_zero(ga.grad(ba)));
  double s = 0;
  for (int64_t i = 0; i < gb.grad(wb).elems(); ++i)
    s += std::fabs(gb.grad(wb).flat(i));
  EXPECT_GT(s, 0.0);
}
