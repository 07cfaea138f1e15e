// Network assembly: placement, initialization streams, forwards.

#include <cmath>
#include <cstring>
#include <map>
#include <string>

#include <gtest/gtest.h>

#include "bicovg/model.hpp"

using namespace bicovg;

namespace {

std::string preset_path(const std::string& name) {
  return std::string(BICOVG_DEFAULT_PRESET_DIR) + "/" + name + ".cfg";
}

Config desk8() {
  Config c = load_config_file(preset_path("desk8-28"));
  finalize(c);
  return c;
}

Tensor4 rand_batch(Shape4 s, std::uint64_t seed) {
  auto rng = stream_rng(seed, "test-batch");
  return uniform_tensor(s, -1.0, 1.0, rng);
}

}  // namespace

TEST(Model, EnumeratorAndBuilderAgree) {
  Config c = desk8();
  ArchLayout lay = finalize(c);
  Network net(c.arch, 11);
  auto descs = enumerate_params(c.arch, lay);
  // every enumerated parameter exists in its claimed group with its shape
  std::size_t found = 0;
  for (const ParamDesc& d : descs) {
    int64_t gi;
    ParamId id;
    ASSERT_TRUE(net.find_param(d.name, gi, id)) << d.name;
    EXPECT_EQ(gi, d.group) << d.name;
    EXPECT_EQ(net.group(gi).value(id).shape(), d.shape) << d.name;
    ++found;
  }
  // and the groups hold nothing else
  int64_t total = 0;
  for (int64_t g = 0; g < net.group_count(); ++g)
    total += net.group(g).param_count();
  EXPECT_EQ(total, static_cast<int64_t>(found));
}

TEST(Model, AdapterOwnedByConsumingGroup) {
  Config c = desk8();  // group_size 1, boundaries 1 and 3
  finalize(c);
  Network net(c.arch, 11);
  int64_t gi;
  ParamId id;
  ASSERT_TRUE(net.find_param("adapter1.w1", gi, id));
  EXPECT_EQ(gi, 2);  // trained by the group consuming block 1's output
  ASSERT_TRUE(net.find_param("adapter3.w2", gi, id));
  EXPECT_EQ(gi, 4);
  EXPECT_FALSE(net.find_param("adapter0.w1", gi, id));
}

TEST(Model, GroupedPlacement) {
  Config c = desk8();
  c.arch.group_size = 2;
  finalize(c);
  Network net(c.arch, 11);
  EXPECT_EQ(net.group_count(), 4);
  auto heads = net.head_blocks();
  ASSERT_EQ(heads.size(), 4u);
  EXPECT_EQ(heads[0], 1);
  EXPECT_EQ(heads[3], 7);
  // adapters at every group entry except the first
  int64_t gi;
  ParamId id;
  ASSERT_TRUE(net.find_param("adapter1.w1", gi, id));
  EXPECT_EQ(gi, 1);
  ASSERT_TRUE(net.find_param("adapter5.w1", gi, id));
  EXPECT_EQ(gi, 3);
  EXPECT_FALSE(net.find_param("adapter7.w1", gi, id));
  // interior blocks carry no head
  EXPECT_FALSE(net.find_param("block0.head_w", gi, id));
  ASSERT_TRUE(net.find_param("block1.head_w", gi, id));
}

TEST(Model, InitIndependentOfGroupingAndAdapters) {
  // Same seed, different group split: shared parameters initialize bitwise
  // identically because each draws from its own named stream.
  Config c1 = desk8();
  Config c2 = desk8();
  c2.arch.group_size = 4;
  finalize(c1);
  finalize(c2);
  Network n1(c1.arch, 99), n2(c2.arch, 99);
  for (const char* name : {"block0.conv_w", "block5.conv_b", "block7.mix",
                           "block7.head_w", "block7.head_b"}) {
    int64_t g1, g2;
    ParamId p1, p2;
    ASSERT_TRUE(n1.find_param(name, g1, p1)) << name;
    ASSERT_TRUE(n2.find_param(name, g2, p2)) << name;
    EXPECT_TRUE(bitwise_equal(n1.group(g1).value(p1), n2.group(g2).value(p2)))
        << name;
  }
}

TEST(Model, FreshAdaptersLeaveEvalUnchanged) {
  // Removing the adapters entirely gives the same eval outputs as a fresh
  // net with them, since their second matrices start at zero.
  Config with_ad = desk8();
  Config no_ad = desk8();
  no_ad.arch.boundaries.clear();
  finalize(with_ad);
  finalize(no_ad);
  Network a(with_ad.arch, 5), b(no_ad.arch, 5);
  Tensor4 batch = rand_batch({2, 1, 28, 28}, 401);
  auto la = a.eval_logits(batch);
  auto lb = b.eval_logits(batch);
  ASSERT_EQ(la.size(), lb.size());
  for (std::size_t i = 0; i < la.size(); ++i) {
    EXPECT_EQ(la[i].first, lb[i].first);
    EXPECT_TRUE(bitwise_equal(la[i].second, lb[i].second))
        << "head at block " << la[i].first;
  }
}

TEST(Model, EvalLogitShapesAndDeterminism) {
  Config c = desk8();
  finalize(c);
  Network net(c.arch, 7);
  Tensor4 batch = rand_batch({3, 1, 28, 28}, 402);
  auto logits = net.eval_logits(batch);
  ASSERT_EQ(logits.size(), 8u);
  for (auto& [b, t] : logits)
    EXPECT_EQ(t.shape(), (Shape4{3, 10, 1, 1})) << "block " << b;
  Network net2(c.arch, 7);
  auto logits2 = net2.eval_logits(batch);
  for (std::size_t i = 0; i < logits.size(); ++i)
    EXPECT_TRUE(bitwise_equal(logits[i].second, logits2[i].second));
}

TEST(Model, ZeroedReadoutGivesUniformLogits) {
  Config c = desk8();
  finalize(c);
  Network net(c.arch, 7);
  for (int64_t b : net.head_blocks()) {
    int64_t gi;
    ParamId id;
    std::string stem = "block" + std::to_string(b);
    ASSERT_TRUE(net.find_param(stem + ".head_w", gi, id));
    net.group(gi).mutable_value(id) =
        Tensor4::zeros(net.group(gi).value(id).shape());
    ASSERT_TRUE(net.find_param(stem + ".head_b", gi, id));
    net.group(gi).mutable_value(id) =
        Tensor4::zeros(net.group(gi).value(id).shape());
  }
  Tensor4 batch = rand_batch({4, 1, 28, 28}, 403);
  std::vector<int> labels{0, 3, 9, 5};
  for (auto& [b, t] : net.eval_logits(batch)) {
    Val loss = softmax_cross_entropy(nullptr, Val(t), labels);
    EXPECT_DOUBLE_EQ(loss.t.flat(0), std::log(10.0)) << "block " << b;
  }
}

TEST(Model, GroupForwardTrainsAndReleases) {
  Config c = desk8();
  finalize(c);
  Network net(c.arch, 13);
  Tensor4 batch = rand_batch({4, 1, 28, 28}, 404);
  std::vector<int> labels{1, 2, 3, 4};
  int64_t traces_before = AllocLedger::trace_count();
  Tensor4 carried = batch;
  for (int64_t gi = 0; gi < net.group_count(); ++gi) {
    auto out = net.group_forward_train(gi, carried, labels, 0);
    ASSERT_TRUE(out.loss.tracked());
    EXPECT_TRUE(std::isfinite(out.loss.t.flat(0)));
    EXPECT_GT(out.loss.t.flat(0), 0.0);
    net.group(gi).backward(out.loss);
    EXPECT_GT(net.group(gi).grad_norm(), 0.0) << "group " << gi;
    carried = out.carried;
  }
  EXPECT_EQ(AllocLedger::trace_count(), traces_before);
  // spatial ladder held: final carry is 32ch at 7x7
  EXPECT_EQ(carried.shape(), (Shape4{4, 32, 7, 7}));
}

TEST(Model, ExitTailStillUpdatesRunningStats) {
  // Tails run outside the trace at group exits, but training-mode batch norm
  // must still advance its running estimates there.
  Config c = desk8();
  for (auto& b : c.arch.blocks) b.norm = NormKind::batch;
  finalize(c);
  Network net(c.arch, 17);
  Tensor4 before = net.net_block(0).bn.mean;
  Tensor4 before_copy = Tensor4::zeros(before.shape());
  add_into(before_copy, before);
  Tensor4 batch = rand_batch({4, 1, 28, 28}, 405);
  std::vector<int> labels{0, 1, 2, 3};
  auto out = net.group_forward_train(0, batch, labels, 0);
  net.group(0).backward(out.loss);
  EXPECT_FALSE(bitwise_equal(net.net_block(0).bn.mean, before_copy));
}

TEST(Model, CarriedMapMatchesEvalPathWithoutDropout) {
  // With dropout disabled, one training forward chained over all groups must
  // reproduce the eval forward's carries exactly for rms-norm blocks.
  Config c = desk8();
  for (auto& b : c.arch.blocks) b.dropout = 0.0;
  finalize(c);
  Network net(c.arch, 19);
  Tensor4 batch = rand_batch({2, 1, 28, 28}, 406);
  std::vector<int> labels{1, 2};
  Tensor4 carried = batch;
  std::vector<Tensor4> train_logits;
  for (int64_t gi = 0; gi < net.group_count(); ++gi) {
    auto out = net.group_forward_train(gi, carried, labels, 0);
    net.group(gi).release_trace();
    carried = out.carried;
    train_logits.push_back(out.logits);
  }
  auto eval = net.eval_logits(batch);
  ASSERT_EQ(eval.size(), train_logits.size());
  for (std::size_t i = 0; i < eval.size(); ++i)
    EXPECT_TRUE(bitwise_equal(eval[i].second, train_logits[i]))
        << "head " << i;
}
