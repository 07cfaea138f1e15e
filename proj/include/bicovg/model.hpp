#pragma once

// Network assembly: places every parameter into its owning gradient group,
// initializes from named per-parameter random streams, and provides the two
// forward modes (traced per-group training forward, plain eval forward).
//
// Placement rules
//   - a block's conv, mix, and head parameters belong to the block's group
//   - an adapter sitting after block i is owned by the group of block i+1,
//     which is the group whose loss trains it
//   - heads exist at group exits only (with group_size 1 that is every block)
//
// Initialization draws each parameter from its own stream keyed by
// (master seed, kind, block index), so the values do not depend on grouping,
// schedule, or the presence of other parameters.
//
// `enumerate_params` is the single source of truth for the parameter set; the
// builder here and the memory estimator both walk it.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "bicovg/blocks.hpp"
#include "bicovg/config.hpp"
#include "bicovg/goodness.hpp"
#include "bicovg/ops.hpp"
#include "bicovg/rng.hpp"
#include "bicovg/tape.hpp"

namespace bicovg {

enum class ParamKind {
  conv_w,
  conv_b,
  mix,
  head_w,
  head_b,
  adapter_w1,
  adapter_w2
};

struct ParamDesc {
  std::string name;
  Shape4 shape;
  ParamKind kind;
  int64_t block;  // owning block; for adapters, the block whose output they touch
  int64_t group;  // owning gradient group
};

inline std::vector<ParamDesc> enumerate_params(const ArchConfig& a,
                                               const ArchLayout& lay) {
  std::vector<ParamDesc> out;
  for (int64_t i = 0; i < lay.num_blocks; ++i) {
    const BlockShape& b = a.blocks[static_cast<std::size_t>(i)];
    int64_t gi = lay.group_of[static_cast<std::size_t>(i)];
    std::string p = "block" + std::to_string(i) + ".";
    out.push_back({p + "conv_w",
                   {b.out_channels, b.in_channels, 3, 3},
                   ParamKind::conv_w, i, gi});
    out.push_back(
        {p + "conv_b", {1, b.out_channels, 1, 1}, ParamKind::conv_b, i, gi});
    if (b.goodness.include_cc)
      out.push_back({p + "mix",
                     {1, 1, b.goodness.proj_channels(), b.out_channels},
                     ParamKind::mix, i, gi});
    if (lay.has_head[static_cast<std::size_t>(i)]) {
      int64_t d = lay.dims[static_cast<std::size_t>(i)];
      out.push_back(
          {p + "head_w", {1, 1, a.classes, d}, ParamKind::head_w, i, gi});
      out.push_back(
          {p + "head_b", {1, 1, a.classes, 1}, ParamKind::head_b, i, gi});
    }
    if (lay.adapter_after[static_cast<std::size_t>(i)]) {
      int64_t og = lay.group_of[static_cast<std::size_t>(i + 1)];
      std::string ap = "adapter" + std::to_string(i) + ".";
      out.push_back({ap + "w1",
                     {1, 1, a.adapter_hidden, b.out_channels},
                     ParamKind::adapter_w1, i, og});
      out.push_back({ap + "w2",
                     {1, 1, b.out_channels, a.adapter_hidden},
                     ParamKind::adapter_w2, i, og});
    }
  }
  return out;
}

inline Tensor4 init_param(const ParamDesc& d, const ArchConfig& a,
                          std::uint64_t master) {
  const BlockShape& b = a.blocks[static_cast<std::size_t>(d.block)];
  switch (d.kind) {
    case ParamKind::conv_w: {
      auto r = stream_rng(master, "init-conv-w", d.block);
      return conv_weight_init(b.out_channels, b.in_channels, r);
    }
    case ParamKind::conv_b: {
      auto r = stream_rng(master, "init-conv-b", d.block);
      return conv_bias_init(b.out_channels, b.in_channels, r);
    }
    case ParamKind::mix: {
      auto r = stream_rng(master, "init-mix", d.block);
      return mix_init(b.goodness.proj_channels(), b.out_channels, r);
    }
    case ParamKind::head_w: {
      auto r = stream_rng(master, "init-head-w", d.block);
      return readout_weight_init(a.classes, b.goodness.dim(), r);
    }
    case ParamKind::head_b: {
      auto r = stream_rng(master, "init-head-b", d.block);
      return readout_bias_init(a.classes, b.goodness.dim(), r);
    }
    case ParamKind::adapter_w1: {
      auto r = stream_rng(master, "init-adapter", d.block);
      return adapter_w1_init(a.adapter_hidden, b.out_channels, r);
    }
    case ParamKind::adapter_w2:
      return adapter_w2_init(b.out_channels, a.adapter_hidden);
  }
  throw std::logic_error("init_param: unreachable");
}

class Network {
 public:
  struct NetBlock {
    ParamId conv_w = -1, conv_b = -1, mix = -1, head_w = -1, head_b = -1;
    BatchNormState bn;
  };
  struct EntryAdapter {
    int64_t after = -1;  // block whose output it modifies; -1 = none
    ParamId w1 = -1, w2 = -1;
  };
  struct GroupStepOut {
    Val loss;        // traced scalar owned by the group
    Tensor4 carried; // exit h, computed outside the trace, feeds the next group
    Tensor4 logits;  // exit head logits (view, monitoring only)
  };

  Network(const ArchConfig& arch, std::uint64_t seed)
      : arch_(arch), lay_(finalize_arch(arch_)), seed_(seed) {
    groups_.reserve(static_cast<std::size_t>(lay_.num_groups));
    for (int64_t g = 0; g < lay_.num_groups; ++g)
      groups_.emplace_back("group" + std::to_string(g));
    blocks_.resize(static_cast<std::size_t>(lay_.num_blocks));
    entry_adapters_.resize(static_cast<std::size_t>(lay_.num_groups));
    for (const ParamDesc& d : enumerate_params(arch_, lay_)) {
      ParamId id = groups_[static_cast<std::size_t>(d.group)].add_param(
          d.name, init_param(d, arch_, seed_));
      NetBlock& nb = blocks_[static_cast<std::size_t>(d.block)];
      switch (d.kind) {
        case ParamKind::conv_w: nb.conv_w = id; break;
        case ParamKind::conv_b: nb.conv_b = id; break;
        case ParamKind::mix: nb.mix = id; break;
        case ParamKind::head_w: nb.head_w = id; break;
        case ParamKind::head_b: nb.head_b = id; break;
        case ParamKind::adapter_w1:
          entry_adapters_[static_cast<std::size_t>(d.group)].after = d.block;
          entry_adapters_[static_cast<std::size_t>(d.group)].w1 = id;
          break;
        case ParamKind::adapter_w2:
          entry_adapters_[static_cast<std::size_t>(d.group)].w2 = id;
          break;
      }
    }
    for (int64_t i = 0; i < lay_.num_blocks; ++i) {
      const BlockShape& bs = arch_.blocks[static_cast<std::size_t>(i)];
      if (bs.norm == NormKind::batch)
        blocks_[static_cast<std::size_t>(i)].bn =
            BatchNormState::fresh(bs.out_channels);
    }
  }

  const ArchConfig& arch() const { return arch_; }
  const ArchLayout& layout() const { return lay_; }
  std::uint64_t seed() const { return seed_; }
  int64_t group_count() const { return lay_.num_groups; }
  GradientGroup& group(int64_t gi) {
    return groups_[static_cast<std::size_t>(gi)];
  }
  NetBlock& net_block(int64_t b) { return blocks_[static_cast<std::size_t>(b)]; }
  const EntryAdapter& entry_adapter(int64_t gi) const {
    return entry_adapters_[static_cast<std::size_t>(gi)];
  }

  std::vector<int64_t> head_blocks() const {
    std::vector<int64_t> out;
    for (int64_t i = 0; i < lay_.num_blocks; ++i)
      if (lay_.has_head[static_cast<std::size_t>(i)]) out.push_back(i);
    return out;
  }

  // Locate a parameter by its checkpoint name.
  bool find_param(const std::string& name, int64_t& gi, ParamId& id) {
    for (int64_t g = 0; g < lay_.num_groups; ++g)
      for (ParamId p = 0; p < groups_[static_cast<std::size_t>(g)].param_count();
           ++p)
        if (groups_[static_cast<std::size_t>(g)].param_name(p) == name) {
          gi = g;
          id = p;
          return true;
        }
    return false;
  }

  // Traced training forward for one group. `input` is the already-carried map
  // from the previous group (or the batch for group 0); it enters as a leaf,
  // which is the boundary detach. The exit block's tail runs outside the trace
  // (its output feeds only the next group, never this group's loss), but still
  // in training mode so dropout and running statistics behave identically.
  GroupStepOut group_forward_train(int64_t gi, const Tensor4& input,
                                   const std::vector<int>& labels,
                                   int64_t step) {
    GradientGroup& G = group(gi);
    G.begin_recording();
    Val h = G.leaf(input);
    const EntryAdapter& ad = entry_adapters_[static_cast<std::size_t>(gi)];
    if (ad.after >= 0)
      h = apply_adapter(&G, h, G.use(ad.w1), G.use(ad.w2));
    int64_t first = gi * arch_.group_size;
    int64_t exit = lay_.group_exit[static_cast<std::size_t>(gi)];
    GroupStepOut out;
    for (int64_t b = first; b <= exit; ++b) {
      NetBlock& nb = blocks_[static_cast<std::size_t>(b)];
      const BlockShape& bs = arch_.blocks[static_cast<std::size_t>(b)];
      Val f = conv_relu(&G, h, G.use(nb.conv_w), G.use(nb.conv_b));
      Shape4 fs = f.t.shape();
      Shape4 tail_shape =
          bs.pool ? Shape4{fs.b, fs.c, fs.h / 2, fs.w / 2} : fs;
      Tensor4 mask;
      bool want_mask = bs.dropout > 0.0;
      if (want_mask) {
        auto r = stream_rng(seed_, "dropout", b, step);
        mask = make_dropout_mask(tail_shape, bs.dropout, r);
      }
      if (b == exit) {
        Val gvec;
        if (nb.mix >= 0) {
          Val mixv = G.use(nb.mix);
          gvec = encode_goodness(&G, f, bs.goodness, &mixv);
        } else {
          gvec = encode_goodness(&G, f, bs.goodness, nullptr);
        }
        Val hb = G.use(nb.head_b);
        Val lg = linear(&G, gvec, G.use(nb.head_w), &hb);
        out.loss = softmax_cross_entropy(&G, lg, labels);
        out.logits = lg.t;
        Val fd(f.t);  // plain view: the tail stays off the trace
        out.carried = pipeline_tail(nullptr, fd, bs, &nb.bn,
                                    want_mask ? &mask : nullptr, true)
                          .t;
      } else {
        h = pipeline_tail(&G, f, bs, &nb.bn, want_mask ? &mask : nullptr,
                          true);
      }
    }
    return out;
  }

  // Eval forward: running statistics, no dropout, no tracing. Returns the
  // logits of every head in depth order.
  std::vector<std::pair<int64_t, Tensor4>> eval_logits(const Tensor4& batch) {
    std::vector<std::pair<int64_t, Tensor4>> out;
    Tensor4 h = batch;
    for (int64_t gi = 0; gi < lay_.num_groups; ++gi) {
      GradientGroup& G = group(gi);
      const EntryAdapter& ad = entry_adapters_[static_cast<std::size_t>(gi)];
      if (ad.after >= 0)
        h = apply_adapter(nullptr, Val(h), Val(G.value(ad.w1)),
                          Val(G.value(ad.w2)))
                .t;
      int64_t first = gi * arch_.group_size;
      int64_t exit = lay_.group_exit[static_cast<std::size_t>(gi)];
      for (int64_t b = first; b <= exit; ++b) {
        NetBlock& nb = blocks_[static_cast<std::size_t>(b)];
        const BlockShape& bs = arch_.blocks[static_cast<std::size_t>(b)];
        Tensor4 f = relu_fwd(conv3x3_fwd(h, G.value(nb.conv_w),
                                         G.value(nb.conv_b)));
        if (lay_.has_head[static_cast<std::size_t>(b)]) {
          const Tensor4* mix =
              nb.mix >= 0 ? &G.value(nb.mix) : nullptr;
          Tensor4 gvec = encode_goodness_fwd(f, bs.goodness, mix);
          const Tensor4& hb = G.value(nb.head_b);
          out.emplace_back(b, linear_fwd(gvec, G.value(nb.head_w), &hb));
        }
        h = pipeline_tail(nullptr, Val(f), bs, &nb.bn, nullptr, false).t;
      }
    }
    return out;
  }

 private:
  ArchConfig arch_;
  ArchLayout lay_;
  std::uint64_t seed_;
  std::vector<GradientGroup> groups_;
  std::vector<NetBlock> blocks_;
  std::vector<EntryAdapter> entry_adapters_;
};

}  // namespace bicovg
