#pragma once

// Closed-form peak-memory estimator for a training step, plus the ledger
// probe that checks it against a live run.
//
// The estimator sums tensor footprints from the residency table below; the
// table is the single source of truth, and the brute-force oracle in the
// tests enumerates exactly these rows with independent code. Bytes are
// engine-level tensor payloads only: no allocator slack, no containers, no
// host bookkeeping. All shapes are written (b, c, h, w); bytes = elements
// times the scalar size (8 for the f64 engine tensors).
//
// ---------------------------------------------------------------------------
// Residency table, one training step at batch b
//
// Always resident ("base")
//   parameters        every registered tensor, plus 2 x (1,C,1,1) running
//                     buffers per batch-norm block. Note the (N,C) mix
//                     projection is registered on every block when
//                     cross-channel stats are on, not only head blocks.
//   gradients         one buffer per parameter, same shape (the engine
//                     allocates them with the parameters)
//   optimizer state   slots per parameter: sgd 1, adam/adamw 2. Slots
//                     materialize on each group's first step, so this is the
//                     steady state from the second step on.
//   batch             (b, C_in, H, W)
//
// Per group g while its trace is held -- "graph(g)":
//   if g owns an entry adapter, applied to its incoming map (b,c,s,s):
//     gap out         (b,c,1,1)    pinned by the first projection's save
//     hidden relu     (b,A,1,1)    relu saves its own output
//     adapter out     (b,c,s,s)    pinned by the first conv's save
//   every block l in g (tap spatial S, post-pool spatial S'):
//     relu out        (b,C,S,S)    relu saves its own output
//   interior blocks of g additionally (their tails are traced):
//     pool out        (b,C,S',S')  when the block pools
//     dropout mask    (b,C,S',S')  when dropout > 0
//     dropout out     (b,C,S',S')  rmsnorm only (it saves its input)
//     rms vector      (b,1,1,1)    rmsnorm only
//     norm out        (b,C,S',S')  pinned by the next conv's save; under
//                                  batchnorm this is the norm's own saved
//                                  output, joined by inv-std (1,C,1,1)
//   the exit block of g additionally (tail untraced, goodness traced):
//     z map           (b,N,S,S)    cross-channel projection, when enabled
//     concat          (b,D,1,1)    pinned by the readout's save
//     probs           (b,K,1,1)    saved by the cross-entropy
//     carried out     (b,C,S',S')  exit tail output, alive in the step output
//     logits          (b,K,1,1)    kept for loss monitoring
//     loss            (1,1,1,1)
//   Exit-tail dropout masks are created and dropped inside the untraced tail
//   and never count.
//
// Per group g during its backward -- "adjoints(g)". One buffer per node that
// receives a gradient, all alive until the trace releases at the end of
// backward. Entry maps are gradient-free leaves and get none.
//   adapter nodes     gap (b,c,1,1), lin1 (b,A,1,1), relu (b,A,1,1),
//                     lin2 (b,c,1,1), broadcast add (b,c,s,s),
//                     w1 (A,c), w2 (c,A)
//   every block       conv out (b,C,S,S), relu out (b,C,S,S),
//                     conv w (C,Cin,3,3), conv bias (C)
//   interior tails    pool (b,C,S',S') when pooled, dropout (b,C,S',S') when
//                     dropout > 0, norm (b,C,S',S')
//   exit goodness     region outputs (b*D elements across the region nodes),
//                     concat (b,D), z (b,N,S,S) when enabled, logits (b,K),
//                     loss (1), mix (N,C), readout w (K,D), readout bias (K)
//
// Peak composition
//   standard     finishing runs in reverse depth order, so the deepest
//                backward still sees every trace:
//                peak = base + max_g [ sum_{j<=g} graph(j) + adjoints(g) ]
//   interleaved  one trace at a time; the producing group's carried map is
//                still alive while its consumer trains:
//                peak = base + max_g [ carried_in(g) + graph(g) + adjoints(g) ]
//
// Not counted: transient temporaries inside individual kernels (bounded by a
// few map-sized buffers; measured peaks land about a percent above the
// estimate at desk scale).
// ---------------------------------------------------------------------------

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "bicovg/config.hpp"
#include "bicovg/tensor.hpp"

namespace bicovg {

struct RunPlan {
  std::string schedule = "standard";  // standard | interleaved
  std::string optimizer = "sgd";      // sgd | adam | adamw
};

struct GroupFootprint {
  int64_t group = 0;
  int64_t graph = 0;     // forward-resident bytes while the trace is held
  int64_t adjoints = 0;  // backward buffers at this group's release point
};

struct MemoryEstimate {
  int64_t parameters = 0;       // values + norm running buffers
  int64_t gradients = 0;
  int64_t optimizer_state = 0;
  int64_t activations = 0;      // chain bytes resident at the peak moment
  int64_t head_graphs = 0;      // goodness-path bytes at the peak moment
  int64_t peak = 0;
  std::vector<GroupFootprint> groups;
};

inline int64_t optimizer_slots(const std::string& opt) {
  if (opt == "sgd") return 1;
  if (opt == "adam" || opt == "adamw") return 2;
  throw std::invalid_argument("memory estimate: unknown optimizer '" + opt +
                              "'");
}

namespace memdetail {

// Per-group element counts, chain and goodness path kept apart so the
// estimate can report them separately.
struct GroupElems {
  int64_t chain_pins = 0;
  int64_t head_pins = 0;
  int64_t chain_adj = 0;
  int64_t head_adj = 0;
  int64_t carried_in = 0;  // entry map bytes, alive during interleaved steps
  int64_t pins() const { return chain_pins + head_pins; }
  int64_t adj() const { return chain_adj + head_adj; }
};

inline int64_t post_spatial(const ArchConfig& a, const ArchLayout& lay,
                            int64_t l) {
  int64_t s = lay.spatial[static_cast<std::size_t>(l)];
  return a.blocks[static_cast<std::size_t>(l)].pool ? s / 2 : s;
}

inline GroupElems group_elems(const ArchConfig& a, const ArchLayout& lay,
                              int64_t g, int64_t b) {
  GroupElems e;
  int64_t first = g * a.group_size;
  int64_t exit = lay.group_exit[static_cast<std::size_t>(g)];
  if (first > 0) {
    const BlockShape& prev = a.blocks[static_cast<std::size_t>(first - 1)];
    int64_t sp = post_spatial(a, lay, first - 1);
    e.carried_in = b * prev.out_channels * sp * sp;
    if (lay.adapter_after[static_cast<std::size_t>(first - 1)]) {
      int64_t c = prev.out_channels;
      int64_t s = lay.spatial[static_cast<std::size_t>(first)];
      e.chain_pins += b * c + b * a.adapter_hidden + b * c * s * s;
      e.chain_adj += 2 * (b * c + b * a.adapter_hidden) + b * c * s * s +
                     2 * a.adapter_hidden * c;
    }
  }
  for (int64_t l = first; l <= exit; ++l) {
    const BlockShape& bs = a.blocks[static_cast<std::size_t>(l)];
    int64_t C = bs.out_channels;
    int64_t S = lay.spatial[static_cast<std::size_t>(l)];
    int64_t Sp = post_spatial(a, lay, l);
    int64_t tap = b * C * S * S;
    int64_t tail = b * C * Sp * Sp;
    e.chain_pins += tap;                       // relu out
    e.chain_adj += 2 * tap;                    // conv + relu nodes
    e.chain_adj += C * bs.in_channels * 9 + C; // conv w + bias nodes
    if (l != exit) {
      if (bs.pool) {
        e.chain_pins += tail;
        e.chain_adj += tail;
      }
      if (bs.dropout > 0.0) {
        e.chain_pins += tail;  // mask
        e.chain_adj += tail;   // dropout node
        if (bs.norm == NormKind::rms) e.chain_pins += tail;  // dropout out
      }
      e.chain_pins += tail;  // norm out
      e.chain_adj += tail;   // norm node
      e.chain_pins += bs.norm == NormKind::rms ? b : C;  // rms vec / inv std
    } else {
      const GoodnessSpec& gs = bs.goodness;
      int64_t N = gs.proj_channels();
      int64_t D = lay.dims[static_cast<std::size_t>(l)];
      int64_t K = a.classes;
      if (gs.include_cc) {
        e.head_pins += b * N * S * S;  // z map
        e.head_adj += b * N * S * S;   // z node
        e.head_adj += N * C;           // mix node
      }
      e.head_pins += b * D + b * K;          // concat + probs
      e.head_pins += b * K + 1;              // logits + loss
      e.head_adj += 2 * b * D;               // region nodes + concat node
      e.head_adj += b * K + 1;               // logits + loss nodes
      e.head_adj += K * D + K;               // readout nodes
      e.chain_pins += tail;                  // carried out
    }
  }
  return e;
}

inline int64_t param_elems(const ArchConfig& a, const ArchLayout& lay) {
  int64_t p = 0;
  for (int64_t l = 0; l < lay.num_blocks; ++l) {
    const BlockShape& bs = a.blocks[static_cast<std::size_t>(l)];
    p += bs.out_channels * bs.in_channels * 9 + bs.out_channels;
    // The mix projection is registered with every block when cross-channel
    // stats are on, heads or not, so it always carries grad and optimizer
    // buffers even where backward never touches it.
    if (bs.goodness.include_cc)
      p += bs.goodness.proj_channels() * bs.out_channels;
    if (lay.has_head[static_cast<std::size_t>(l)])
      p += a.classes * lay.dims[static_cast<std::size_t>(l)] + a.classes;
    if (lay.adapter_after[static_cast<std::size_t>(l)])
      p += 2 * a.adapter_hidden * bs.out_channels;
  }
  return p;
}

inline int64_t norm_buffer_elems(const ArchConfig& a) {
  int64_t n = 0;
  for (const BlockShape& bs : a.blocks)
    if (bs.norm == NormKind::batch) n += 2 * bs.out_channels;
  return n;
}

}  // namespace memdetail

inline MemoryEstimate estimate_peak(const ArchConfig& arch, const RunPlan& plan,
                                    int64_t batch, int64_t scalar_bytes = 8) {
  if (batch <= 0)
    throw std::invalid_argument("memory estimate: batch must be positive");
  if (scalar_bytes <= 0)
    throw std::invalid_argument(
        "memory estimate: scalar bytes must be positive");
  if (plan.schedule != "standard" && plan.schedule != "interleaved")
    throw std::invalid_argument("memory estimate: unknown schedule '" +
                                plan.schedule + "'");
  ArchConfig a = arch;
  ArchLayout lay = finalize_arch(a);
  int64_t slots = optimizer_slots(plan.optimizer);

  int64_t params = memdetail::param_elems(a, lay);
  MemoryEstimate est;
  est.parameters = (params + memdetail::norm_buffer_elems(a)) * scalar_bytes;
  est.gradients = params * scalar_bytes;
  est.optimizer_state = slots * params * scalar_bytes;
  int64_t batch_elems = batch * a.input_channels * a.input_size * a.input_size;

  std::vector<memdetail::GroupElems> ge;
  ge.reserve(static_cast<std::size_t>(lay.num_groups));
  for (int64_t g = 0; g < lay.num_groups; ++g)
    ge.push_back(memdetail::group_elems(a, lay, g, batch));
  for (int64_t g = 0; g < lay.num_groups; ++g)
    est.groups.push_back({g, ge[static_cast<std::size_t>(g)].pins() * scalar_bytes,
                          ge[static_cast<std::size_t>(g)].adj() * scalar_bytes});

  // Locate the peak moment and split its residency into chain and head bytes.
  int64_t best = -1, best_g = 0;
  int64_t chain_sum = 0, head_sum = 0;
  int64_t best_chain = 0, best_head = 0;
  for (int64_t g = 0; g < lay.num_groups; ++g) {
    const auto& e = ge[static_cast<std::size_t>(g)];
    int64_t chain, head;
    if (plan.schedule == "standard") {
      chain_sum += e.chain_pins;
      head_sum += e.head_pins;
      chain = chain_sum + e.chain_adj;
      head = head_sum + e.head_adj;
    } else {
      chain = e.carried_in + e.chain_pins + e.chain_adj;
      head = e.head_pins + e.head_adj;
    }
    if (chain + head > best) {
      best = chain + head;
      best_g = g;
      best_chain = chain;
      best_head = head;
    }
  }
  (void)best_g;
  est.activations = (batch_elems + best_chain) * scalar_bytes;
  est.head_graphs = best_head * scalar_bytes;
  est.peak = est.parameters + est.gradients + est.optimizer_state +
             est.activations + est.head_graphs;
  return est;
}

// Ledger probe for measuring a live run against the estimate. Arm it after
// the network, trainer and optimizer state exist, run the steps of interest,
// then read the high-water mark. Reading an unarmed probe is an error: the
// counters were never aligned with the run.
class MemProbe {
 public:
  void arm() {
    armed_ = true;
    AllocLedger::reset_peak();
  }
  bool armed() const { return armed_; }

 private:
  bool armed_ = false;
};

inline int64_t measure_peak(const MemProbe& probe) {
  if (!probe.armed())
    throw std::logic_error(
        "measure_peak: allocation counters were not armed for this run");
  return AllocLedger::peak_bytes();
}

}  // namespace bicovg
