#pragma once

// Convolutional block pipeline and the channel feedback adapter.
//
// One block computes
//     f = relu(conv3x3(x))                       the statistics tap point
//     h = norm(dropout(pool(f)))                 the carry to the next block
// where pool is an optional 2x2 rms pool, dropout is inverted scaling with an
// externally supplied mask, and norm is either per-sample rms normalization or
// batch normalization without affine parameters.
//
// The feedback adapter perturbs a carried map per channel:
//     h' = h + broadcast(W2 relu(W1 gap(h)))
// W2 starts at zero, so a freshly built adapter is an exact identity; the
// adapter's parameters belong to the group consuming h, not the one that
// produced it.

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>

#include "bicovg/goodness.hpp"
#include "bicovg/ops.hpp"
#include "bicovg/rng.hpp"
#include "bicovg/tape.hpp"
#include "bicovg/tensor.hpp"

namespace bicovg {

enum class NormKind { rms, batch };

inline NormKind norm_kind_from_string(const std::string& s) {
  if (s == "rmsnorm") return NormKind::rms;
  if (s == "batchnorm") return NormKind::batch;
  throw std::invalid_argument("unknown norm '" + s +
                              "' (expected rmsnorm or batchnorm)");
}

inline std::string to_string(NormKind k) {
  return k == NormKind::rms ? "rmsnorm" : "batchnorm";
}

struct BlockShape {
  int64_t in_channels = 0;
  int64_t out_channels = 0;
  bool pool = false;
  double dropout = 0.0;
  NormKind norm = NormKind::rms;
  GoodnessSpec goodness;  // goodness.channels must equal out_channels

  void validate() const {
    if (in_channels <= 0 || out_channels <= 0)
      throw std::invalid_argument("block: channel counts must be positive");
    if (dropout < 0.0 || dropout >= 1.0)
      throw std::invalid_argument("block: dropout must lie in [0, 1), got " +
                                  std::to_string(dropout));
    if (goodness.channels != out_channels)
      throw std::invalid_argument("block: goodness spec is for " +
                                  std::to_string(goodness.channels) +
                                  " channels, block emits " +
                                  std::to_string(out_channels));
    goodness.validate();
  }
};

// Running batch-norm estimates, shape (1, C, 1, 1) each. Plain buffers: they
// are updated in place during training forward passes and read in eval.
struct BatchNormState {
  Tensor4 mean, var;
  static BatchNormState fresh(int64_t channels) {
    return {Tensor4::zeros({1, channels, 1, 1}),
            Tensor4::full({1, channels, 1, 1}, 1.0)};
  }
};

inline Val conv_relu(GradientGroup* g, const Val& x, const Val& w,
                     const Val& b) {
  return relu(g, conv3x3(g, x, w, b));
}

// Everything after the statistics tap: pool, dropout, norm. The dropout mask
// must already match the post-pool shape; pass nullptr to skip dropout (eval,
// or a block configured without it).
inline Val pipeline_tail(GradientGroup* g, const Val& f, const BlockShape& bs,
                         BatchNormState* bn, const Tensor4* dropout_mask,
                         bool training) {
  Val h = bs.pool ? rms_pool2x2(g, f) : f;
  if (training && bs.dropout > 0.0) {
    if (dropout_mask == nullptr)
      throw std::logic_error("pipeline_tail: training with dropout but no mask");
    h = dropout_apply(g, h, *dropout_mask);
  }
  if (bs.norm == NormKind::rms) return rms_norm(g, h);
  if (bn == nullptr)
    throw std::logic_error("pipeline_tail: batch norm block without state");
  return batch_norm(g, h, bn->mean, bn->var, training);
}

inline Val apply_adapter(GradientGroup* g, const Val& h, const Val& w1,
                         const Val& w2) {
  Val pooled = global_avg_pool(g, h);
  Val mid = relu(g, linear(g, pooled, w1));
  Val delta = linear(g, mid, w2);
  return broadcast_channel_add(g, h, delta);
}

// ---- parameter initializers ----
// All fan-in uniform bounds follow 1/sqrt(fan_in); the adapter's second matrix
// starts at zero so the adapter begins as an identity.

inline Tensor4 conv_weight_init(int64_t cout, int64_t cin,
                                std::mt19937_64& rng) {
  double k = 1.0 / std::sqrt(static_cast<double>(cin) * 9.0);
  return uniform_tensor({cout, cin, 3, 3}, -k, k, rng);
}

inline Tensor4 conv_bias_init(int64_t cout, int64_t cin, std::mt19937_64& rng) {
  double k = 1.0 / std::sqrt(static_cast<double>(cin) * 9.0);
  return uniform_tensor({1, cout, 1, 1}, -k, k, rng);
}

inline Tensor4 mix_init(int64_t n, int64_t c, std::mt19937_64& rng) {
  double k = 1.0 / std::sqrt(static_cast<double>(c));
  return uniform_tensor({1, 1, n, c}, -k, k, rng);
}

inline Tensor4 readout_weight_init(int64_t classes, int64_t dim,
                                   std::mt19937_64& rng) {
  double k = 1.0 / std::sqrt(static_cast<double>(dim));
  return uniform_tensor({1, 1, classes, dim}, -k, k, rng);
}

inline Tensor4 readout_bias_init(int64_t classes, int64_t dim,
                                 std::mt19937_64& rng) {
  double k = 1.0 / std::sqrt(static_cast<double>(dim));
  return uniform_tensor({1, 1, classes, 1}, -k, k, rng);
}

inline Tensor4 adapter_w1_init(int64_t hidden, int64_t c,
                               std::mt19937_64& rng) {
  double k = 1.0 / std::sqrt(static_cast<double>(c));
  return uniform_tensor({1, 1, hidden, c}, -k, k, rng);
}

inline Tensor4 adapter_w2_init(int64_t c, int64_t hidden) {
  return Tensor4::zeros({1, 1, c, hidden});
}

}  // namespace bicovg
