#pragma once

// Per-layer feature statistics ("goodness") encoding.
//
// Given a post-activation map f of shape (B, C, H, W), the encoder emits one
// flat vector per sample built from region-mean statistics at one or two
// spatial scales:
//
//   pcs(s): per-channel mean of squares over an s x s region grid   -> C*s^2
//   cc(s):  same statistic on z = Wcc f, a learned channel mix      -> N*s^2
//           with N = C / reduction (z is computed once, reused per scale)
//
// Layout per scale is channel-major row-major (c, i, j); scales are
// concatenated in order [pcs(s1) | cc(s1) | pcs(s2) | cc(s2)].
//
// Ablation switches: include_cc drops the cc blocks, include_multiscale drops
// the second scale. With both off and scale1 == 1 this degenerates to the
// plain per-channel mean-of-squares vector of length C.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "bicovg/ops.hpp"
#include "bicovg/tape.hpp"
#include "bicovg/tensor.hpp"

namespace bicovg {

struct GoodnessSpec {
  int64_t channels = 0;
  int64_t scale1 = 1;
  int64_t scale2 = 2;
  int64_t reduction = 8;
  bool include_cc = true;
  bool include_multiscale = true;

  void validate() const {
    if (channels <= 0)
      throw std::invalid_argument("goodness: channels must be positive, got " +
                                  std::to_string(channels));
    if (scale1 < 1)
      throw std::invalid_argument("goodness: scale1 must be >= 1, got " +
                                  std::to_string(scale1));
    if (include_multiscale && scale2 <= scale1)
      throw std::invalid_argument(
          "goodness: scale2 must exceed scale1, got (" +
          std::to_string(scale1) + ", " + std::to_string(scale2) + ")");
    if (include_cc) {
      if (reduction < 1)
        throw std::invalid_argument("goodness: reduction must be >= 1, got " +
                                    std::to_string(reduction));
      if (channels % reduction != 0)
        throw std::invalid_argument(
            "goodness: reduction " + std::to_string(reduction) +
            " does not divide channels " + std::to_string(channels));
    }
  }

  int64_t proj_channels() const {
    validate();
    return include_cc ? channels / reduction : 0;
  }

  std::vector<int64_t> active_scales() const {
    validate();
    if (include_multiscale) return {scale1, scale2};
    return {scale1};
  }

  int64_t dim() const {
    validate();
    int64_t per_scale_channels = channels + proj_channels();
    int64_t cells = 0;
    for (int64_t s : active_scales()) cells += s * s;
    return per_scale_channels * cells;
  }
};

// Flat statistics vector (B, dim, 1, 1) for a feature map f (B, C, H, W).
// w_cc must be the (1, 1, N, C) mixing matrix when include_cc is set, and is
// ignored otherwise. Differentiable through both f and w_cc.
inline Val encode_goodness(GradientGroup* g, const Val& f,
                           const GoodnessSpec& spec, const Val* w_cc) {
  spec.validate();
  const Shape4 fs = f.t.shape();
  if (fs.c != spec.channels)
    throw std::invalid_argument("encode_goodness: feature map has " +
                                std::to_string(fs.c) + " channels, spec says " +
                                std::to_string(spec.channels));
  Val z;
  if (spec.include_cc) {
    if (w_cc == nullptr)
      throw std::invalid_argument("encode_goodness: include_cc set but no mix matrix");
    const Shape4 ws = w_cc->t.shape();
    if (ws.h != spec.proj_channels() || ws.w != spec.channels)
      throw std::invalid_argument(
          "encode_goodness: mix matrix is " + ws.str() + ", expected (1,1," +
          std::to_string(spec.proj_channels()) + "," +
          std::to_string(spec.channels) + ")");
    z = channel_project(g, f, *w_cc);  // once; reused by every scale
  }
  std::vector<Val> parts;
  for (int64_t s : spec.active_scales()) {
    parts.push_back(region_sq_mean(g, f, s));
    if (spec.include_cc) parts.push_back(region_sq_mean(g, z, s));
  }
  return concat_features(g, parts);
}

// Eval-only convenience on raw tensors.
inline Tensor4 encode_goodness_fwd(const Tensor4& f, const GoodnessSpec& spec,
                                   const Tensor4* w_cc) {
  Val in(f);
  if (spec.include_cc) {
    Val w(*w_cc);
    return encode_goodness(nullptr, in, spec, &w).t;
  }
  return encode_goodness(nullptr, in, spec, nullptr).t;
}

}  // namespace bicovg
