#pragma once

// Stage-2 fusion: a softmax-weighted combination of cached per-head logits,
// with the weights' pre-activations trained by full-batch Adam against the
// training-split cross entropy. Only one scalar per head is learned; the
// backbone stays frozen. Gradients are closed-form (chain through the fused
// softmax CE and the weight softmax), no tape involved.
//
// Also here: the zero-parameter baseline that just picks the most accurate
// single head (ties resolved toward the deeper one).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "bicovg/diagnostics.hpp"
#include "bicovg/tensor.hpp"
#include "bicovg/training.hpp"

namespace bicovg {

inline std::vector<double> softmax_weights(const std::vector<double>& alpha) {
  if (alpha.empty())
    throw std::invalid_argument("softmax_weights: empty vector");
  double m = alpha[0];
  for (double a : alpha) m = std::max(m, a);
  std::vector<double> w(alpha.size());
  double s = 0;
  for (std::size_t i = 0; i < alpha.size(); ++i) {
    w[i] = std::exp(alpha[i] - m);
    s += w[i];
  }
  for (double& v : w) v /= s;
  return w;
}

inline Tensor4 fused_logits(const LogitCache& cache,
                            const std::vector<double>& weights) {
  if (cache.logits.empty())
    throw std::invalid_argument("fusion: empty logit cache");
  if (weights.size() != cache.logits.size())
    throw std::invalid_argument("fusion: " + std::to_string(weights.size()) +
                                " weights for " +
                                std::to_string(cache.logits.size()) + " heads");
  Tensor4 out = Tensor4::zeros(cache.logits[0].shape());
  double* po = out.data();
  for (std::size_t h = 0; h < weights.size(); ++h) {
    const Tensor4& z = cache.logits[h];
    if (!(z.shape() == out.shape()))
      throw std::invalid_argument("fusion: head " + std::to_string(h) +
                                  " logit shape mismatch");
    for (int64_t i = 0; i < z.elems(); ++i) po[i] += weights[h] * z.flat(i);
  }
  return out;
}

inline void check_cache(const LogitCache& cache) {
  std::size_t H = cache.logits.size();
  if (H == 0) throw std::invalid_argument("fusion: empty logit cache");
  int64_t n = static_cast<int64_t>(cache.labels.size());
  if (n == 0) throw std::invalid_argument("fusion: no samples in cache");
  int64_t K = cache.logits[0].shape().c;
  for (std::size_t h = 0; h < H; ++h) {
    Shape4 want{n, K, 1, 1};
    if (!(cache.logits[h].shape() == want))
      throw std::invalid_argument("fusion: head " + std::to_string(h) +
                                  " logits are " +
                                  cache.logits[h].shape().str() + ", want " +
                                  want.str());
  }
  for (int lbl : cache.labels)
    if (lbl < 0 || lbl >= K)
      throw std::invalid_argument("fusion: label out of range");
}

// Mean fused cross entropy at the given pre-activations, and (optionally)
// its closed-form gradient. The chain is: alpha -> softmax -> weights ->
// fused logits -> softmax CE, so
//   dL/dw_h   = mean_i sum_k (p_ik - 1[k = y_i]) z_hik
//   dL/da_i   = w_i (dL/dw_i - sum_h dL/dw_h w_h)
inline double fused_ce_grad(const LogitCache& cache,
                            const std::vector<double>& alpha,
                            std::vector<double>* grad_alpha) {
  check_cache(cache);
  std::size_t H = cache.logits.size();
  if (alpha.size() != H)
    throw std::invalid_argument("fusion: alpha size mismatch");
  int64_t n = static_cast<int64_t>(cache.labels.size());
  int64_t K = cache.logits[0].shape().c;
  std::vector<double> w = softmax_weights(alpha);
  std::vector<double> gw(H, 0.0);
  std::vector<double> zrow(static_cast<std::size_t>(K));
  double ce = 0;
  for (int64_t i = 0; i < n; ++i) {
    double mx = -1e300;
    for (int64_t k = 0; k < K; ++k) {
      double z = 0;
      for (std::size_t h = 0; h < H; ++h)
        z += w[h] * cache.logits[h].at(i, k, 0, 0);
      zrow[static_cast<std::size_t>(k)] = z;
      mx = std::max(mx, z);
    }
    double lse = 0;
    for (int64_t k = 0; k < K; ++k)
      lse += std::exp(zrow[static_cast<std::size_t>(k)] - mx);
    lse = std::log(lse);
    int lbl = cache.labels[static_cast<std::size_t>(i)];
    ce += mx + lse - zrow[static_cast<std::size_t>(lbl)];
    if (grad_alpha) {
      for (int64_t k = 0; k < K; ++k) {
        double p = std::exp(zrow[static_cast<std::size_t>(k)] - mx - lse);
        double gz = (p - (k == lbl ? 1.0 : 0.0)) / double(n);
        for (std::size_t h = 0; h < H; ++h)
          gw[h] += gz * cache.logits[h].at(i, k, 0, 0);
      }
    }
  }
  ce /= double(n);
  if (grad_alpha) {
    double dot = 0;
    for (std::size_t h = 0; h < H; ++h) dot += gw[h] * w[h];
    grad_alpha->assign(H, 0.0);
    for (std::size_t h = 0; h < H; ++h)
      (*grad_alpha)[h] = w[h] * (gw[h] - dot);
  }
  return ce;
}

struct FusionResult {
  std::vector<double> alpha;
  std::vector<double> weights;
  double train_ce = 0;  // fused cross entropy at the last fit step
};

// Full-batch Adam on the head pre-activations, starting from zero (uniform
// weights). The cache must carry the training split. Deterministic: no
// randomness anywhere in the fit.
inline FusionResult fit_fusion(const LogitCache& cache, int64_t epochs = 500,
                               double lr = 0.01) {
  check_cache(cache);
  std::size_t H = cache.logits.size();
  FusionResult res;
  res.alpha.assign(H, 0.0);
  std::vector<double> m(H, 0.0), v(H, 0.0), ga(H, 0.0);
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  for (int64_t t = 1; t <= epochs; ++t) {
    fused_ce_grad(cache, res.alpha, &ga);
    for (std::size_t h = 0; h < H; ++h) {
      m[h] = b1 * m[h] + (1 - b1) * ga[h];
      v[h] = b2 * v[h] + (1 - b2) * ga[h] * ga[h];
      double mhat = m[h] / (1 - std::pow(b1, double(t)));
      double vhat = v[h] / (1 - std::pow(b2, double(t)));
      res.alpha[h] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
  res.weights = softmax_weights(res.alpha);
  res.train_ce = fused_ce_grad(cache, res.alpha, nullptr);
  return res;
}

inline double logit_top1(const Tensor4& logits, const std::vector<int>& labels) {
  int64_t n = logits.shape().b;
  int64_t correct = 0;
  for (int64_t i = 0; i < n; ++i)
    if (argmax_class(logits, i) == labels[static_cast<std::size_t>(i)])
      ++correct;
  return double(correct) / double(n);
}

inline double logit_ce(const Tensor4& logits, const std::vector<int>& labels) {
  return softmax_cross_entropy(nullptr, Val(logits), labels).t.flat(0);
}

// Index (into the table's head list) of the most accurate head, deeper head
// winning ties.
inline std::size_t best_pred_index(const EvalTable& table) {
  if (table.top1.empty()) throw std::invalid_argument("best_pred: empty table");
  std::size_t best = 0;
  for (std::size_t i = 1; i < table.top1.size(); ++i)
    if (table.top1[i] >= table.top1[best]) best = i;
  return best;
}

}  // namespace bicovg
