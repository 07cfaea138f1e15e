#pragma once

// Optimization: per-group optimizers, learning-rate schedules, gradient
// clipping, the two step orders, and the epoch loop.
//
// Step orders. Both compute identical updates, bit for bit:
//   standard     forward every group first (all traces resident), then
//                backward + clip + step + release in reverse depth order
//   interleaved  forward, backward, and step one group at a time, so at most
//                one trace is ever alive
// The equivalence holds because each group's forward consumes only pre-step
// values: the carried map is produced before any optimizer step of the round,
// dropout masks come from per-(block, step) streams, and optimizer state is
// per group. The loss sum is accumulated in depth order in both.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "bicovg/config.hpp"
#include "bicovg/data.hpp"
#include "bicovg/model.hpp"

namespace bicovg {

// Cosine decay from lr0 at step 0 toward lr1 at step `total`.
inline double cosine_lr(int64_t step, int64_t total, double lr0, double lr1) {
  if (total <= 0) return lr0;
  double p = std::min(1.0, double(step) / double(total));
  return lr1 + 0.5 * (lr0 - lr1) * (1.0 + std::cos(3.14159265358979323846 * p));
}

// Warmup (flat per epoch, linear across epochs) then cosine on what remains.
inline double schedule_lr(int64_t step, int64_t steps_per_epoch,
                          int64_t total_steps, int64_t warmup_epochs,
                          double lr0, double lr1) {
  int64_t wsteps = warmup_epochs * steps_per_epoch;
  if (step < wsteps) {
    int64_t e = step / steps_per_epoch;
    return lr0 * double(e + 1) / double(warmup_epochs);
  }
  return cosine_lr(step - wsteps, total_steps - wsteps, lr0, lr1);
}

// Scales this group's trainable gradients so their joint norm is at most
// max_norm; returns the pre-clip norm. max_norm <= 0 disables clipping.
inline double clip_gradients(GradientGroup& g, double max_norm) {
  double norm = g.grad_norm();
  if (max_norm <= 0) return norm;
  double coef = max_norm / (norm + 1e-6);
  if (coef < 1.0)
    for (ParamId p = 0; p < g.param_count(); ++p)
      if (g.param_trainable(p)) scale_into(g.mutable_grad(p), coef);
  return norm;
}

class GroupOptimizer {
 public:
  GroupOptimizer(const std::string& kind, double weight_decay, double momentum)
      : kind_(kind), wd_(weight_decay), momentum_(momentum) {
    if (kind != "sgd" && kind != "adam" && kind != "adamw")
      throw std::invalid_argument("optimizer '" + kind + "' not supported");
  }

  const std::string& kind() const { return kind_; }
  int64_t steps_taken() const { return t_; }

  // Optimizer state access for checkpointing: slot 0 = momentum / first
  // moment, slot 1 = second moment (adam family only).
  Tensor4& state(std::size_t slot, std::size_t param) {
    return slot == 0 ? m_.at(param) : v_.at(param);
  }
  bool has_second_moment() const { return kind_ != "sgd"; }
  void set_steps_taken(int64_t t) { t_ = t; }
  void ensure_state(GradientGroup& g) {
    if (!m_.empty()) return;
    for (ParamId p = 0; p < g.param_count(); ++p) {
      m_.push_back(Tensor4::zeros(g.value(p).shape()));
      if (kind_ != "sgd") v_.push_back(Tensor4::zeros(g.value(p).shape()));
    }
  }

  void step(GradientGroup& g, double lr) {
    ensure_state(g);
    ++t_;
    for (ParamId p = 0; p < g.param_count(); ++p) {
      if (!g.param_trainable(p)) continue;
      Tensor4& val = g.mutable_value(p);
      const Tensor4& grad = g.grad(p);
      double* pv = val.data();
      const double* pg = grad.data();
      double* pm = m_[static_cast<std::size_t>(p)].data();
      int64_t n = val.elems();
      if (kind_ == "sgd") {
        for (int64_t i = 0; i < n; ++i) {
          double d = pg[i] + wd_ * pv[i];
          pm[i] = momentum_ * pm[i] + d;
          pv[i] -= lr * pm[i];
        }
      } else {
        double* ps = v_[static_cast<std::size_t>(p)].data();
        double bc1 = 1.0 - std::pow(kBeta1, double(t_));
        double bc2 = 1.0 - std::pow(kBeta2, double(t_));
        for (int64_t i = 0; i < n; ++i) {
          double grad_i = pg[i];
          if (kind_ == "adam" && wd_ != 0.0) grad_i += wd_ * pv[i];
          if (kind_ == "adamw") pv[i] -= lr * wd_ * pv[i];
          pm[i] = kBeta1 * pm[i] + (1.0 - kBeta1) * grad_i;
          ps[i] = kBeta2 * ps[i] + (1.0 - kBeta2) * grad_i * grad_i;
          double mhat = pm[i] / bc1;
          double vhat = ps[i] / bc2;
          pv[i] -= lr * mhat / (std::sqrt(vhat) + kAdamEps);
        }
      }
    }
  }

  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kAdamEps = 1e-8;

 private:
  std::string kind_;
  double wd_, momentum_;
  int64_t t_ = 0;
  std::vector<Tensor4> m_, v_;
};

struct StepStats {
  std::vector<double> losses;  // per group, depth order
  double total = 0;            // depth-order sum, monitoring only
};

class Trainer {
 public:
  Trainer(Network& net, const TrainConfig& tc) : net_(net), tc_(tc) {
    for (int64_t g = 0; g < net.group_count(); ++g)
      opts_.emplace_back(tc.optimizer, tc.weight_decay, tc.momentum);
  }

  int64_t step_count() const { return step_; }
  // Checkpoint resume: realigns the dropout streams with the restored
  // optimizer state (all groups step together, so one counter serves).
  void set_step_count(int64_t s) { step_ = s; }
  GroupOptimizer& optimizer(int64_t gi) {
    return opts_[static_cast<std::size_t>(gi)];
  }

  StepStats train_step(const Tensor4& batch, const std::vector<int>& labels,
                       double lr) {
    StepStats st;
    st.losses.resize(static_cast<std::size_t>(net_.group_count()));
    if (tc_.schedule == "interleaved")
      step_interleaved(batch, labels, lr, st);
    else
      step_standard(batch, labels, lr, st);
    ++step_;
    for (double l : st.losses) st.total += l;
    return st;
  }

 private:
  void step_standard(const Tensor4& batch, const std::vector<int>& labels,
                     double lr, StepStats& st) {
    int64_t G = net_.group_count();
    std::vector<Network::GroupStepOut> outs(static_cast<std::size_t>(G));
    Tensor4 carried = batch;
    for (int64_t gi = 0; gi < G; ++gi) {
      outs[static_cast<std::size_t>(gi)] =
          net_.group_forward_train(gi, carried, labels, step_);
      carried = outs[static_cast<std::size_t>(gi)].carried;
    }
    carried = Tensor4();
    for (int64_t gi = G - 1; gi >= 0; --gi) {
      finish_group(gi, outs[static_cast<std::size_t>(gi)], lr, st);
      outs[static_cast<std::size_t>(gi)] = Network::GroupStepOut{};
    }
  }

  void step_interleaved(const Tensor4& batch, const std::vector<int>& labels,
                        double lr, StepStats& st) {
    Tensor4 carried = batch;
    for (int64_t gi = 0; gi < net_.group_count(); ++gi) {
      auto out = net_.group_forward_train(gi, carried, labels, step_);
      carried = out.carried;
      finish_group(gi, out, lr, st);
    }
  }

  void finish_group(int64_t gi, Network::GroupStepOut& out, double lr,
                    StepStats& st) {
    double l = out.loss.t.flat(0);
    int64_t exit = net_.layout().group_exit[static_cast<std::size_t>(gi)];
    if (!std::isfinite(l))
      throw std::runtime_error(
          "non-finite loss in group " + std::to_string(gi) + " (exit block " +
          std::to_string(exit) + ") at step " + std::to_string(step_));
    GradientGroup& g = net_.group(gi);
    g.zero_grads();
    g.backward(out.loss);
    double norm = clip_gradients(g, tc_.clip_norm);
    if (!std::isfinite(norm))
      throw std::runtime_error(
          "non-finite gradient in group " + std::to_string(gi) +
          " (exit block " + std::to_string(exit) + ") at step " +
          std::to_string(step_));
    opts_[static_cast<std::size_t>(gi)].step(g, lr);
    st.losses[static_cast<std::size_t>(gi)] = l;
  }

  Network& net_;
  TrainConfig tc_;
  std::vector<GroupOptimizer> opts_;
  int64_t step_ = 0;
};

// ---- evaluation ----

struct EvalTable {
  std::vector<int64_t> blocks;  // head positions, depth order
  std::vector<double> loss;     // mean cross entropy per head
  std::vector<double> top1;     // fraction correct per head
};

// Cached eval-mode logits for every head over a whole dataset; feeds both the
// metric table and the fusion stage.
struct LogitCache {
  std::vector<int64_t> blocks;
  std::vector<Tensor4> logits;  // per head: (N, K, 1, 1)
  std::vector<int> labels;
};

inline LogitCache collect_logits(Network& net, const Dataset& d,
                                 int64_t batch_size) {
  LogitCache cache;
  cache.blocks = net.head_blocks();
  cache.labels = d.labels;
  int64_t K = net.arch().classes;
  for (std::size_t h = 0; h < cache.blocks.size(); ++h)
    cache.logits.push_back(Tensor4::zeros({d.n, K, 1, 1}));
  for (int64_t start = 0; start < d.n; start += batch_size) {
    int64_t stop = std::min(d.n, start + batch_size);
    std::vector<int64_t> idx(static_cast<std::size_t>(stop - start));
    std::iota(idx.begin(), idx.end(), start);
    Tensor4 batch = batch_images(d, idx);
    auto outs = net.eval_logits(batch);
    for (std::size_t h = 0; h < outs.size(); ++h) {
      const Tensor4& src = outs[h].second;
      Tensor4& dst = cache.logits[h];
      for (int64_t b = 0; b < stop - start; ++b)
        for (int64_t k = 0; k < K; ++k)
          dst.set(start + b, k, 0, 0, src.at(b, k, 0, 0));
    }
  }
  return cache;
}

inline int argmax_class(const Tensor4& logits, int64_t row) {
  int64_t K = logits.shape().c;
  int best = 0;
  double bv = logits.at(row, 0, 0, 0);
  for (int64_t k = 1; k < K; ++k) {
    double v = logits.at(row, k, 0, 0);
    if (v > bv) {
      bv = v;
      best = static_cast<int>(k);
    }
  }
  return best;
}

inline EvalTable table_from_cache(const LogitCache& cache) {
  EvalTable t;
  t.blocks = cache.blocks;
  int64_t n = static_cast<int64_t>(cache.labels.size());
  for (std::size_t h = 0; h < cache.blocks.size(); ++h) {
    Val ce = softmax_cross_entropy(nullptr, Val(cache.logits[h]), cache.labels);
    int64_t correct = 0;
    for (int64_t i = 0; i < n; ++i)
      if (argmax_class(cache.logits[h], i) == cache.labels[static_cast<std::size_t>(i)])
        ++correct;
    t.loss.push_back(ce.t.flat(0));
    t.top1.push_back(double(correct) / double(n));
  }
  return t;
}

inline EvalTable evaluate(Network& net, const Dataset& d, int64_t batch_size) {
  return table_from_cache(collect_logits(net, d, batch_size));
}

// ---- epoch loop ----

struct RunResult {
  EvalTable final_train;
  EvalTable final_test;
  std::vector<EvalTable> per_epoch_test;
};

// Full training run. Writes one CSV row per (epoch, head) on the test split
// when `csv` is given; progress lines go to `log`. The trainer is passed in
// so the caller can checkpoint its optimizer state afterwards.
inline RunResult train_model(Network& net, const Config& cfg,
                             const Dataset& train, const Dataset& test,
                             Trainer& trainer, std::ostream* csv = nullptr,
                             std::ostream* log = nullptr) {
  const TrainConfig& tc = cfg.train;
  int64_t steps_per_epoch = train.n / tc.batch_size;
  if (steps_per_epoch < 1)
    throw std::invalid_argument("train set smaller than one batch");
  int64_t total_steps = steps_per_epoch * tc.epochs;
  if (csv) *csv << "epoch,layer,loss,top1\n";
  RunResult res;
  std::vector<int64_t> order(static_cast<std::size_t>(train.n));
  std::iota(order.begin(), order.end(), 0);
  for (int64_t epoch = 0; epoch < tc.epochs; ++epoch) {
    auto shuffle_rng = stream_rng(tc.seed, "data", epoch);
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    auto aug_rng = stream_rng(tc.seed, "augment", epoch);
    double loss_sum = 0;
    for (int64_t b = 0; b < steps_per_epoch; ++b) {
      std::vector<int64_t> idx(order.begin() + b * tc.batch_size,
                               order.begin() + (b + 1) * tc.batch_size);
      Tensor4 batch = batch_images(train, idx);
      if (tc.augment != "none") {
        augment_crop_flip(batch, 4, aug_rng);
        if (tc.augment == "crop-flip-jitter") augment_jitter(batch, aug_rng);
      }
      std::vector<int> labels = batch_labels(train, idx);
      double lr = schedule_lr(trainer.step_count(), steps_per_epoch,
                              total_steps, tc.warmup_epochs, tc.lr, tc.lr_end);
      StepStats st;
      try {
        st = trainer.train_step(batch, labels, lr);
      } catch (const std::runtime_error& e) {
        throw std::runtime_error("epoch " + std::to_string(epoch + 1) +
                                 " batch " + std::to_string(b) + ": " +
                                 e.what());
      }
      loss_sum += st.total;
    }
    EvalTable et = evaluate(net, test, tc.batch_size);
    res.per_epoch_test.push_back(et);
    if (csv)
      for (std::size_t h = 0; h < et.blocks.size(); ++h)
        *csv << (epoch + 1) << "," << et.blocks[h] << "," << et.loss[h] << ","
             << et.top1[h] << "\n";
    if (log) {
      double best = 0;
      for (double a : et.top1) best = std::max(best, a);
      *log << "epoch " << (epoch + 1) << "/" << tc.epochs << " train-loss "
           << (loss_sum / double(steps_per_epoch)) << " best-head-top1 "
           << best << "\n";
    }
  }
  res.final_train = evaluate(net, train, tc.batch_size);
  res.final_test = evaluate(net, test, tc.batch_size);
  return res;
}

inline RunResult train_model(Network& net, const Config& cfg,
                             const Dataset& train, const Dataset& test,
                             std::ostream* csv = nullptr,
                             std::ostream* log = nullptr) {
  Trainer trainer(net, cfg.train);
  return train_model(net, cfg, train, test, trainer, csv, log);
}

}  // namespace bicovg
