#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "slab/data.hpp"
#include "slab/model.hpp"

// Training protocol: decoupled-weight-decay adaptive moments, cosine learning
// rate with linear warmup, per-optimizer-step advancement of the progressive
// norm schedule, and a final frozen-parameter pass that refreshes only the
// BatchNorm running statistics.

namespace slab {

struct TrainConfig {
  int epochs = 30;
  int batch_size = 128;
  double base_lr = 1.25e-4;  // 1e-3 at batch 1024, scaled linearly
  int warmup_epochs = 2;
  double weight_decay = 0.05;
  double droppath_rate = 0.0;
  long prepbn_decay_steps = 0;  // 0: 80% of total optimizer steps
  int recalib_epochs = 2;
  uint64_t seed = 42;
  double label_smoothing = 0.1;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;

  void validate() const {
    if (epochs < 0 || batch_size < 2) throw ConfigError("train: epochs >= 0, batch_size >= 2");
    if (epochs > 0 && warmup_epochs >= epochs)
      throw ConfigError("train: warmup_epochs must be < epochs");
    if (base_lr < 0 || weight_decay < 0 || recalib_epochs < 0 || warmup_epochs < 0)
      throw ConfigError("train: rates and epoch counts must be non-negative");
    if (droppath_rate < 0.0 || droppath_rate >= 1.0)
      throw ConfigError("train: droppath_rate must be in [0,1)");
    if (label_smoothing < 0.0 || label_smoothing >= 1.0)
      throw ConfigError("train: label_smoothing must be in [0,1)");
  }
};

struct LrSchedule {
  long warmup_steps = 0;
  long total_steps = 1;
  double base_lr = 0;
};

// Linear ramp 0 -> base_lr over the warmup, then half-cosine to 0 at the
// final step.
inline double lr_at(long step, const LrSchedule& s) {
  if (step < 0) throw ConfigError("lr_at: negative step");
  if (s.warmup_steps > 0 && step < s.warmup_steps)
    return s.base_lr * double(step) / double(s.warmup_steps);
  long span = s.total_steps - s.warmup_steps;
  if (span <= 0) return s.base_lr;
  double t = double(std::min(step, s.total_steps) - s.warmup_steps) / double(span);
  return s.base_lr * 0.5 * (1.0 + std::cos(M_PI * t));
}

// ---------------------------------------------------------------------------
// optimizer

template <typename T>
class AdamW {
 public:
  AdamW(double beta1, double beta2, double eps, double weight_decay)
      : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

  // One update over the parameter list. Parameters without a gradient see a
  // zero gradient (their moments decay; decoupled decay still applies).
  void step(const std::vector<Tensor<T>*>& params, double lr) {
    if (slots_.empty()) {
      slots_.resize(params.size());
      for (size_t i = 0; i < params.size(); ++i) {
        slots_[i].m.assign(params[i]->size(), T(0));
        slots_[i].v.assign(params[i]->size(), T(0));
      }
    }
    if (slots_.size() != params.size())
      throw ShapeMismatch("optimizer: parameter list changed size");
    ++t_;
    double bc1 = 1.0 - std::pow(beta1_, double(t_));
    double bc2 = 1.0 - std::pow(beta2_, double(t_));
    for (size_t i = 0; i < params.size(); ++i) {
      Tensor<T>& p = *params[i];
      auto& slot = slots_[i];
      if (slot.m.size() != p.size())
        throw ShapeMismatch("optimizer: moment state does not match parameter " +
                            std::to_string(i));
      const std::vector<T>& g = p.grad_ref();
      bool has_grad = !g.empty();
      auto& value = p.mutable_value();
      for (size_t j = 0; j < value.size(); ++j) {
        double gj = has_grad ? double(g[j]) : 0.0;
        double m = beta1_ * double(slot.m[j]) + (1.0 - beta1_) * gj;
        double v = beta2_ * double(slot.v[j]) + (1.0 - beta2_) * gj * gj;
        slot.m[j] = T(m);
        slot.v[j] = T(v);
        double update = (m / bc1) / (std::sqrt(v / bc2) + eps_);
        double theta = double(value[j]) * (1.0 - lr * weight_decay_) - lr * update;
        value[j] = T(theta);
      }
    }
  }

  long steps() const { return t_; }

 private:
  struct Slot {
    std::vector<T> m, v;
  };
  double beta1_, beta2_, eps_, weight_decay_;
  std::vector<Slot> slots_;
  long t_ = 0;
};

// ---------------------------------------------------------------------------
// loss and evaluation

template <typename T>
Tensor<T> label_smoothed_ce(const Tensor<T>& logits, const std::vector<int>& labels,
                            double smoothing) {
  int b = logits.dim(0), k = logits.dim(1);
  if (int(labels.size()) != b)
    throw ShapeMismatch("loss: " + std::to_string(labels.size()) + " labels for batch " +
                        std::to_string(b));
  Tensor<T> target = Tensor<T>::full({b, k}, T(smoothing / k));
  for (int i = 0; i < b; ++i)
    target.mutable_value()[size_t(i) * k + labels[i]] += T(1.0 - smoothing);
  return scale(sum(hadamard(log_softmax_lastdim(logits), target)), T(-1.0 / b));
}

template <typename T>
Tensor<T> batch_images(const Dataset& data, const std::vector<int>& idx) {
  Tensor<T> x = Tensor<T>::zeros({int(idx.size()), data.sample_width});
  auto& v = x.mutable_value();
  for (size_t i = 0; i < idx.size(); ++i)
    for (int j = 0; j < data.sample_width; ++j)
      v[i * size_t(data.sample_width) + j] = T(data.samples[idx[i]][j]);
  return x;
}

struct EvalResult {
  double loss = 0;
  double accuracy = 0;
};

template <typename T>
EvalResult evaluate(Model<T>& m, const Dataset& data, const std::vector<int>& idx,
                    double label_smoothing, int batch_size = 256) {
  NoGradGuard ng;
  std::mt19937_64 rng(0);
  double loss_sum = 0;
  long correct = 0, seen = 0;
  for (size_t at = 0; at < idx.size(); at += size_t(batch_size)) {
    std::vector<int> chunk(idx.begin() + at,
                           idx.begin() + std::min(idx.size(), at + size_t(batch_size)));
    auto x = batch_images<T>(data, chunk);
    auto logits = model_forward(m, x, Mode::eval, rng);
    std::vector<int> labels;
    for (int i : chunk) labels.push_back(data.labels[i]);
    loss_sum += double(label_smoothed_ce(logits, labels, label_smoothing).item()) * chunk.size();
    int k = logits.dim(1);
    for (size_t i = 0; i < chunk.size(); ++i) {
      const T* row = logits.data() + i * size_t(k);
      int arg = 0;
      for (int j = 1; j < k; ++j)
        if (row[j] > row[arg]) arg = j;
      correct += arg == labels[i];
      ++seen;
    }
  }
  return {seen ? loss_sum / double(seen) : 0.0, seen ? double(correct) / double(seen) : 0.0};
}

// ---------------------------------------------------------------------------
// statistic recalibration

// Frozen-parameter pass: forwards in recalib mode so BatchNorm layers refresh
// running statistics from batch moments while droppath stays inactive.
// Learnable tensors are untouched bit for bit.
template <typename T>
void recalibrate_stats(Model<T>& m, const Dataset& data, int passes, int batch_size = 128) {
  if (passes < 0) throw ConfigError("recalibrate_stats: negative pass count");
  if (passes == 0) return;
  if (data.train_idx.empty()) throw EmptyStream("recalibrate_stats: empty data stream");
  if (m.has_prepbn() && m.gamma_now() > 0.0)
    throw NotConverged("recalibrate_stats: gamma is " + std::to_string(m.gamma_now()) +
                       ", transition not complete");
  NoGradGuard ng;
  std::mt19937_64 rng(0);
  for (int pass = 0; pass < passes; ++pass) {
    for (size_t at = 0; at + 1 < data.train_idx.size(); at += size_t(batch_size)) {
      std::vector<int> chunk(
          data.train_idx.begin() + at,
          data.train_idx.begin() + std::min(data.train_idx.size(), at + size_t(batch_size)));
      if (chunk.size() < 2) break;  // batch statistics need at least two rows
      auto x = batch_images<T>(data, chunk);
      (void)model_forward_features(m, x, Mode::recalib, rng);
    }
  }
}

// ---------------------------------------------------------------------------
// training loop

struct EpochRecord {
  long step = 0;  // optimizer steps completed
  int epoch = 0;
  double lr = 0;
  double gamma = 0;
  double loss = 0;  // mean train loss over the epoch
  double acc = 0;   // held-out accuracy
};

struct TrainedArtifacts {
  std::vector<EpochRecord> metrics;
  std::vector<std::pair<long, double>> gamma_trace;  // (step, gamma used)
  long decay_steps = 0;                              // resolved T
  double final_test_accuracy = 0;
  double final_train_loss = 0;
  bool recalibrated = false;
};

namespace detail {

template <typename T>
struct ParamSnapshot {
  std::vector<std::vector<T>> values;
  std::vector<std::pair<long, long>> schedule;  // (total, current) per block-norm

  static ParamSnapshot capture(Model<T>& m) {
    ParamSnapshot s;
    for (auto& nt : m.named_tensors()) s.values.push_back(nt.tensor->value());
    for (auto& b : m.blocks)
      for (auto* n : {&b.norm1, &b.norm2})
        if (n->kind == NormKind::prepbn && !n->fused)
          s.schedule.emplace_back(n->pre.total_steps, n->pre.current_step);
    return s;
  }

  void restore(Model<T>& m) const {
    auto named = m.named_tensors();
    for (size_t i = 0; i < named.size(); ++i) named[i].tensor->mutable_value() = values[i];
    size_t si = 0;
    for (auto& b : m.blocks)
      for (auto* n : {&b.norm1, &b.norm2})
        if (n->kind == NormKind::prepbn && !n->fused) {
          n->pre.total_steps = schedule[si].first;
          n->pre.current_step = schedule[si].second;
          ++si;
        }
  }
};

}  // namespace detail

// Runs warmup+cosine training with the progressive-norm schedule advanced
// once per optimizer step, then the statistic recalibration phase. Fully
// deterministic given cfg.seed. A non-finite loss restores the last
// epoch-end snapshot into `m` and raises DivergedLoss.
template <typename T>
TrainedArtifacts train(Model<T>& m, const Dataset& data, const TrainConfig& cfg) {
  cfg.validate();
  TrainedArtifacts art;
  if (cfg.epochs == 0) return art;
  if (data.train_idx.size() < size_t(cfg.batch_size))
    throw ConfigError("train: dataset smaller than one batch");

  long steps_per_epoch = long(data.train_idx.size()) / cfg.batch_size;
  long total_steps = steps_per_epoch * cfg.epochs;
  LrSchedule lrs{steps_per_epoch * cfg.warmup_epochs, total_steps, cfg.base_lr};
  long decay_steps =
      cfg.prepbn_decay_steps > 0 ? cfg.prepbn_decay_steps : std::max(1L, total_steps * 8 / 10);
  art.decay_steps = decay_steps;

  m.cfg.droppath_rate = cfg.droppath_rate;
  m.cfg.prepbn_total_steps = decay_steps;
  for (auto& b : m.blocks)
    for (auto* n : {&b.norm1, &b.norm2})
      if (n->kind == NormKind::prepbn && !n->fused) {
        n->pre.total_steps = decay_steps;
        n->pre.current_step = 0;
      }

  std::vector<Tensor<T>*> learnable;
  for (auto& nt : m.named_tensors())
    if (nt.learnable) learnable.push_back(nt.tensor);

  AdamW<T> opt(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
  std::mt19937_64 rng(cfg.seed);
  auto snapshot = detail::ParamSnapshot<T>::capture(m);

  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<int> order = data.train_idx;
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0;
    double last_lr = 0;
    for (long bi = 0; bi < steps_per_epoch; ++bi) {
      std::vector<int> chunk(order.begin() + bi * cfg.batch_size,
                             order.begin() + (bi + 1) * cfg.batch_size);
      auto x = batch_images<T>(data, chunk);
      std::vector<int> labels;
      for (int i : chunk) labels.push_back(data.labels[i]);

      auto logits = model_forward(m, x, Mode::train, rng);
      auto loss = label_smoothed_ce(logits, labels, cfg.label_smoothing);
      double loss_val = double(loss.item());
      if (!std::isfinite(loss_val)) {
        snapshot.restore(m);
        throw DivergedLoss("train: non-finite loss at step " + std::to_string(step) +
                           "; restored last epoch-end parameters");
      }
      loss_sum += loss_val;

      for (auto* p : learnable) p->zero_grad();
      backward(loss);
      double lr = lr_at(step, lrs);
      last_lr = lr;
      art.gamma_trace.emplace_back(step, m.gamma_now());
      opt.step(learnable, lr);
      for (auto* p : learnable) p->zero_grad();
      m.on_optimizer_step();
      ++step;
    }
    EvalResult ev = evaluate(m, data, data.test_idx, cfg.label_smoothing);
    art.metrics.push_back({step, epoch, last_lr, m.gamma_now(), loss_sum / double(steps_per_epoch),
                           ev.accuracy});
    art.final_train_loss = loss_sum / double(steps_per_epoch);
    snapshot = detail::ParamSnapshot<T>::capture(m);
  }

  if (cfg.recalib_epochs > 0 && m.has_batch_stats() &&
      (!m.has_prepbn() || m.gamma_now() == 0.0)) {
    recalibrate_stats(m, data, cfg.recalib_epochs, cfg.batch_size);
    art.recalibrated = true;
  }
  art.final_test_accuracy = evaluate(m, data, data.test_idx, cfg.label_smoothing).accuracy;
  return art;
}

}  // namespace slab
