#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fnreg/datasets.hpp"
#include "fnreg/error.hpp"
#include "fnreg/network.hpp"
#include "fnreg/regularizers.hpp"
#include "fnreg/rng.hpp"
#include "fnreg/slice_sampler.hpp"
#include "fnreg/tensor.hpp"

namespace fnreg {

struct LrSchedule {
  enum class Kind { Constant, Inverse };
  Kind kind = Kind::Constant;
  double base = 0.01;
  /// Decay rate of the inverse schedule base / (1 + kappa * t).
  double kappa = 0.0;
};

/// Step size for update t (t >= 1 counts parameter updates).
inline double lr_at(const LrSchedule& schedule, std::size_t t) {
  if (t == 0) throw ValueError("lr_at: t must be >= 1");
  if (schedule.kind == LrSchedule::Kind::Constant) return schedule.base;
  return schedule.base / (1.0 + schedule.kappa * static_cast<double>(t));
}

struct TrainConfig {
  std::size_t batch_size = 100;
  std::size_t epochs = 1;
  LrSchedule lr;
  double momentum = 0.9;
  RegularizerSpec reg;
  std::uint64_t seed = 0;
  /// Batch size used for evaluation only.
  std::size_t eval_batch = 500;

  void validate() const {
    if (batch_size < 2) throw ValueError("batch_size must be at least 2");
    if (epochs == 0) throw ValueError("epochs must be positive");
    if (!(lr.base > 0.0) || !std::isfinite(lr.base)) throw ValueError("learning rate must be positive");
    if (!(lr.kappa >= 0.0)) throw ValueError("lr kappa must be nonnegative");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ValueError("momentum must be in [0, 1)");
    if (eval_batch == 0) throw ValueError("eval_batch must be positive");
    reg.validate();
  }
};

struct BatchSplit {
  std::size_t train = 0;
  std::size_t reg = 0;
};

/// Splits a batch of `batch_size` between n labeled and m regularization
/// samples: B_tr = round(B * n / (n + m)), or round(B / (1 + N)) for an
/// explicit 1:N ratio, clamped to [1, B - 1]. With m = 0 everything is labeled.
inline BatchSplit batch_split(std::size_t batch_size, std::size_t n, std::size_t m,
                              std::optional<std::size_t> ratio = std::nullopt) {
  if (batch_size < 2) throw ValueError("batch_split: batch size must be at least 2");
  if (n == 0) throw ValueError("batch_split: need at least one labeled sample");
  if (m == 0) return {batch_size, 0};
  const double b = static_cast<double>(batch_size);
  const double raw = ratio ? b / (1.0 + static_cast<double>(*ratio))
                           : b * static_cast<double>(n) / static_cast<double>(n + m);
  const auto train = std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(raw)), 1, batch_size - 1);
  return {train, batch_size - train};
}

/// Plain or heavy-ball SGD: v <- mu * v + g, W <- W - lr_t * v.
template <typename T>
class Sgd {
 public:
  Sgd(LrSchedule schedule, double momentum) : schedule_(schedule), momentum_(momentum) {}

  void step(std::span<const ParamPtr<T>> params, std::span<const Tensor<T>> grads) {
    if (params.size() != grads.size()) throw ShapeError("Sgd::step: gradient count does not match parameters");
    if (velocity_.empty() && momentum_ > 0.0) {
      for (const auto& p : params) velocity_.emplace_back(p->value.shape());
    }
    ++updates_;
    last_lr_ = lr_at(schedule_, updates_);
    const T lr = static_cast<T>(last_lr_);
    const T mu = static_cast<T>(momentum_);
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto& w = params[k]->value;
      const auto& g = grads[k];
      if (momentum_ > 0.0) {
        auto& v = velocity_[k];
        for (std::size_t i = 0; i < w.size(); ++i) {
          v[i] = mu * v[i] + g[i];
          w[i] -= lr * v[i];
        }
      } else {
        for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * g[i];
      }
    }
  }

  std::size_t updates() const noexcept { return updates_; }
  double last_lr() const noexcept { return last_lr_; }
  const LrSchedule& schedule() const noexcept { return schedule_; }

 private:
  LrSchedule schedule_;
  double momentum_;
  std::vector<Tensor<T>> velocity_;
  std::size_t updates_ = 0;
  double last_lr_ = 0.0;
};

/// Supplier of regularization inputs for the function-norm step.
template <typename T>
class RegSource {
 public:
  virtual ~RegSource() = default;
  virtual void begin_epoch() {}
  virtual Tensor<T> next(std::size_t count) = 0;
};

/// Draws uniformly, with replacement, from an unlabeled pool.
template <typename T>
class PoolSource final : public RegSource<T> {
 public:
  PoolSource(const UnlabeledPool<T>& pool, std::uint64_t seed) : pool_(pool), rng_(seed) {
    if (pool.empty()) throw ValueError("PoolSource: empty regularization pool");
  }

  Tensor<T> next(std::size_t count) override {
    std::vector<std::size_t> rows(count);
    for (auto& r : rows) r = rng_.index(pool_.size());
    return pool_.images.gather(rows);
  }

 private:
  const UnlabeledPool<T>& pool_;
  Rng rng_;
};

/// Slice-samples from a density proportional to ||f_W(x)||^2 under the
/// current weights. The chain starts from a random pool image, persists
/// across batches and is restarted at the beginning of every epoch.
template <typename T>
class SliceSource final : public RegSource<T> {
 public:
  SliceSource(const Network<T>& net_reg, SliceConfig config, const UnlabeledPool<T>& pool)
      : shape_(net_reg.input_shape()),
        density_(density_from_network(net_reg)),
        chain_(std::move(config), [&pool](Rng& rng) {
          const auto x = pool.images.sample(rng.index(pool.size()));
          return std::vector<T>(x.begin(), x.end());
        }) {
    if (pool.empty()) throw ValueError("SliceSource: empty pool for chain initialization");
  }

  void begin_epoch() override {
    if (used_) chain_.restart();
    used_ = true;
  }

  Tensor<T> next(std::size_t count) override {
    used_ = true;
    return sample_batch(density_, chain_, count, shape_);
  }

  const SliceChain<T>& chain() const noexcept { return chain_; }

 private:
  Shape shape_;
  Density<T> density_;
  SliceChain<T> chain_;
  bool used_ = false;
};

struct EvalResult {
  double top1 = 0.0;
  double top5 = 0.0;
  double loss = 0.0;
};

/// Test-mode evaluation over the whole set in batches of `batch_size`.
template <typename T>
EvalResult evaluate(const Network<T>& net, const LabeledDataset<T>& data, std::size_t batch_size) {
  if (data.size() == 0) throw ValueError("evaluate: empty test set");
  if (batch_size == 0) throw ValueError("evaluate: batch size must be positive");
  const Network<T> logits_net = net.has_loss() ? net.strip_loss() : net;
  const std::size_t classes = shape_size(logits_net.output_shape());
  Rng unused(0);
  EvalResult r;
  std::vector<std::size_t> rows;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t count = std::min(batch_size, data.size() - start);
    rows.resize(count);
    std::iota(rows.begin(), rows.end(), start);
    const auto acts = logits_net.forward(data.images.gather(rows), Mode::Test, unused);
    const auto& logits = acts.output();
    const std::span<const int> labels(data.labels.data() + start, count);
    const double w = static_cast<double>(count);
    r.top1 += w * topk_error(logits, labels, 1);
    r.top5 += w * topk_error(logits, labels, std::min<std::size_t>(5, classes));
    r.loss += w * softmax_xent(logits, labels).loss;
  }
  const double n = static_cast<double>(data.size());
  r.top1 /= n;
  r.top5 /= n;
  r.loss /= n;
  return r;
}

struct EpochReport {
  std::size_t epoch = 0;
  /// Mean supervised loss over the epoch's batches.
  double train_loss = 0.0;
  /// Mean function-norm penalty estimate (0 without a function-norm step).
  double penalty = 0.0;
  /// train_loss + lambda * penalty.
  double objective = 0.0;
  double train_top1 = 0.0;
  /// Test errors; NaN when no test set was given.
  double top1 = std::numeric_limits<double>::quiet_NaN();
  double top5 = std::numeric_limits<double>::quiet_NaN();
  double test_loss = std::numeric_limits<double>::quiet_NaN();
  /// Mean over batches of the norm of the applied gradient.
  double grad_norm = 0.0;
  /// Mean over batches of its square.
  double grad_norm_sq = 0.0;
  /// Training wall time of this epoch and cumulative over the run.
  double seconds = 0.0;
  double elapsed = 0.0;
  std::size_t updates = 0;
};

/// Runs the epoch procedure on a training network that ends in SoftmaxXEnt.
/// Each batch takes B_tr labeled samples through the training network and,
/// when the function norm is active, B_reg regularization inputs through the
/// loss-stripped network seeded with 2f/B_reg; the loss, penalty and weight
/// decay gradients are summed into one SGD update.
template <typename T>
class Trainer {
 public:
  /// `reg` may be null for the weight-decay methods; `pool_size` is the m of
  /// the batch split.
  Trainer(Network<T> net_tr, TrainConfig config, RegSource<T>* reg = nullptr, std::size_t pool_size = 0)
      : net_tr_(std::move(net_tr)),
        net_reg_(net_tr_.strip_loss()),
        config_(std::move(config)),
        reg_(reg),
        pool_size_(pool_size),
        sgd_(config_.lr, config_.momentum) {
    config_.validate();
    Rng root(config_.seed);
    shuffle_rng_ = root.fork();
    dropout_rng_ = root.fork();
    reg_forward_rng_ = root.fork();
    params_ = net_tr_.parameters();
    if (fn_norm_active() && reg_ == nullptr) throw ValueError("function-norm method needs a regularization source");
  }

  const Network<T>& network() const noexcept { return net_tr_; }
  const Network<T>& reg_network() const noexcept { return net_reg_; }
  const TrainConfig& config() const noexcept { return config_; }
  const Sgd<T>& optimizer() const noexcept { return sgd_; }
  const std::vector<EpochReport>& history() const noexcept { return history_; }

  bool fn_norm_active() const { return uses_function_norm(config_.reg.method) && pool_size_ > 0; }

  BatchSplit split_for(std::size_t n_train) const {
    return batch_split(config_.batch_size, n_train, fn_norm_active() ? pool_size_ : 0, config_.reg.reg_ratio);
  }

  /// One pass over the labeled set. Does not evaluate.
  EpochReport run_epoch(const LabeledDataset<T>& train) {
    if (train.size() == 0) throw ValueError("run_epoch: empty training set");
    const auto start = std::chrono::steady_clock::now();
    const BatchSplit split = split_for(train.size());
    const std::size_t batches = (train.size() + split.train - 1) / split.train;
    const std::size_t epoch = history_.size() + 1;
    const double lambda = config_.reg.lambda;

    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), shuffle_rng_.engine());
    if (fn_norm_active()) reg_->begin_epoch();

    EpochReport report;
    report.epoch = epoch;
    std::vector<int> labels;
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t first = b * split.train;
      const std::size_t count = std::min(split.train, train.size() - first);
      const std::span<const std::size_t> rows(order.data() + first, count);
      labels.resize(count);
      for (std::size_t i = 0; i < count; ++i) labels[i] = train.labels[rows[i]];

      const auto acts = net_tr_.forward(train.images.gather(rows), Mode::Train, dropout_rng_, labels);
      const double loss = acts.caches.back().loss;
      if (!std::isfinite(loss)) throw DivergenceError(epoch, b + 1, "non-finite training loss");
      auto grads = net_tr_.backward(acts, Tensor<T>({1}, T(1)));
      report.train_loss += loss;
      report.train_top1 += topk_error(acts.values[acts.values.size() - 2], labels, 1);

      if (fn_norm_active()) {
        const Tensor<T> reg_inputs = reg_->next(split.reg);
        const auto reg_acts = net_reg_.forward(reg_inputs, Mode::Train, reg_forward_rng_);
        const double penalty = fn_norm_penalty(reg_acts.output());
        if (!std::isfinite(penalty)) throw DivergenceError(epoch, b + 1, "non-finite function-norm penalty");
        report.penalty += penalty;
        if (lambda != 0.0) {
          const auto reg_grads = net_reg_.backward(reg_acts, fn_norm_seed_grad(reg_acts.output()));
          const T scale = static_cast<T>(lambda);
          for (std::size_t k = 0; k < grads.size(); ++k) {
            for (std::size_t i = 0; i < grads[k].size(); ++i) grads[k][i] += scale * reg_grads[k][i];
          }
        }
      }
      if (config_.reg.decay != 0.0) {
        const auto decay = weight_decay_grad<T>(params_, config_.reg.decay);
        for (std::size_t k = 0; k < grads.size(); ++k) {
          for (std::size_t i = 0; i < grads[k].size(); ++i) grads[k][i] += decay[k][i];
        }
      }
      double norm_sq = 0.0;
      for (const auto& g : grads) norm_sq += squared_norm(g.values());
      if (!std::isfinite(norm_sq)) throw DivergenceError(epoch, b + 1, "non-finite gradient");
      report.grad_norm += std::sqrt(norm_sq);
      report.grad_norm_sq += norm_sq;

      sgd_.step(params_, grads);
    }
    const double nb = static_cast<double>(batches);
    report.train_loss /= nb;
    report.penalty /= nb;
    report.train_top1 /= nb;
    report.grad_norm /= nb;
    report.grad_norm_sq /= nb;
    report.objective = report.train_loss + lambda * report.penalty;
    report.updates = sgd_.updates();
    report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    elapsed_ += report.seconds;
    report.elapsed = elapsed_;
    history_.push_back(report);
    return report;
  }

  /// run_epoch followed by test-set evaluation (when `test` is non-null).
  EpochReport train_epoch(const LabeledDataset<T>& train, const LabeledDataset<T>* test) {
    EpochReport report = run_epoch(train);
    if (test) {
      const EvalResult e = evaluate(net_tr_, *test, config_.eval_batch);
      report.top1 = e.top1;
      report.top5 = e.top5;
      report.test_loss = e.loss;
      history_.back() = report;
    }
    return report;
  }

  /// Trains for config().epochs epochs, handing each report to `sink`.
  void fit(const LabeledDataset<T>& train, const LabeledDataset<T>* test,
           const std::function<void(const EpochReport&)>& sink = {}) {
    for (std::size_t e = 0; e < config_.epochs; ++e) {
      const EpochReport report = train_epoch(train, test);
      if (sink) sink(report);
    }
  }

 private:
  Network<T> net_tr_;
  Network<T> net_reg_;
  TrainConfig config_;
  RegSource<T>* reg_;
  std::size_t pool_size_;
  Sgd<T> sgd_;
  Rng shuffle_rng_{0};
  Rng dropout_rng_{0};
  Rng reg_forward_rng_{0};
  std::vector<ParamPtr<T>> params_;
  std::vector<EpochReport> history_;
  double elapsed_ = 0.0;
};

/// Diagnostics for the SGD convergence conditions, computed from epoch
/// history. Purely informational.
struct ConvergenceDiagnostics {
  /// Running minimum of the objective estimate.
  double objective_min = 0.0;
  /// Mean objective over the last window minus over the window before it.
  double objective_trend = 0.0;
  /// Least-squares slope of the gradient norm over the trailing windows.
  double grad_norm_slope = 0.0;
  /// max_t E||H||^2 / (A + B C_t) for the best nonnegative fit of A and B.
  double second_moment_ratio = 0.0;
  bool converging = false;
  bool grad_decreasing = false;
  bool finite = true;
};

inline ConvergenceDiagnostics convergence_check(std::span<const EpochReport> history) {
  if (history.size() < 2) throw ValueError("convergence_check needs at least two epochs");
  ConvergenceDiagnostics d;
  const std::size_t n = history.size();
  const std::size_t window = std::max<std::size_t>(1, std::min<std::size_t>(5, n / 2));
  d.objective_min = std::numeric_limits<double>::infinity();
  for (const auto& r : history) {
    d.finite = d.finite && std::isfinite(r.objective) && std::isfinite(r.grad_norm) && std::isfinite(r.grad_norm_sq);
    d.objective_min = std::min(d.objective_min, r.objective);
  }
  auto mean_objective = [&](std::size_t from, std::size_t to) {
    double s = 0.0;
    for (std::size_t i = from; i < to; ++i) s += history[i].objective;
    return s / static_cast<double>(to - from);
  };
  d.objective_trend = mean_objective(n - window, n) - mean_objective(n - 2 * window, n - window);

  const std::size_t from = n - 2 * window;
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  const double count = static_cast<double>(n - from);
  for (std::size_t i = from; i < n; ++i) {
    const double x = static_cast<double>(i), y = history[i].grad_norm;
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  const double denom = count * sxx - sx * sx;
  d.grad_norm_slope = denom != 0.0 ? (count * sxy - sx * sy) / denom : 0.0;

  // Fit E||H||^2 ~ A + B * C with A, B >= 0.
  double cx = 0, cy = 0;
  for (const auto& r : history) {
    cx += r.objective;
    cy += r.grad_norm_sq;
  }
  cx /= static_cast<double>(n);
  cy /= static_cast<double>(n);
  double cov = 0, var = 0;
  for (const auto& r : history) {
    cov += (r.objective - cx) * (r.grad_norm_sq - cy);
    var += (r.objective - cx) * (r.objective - cx);
  }
  double b = var > 0.0 ? std::max(0.0, cov / var) : 0.0;
  double a = cy - b * cx;
  if (a < 0.0) {
    a = 0.0;
    double num = 0, den = 0;
    for (const auto& r : history) {
      num += r.objective * r.grad_norm_sq;
      den += r.objective * r.objective;
    }
    b = den > 0.0 ? std::max(0.0, num / den) : 0.0;
  }
  for (const auto& r : history) {
    const double bound = a + b * r.objective;
    if (bound > 0.0) d.second_moment_ratio = std::max(d.second_moment_ratio, r.grad_norm_sq / bound);
  }

  d.converging = d.finite && d.objective_trend <= 0.0;
  d.grad_decreasing = d.finite && d.grad_norm_slope <= 0.0;
  return d;
}

}  // namespace fnreg
