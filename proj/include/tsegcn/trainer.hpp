#pragma once

#include <chrono>
#include <functional>
#include <map>
#include <string>
#include <thread>
#include <vector>

#include "tsegcn/dataio.hpp"
#include "tsegcn/model.hpp"
#include "tsegcn/ops.hpp"

namespace tsegcn {

struct OptimConfig {
  double lr = 0.05;
  double momentum = 0.9;  // Nesterov
  double weight_decay = 0.004;
  std::size_t epochs = 60;
  std::vector<std::pair<std::size_t, double>> lr_drops = {{40, 0.1}, {50, 0.1}};  // (epoch, factor)
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;

  void validate() const {
    if (lr < 0.0) throw ConfigError("OptimConfig.lr must be >= 0");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("OptimConfig.momentum must be in [0, 1)");
    if (batch_size < 1) throw ConfigError("OptimConfig.batch_size must be >= 1");
    for (const auto& [epoch, factor] : lr_drops)
      if (factor <= 0.0 || factor > 1.0) throw ConfigError("OptimConfig.lr_drops factors must be in (0, 1]");
  }
};

struct EpochStats {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double eval_acc = 0.0;
  double wall_time_s = 0.0;
  double lr = 0.0;
};

struct TrainLog {
  std::vector<EpochStats> epochs;
  std::size_t best_epoch = 0;
  double best_eval_acc = 0.0;
};

/// Mean cross-entropy and (via the tape) its gradient.
inline ag::Var cross_entropy(const ag::Var& logits, const std::vector<std::size_t>& labels) {
  return ag::cross_entropy(logits, labels);
}

/// SGD with Nesterov momentum. Weight decay enters as a classic L2 term
/// added to the gradient before the momentum update; entries flagged
/// no_decay (positional embedding, topology gains) are exempt.
class SgdOptimizer {
 public:
  explicit SgdOptimizer(const OptimConfig& cfg) : cfg_(cfg) { cfg_.validate(); }

  double lr() const { return lr_override_ >= 0.0 ? lr_override_ : cfg_.lr; }
  void set_lr(double lr) { lr_override_ = lr; }
  const OptimConfig& config() const { return cfg_; }

  /// One update from the accumulated gradients; gradients are then zeroed.
  void step(ParamStore& params) {
    const double rate = lr();
    for (auto& [name, e] : params) {
      Tensor& vel = velocity_.try_emplace(name, Tensor(e.value.shape())).first->second;
      const double wd = e.no_decay ? 0.0 : cfg_.weight_decay;
      for (std::size_t i = 0; i < e.value.size(); ++i) {
        double g = e.grad[i] + wd * e.value[i];
        vel[i] = cfg_.momentum * vel[i] + g;
        g += cfg_.momentum * vel[i];  // Nesterov look-ahead
        e.value[i] -= rate * g;
      }
      e.grad.fill(0.0);
    }
  }

 private:
  OptimConfig cfg_;
  double lr_override_ = -1.0;
  std::map<std::string, Tensor> velocity_;
};

/// Top-1 accuracy of a logits function over a manifest. Per-sequence logits
/// are averaged over that sequence's folded bodies. Pure: no model state
/// changes. `threads` caps the worker count (per-file forwards are
/// independent).
inline double evaluate_logits(const std::function<Tensor(const Tensor&)>& logits_fn, const DatasetManifest& manifest,
                              std::size_t t_frames, std::size_t threads = 1) {
  if (manifest.entries.empty()) throw ConfigError("evaluate: empty manifest");
  const std::size_t n = manifest.entries.size();
  std::vector<int> correct(n, 0);

  auto run_range = [&](std::size_t from, std::size_t to) {
    for (std::size_t i = from; i < to; ++i) {
      const auto& entry = manifest.entries[i];
      SkeletonSequence seq = parse_sequence(entry.path);
      std::vector<std::size_t> labels;
      Tensor batch = to_batch({seq}, t_frames, &labels);
      Tensor logits = logits_fn(batch);  // [bodies, n_classes]
      const std::size_t classes = logits.dim(1);
      std::vector<double> mean(classes, 0.0);
      for (std::size_t b = 0; b < logits.dim(0); ++b)
        for (std::size_t c = 0; c < classes; ++c) mean[c] += logits.at(b, c);
      std::size_t arg = 0;
      for (std::size_t c = 1; c < classes; ++c)
        if (mean[c] > mean[arg]) arg = c;
      correct[i] = (static_cast<int>(arg) == entry.label) ? 1 : 0;
    }
  };

  if (threads <= 1 || n < 2) {
    run_range(0, n);
  } else {
    const std::size_t workers = std::min(threads, n);
    std::vector<std::thread> pool;
    const std::size_t chunk = (n + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
      const std::size_t from = w * chunk, to = std::min(n, from + chunk);
      if (from < to) pool.emplace_back(run_range, from, to);
    }
    for (auto& th : pool) th.join();
  }

  std::size_t hits = 0;
  for (int c : correct) hits += static_cast<std::size_t>(c);
  return static_cast<double>(hits) / static_cast<double>(n);
}

/// Top-1 accuracy of the model (inference mode, read-only).
inline double evaluate(TsegcnModel& model, const DatasetManifest& manifest, std::size_t threads = 1) {
  return evaluate_logits([&](const Tensor& batch) { return model.predict(batch); }, manifest,
                         model.config().t_frames, threads);
}

/// Training loop: seeded shuffling, mini-batches, cross-entropy, SGD with
/// the configured learning-rate drops. Logs one row per epoch; when
/// checkpoint_path is set, the best-eval model is saved there. on_epoch may
/// return true to stop early (e.g. once a target accuracy is reached).
inline TrainLog train(TsegcnModel& model, const DatasetManifest& train_manifest, const DatasetManifest& eval_manifest,
                      const OptimConfig& cfg, const std::string& checkpoint_path = "",
                      const std::function<bool(const EpochStats&)>& on_epoch = nullptr) {
  cfg.validate();
  if (train_manifest.entries.empty()) throw ConfigError("train: empty manifest");

  // Load every sequence once up front (desk-scale datasets).
  std::vector<SkeletonSequence> sequences;
  sequences.reserve(train_manifest.entries.size());
  for (const auto& e : train_manifest.entries) {
    SkeletonSequence s = parse_sequence(e.path);
    s.label = e.label;
    sequences.push_back(std::move(s));
  }

  SgdOptimizer opt(cfg);
  Rng shuffle_rng(cfg.seed);
  TrainLog log;
  double lr = cfg.lr;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    for (const auto& [at, factor] : cfg.lr_drops)
      if (epoch == at) lr *= factor;
    opt.set_lr(lr);

    std::vector<std::size_t> order(sequences.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    shuffle_rng.shuffle(order);

    double loss_sum = 0.0;
    std::size_t loss_batches = 0, hits = 0, rows_total = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<SkeletonSequence> batch_seqs;
      for (std::size_t i = start; i < end; ++i) batch_seqs.push_back(sequences[order[i]]);
      std::vector<std::size_t> labels;
      Tensor batch = to_batch(batch_seqs, model.config().t_frames, &labels);

      ag::Var logits = model.forward(batch, /*train=*/true);
      ag::Var loss = ag::cross_entropy(logits, labels);
      if (!std::isfinite(loss.value()[0])) throw EvalError("train: loss became non-finite at epoch " +
                                                           std::to_string(epoch));
      ag::backward(loss);
      opt.step(model.params());

      loss_sum += loss.value()[0];
      ++loss_batches;
      for (std::size_t b = 0; b < logits.value().dim(0); ++b) {
        std::size_t arg = 0;
        for (std::size_t c = 1; c < logits.value().dim(1); ++c)
          if (logits.value().at(b, c) > logits.value().at(b, arg)) arg = c;
        hits += (arg == labels[b]) ? 1 : 0;
        ++rows_total;
      }
    }

    EpochStats row;
    row.epoch = epoch;
    row.lr = lr;
    row.train_loss = loss_batches ? loss_sum / static_cast<double>(loss_batches) : 0.0;
    row.train_acc = rows_total ? static_cast<double>(hits) / static_cast<double>(rows_total) : 0.0;
    row.eval_acc = eval_manifest.entries.empty() ? 0.0 : evaluate(model, eval_manifest);
    row.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log.epochs.push_back(row);
    if (row.eval_acc >= log.best_eval_acc) {
      log.best_eval_acc = row.eval_acc;
      log.best_epoch = epoch;
      if (!checkpoint_path.empty()) model.save(checkpoint_path);
    }
    if (on_epoch && on_epoch(row)) break;
  }
  return log;
}

}  // namespace tsegcn
