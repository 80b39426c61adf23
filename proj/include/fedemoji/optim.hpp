// SPDX-License-Identifier: Apache-2.0
/**
 * @file   optim.hpp
 * @brief  Client-side SGD, example-weighted aggregation of client deltas and
 *         the server update rules (plain SGD, Nesterov momentum).
 *
 * Clients send delta_k = w_k - w_t. The server forms
 *
 *   mean = sum_k n_k delta_k / sum_k n_k
 *
 * and applies either  w += lr * mean  or, with momentum mu,
 *
 *   v  = mu * v + mean
 *   w += lr * (mu * v + mean)
 */
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "fedemoji/corpus.hpp"
#include "fedemoji/error.hpp"
#include "fedemoji/model.hpp"
#include "fedemoji/rng.hpp"

namespace fedemoji {

/// Which objective a training loop optimises.
enum class Task { kEmoji, kLanguageModel };

inline LossAndGrads task_loss_and_grads(Task task, const Parameters &params,
                                        std::span<const Example> batch) {
  return task == Task::kEmoji ? loss_and_grads(params, batch) : lm_loss_and_grads(params, batch);
}

struct ClientOptConfig {
  double client_lr = 0.5;
  std::size_t batch_size = 50;
  std::size_t epochs = 1;
  double clip_norm = 5.0;

  void validate() const {
    if (!(client_lr >= 0.0) || !std::isfinite(client_lr)) throw ConfigError("client_lr must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (!(clip_norm > 0.0)) throw ConfigError("clip_norm must be > 0");
  }
};

/// Rescales `g` so its L2 norm is at most `max_norm`; returns the norm before
/// clipping.
inline double clip_by_global_norm(std::span<double> g, double max_norm) {
  double sq = 0.0;
  for (double v : g) sq += v * v;
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (auto &v : g) v *= s;
  }
  return norm;
}

inline std::vector<Example> effective_examples(std::span<const Example> examples) {
  std::vector<Example> out;
  for (const auto &e : examples)
    if (e.weight > 0.0) out.push_back(e);
  return out;
}

/// One pass over `examples` (all with weight > 0) in an order drawn from
/// `epoch_seed`, in batches of at most batch_size, stepping
/// w <- w - lr * clip(grad). The trailing short batch is kept. Returns the
/// example-weighted mean batch loss.
inline double run_local_epoch(Parameters &w, std::span<const Example> examples,
                              const ClientOptConfig &cfg, std::uint64_t epoch_seed,
                              Task task = Task::kEmoji) {
  if (examples.empty()) throw Error("empty effective batch");
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(epoch_seed);
  shuffle(order, rng);

  double loss_sum = 0.0;
  std::vector<Example> batch;
  for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
    const std::size_t end = std::min(order.size(), start + cfg.batch_size);
    batch.clear();
    for (std::size_t i = start; i < end; ++i) batch.push_back(examples[order[i]]);
    auto lg = task_loss_and_grads(task, w, batch);
    clip_by_global_norm(lg.grads.values(), cfg.clip_norm);
    auto wv = w.values();
    const auto gv = lg.grads.values();
    for (std::size_t i = 0; i < wv.size(); ++i) wv[i] -= cfg.client_lr * gv[i];
    loss_sum += lg.loss * static_cast<double>(end - start);
  }
  return loss_sum / static_cast<double>(order.size());
}

/// What a client reports back after local training.
struct ClientUpdate {
  std::size_t client_id = 0;
  std::vector<double> delta;
  std::size_t num_examples = 0;  ///< examples with weight > 0
  double train_loss = 0.0;
  bool skipped = false;  ///< no effective examples; delta is empty
};

/// Local training on one client starting from `global`. Epoch e shuffles with
/// derive_seed(seed, kShuffle, {e}).
inline ClientUpdate client_update(const Parameters &global, const ClientDataset &dataset,
                                  const ClientOptConfig &cfg, std::uint64_t seed,
                                  Task task = Task::kEmoji) {
  cfg.validate();
  ClientUpdate up;
  up.client_id = dataset.client_id;
  const auto examples = effective_examples(dataset.examples);
  if (examples.empty()) {
    up.skipped = true;
    return up;
  }
  Parameters w = global;
  double loss = 0.0;
  for (std::size_t e = 0; e < cfg.epochs; ++e)
    loss = run_local_epoch(w, examples, cfg, derive_seed(seed, Stream::kShuffle, {e}), task);
  up.delta.resize(w.size());
  const auto wv = w.values();
  const auto gv = global.values();
  for (std::size_t i = 0; i < wv.size(); ++i) up.delta[i] = wv[i] - gv[i];
  up.num_examples = examples.size();
  up.train_loss = loss;
  return up;
}

struct Aggregate {
  std::vector<double> mean_delta;
  std::size_t total_n = 0;
};

/// Example-count weighted mean of the non-skipped deltas, summed in ascending
/// client_id order.
inline Aggregate aggregate(std::span<const ClientUpdate> updates) {
  std::vector<const ClientUpdate *> live;
  for (const auto &u : updates)
    if (!u.skipped) live.push_back(&u);
  if (live.empty()) throw Error("no updates this round");
  std::stable_sort(live.begin(), live.end(),
                   [](const ClientUpdate *a, const ClientUpdate *b) { return a->client_id < b->client_id; });
  Aggregate out;
  const std::size_t n = live.front()->delta.size();
  out.mean_delta.assign(n, 0.0);
  for (const auto *u : live) {
    if (u->delta.size() != n) throw Error("client deltas differ in length");
    if (u->num_examples == 0) throw Error("client update reports zero examples");
    const auto w = static_cast<double>(u->num_examples);
    for (std::size_t i = 0; i < n; ++i) out.mean_delta[i] += w * u->delta[i];
    out.total_n += u->num_examples;
  }
  const auto total = static_cast<double>(out.total_n);
  for (auto &v : out.mean_delta) v /= total;
  return out;
}

enum class ServerRule { kSgd, kNesterov };

inline std::string to_string(ServerRule r) { return r == ServerRule::kSgd ? "sgd" : "nesterov"; }

/// Server-side update rule and its state.
struct ServerOptimizer {
  ServerRule rule = ServerRule::kSgd;
  double lr = 1.0;
  double momentum = 0.0;
  std::vector<double> velocity;

  static ServerOptimizer sgd(double lr) { return {ServerRule::kSgd, lr, 0.0, {}}; }
  static ServerOptimizer nesterov(double lr, double momentum = 0.9) {
    return {ServerRule::kNesterov, lr, momentum, {}};
  }

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("server_lr must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must be in [0, 1)");
    if (rule == ServerRule::kSgd && momentum != 0.0)
      throw ConfigError("momentum must be 0 for the sgd server rule");
  }
};

/// Applies the aggregated client update; mutates the optimizer's velocity.
inline Parameters server_apply(const Parameters &global, std::span<const double> mean_delta,
                               ServerOptimizer &opt) {
  if (mean_delta.size() != global.size()) throw Error("update length does not match parameters");
  for (double v : mean_delta)
    if (!std::isfinite(v)) throw Error("diverged round");
  Parameters next = global;
  auto w = next.values();
  if (opt.rule == ServerRule::kSgd) {
    for (std::size_t i = 0; i < w.size(); ++i) w[i] += opt.lr * mean_delta[i];
  } else {
    if (opt.velocity.empty()) opt.velocity.assign(w.size(), 0.0);
    if (opt.velocity.size() != w.size()) throw Error("velocity length does not match parameters");
    for (std::size_t i = 0; i < w.size(); ++i) {
      opt.velocity[i] = opt.momentum * opt.velocity[i] + mean_delta[i];
      w[i] += opt.lr * (opt.momentum * opt.velocity[i] + mean_delta[i]);
    }
  }
  return next;
}

}  // namespace fedemoji
