// SPDX-License-Identifier: Apache-2.0
/**
 * @file   fedsim.hpp
 * @brief  FederatedAveraging orchestration: client sampling, rounds, the
 *         parallel evaluation task on held-out devices, checkpointing and the
 *         centrally trained baseline.
 *
 * Every random choice in round r is drawn from a stream derived from
 * (seed, r, client id), so a run is reproducible regardless of thread count
 * and can be resumed from any checkpoint.
 */
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "fedemoji/corpus.hpp"
#include "fedemoji/error.hpp"
#include "fedemoji/metrics.hpp"
#include "fedemoji/model.hpp"
#include "fedemoji/optim.hpp"
#include "fedemoji/rng.hpp"

namespace fedemoji {

struct FederationConfig {
  std::size_t devices_per_round = 20;
  std::size_t total_rounds = 300;
  std::size_t eval_every = 10;
  std::size_t eval_clients = 100;
  std::uint64_t seed = 1;
  double holdout_fraction = 1.0 / 6.0;
  /// Probability that a sampled device is eligible (idle, charging...) this
  /// round.
  double availability = 1.0;
  std::size_t threads = 1;

  void validate() const {
    if (devices_per_round < 1) throw ConfigError("devices_per_round must be >= 1");
    if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
    if (eval_clients < 1) throw ConfigError("eval_clients must be >= 1");
    if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0))
      throw ConfigError("holdout_fraction must be in (0, 1)");
    if (!(availability > 0.0 && availability <= 1.0))
      throw ConfigError("availability must be in (0, 1]");
    if (threads < 1) throw ConfigError("threads must be >= 1");
  }
};

struct Populations {
  std::vector<ClientDataset> train;
  std::vector<ClientDataset> eval;
};

/// Moves a random `holdout_fraction` of the clients into the evaluation
/// population. Both sides keep ascending client_id order.
inline Populations split_population(std::vector<ClientDataset> clients, double holdout_fraction,
                                    std::uint64_t seed) {
  if (clients.size() < 2) throw Error("need at least two clients to hold some out");
  std::size_t n_eval = static_cast<std::size_t>(
      std::llround(holdout_fraction * static_cast<double>(clients.size())));
  n_eval = std::clamp<std::size_t>(n_eval, 1, clients.size() - 1);
  std::vector<std::size_t> order(clients.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng = make_rng(seed, Stream::kHoldout);
  shuffle(order, rng);
  std::vector<char> is_eval(clients.size(), 0);
  for (std::size_t i = 0; i < n_eval; ++i) is_eval[order[i]] = 1;
  Populations p;
  for (std::size_t i = 0; i < clients.size(); ++i)
    (is_eval[i] ? p.eval : p.train).push_back(std::move(clients[i]));
  auto by_id = [](const ClientDataset &a, const ClientDataset &b) { return a.client_id < b.client_id; };
  std::sort(p.train.begin(), p.train.end(), by_id);
  std::sort(p.eval.begin(), p.eval.end(), by_id);
  return p;
}

/// K distinct clients uniformly at random, returned in population order.
inline std::vector<const ClientDataset *> sample_clients(std::span<const ClientDataset> population,
                                                         std::size_t k, Rng &rng) {
  if (population.size() < k) throw Error("population too small");
  std::vector<std::size_t> idx(population.size());
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + uniform_index(rng, idx.size() - i)]);
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  std::vector<const ClientDataset *> out;
  out.reserve(k);
  for (std::size_t i : idx) out.push_back(&population[i]);
  return out;
}

/// Runs fn(i) for i in [0, n) on up to `threads` workers. The first exception
/// (by index) is rethrown.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)> &fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  {
    std::vector<std::jthread> pool;
    const std::size_t workers = std::min(threads, n);
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        for (std::size_t i = w; i < n; i += workers) {
          try {
            fn(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
  }
  for (auto &e : errors)
    if (e) std::rethrow_exception(e);
}

struct RoundReport {
  std::size_t round = 0;  ///< 1-based index of the completed round
  std::vector<std::size_t> participants;
  double mean_train_loss = 0.0;
  std::size_t total_n = 0;
  double wall_seconds = 0.0;
  bool skipped = false;  ///< no sampled client had anything to train on
};

struct EvalReport {
  std::size_t round_begin = 0;
  std::size_t round_end = 0;
  std::optional<double> accuracy_at_1;
  std::optional<double> auc;
  double loss = 0.0;
  std::size_t num_emoji_examples = 0;
  std::size_t num_total_examples = 0;

  bool operator==(const EvalReport &) const = default;
};

struct FederationState {
  Parameters global;
  ServerOptimizer optimizer;
  std::size_t round = 0;
  std::span<const ClientDataset> train_population;
  std::span<const ClientDataset> eval_population;
};

/// One FederatedAveraging round against the current global model.
inline RoundReport run_round(FederationState &state, const ClientOptConfig &client_cfg,
                             const FederationConfig &fed, Task task = Task::kEmoji) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t r = state.round;
  Rng sampler = make_rng(fed.seed, Stream::kSample, {r});
  auto sampled = sample_clients(state.train_population, fed.devices_per_round, sampler);

  std::vector<const ClientDataset *> chosen;
  for (const auto *c : sampled) {
    Rng coin = make_rng(fed.seed, Stream::kAvailability, {r, c->client_id});
    if (fed.availability >= 1.0 || bernoulli(coin, fed.availability)) chosen.push_back(c);
  }

  std::vector<ClientUpdate> updates(chosen.size());
  parallel_for(chosen.size(), fed.threads, [&](std::size_t i) {
    updates[i] = client_update(state.global, *chosen[i], client_cfg,
                               derive_seed(fed.seed, Stream::kShuffle, {r, chosen[i]->client_id}),
                               task);
  });

  RoundReport report;
  report.round = r + 1;
  double loss_sum = 0.0;
  for (const auto &u : updates) {
    if (u.skipped) continue;
    report.participants.push_back(u.client_id);
    loss_sum += u.train_loss * static_cast<double>(u.num_examples);
  }
  if (report.participants.empty()) {
    report.skipped = true;
  } else {
    auto agg = aggregate(updates);
    state.global = server_apply(state.global, agg.mean_delta, state.optimizer);
    report.total_n = agg.total_n;
    report.mean_train_loss = loss_sum / static_cast<double>(agg.total_n);
  }
  ++state.round;
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

/// Pools example-level statistics over the examples of `clients` (weights are
/// ignored: evaluation sees every example). Emoji task: Accuracy@1 over
/// emoji-labelled examples from raw probabilities, AUC of 1 - p(UNK) over all
/// examples. Language-model task: next-word Accuracy@1, no AUC.
inline EvalReport evaluate_examples(const Parameters &params,
                                    std::span<const ClientDataset *const> clients,
                                    Task task = Task::kEmoji) {
  EvalReport rep;
  double loss = 0.0;
  std::size_t loss_terms = 0;
  if (task == Task::kEmoji) {
    const std::size_t C = params.config().num_classes;
    const auto unk = static_cast<ClassId>(C - 1);
    std::vector<ClassId> predicted, labels;
    std::vector<ScoredLabel> scored;
    for (const auto *c : clients)
      for (const auto &e : c->examples) {
        const auto p = predict_probs(params, e.tokens);
        loss -= std::log(std::max(p[static_cast<std::size_t>(e.label)], std::numeric_limits<double>::min()));
        ++loss_terms;
        scored.push_back({1.0 - p[C - 1], e.label != unk});
        if (e.label != unk) {
          predicted.push_back(argmax_emoji(p, C - 1));
          labels.push_back(e.label);
        }
      }
    rep.num_total_examples = scored.size();
    rep.num_emoji_examples = labels.size();
    rep.accuracy_at_1 = accuracy_at_1(predicted, labels, unk);
    rep.auc = auc_roc(scored);
  } else {
    std::size_t correct = 0;
    for (const auto *c : clients)
      for (const auto &e : c->examples) {
        if (e.tokens.size() < 2) continue;
        const auto logits = lm_forward(params, e.tokens);
        for (std::size_t t = 0; t + 1 < e.tokens.size(); ++t) {
          const auto p = softmax(logits[t]);
          const auto y = static_cast<std::size_t>(e.tokens[t + 1]);
          loss -= std::log(std::max(p[y], std::numeric_limits<double>::min()));
          ++loss_terms;
          if (static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin()) == y) ++correct;
        }
        ++rep.num_total_examples;
      }
    rep.num_emoji_examples = 0;
    if (loss_terms > 0) rep.accuracy_at_1 = static_cast<double>(correct) / static_cast<double>(loss_terms);
  }
  rep.loss = loss_terms > 0 ? loss / static_cast<double>(loss_terms) : 0.0;
  return rep;
}

/// Evaluation task: samples up to `num_eval_clients` held-out devices and
/// pools their statistics.
inline EvalReport federated_eval(const Parameters &params, std::span<const ClientDataset> eval_population,
                                 std::size_t num_eval_clients, Rng &rng, Task task = Task::kEmoji) {
  if (eval_population.empty()) throw Error("empty evaluation population");
  const auto sampled =
      sample_clients(eval_population, std::min(num_eval_clients, eval_population.size()), rng);
  return evaluate_examples(params, sampled, task);
}

// ---------------------------------------------------------------------------
// Persistence

inline std::string checkpoint_name(std::size_t round) {
  return "round_" + std::to_string(round) + ".ckpt";
}

/// Server optimizer state beside a checkpoint:
/// "FEDOPT1\n<rule> <lr> <momentum> <round> <n>\n" then n little-endian doubles.
inline void save_server_state(const std::string &path, const ServerOptimizer &opt, std::size_t round) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path + "'");
  std::ostringstream hdr;
  hdr.precision(17);
  hdr << "FEDOPT1\n" << to_string(opt.rule) << ' ' << opt.lr << ' ' << opt.momentum << ' ' << round
      << ' ' << opt.velocity.size() << '\n';
  out << hdr.str();
  write_le_doubles(out, opt.velocity);
}

inline std::pair<ServerOptimizer, std::size_t> load_server_state(const std::string &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path + "'");
  std::string magic, header;
  std::getline(in, magic);
  if (magic != "FEDOPT1") throw Error("'" + path + "' is not a FEDOPT1 file");
  std::getline(in, header);
  std::istringstream hs(header);
  std::string rule;
  ServerOptimizer opt;
  std::size_t round = 0, n = 0;
  if (!(hs >> rule >> opt.lr >> opt.momentum >> round >> n)) throw Error("malformed optimizer state");
  if (rule == "sgd") opt.rule = ServerRule::kSgd;
  else if (rule == "nesterov") opt.rule = ServerRule::kNesterov;
  else throw Error("unknown server rule '" + rule + "'");
  opt.velocity = read_le_doubles(in, n);
  return {std::move(opt), round};
}

inline std::string format_metric(const std::optional<double> &v) {
  if (!v) return "NA";
  std::ostringstream os;
  os.precision(6);
  os << std::fixed << *v;
  return os.str();
}

/// Metrics log line: round, loss, accuracy_at_1, auc (tab separated).
inline std::string metrics_line(const EvalReport &r) {
  return std::to_string(r.round_end) + '\t' + format_metric(r.loss) + '\t' +
         format_metric(r.accuracy_at_1) + '\t' + format_metric(r.auc);
}

// ---------------------------------------------------------------------------
// Training drivers

struct FederatedJob {
  Parameters init;
  ClientOptConfig client;
  ServerOptimizer server;
  FederationConfig federation;
  Task task = Task::kEmoji;
  std::string output_dir;  ///< empty: keep everything in memory
  /// Called after each evaluation; returning true stops training early.
  std::function<bool(const EvalReport &)> on_eval;
};

struct TrainResult {
  Parameters final_params;
  ServerOptimizer final_optimizer;
  std::vector<RoundReport> rounds;
  std::vector<EvalReport> evals;
};

namespace detail {

inline void append_line(const std::string &path, const std::string &line) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw Error("cannot append to '" + path + "'");
  out << line << '\n';
}

inline TrainResult continue_federated(const FederatedJob &job, FederationState state,
                                      std::size_t last_eval_round) {
  const auto &fed = job.federation;
  fed.validate();
  job.client.validate();
  job.server.validate();
  const bool persist = !job.output_dir.empty();
  const std::filesystem::path dir(job.output_dir);
  if (persist) std::filesystem::create_directories(dir);
  const std::string metrics_path = (dir / "metrics.tsv").string();
  const std::string rounds_path = (dir / "rounds.tsv").string();

  TrainResult result;
  auto evaluate_and_save = [&](std::size_t round) {
    EvalReport rep;
    if (!state.eval_population.empty()) {
      Rng rng = make_rng(fed.seed, Stream::kEval, {round});
      rep = federated_eval(state.global, state.eval_population, fed.eval_clients, rng, job.task);
    }
    rep.round_begin = last_eval_round;
    rep.round_end = round;
    last_eval_round = round;
    result.evals.push_back(rep);
    if (persist) {
      save_checkpoint((dir / checkpoint_name(round)).string(), state.global);
      save_server_state((dir / ("round_" + std::to_string(round) + ".opt")).string(),
                        state.optimizer, round);
      append_line(metrics_path, metrics_line(rep));
    }
    return job.on_eval ? job.on_eval(rep) : false;
  };

  bool stop = false;
  if (state.round == 0) {
    if (persist) {
      std::ofstream(metrics_path, std::ios::trunc) << "round\tloss\taccuracy_at_1\tauc\n";
      std::ofstream(rounds_path, std::ios::trunc) << "round\tparticipants\ttrain_loss\tn_total\tskipped\n";
    }
    stop = evaluate_and_save(0);
  }
  while (!stop && state.round < fed.total_rounds) {
    auto rep = run_round(state, job.client, fed, job.task);
    if (persist)
      append_line(rounds_path, std::to_string(rep.round) + '\t' + std::to_string(rep.participants.size()) +
                                   '\t' + format_metric(rep.mean_train_loss) + '\t' +
                                   std::to_string(rep.total_n) + '\t' + (rep.skipped ? "1" : "0"));
    result.rounds.push_back(std::move(rep));
    if (state.round % fed.eval_every == 0 || state.round == fed.total_rounds)
      stop = evaluate_and_save(state.round);
  }
  result.final_params = std::move(state.global);
  result.final_optimizer = std::move(state.optimizer);
  return result;
}

}  // namespace detail

/// Runs total_rounds rounds from job.init, evaluating at round 0, every
/// eval_every rounds and at the end. With an output directory, writes
/// round_<t>.ckpt / round_<t>.opt at each evaluation plus metrics.tsv and
/// rounds.tsv.
inline TrainResult train_federated(const FederatedJob &job, std::span<const ClientDataset> train,
                                   std::span<const ClientDataset> eval) {
  FederationState state{job.init, job.server, 0, train, eval};
  state.optimizer.velocity.clear();
  return detail::continue_federated(job, std::move(state), 0);
}

/// Continues a run from the checkpoint and optimizer state written at `round`
/// in `checkpoint_dir`. With identical job settings the remaining rounds
/// reproduce the uninterrupted run exactly.
inline TrainResult resume_federated(const FederatedJob &job, std::span<const ClientDataset> train,
                                    std::span<const ClientDataset> eval,
                                    const std::string &checkpoint_dir, std::size_t round) {
  const std::filesystem::path dir(checkpoint_dir);
  auto params = load_checkpoint((dir / checkpoint_name(round)).string());
  auto [opt, saved_round] =
      load_server_state((dir / ("round_" + std::to_string(round) + ".opt")).string());
  if (saved_round != round) throw Error("optimizer state belongs to another round");
  FederationState state{std::move(params), std::move(opt), round, train, eval};
  return detail::continue_federated(job, std::move(state), round);
}

struct CentralResult {
  Parameters final_params;
  std::vector<double> epoch_losses;
  std::vector<EvalReport> evals;  ///< one per epoch when an eval population is given
};

/// Server-side baseline: minibatch SGD over the pooled examples of every
/// training client. Epoch e shuffles with derive_seed(seed, kShuffle, {e}).
inline CentralResult train_central(const Parameters &init, std::span<const Example> pooled,
                                   std::size_t epochs, const ClientOptConfig &cfg,
                                   std::uint64_t seed, std::span<const ClientDataset> eval = {},
                                   Task task = Task::kEmoji, const std::string &output_dir = {},
                                   std::size_t eval_clients = 100) {
  cfg.validate();
  const auto examples = effective_examples(pooled);
  if (examples.empty()) throw Error("empty training pool");
  CentralResult out{init, {}, {}};
  const std::filesystem::path dir(output_dir);
  if (!output_dir.empty()) {
    std::filesystem::create_directories(dir);
    save_checkpoint((dir / "epoch_0.ckpt").string(), out.final_params);
    std::ofstream(dir / "metrics.tsv", std::ios::trunc) << "round\tloss\taccuracy_at_1\tauc\n";
  }
  for (std::size_t e = 0; e < epochs; ++e) {
    out.epoch_losses.push_back(
        run_local_epoch(out.final_params, examples, cfg, derive_seed(seed, Stream::kShuffle, {e}), task));
    if (!eval.empty()) {
      Rng rng = make_rng(seed, Stream::kEval, {e + 1});
      auto rep = federated_eval(out.final_params, eval, eval_clients, rng, task);
      rep.round_begin = e;
      rep.round_end = e + 1;
      out.evals.push_back(rep);
      if (!output_dir.empty()) detail::append_line((dir / "metrics.tsv").string(), metrics_line(rep));
    }
    if (!output_dir.empty())
      save_checkpoint((dir / ("epoch_" + std::to_string(e + 1) + ".ckpt")).string(), out.final_params);
  }
  return out;
}

}  // namespace fedemoji
