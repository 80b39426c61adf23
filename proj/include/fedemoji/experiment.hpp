// SPDX-License-Identifier: Apache-2.0
/**
 * @file   experiment.hpp
 * @brief  End-to-end recipes on top of the library: data preparation from a
 *         RunConfig, LM pretraining, federated and central training, and
 *         one-axis sweeps laid out like an ablation table.
 */
#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "fedemoji/config.hpp"
#include "fedemoji/corpus.hpp"
#include "fedemoji/fedsim.hpp"
#include "fedemoji/inference.hpp"
#include "fedemoji/model.hpp"
#include "fedemoji/optim.hpp"

namespace fedemoji {

struct PreparedData {
  EmojiInventory inventory;
  Vocabulary vocab;
  std::vector<Sentence> sentences;
  Populations populations;  ///< train side already UNK-downweighted
  ModelConfig model;
};

/// Number of sentences to synthesize when no corpus file is configured.
inline std::size_t synth_sentence_count(const RunConfig &cfg) {
  return static_cast<std::size_t>(
      std::llround(cfg.partition.mean_sentences * static_cast<double>(cfg.partition.num_clients)));
}

inline SynthCorpus synth_from_config(const RunConfig &cfg) {
  TemplateSpec spec = cfg.synth;
  spec.num_sentences = synth_sentence_count(cfg);
  return synth_corpus(spec, cfg.seed);
}

/// Loads or synthesizes the corpus, builds or loads the vocabulary, partitions
/// clients, holds out the evaluation population and downweights UNK examples
/// on the training side.
inline PreparedData prepare_data(const RunConfig &cfg) {
  PreparedData d;
  if (cfg.corpus_path.empty()) {
    auto synth = synth_from_config(cfg);
    d.inventory = EmojiInventory(synth.emoji);
    d.sentences = tokenize_lines(synth.lines, d.inventory);
  } else {
    d.inventory = EmojiInventory::load(cfg.inventory_path);
    d.sentences = load_corpus(cfg.corpus_path, d.inventory);
  }
  d.vocab = cfg.vocab_path.empty() ? build_vocab(d.sentences, cfg.vocab_size, &d.inventory)
                                   : Vocabulary::load(cfg.vocab_path);

  PartitionSpec part = cfg.partition;
  part.seed = cfg.seed;
  auto clients = partition_clients(d.sentences, part, d.vocab, d.inventory);
  d.populations = split_population(std::move(clients), cfg.federation.holdout_fraction, cfg.seed);
  for (auto &c : d.populations.train) {
    Rng rng = make_rng(cfg.seed, Stream::kDownweight, {c.client_id});
    c.examples = downweight_unk(std::move(c.examples), cfg.unk_keep_fraction,
                                d.inventory.unk_class(), rng);
  }
  d.model = ModelConfig{d.vocab.size(), cfg.embed_dim, cfg.num_layers, cfg.hidden_dim,
                        d.inventory.num_classes()};
  return d;
}

inline FederationConfig federation_of(const RunConfig &cfg) {
  FederationConfig f = cfg.federation;
  f.seed = cfg.seed;
  f.threads = cfg.threads;
  return f;
}

/// Random init, or transfer from `cfg.init_checkpoint` when set.
inline Parameters initial_params(const RunConfig &cfg, const PreparedData &data) {
  if (cfg.init_checkpoint.empty()) return init_params(data.model, cfg.seed);
  return transfer_from_lm(load_checkpoint(cfg.init_checkpoint), data.model, cfg.seed);
}

inline void write_resolved_config(const RunConfig &cfg, const std::string &dir) {
  if (dir.empty()) return;
  std::filesystem::create_directories(dir);
  std::ofstream((std::filesystem::path(dir) / "resolved.conf").string()) << to_text(cfg);
}

inline FederatedJob federated_job(const RunConfig &cfg, Parameters init, std::string output_dir) {
  FederatedJob job;
  job.init = std::move(init);
  job.client = cfg.client;
  job.server = cfg.make_server_optimizer();
  job.federation = federation_of(cfg);
  job.task = Task::kEmoji;
  job.output_dir = std::move(output_dir);
  return job;
}

/// Federated emoji training as configured.
inline TrainResult run_federated(const RunConfig &cfg, const PreparedData &data,
                                 const std::string &output_dir) {
  write_resolved_config(cfg, output_dir);
  auto job = federated_job(cfg, initial_params(cfg, data), output_dir);
  return train_federated(job, data.populations.train, data.populations.eval);
}

/// Federated next-word pretraining over the training clients' sentences. The
/// returned parameters carry the LM head.
inline TrainResult run_pretrain_lm(const RunConfig &cfg, const PreparedData &data,
                                   const std::string &output_dir) {
  write_resolved_config(cfg, output_dir);
  const auto train = language_model_clients(data.populations.train, data.sentences, data.vocab,
                                            data.inventory, cfg.partition.max_context + 1);
  const auto eval = language_model_clients(data.populations.eval, data.sentences, data.vocab,
                                           data.inventory, cfg.partition.max_context + 1);
  FederatedJob job = federated_job(cfg, init_params(data.model, cfg.seed, true), output_dir);
  job.client.client_lr = cfg.lm_client_lr;
  job.client.batch_size = cfg.lm_batch_size;
  job.federation.total_rounds = cfg.lm_rounds;
  job.task = Task::kLanguageModel;
  return train_federated(job, train, eval);
}

inline std::vector<Example> pooled_examples(std::span<const ClientDataset> clients) {
  std::vector<Example> out;
  for (const auto &c : clients) out.insert(out.end(), c.examples.begin(), c.examples.end());
  return out;
}

inline CentralResult run_central(const RunConfig &cfg, const PreparedData &data,
                                 const std::string &output_dir) {
  write_resolved_config(cfg, output_dir);
  return train_central(initial_params(cfg, data), pooled_examples(data.populations.train),
                       cfg.central_epochs, cfg.client, cfg.seed, data.populations.eval,
                       Task::kEmoji, output_dir, cfg.federation.eval_clients);
}

/// Diversifier fitted on the emoji examples of the training population.
inline Diversifier diversifier_for(const RunConfig &cfg, const PreparedData &data) {
  return fit_diversifier(pooled_examples(data.populations.train), data.inventory.num_emoji(),
                         cfg.alpha, cfg.smoothing);
}

// ---------------------------------------------------------------------------
// Sweeps

enum class SweepAxis { kBatchSize, kDevicesPerRound, kServerOptimizer };

inline SweepAxis parse_sweep_axis(const std::string &s) {
  if (s == "B" || s == "batch_size") return SweepAxis::kBatchSize;
  if (s == "K" || s == "devices_per_round") return SweepAxis::kDevicesPerRound;
  if (s == "server_opt" || s == "server_optimizer") return SweepAxis::kServerOptimizer;
  throw ConfigError("unknown sweep axis '" + s + "' (expected B, K or server_opt)");
}

/// Applies one sweep value. Server optimizer values read "sgd:<lr>" or
/// "nesterov:<lr>" (the learning rate defaults to 1).
inline RunConfig apply_sweep_value(RunConfig cfg, SweepAxis axis, const std::string &value) {
  switch (axis) {
    case SweepAxis::kBatchSize:
      cfg.client.batch_size = detail::parse_number<std::size_t>("B", value);
      break;
    case SweepAxis::kDevicesPerRound:
      cfg.federation.devices_per_round = detail::parse_number<std::size_t>("K", value);
      break;
    case SweepAxis::kServerOptimizer: {
      const auto colon = value.find(':');
      cfg.server_optimizer = value.substr(0, colon);
      if (colon != std::string::npos)
        cfg.server_lr = detail::parse_number<double>("server_lr", value.substr(colon + 1));
      break;
    }
  }
  validate(cfg);
  return cfg;
}

inline std::string sweep_label(SweepAxis axis, const std::string &value) {
  switch (axis) {
    case SweepAxis::kBatchSize: return "B=" + value;
    case SweepAxis::kDevicesPerRound: return "K=" + value;
    case SweepAxis::kServerOptimizer: return value;
  }
  return value;
}

struct SweepRow {
  std::string label;
  EvalReport final_eval;
};

/// One full federated run per value, all with the base seed. Each run writes
/// into <output_dir>/<label>/ exactly as a plain train-fed run would.
inline std::vector<SweepRow> run_sweep(const RunConfig &base, SweepAxis axis,
                                       const std::vector<std::string> &values,
                                       const std::string &output_dir) {
  if (values.empty()) throw ConfigError("sweep needs at least one value");
  std::vector<SweepRow> rows;
  std::optional<PreparedData> data;
  for (const auto &v : values) {
    const RunConfig cfg = apply_sweep_value(base, axis, v);
    if (!data) data = prepare_data(cfg);
    const std::string label = sweep_label(axis, v);
    const std::string dir =
        output_dir.empty() ? std::string{} : (std::filesystem::path(output_dir) / label).string();
    auto result = run_federated(cfg, *data, dir);
    rows.push_back({label, result.evals.back()});
  }
  return rows;
}

inline std::string sweep_table(const std::vector<SweepRow> &rows) {
  std::string out = "experiment\taccuracy_at_1\tauc\n";
  for (const auto &r : rows)
    out += r.label + '\t' + format_metric(r.final_eval.accuracy_at_1) + '\t' +
           format_metric(r.final_eval.auc) + '\n';
  return out;
}

}  // namespace fedemoji
