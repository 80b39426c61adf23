// SPDX-License-Identifier: Apache-2.0
/**
 * @file   config.hpp
 * @brief  Run configuration: a plain-text "key = value" file with optional
 *         [section] headers. Unknown keys are rejected, absent keys take
 *         defaults, and the resolved configuration can be written back out
 *         in the same format.
 */
#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "fedemoji/corpus.hpp"
#include "fedemoji/error.hpp"
#include "fedemoji/fedsim.hpp"
#include "fedemoji/inference.hpp"
#include "fedemoji/model.hpp"
#include "fedemoji/optim.hpp"

namespace fedemoji {

struct RunConfig {
  // [run]
  std::uint64_t seed = 1;
  std::string output_dir = "out";
  std::size_t threads = 1;

  // [data]
  std::string corpus_path;     ///< empty: synthesize in memory
  std::string inventory_path;  ///< required when corpus_path is set
  std::string vocab_path;      ///< empty: build from the corpus
  std::string init_checkpoint; ///< pretrained LM to transfer from
  std::size_t vocab_size = 10000;
  double unk_keep_fraction = 0.01;
  PartitionSpec partition;

  // [synth]
  TemplateSpec synth;

  // [model]
  std::size_t embed_dim = 32;
  std::size_t hidden_dim = 64;
  std::size_t num_layers = 2;

  // [client]
  ClientOptConfig client;

  // [server]
  std::string server_optimizer = "sgd";
  double server_lr = 1.0;
  double momentum = 0.9;

  // [federation]
  FederationConfig federation;
  std::size_t central_epochs = 5;

  // [pretrain]
  std::size_t lm_rounds = 100;
  double lm_client_lr = 1.0;
  std::size_t lm_batch_size = 20;

  // [inference]
  double alpha = 0.7;
  double threshold = 0.5;
  double smoothing = 1.0;
  std::size_t top_k = 3;

  ServerOptimizer make_server_optimizer() const {
    return server_optimizer == "nesterov" ? ServerOptimizer::nesterov(server_lr, momentum)
                                          : ServerOptimizer::sgd(server_lr);
  }
};

namespace detail {

struct ConfigField {
  std::string section;
  std::string key;
  std::function<void(RunConfig &, std::string_view)> parse;
  std::function<std::string(const RunConfig &)> print;
};

template <typename T>
T parse_number(std::string_view key, std::string_view text) {
  T v{};
  const char *b = text.data(), *e = text.data() + text.size();
  std::from_chars_result r;
  if constexpr (std::is_floating_point_v<T>) {
    r = std::from_chars(b, e, v);
  } else {
    if (!text.empty() && text.front() == '-')
      throw ConfigError(std::string(key) + ": expected a non-negative integer, got '" + std::string(text) + "'");
    r = std::from_chars(b, e, v);
  }
  if (r.ec != std::errc() || r.ptr != e)
    throw ConfigError(std::string(key) + ": cannot parse '" + std::string(text) + "'");
  return v;
}

template <typename T>
std::string print_number(T v) {
  std::ostringstream os;
  if constexpr (std::is_floating_point_v<T>) os.precision(17);
  os << v;
  return os.str();
}

template <typename T>
ConfigField number_field(std::string section, std::string key, T RunConfig::*outer) {
  return {section, key,
          [key, outer](RunConfig &c, std::string_view v) { c.*outer = parse_number<T>(key, v); },
          [outer](const RunConfig &c) { return print_number(c.*outer); }};
}

template <typename S, typename T>
ConfigField nested_field(std::string section, std::string key, S RunConfig::*outer, T S::*inner) {
  return {section, key,
          [key, outer, inner](RunConfig &c, std::string_view v) {
            (c.*outer).*inner = parse_number<T>(key, v);
          },
          [outer, inner](const RunConfig &c) { return print_number((c.*outer).*inner); }};
}

inline ConfigField string_field(std::string section, std::string key, std::string RunConfig::*m) {
  return {section, key, [m](RunConfig &c, std::string_view v) { c.*m = std::string(v); },
          [m](const RunConfig &c) { return c.*m; }};
}

inline const std::vector<ConfigField> &config_fields() {
  static const std::vector<ConfigField> fields = {
      number_field("run", "seed", &RunConfig::seed),
      string_field("run", "output_dir", &RunConfig::output_dir),
      number_field("run", "threads", &RunConfig::threads),

      string_field("data", "corpus", &RunConfig::corpus_path),
      string_field("data", "inventory", &RunConfig::inventory_path),
      string_field("data", "vocab", &RunConfig::vocab_path),
      string_field("data", "init_checkpoint", &RunConfig::init_checkpoint),
      number_field("data", "vocab_size", &RunConfig::vocab_size),
      number_field("data", "unk_keep_fraction", &RunConfig::unk_keep_fraction),
      nested_field("data", "num_clients", &RunConfig::partition, &PartitionSpec::num_clients),
      nested_field("data", "sentences_per_client", &RunConfig::partition, &PartitionSpec::mean_sentences),
      nested_field("data", "dispersion", &RunConfig::partition, &PartitionSpec::dispersion),
      nested_field("data", "skew", &RunConfig::partition, &PartitionSpec::skew),
      nested_field("data", "max_context", &RunConfig::partition, &PartitionSpec::max_context),

      nested_field("synth", "num_emoji", &RunConfig::synth, &TemplateSpec::num_emoji),
      nested_field("synth", "filler_words", &RunConfig::synth, &TemplateSpec::num_filler_words),
      nested_field("synth", "zipf_exponent", &RunConfig::synth, &TemplateSpec::zipf_exponent),
      nested_field("synth", "emoji_sentence_fraction", &RunConfig::synth, &TemplateSpec::emoji_sentence_fraction),
      nested_field("synth", "top_emoji_share", &RunConfig::synth, &TemplateSpec::top_emoji_share),
      nested_field("synth", "emoji_decay", &RunConfig::synth, &TemplateSpec::emoji_decay),
      nested_field("synth", "topic_affinity", &RunConfig::synth, &TemplateSpec::topic_affinity),
      nested_field("synth", "topic_mention_rate", &RunConfig::synth, &TemplateSpec::topic_mention_rate),
      nested_field("synth", "min_filler", &RunConfig::synth, &TemplateSpec::min_filler),
      nested_field("synth", "max_filler", &RunConfig::synth, &TemplateSpec::max_filler),

      number_field("model", "embed_dim", &RunConfig::embed_dim),
      number_field("model", "hidden_dim", &RunConfig::hidden_dim),
      number_field("model", "num_layers", &RunConfig::num_layers),

      nested_field("client", "client_lr", &RunConfig::client, &ClientOptConfig::client_lr),
      nested_field("client", "batch_size", &RunConfig::client, &ClientOptConfig::batch_size),
      nested_field("client", "epochs", &RunConfig::client, &ClientOptConfig::epochs),
      nested_field("client", "clip_norm", &RunConfig::client, &ClientOptConfig::clip_norm),

      string_field("server", "server_optimizer", &RunConfig::server_optimizer),
      number_field("server", "server_lr", &RunConfig::server_lr),
      number_field("server", "momentum", &RunConfig::momentum),

      nested_field("federation", "devices_per_round", &RunConfig::federation, &FederationConfig::devices_per_round),
      nested_field("federation", "total_rounds", &RunConfig::federation, &FederationConfig::total_rounds),
      nested_field("federation", "eval_every", &RunConfig::federation, &FederationConfig::eval_every),
      nested_field("federation", "eval_clients", &RunConfig::federation, &FederationConfig::eval_clients),
      nested_field("federation", "holdout_fraction", &RunConfig::federation, &FederationConfig::holdout_fraction),
      nested_field("federation", "availability", &RunConfig::federation, &FederationConfig::availability),
      number_field("federation", "central_epochs", &RunConfig::central_epochs),

      number_field("pretrain", "lm_rounds", &RunConfig::lm_rounds),
      number_field("pretrain", "lm_client_lr", &RunConfig::lm_client_lr),
      number_field("pretrain", "lm_batch_size", &RunConfig::lm_batch_size),

      number_field("inference", "alpha", &RunConfig::alpha),
      number_field("inference", "threshold", &RunConfig::threshold),
      number_field("inference", "smoothing", &RunConfig::smoothing),
      number_field("inference", "top_k", &RunConfig::top_k),
  };
  return fields;
}

inline const ConfigField *find_field(std::string_view section, std::string_view key) {
  for (const auto &f : config_fields())
    if (f.key == key && (section.empty() || f.section == section)) return &f;
  return nullptr;
}

}  // namespace detail

/// Range checks; each message names the offending key.
inline void validate(const RunConfig &c) {
  auto require = [](bool ok, const std::string &msg) {
    if (!ok) throw ConfigError(msg);
  };
  require(c.threads >= 1, "threads must be >= 1");
  require(c.vocab_size >= 3, "vocab_size must be >= 3");
  require(c.unk_keep_fraction > 0.0 && c.unk_keep_fraction <= 1.0, "unk_keep_fraction must be in (0, 1]");
  require(c.partition.num_clients >= 2, "num_clients must be >= 2");
  require(c.partition.mean_sentences >= 1.0, "sentences_per_client must be >= 1");
  require(c.partition.dispersion >= 0.0, "dispersion must be >= 0");
  require(c.partition.skew >= 0.0, "skew must be >= 0");
  require(c.partition.max_context >= 1, "max_context must be >= 1");
  require(c.synth.num_emoji >= 1, "num_emoji must be >= 1");
  require(c.synth.num_filler_words >= 1, "filler_words must be >= 1");
  require(c.synth.emoji_sentence_fraction > 0.0 && c.synth.emoji_sentence_fraction < 1.0,
          "emoji_sentence_fraction must be in (0, 1)");
  require(c.synth.top_emoji_share > 0.0 && c.synth.top_emoji_share < 1.0, "top_emoji_share must be in (0, 1)");
  require(c.synth.emoji_decay > 0.0, "emoji_decay must be > 0");
  require(c.synth.topic_affinity >= 0.0 && c.synth.topic_affinity <= 1.0, "topic_affinity must be in [0, 1]");
  require(c.synth.topic_mention_rate >= 0.0 && c.synth.topic_mention_rate <= 1.0,
          "topic_mention_rate must be in [0, 1]");
  require(c.synth.min_filler >= 1 && c.synth.min_filler <= c.synth.max_filler,
          "min_filler must be >= 1 and <= max_filler");
  require(c.embed_dim >= 1, "embed_dim must be >= 1");
  require(c.hidden_dim >= 1, "hidden_dim must be >= 1");
  require(c.num_layers >= 1, "num_layers must be >= 1");
  require(c.server_optimizer == "sgd" || c.server_optimizer == "nesterov",
          "server_optimizer must be 'sgd' or 'nesterov'");
  require(c.server_lr > 0.0, "server_lr must be > 0");
  require(c.momentum >= 0.0 && c.momentum < 1.0, "momentum must be in [0, 1)");
  require(c.lm_client_lr >= 0.0, "lm_client_lr must be >= 0");
  require(c.lm_batch_size >= 1, "lm_batch_size must be >= 1");
  require(c.alpha >= 0.0, "alpha must be >= 0");
  require(c.threshold > 0.0 && c.threshold <= 1.0, "threshold must be in (0, 1]");
  require(c.smoothing >= 0.0, "smoothing must be >= 0");
  require(c.top_k >= 1, "top_k must be >= 1");
  require(c.federation.devices_per_round >= 1, "devices_per_round must be >= 1");
  c.client.validate();
  c.federation.validate();
  if (!c.corpus_path.empty() && c.inventory_path.empty())
    throw ConfigError("inventory must be set when corpus is set");
}

/// Parses configuration text. Errors carry the 1-based line number.
inline RunConfig parse_config(std::string_view text) {
  RunConfig cfg;
  std::istringstream in{std::string(text)};
  std::string line, section;
  std::set<std::string> seen;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    const auto hash = line.find_first_of("#;");
    if (hash != std::string::npos) line.erase(hash);
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    const std::string where = "line " + std::to_string(lineno) + ": ";
    if (t.front() == '[') {
      if (t.back() != ']') throw ConfigError(where + "malformed section header");
      section = detail::trim(std::string_view(t).substr(1, t.size() - 2));
      bool known = false;
      for (const auto &f : detail::config_fields()) known |= f.section == section;
      if (!known) throw ConfigError(where + "unknown section [" + section + "]");
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value'");
    const std::string key = detail::trim(std::string_view(t).substr(0, eq));
    const std::string value = detail::trim(std::string_view(t).substr(eq + 1));
    const auto *field = detail::find_field(section, key);
    if (field == nullptr)
      throw ConfigError(where + "unknown key '" + key + "'" +
                        (section.empty() ? "" : " in section [" + section + "]"));
    if (!seen.insert(key).second) throw ConfigError(where + "duplicate key '" + key + "'");
    try {
      field->parse(cfg, value);
    } catch (const ConfigError &e) {
      throw ConfigError(where + e.what());
    }
  }
  validate(cfg);
  return cfg;
}

inline RunConfig load_config(const std::string &path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

/// Fully resolved configuration in the same file format.
inline std::string to_text(const RunConfig &cfg) {
  std::string out, section;
  for (const auto &f : detail::config_fields()) {
    if (f.section != section) {
      if (!section.empty()) out += '\n';
      section = f.section;
      out += "[" + section + "]\n";
    }
    out += f.key + " = " + f.print(cfg) + "\n";
  }
  return out;
}

}  // namespace fedemoji
