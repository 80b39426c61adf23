// SPDX-License-Identifier: Apache-2.0
/**
 * @file   fedemoji.cpp
 * @brief  Command-line driver: corpus synthesis, vocabulary building, LM
 *         pretraining, federated and central training, evaluation,
 *         interactive prediction and ablation sweeps.
 *
 * Exit codes: 0 success, 1 configuration error, 2 runtime failure.
 */
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fedemoji/config.hpp"
#include "fedemoji/experiment.hpp"
#include "fedemoji/inference.hpp"

namespace fs = std::filesystem;
using namespace fedemoji;

namespace {

struct CommonOptions {
  std::string config_path;
  std::string out;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App *cmd, CommonOptions &opts) {
  cmd->add_option("--config", opts.config_path, "key = value configuration file");
  cmd->add_option("--out", opts.out, "output directory (overrides output_dir)");
  cmd->add_option("--seed", opts.seed, "random seed (overrides seed)");
}

RunConfig resolve(const CommonOptions &opts) {
  RunConfig cfg = opts.config_path.empty() ? RunConfig{} : load_config(opts.config_path);
  if (!opts.out.empty()) cfg.output_dir = opts.out;
  if (opts.seed) cfg.seed = *opts.seed;
  validate(cfg);
  std::clog << "# resolved configuration\n" << to_text(cfg) << std::flush;
  return cfg;
}

std::string describe(const EvalReport &r) {
  return "round=" + std::to_string(r.round_end) + "\tloss=" + format_metric(r.loss) +
         "\taccuracy_at_1=" + format_metric(r.accuracy_at_1) + "\tauc=" + format_metric(r.auc) +
         "\temoji_examples=" + std::to_string(r.num_emoji_examples) +
         "\ttotal_examples=" + std::to_string(r.num_total_examples);
}

int cmd_synth(const RunConfig &cfg) {
  fs::create_directories(cfg.output_dir);
  const auto synth = synth_from_config(cfg);
  detail::write_lines((fs::path(cfg.output_dir) / "corpus.txt").string(), synth.lines);
  EmojiInventory(synth.emoji).save((fs::path(cfg.output_dir) / "emoji.txt").string());
  write_resolved_config(cfg, cfg.output_dir);
  std::cout << "wrote " << synth.lines.size() << " sentences and " << synth.emoji.size()
            << " emoji to " << cfg.output_dir << '\n';
  return 0;
}

int cmd_build_vocab(RunConfig cfg) {
  cfg.vocab_path.clear();
  EmojiInventory inventory;
  std::vector<Sentence> sentences;
  if (cfg.corpus_path.empty()) {
    const auto synth = synth_from_config(cfg);
    inventory = EmojiInventory(synth.emoji);
    sentences = tokenize_lines(synth.lines, inventory);
  } else {
    inventory = EmojiInventory::load(cfg.inventory_path);
    sentences = load_corpus(cfg.corpus_path, inventory);
  }
  const auto vocab = build_vocab(sentences, cfg.vocab_size, &inventory);
  fs::create_directories(cfg.output_dir);
  vocab.save((fs::path(cfg.output_dir) / "vocab.txt").string());
  std::cout << "vocabulary of " << vocab.size() << " entries written to " << cfg.output_dir << '\n';
  return 0;
}

int cmd_pretrain(const RunConfig &cfg) {
  const auto data = prepare_data(cfg);
  const auto result = run_pretrain_lm(cfg, data, cfg.output_dir);
  save_checkpoint((fs::path(cfg.output_dir) / "lm.ckpt").string(), result.final_params);
  std::cout << "lm " << describe(result.evals.back()) << '\n';
  return 0;
}

int cmd_train_fed(const RunConfig &cfg) {
  const auto data = prepare_data(cfg);
  const auto result = run_federated(cfg, data, cfg.output_dir);
  save_checkpoint((fs::path(cfg.output_dir) / "final.ckpt").string(), result.final_params);
  std::cout << describe(result.evals.back()) << '\n';
  return 0;
}

int cmd_train_central(const RunConfig &cfg) {
  const auto data = prepare_data(cfg);
  const auto result = run_central(cfg, data, cfg.output_dir);
  save_checkpoint((fs::path(cfg.output_dir) / "final.ckpt").string(), result.final_params);
  for (std::size_t e = 0; e < result.epoch_losses.size(); ++e)
    std::cout << "epoch=" << e + 1 << "\ttrain_loss=" << format_metric(result.epoch_losses[e])
              << (e < result.evals.size() ? "\t" + describe(result.evals[e]) : "") << '\n';
  return 0;
}

int cmd_eval(const RunConfig &cfg, const std::string &checkpoint) {
  const auto data = prepare_data(cfg);
  const auto params = load_checkpoint(checkpoint);
  if (params.config() != data.model) throw ConfigError("checkpoint does not match the configured model");
  std::vector<const ClientDataset *> clients;
  for (const auto &c : data.populations.eval) clients.push_back(&c);
  const auto report = evaluate_examples(params, clients);

  std::vector<ScoredLabel> scored;
  for (const auto *c : clients)
    for (const auto &e : c->examples) {
      const auto p = predict_probs(params, e.tokens);
      scored.push_back({1.0 - p.back(), e.label != data.inventory.unk_class()});
    }
  std::cout << describe(report) << "\tbest_f1_threshold=" << format_metric(select_threshold(scored))
            << '\n';
  return 0;
}

int cmd_predict(const RunConfig &cfg, const std::string &checkpoint) {
  const auto data = prepare_data(cfg);
  const auto params = load_checkpoint(checkpoint);
  if (params.config() != data.model) throw ConfigError("checkpoint does not match the configured model");
  const auto div = diversifier_for(cfg, data);
  const TriggerConfig trigger{cfg.threshold};
  std::string line;
  while (std::getline(std::cin, line)) {
    Session session = Session::start(params.config());
    std::vector<double> probs;
    for (const auto &tok : tokenize(line, data.inventory)) {
      if (data.inventory.contains(tok)) continue;
      probs = predict_incremental(params, session, data.vocab.id(tok));
    }
    if (probs.empty()) {
      std::cout << "0\n";
      continue;
    }
    const auto pred = top_k(predict(probs, div, trigger), cfg.top_k);
    std::cout << (pred.triggered ? 1 : 0);
    for (const auto &r : pred.ranked)
      std::cout << '\t' << data.inventory.emoji(r.emoji) << ' ' << format_metric(r.raw) << ' '
                << format_metric(r.score);
    std::cout << '\n' << std::flush;
  }
  return 0;
}

int cmd_sweep(const RunConfig &cfg, const std::string &axis, const std::vector<std::string> &values) {
  const auto rows = run_sweep(cfg, parse_sweep_axis(axis), values, cfg.output_dir);
  const auto table = sweep_table(rows);
  fs::create_directories(cfg.output_dir);
  std::ofstream((fs::path(cfg.output_dir) / "sweep.tsv").string()) << table;
  std::cout << table;
  return 0;
}

}  // namespace

int main(int argc, char **argv) {
  CLI::App app{"Federated CIFG emoji prediction simulator"};
  app.require_subcommand(1);

  CommonOptions synth_opts, vocab_opts, lm_opts, fed_opts, central_opts, eval_opts, predict_opts,
      sweep_opts;
  std::string eval_ckpt, predict_ckpt, axis;
  std::vector<std::string> values;

  auto *synth = app.add_subcommand("synth-corpus", "write a synthetic corpus and emoji inventory");
  add_common(synth, synth_opts);
  auto *vocab = app.add_subcommand("build-vocab", "build the word vocabulary");
  add_common(vocab, vocab_opts);
  auto *lm = app.add_subcommand("pretrain-lm", "federated next-word pretraining");
  add_common(lm, lm_opts);
  auto *fed = app.add_subcommand("train-fed", "federated emoji training");
  add_common(fed, fed_opts);
  auto *central = app.add_subcommand("train-central", "server-side baseline training");
  add_common(central, central_opts);
  auto *eval = app.add_subcommand("eval", "evaluate a checkpoint on the held-out clients");
  add_common(eval, eval_opts);
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint to evaluate")->required();
  auto *predict = app.add_subcommand("predict", "predict emoji for lines read from stdin");
  add_common(predict, predict_opts);
  predict->add_option("--checkpoint", predict_ckpt, "emoji model checkpoint")->required();
  auto *sweep = app.add_subcommand("sweep", "one federated run per value of an ablation axis");
  add_common(sweep, sweep_opts);
  sweep->add_option("--axis", axis, "B, K or server_opt")->required();
  sweep->add_option("--values", values, "values, e.g. 1 50 or sgd:1 nesterov:1")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*synth) return cmd_synth(resolve(synth_opts));
    if (*vocab) return cmd_build_vocab(resolve(vocab_opts));
    if (*lm) return cmd_pretrain(resolve(lm_opts));
    if (*fed) return cmd_train_fed(resolve(fed_opts));
    if (*central) return cmd_train_central(resolve(central_opts));
    if (*eval) return cmd_eval(resolve(eval_opts), eval_ckpt);
    if (*predict) return cmd_predict(resolve(predict_opts), predict_ckpt);
    if (*sweep) return cmd_sweep(resolve(sweep_opts), axis, values);
  } catch (const ConfigError &e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
