// SPDX-License-Identifier: Apache-2.0
/**
 * @file   inference.hpp
 * @brief  Incremental decoding with cached recurrent state, UNK-threshold
 *         triggering and frequency-diversified emoji ranking.
 *
 * Diversified score of emoji i given model probability p_i and empirical
 * training frequency P_i:
 *
 *   S_i = p_i / P_i^alpha        (alpha = 0 leaves the ranking untouched)
 */
#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "fedemoji/corpus.hpp"
#include "fedemoji/error.hpp"
#include "fedemoji/metrics.hpp"
#include "fedemoji/model.hpp"

namespace fedemoji {

/// Per-user decoding state: one CellState advanced a token at a time.
struct Session {
  CellState state;
  std::size_t position = 0;

  static Session start(const ModelConfig &config) { return {CellState::zeros(config), 0}; }
};

/// Feeds one token through every layer from the cached state and returns the
/// class distribution. Cost does not depend on how many tokens came before.
inline std::vector<double> predict_incremental(const Parameters &params, Session &session,
                                               TokenId next_token) {
  const auto &cfg = params.config();
  if (next_token < 0 || static_cast<std::size_t>(next_token) >= cfg.vocab_size)
    throw Error("token out of range");
  if (session.state.layers.size() != cfg.num_layers) throw Error("session does not match model");
  std::span<const double> x = params.embedding_row(next_token);
  for (std::size_t l = 0; l < cfg.num_layers; ++l)
    x = cifg_step(CifgLayerView::of(params, l), x, session.state.layers[l]);
  ++session.position;

  const std::size_t h = cfg.hidden_dim, C = cfg.num_classes;
  const double *W = params.data() + params.layout().output_weight;
  const double *b = params.data() + params.layout().output_bias;
  std::vector<double> logits(b, b + C);
  for (std::size_t k = 0; k < h; ++k)
    for (std::size_t c = 0; c < C; ++c) logits[c] += x[k] * W[k * C + c];
  detail::softmax_inplace(logits);
  return logits;
}

struct TriggerConfig {
  double threshold = 0.5;
};

/// Suggestions are shown only when p(UNK), the last class, is below the
/// threshold.
inline bool should_trigger(std::span<const double> probs, const TriggerConfig &cfg) {
  if (probs.empty()) throw Error("empty probability vector");
  return probs.back() < cfg.threshold;
}

struct Diversifier {
  std::vector<double> empirical;  ///< P over emoji classes, strictly positive
  double alpha = 0.7;
};

struct RankedEmoji {
  ClassId emoji = 0;
  double score = 0.0;
  double raw = 0.0;
};

struct Prediction {
  std::vector<RankedEmoji> ranked;
  bool triggered = false;
};

/// Empirical emoji distribution of the emoji-labelled examples, with additive
/// smoothing.
inline Diversifier fit_diversifier(std::span<const Example> examples, std::size_t num_emoji,
                                   double alpha, double smoothing = 1.0) {
  if (num_emoji == 0) throw Error("need at least one emoji class");
  if (alpha < 0.0 || smoothing < 0.0) throw Error("alpha and smoothing must be >= 0");
  std::vector<double> counts(num_emoji, 0.0);
  double total = 0.0;
  for (const auto &e : examples) {
    if (e.label < 0 || static_cast<std::size_t>(e.label) >= num_emoji) continue;
    counts[static_cast<std::size_t>(e.label)] += 1.0;
    total += 1.0;
  }
  if (total == 0.0) throw Error("no emoji-labelled examples to fit the diversifier");
  Diversifier d;
  d.alpha = alpha;
  d.empirical.resize(num_emoji);
  const double denom = total + static_cast<double>(num_emoji) * smoothing;
  for (std::size_t i = 0; i < num_emoji; ++i) d.empirical[i] = (counts[i] + smoothing) / denom;
  return d;
}

/// Rescores the emoji classes (UNK is dropped) and sorts by score, highest
/// first, ties by class index.
inline std::vector<RankedEmoji> diversify(std::span<const double> probs, const Diversifier &div) {
  const std::size_t n = div.empirical.size();
  if (probs.size() != n + 1) throw Error("probabilities do not match the diversifier");
  std::vector<RankedEmoji> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double s = div.alpha == 0.0 ? probs[i] : probs[i] / std::pow(div.empirical[i], div.alpha);
    out[i] = {static_cast<ClassId>(i), s, probs[i]};
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const RankedEmoji &a, const RankedEmoji &b) { return a.score > b.score; });
  return out;
}

inline Prediction predict(std::span<const double> probs, const Diversifier &div,
                          const TriggerConfig &trigger) {
  return {diversify(probs, div), should_trigger(probs, trigger)};
}

inline Prediction top_k(Prediction p, std::size_t k) {
  if (k < 1) throw Error("k must be at least 1");
  if (p.ranked.size() > k) p.ranked.resize(k);
  return p;
}

/// Threshold maximising F1 of "trigger" against "an emoji follows" on a
/// validation set. Candidates are the distinct p(UNK) values (a threshold just
/// above each) plus 1.0.
inline double select_threshold(std::span<const ScoredLabel> items) {
  if (items.empty()) throw Error("no items to select a threshold on");
  std::vector<std::pair<double, bool>> by_unk;  // (p_unk, positive)
  std::size_t positives = 0;
  for (const auto &it : items) {
    by_unk.emplace_back(1.0 - it.score, it.is_positive);
    positives += it.is_positive;
  }
  std::sort(by_unk.begin(), by_unk.end());
  double best_f1 = -1.0, best_tau = 0.5;
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < by_unk.size();) {
    std::size_t j = i;
    while (j < by_unk.size() && by_unk[j].first == by_unk[i].first) {
      (by_unk[j].second ? tp : fp)++;
      ++j;
    }
    const double tau = j < by_unk.size() ? 0.5 * (by_unk[i].first + by_unk[j].first)
                                         : std::min(1.0, std::nextafter(by_unk[i].first, 2.0));
    const double f1 = 2.0 * static_cast<double>(tp) /
                      static_cast<double>(2 * tp + fp + (positives - tp));
    if (f1 > best_f1) {
      best_f1 = f1;
      best_tau = tau;
    }
    i = j;
  }
  return best_tau;
}

}  // namespace fedemoji
