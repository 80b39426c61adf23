// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include "fedemoji/corpus.hpp"
#include "fedemoji/error.hpp"

namespace fedemoji {

/// Triggering score of one example: 1 - p(UNK), and whether an emoji follows.
struct ScoredLabel {
  double score = 0.0;
  bool is_positive = false;
};

/// Highest-probability emoji class, UNK excluded. Ties go to the lower index.
inline ClassId argmax_emoji(std::span<const double> probs, std::size_t num_emoji) {
  if (num_emoji == 0 || probs.size() < num_emoji) throw Error("probability vector too short");
  return static_cast<ClassId>(std::max_element(probs.begin(), probs.begin() + static_cast<std::ptrdiff_t>(num_emoji)) -
                              probs.begin());
}

/// Fraction of emoji-labelled examples (label < unk_class) whose prediction is
/// correct. nullopt when there are none.
inline std::optional<double> accuracy_at_1(std::span<const ClassId> predicted,
                                           std::span<const ClassId> labels, ClassId unk_class) {
  if (predicted.size() != labels.size()) throw Error("prediction/label length mismatch");
  std::size_t total = 0, correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= unk_class) continue;
    ++total;
    if (predicted[i] == labels[i]) ++correct;
  }
  if (total == 0) return std::nullopt;
  return static_cast<double>(correct) / static_cast<double>(total);
}

/// ROC AUC as the Mann-Whitney statistic with midranks for ties:
/// P(score_pos > score_neg) + 0.5 P(equal). nullopt for single-class input.
inline std::optional<double> auc_roc(std::span<const ScoredLabel> items) {
  std::size_t pos = 0;
  for (const auto &it : items) {
    if (!std::isfinite(it.score)) throw Error("non-finite score");
    if (it.is_positive) ++pos;
  }
  const std::size_t neg = items.size() - pos;
  if (pos == 0 || neg == 0) return std::nullopt;

  std::vector<std::size_t> order(items.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return items[a].score < items[b].score; });
  double pos_rank_sum = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    std::size_t pos_in_group = 0;
    while (j < order.size() && items[order[j]].score == items[order[i]].score) {
      if (items[order[j]].is_positive) ++pos_in_group;
      ++j;
    }
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);
    pos_rank_sum += midrank * static_cast<double>(pos_in_group);
    i = j;
  }
  const double p = static_cast<double>(pos), n = static_cast<double>(neg);
  return (pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n);
}

}  // namespace fedemoji
