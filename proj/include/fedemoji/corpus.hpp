// SPDX-License-Identifier: Apache-2.0
/**
 * @file   corpus.hpp
 * @brief  Corpus ingestion and synthesis, vocabularies, example extraction and
 *         non-IID client partitioning.
 *
 * A corpus is plain UTF-8 text, one sentence per line. Emoji are recognised
 * purely by membership in an EmojiInventory (one emoji per line, line order is
 * the class index). Every sentence becomes zero or more Examples:
 *
 *   "congrats to you 🎉"   ->  ([congrats, to, you], class(🎉))
 *   "see you tomorrow"     ->  ([see, you][:n], UNK)   n ~ U{1..3}
 */
#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "fedemoji/error.hpp"
#include "fedemoji/rng.hpp"

namespace fedemoji {

using TokenId = std::int32_t;
using ClassId = std::int32_t;
using Sentence = std::vector<std::string>;

inline constexpr std::string_view kOovToken = "<oov>";
inline constexpr std::string_view kPadToken = "<pad>";
inline constexpr TokenId kOovId = 0;
inline constexpr TokenId kPadId = 1;
inline constexpr std::size_t kDefaultMaxContext = 20;

namespace detail {

inline std::vector<std::string> read_lines(const std::string &path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path + "'");
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

inline void write_lines(const std::string &path, std::span<const std::string> lines) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path + "'");
  for (const auto &l : lines) out << l << '\n';
  if (!out) throw Error("write failed for '" + path + "'");
}

inline std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

}  // namespace detail

/// Output label space: N emoji classes followed by one UNK class.
class EmojiInventory {
 public:
  EmojiInventory() = default;

  explicit EmojiInventory(std::vector<std::string> emoji) : emoji_(std::move(emoji)) {
    if (emoji_.empty()) throw Error("emoji inventory is empty");
    for (std::size_t i = 0; i < emoji_.size(); ++i) {
      if (emoji_[i].empty()) throw Error("emoji inventory contains an empty entry");
      if (!index_.emplace(emoji_[i], static_cast<ClassId>(i)).second)
        throw Error("duplicate emoji in inventory: " + emoji_[i]);
    }
  }

  static EmojiInventory load(const std::string &path) {
    std::vector<std::string> emoji;
    for (auto &line : detail::read_lines(path)) {
      auto t = detail::trim(line);
      if (!t.empty()) emoji.push_back(std::move(t));
    }
    return EmojiInventory(std::move(emoji));
  }

  void save(const std::string &path) const { detail::write_lines(path, emoji_); }

  std::optional<ClassId> class_of(std::string_view token) const {
    auto it = index_.find(std::string(token));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }
  bool contains(std::string_view token) const { return class_of(token).has_value(); }

  std::size_t num_emoji() const { return emoji_.size(); }
  std::size_t num_classes() const { return emoji_.size() + 1; }
  ClassId unk_class() const { return static_cast<ClassId>(emoji_.size()); }
  const std::string &emoji(ClassId c) const { return emoji_.at(static_cast<std::size_t>(c)); }
  const std::vector<std::string> &all() const { return emoji_; }

 private:
  std::vector<std::string> emoji_;
  std::unordered_map<std::string, ClassId> index_;
};

/// Word vocabulary. Ids are dense; 0 and 1 are reserved for OOV and PAD.
class Vocabulary {
 public:
  Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

  /// `words` excludes the two reserved entries.
  explicit Vocabulary(std::vector<std::string> words) {
    words_.reserve(words.size() + 2);
    words_.emplace_back(kOovToken);
    words_.emplace_back(kPadToken);
    for (auto &w : words) {
      if (w.empty()) throw Error("vocabulary contains an empty word");
      if (w == kOovToken || w == kPadToken) throw Error("vocabulary repeats a reserved token");
      words_.push_back(std::move(w));
    }
    for (std::size_t i = 0; i < words_.size(); ++i)
      if (!id_of_.emplace(words_[i], static_cast<TokenId>(i)).second)
        throw Error("duplicate vocabulary word: " + words_[i]);
  }

  static Vocabulary load(const std::string &path) {
    auto lines = detail::read_lines(path);
    while (!lines.empty() && lines.back().empty()) lines.pop_back();
    if (lines.size() < 2 || lines[0] != kOovToken || lines[1] != kPadToken)
      throw Error("vocabulary file '" + path + "' must start with " + std::string(kOovToken) +
                  " and " + std::string(kPadToken));
    return Vocabulary(std::vector<std::string>(lines.begin() + 2, lines.end()));
  }

  void save(const std::string &path) const { detail::write_lines(path, words_); }

  TokenId id(std::string_view word) const {
    auto it = id_of_.find(std::string(word));
    return it == id_of_.end() ? kOovId : it->second;
  }
  bool contains(std::string_view word) const { return id_of_.count(std::string(word)) != 0; }
  const std::string &word(TokenId id) const { return words_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return words_.size(); }
  const std::vector<std::string> &words() const { return words_; }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, TokenId> id_of_;
};

/// One training or evaluation instance: a word-id context and a target class.
struct Example {
  std::vector<TokenId> tokens;
  ClassId label = 0;
  double weight = 1.0;

  bool operator==(const Example &) const = default;
};

/// One simulated device's local cache.
struct ClientDataset {
  std::size_t client_id = 0;
  std::vector<std::size_t> sentences;  ///< indices into the source corpus
  std::vector<Example> examples;
};

// ---------------------------------------------------------------------------
// Tokenization and vocabulary

/// Whitespace split. Inventory emoji are kept verbatim; every other token is
/// lowercased (ASCII) and loses trailing punctuation, and is dropped if that
/// leaves it empty.
inline Sentence tokenize(std::string_view line, const EmojiInventory &inventory) {
  Sentence out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    std::size_t j = i;
    while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
    if (j > i) {
      std::string tok(line.substr(i, j - i));
      if (!inventory.contains(tok)) {
        for (auto &ch : tok)
          if (static_cast<unsigned char>(ch) < 0x80) ch = static_cast<char>(std::tolower(ch));
        while (!tok.empty() && static_cast<unsigned char>(tok.back()) < 0x80 &&
               std::ispunct(static_cast<unsigned char>(tok.back())))
          tok.pop_back();
      }
      if (!tok.empty()) out.push_back(std::move(tok));
    }
    i = j;
  }
  return out;
}

inline std::vector<Sentence> tokenize_lines(std::span<const std::string> lines,
                                            const EmojiInventory &inventory) {
  std::vector<Sentence> out;
  out.reserve(lines.size());
  for (const auto &l : lines) {
    auto s = tokenize(l, inventory);
    if (!s.empty()) out.push_back(std::move(s));
  }
  return out;
}

inline std::vector<Sentence> load_corpus(const std::string &path, const EmojiInventory &inventory) {
  const auto lines = detail::read_lines(path);
  return tokenize_lines(lines, inventory);
}

/// Keeps the (target_size - 2) most frequent words, most frequent first with
/// lexicographic tie-breaks. Tokens in `skip` (emoji) are not counted.
inline Vocabulary build_vocab(std::span<const Sentence> sentences, std::size_t target_size,
                              const EmojiInventory *skip = nullptr) {
  if (target_size < 3) throw Error("vocabulary target size must be at least 3");
  std::unordered_map<std::string, std::size_t> counts;
  for (const auto &s : sentences)
    for (const auto &tok : s) {
      if (skip != nullptr && skip->contains(tok)) continue;
      if (tok == kOovToken || tok == kPadToken) continue;
      ++counts[tok];
    }
  if (counts.empty()) throw Error("empty corpus");

  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  const std::size_t keep = std::min(ranked.size(), target_size - 2);
  auto by_frequency = [](const auto &a, const auto &b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  };
  std::partial_sort(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(keep),
                    ranked.end(), by_frequency);
  std::vector<std::string> words;
  words.reserve(keep);
  for (std::size_t i = 0; i < keep; ++i) words.push_back(std::move(ranked[i].first));
  return Vocabulary(std::move(words));
}

// ---------------------------------------------------------------------------
// Example extraction

namespace detail {

inline std::vector<TokenId> last_n(const std::vector<TokenId> &ids, std::size_t n) {
  if (ids.size() <= n) return ids;
  return {ids.end() - static_cast<std::ptrdiff_t>(n), ids.end()};
}

}  // namespace detail

/// One example per inventory emoji that has at least one preceding word (the
/// context is every word before it, emoji excluded). A sentence with no
/// inventory emoji yields a single UNK example truncated to a uniformly random
/// length in [1, word count]. Contexts keep their most recent `max_context`
/// words.
inline std::vector<Example> extract_examples(const Sentence &sentence, const Vocabulary &vocab,
                                             const EmojiInventory &inventory, Rng &rng,
                                             std::size_t max_context = kDefaultMaxContext) {
  if (sentence.empty()) throw Error("cannot extract examples from an empty sentence");
  if (max_context == 0) throw Error("max_context must be positive");

  std::vector<Example> out;
  std::vector<TokenId> words;
  bool saw_emoji = false;
  for (const auto &tok : sentence) {
    if (auto cls = inventory.class_of(tok)) {
      saw_emoji = true;
      if (!words.empty()) out.push_back({detail::last_n(words, max_context), *cls, 1.0});
    } else {
      words.push_back(vocab.id(tok));
    }
  }
  if (!saw_emoji && !words.empty()) {
    const std::size_t len = 1 + uniform_index(rng, words.size());
    words.resize(len);
    out.push_back({detail::last_n(words, max_context), inventory.unk_class(), 1.0});
  }
  return out;
}

/// Next-word training instance for language-model pretraining: the sentence's
/// words (emoji removed), first `max_len` kept. Sentences with fewer than two
/// words give nothing.
inline std::optional<Example> extract_lm_example(const Sentence &sentence, const Vocabulary &vocab,
                                                 const EmojiInventory &inventory,
                                                 std::size_t max_len = kDefaultMaxContext + 1) {
  std::vector<TokenId> words;
  for (const auto &tok : sentence) {
    if (inventory.contains(tok)) continue;
    words.push_back(vocab.id(tok));
    if (words.size() == max_len) break;
  }
  if (words.size() < 2) return std::nullopt;
  return Example{std::move(words), 0, 1.0};
}

/// UNK examples keep weight 1 with probability `keep_fraction`, else get 0.
inline std::vector<Example> downweight_unk(std::vector<Example> examples, double keep_fraction,
                                           ClassId unk_class, Rng &rng) {
  if (!(keep_fraction > 0.0 && keep_fraction <= 1.0))
    throw Error("keep_fraction must be in (0, 1]");
  for (auto &e : examples) {
    if (e.label != unk_class) continue;
    e.weight = bernoulli(rng, keep_fraction) ? 1.0 : 0.0;
  }
  return examples;
}

// ---------------------------------------------------------------------------
// Partitioning

/// How a corpus is spread over simulated devices.
struct PartitionSpec {
  std::size_t num_clients = 600;
  /// Only used to size synthesized corpora; the realised mean is always
  /// corpus size / num_clients.
  double mean_sentences = 100.0;
  /// Log-normal sigma of relative client sizes; 0 gives equal shares.
  double dispersion = 0.5;
  /// Log-boost applied to a client's preferred emoji when placing emoji
  /// sentences; 0 is IID.
  double skew = 1.0;
  std::uint64_t seed = 1;
  std::size_t max_context = kDefaultMaxContext;
};

namespace detail {

inline std::vector<std::size_t> client_sizes(std::size_t total, const PartitionSpec &spec,
                                             Rng &rng) {
  const std::size_t n = spec.num_clients;
  std::vector<double> w(n, 1.0);
  if (spec.dispersion > 0.0)
    for (auto &x : w) x = std::exp(spec.dispersion * standard_normal(rng));
  double sum = 0.0;
  for (double x : w) sum += x;

  const std::size_t spare = total - n;
  std::vector<std::size_t> sizes(n, 1);
  std::vector<std::pair<double, std::size_t>> remainders(n);
  std::size_t given = 0;
  for (std::size_t k = 0; k < n; ++k) {
    const double exact = static_cast<double>(spare) * w[k] / sum;
    const auto whole = static_cast<std::size_t>(std::floor(exact));
    sizes[k] += whole;
    given += whole;
    remainders[k] = {exact - static_cast<double>(whole), k};
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto &a, const auto &b) { return a.first > b.first; });
  for (std::size_t r = 0; given < spare; ++r, ++given) ++sizes[remainders[r % n].second];
  return sizes;
}

inline std::optional<ClassId> first_emoji(const Sentence &s, const EmojiInventory &inventory) {
  for (const auto &tok : s)
    if (auto c = inventory.class_of(tok)) return c;
  return std::nullopt;
}

}  // namespace detail

/// Assigns every sentence to exactly one client and extracts each client's
/// examples. Client sizes follow `spec.dispersion`; each client prefers one
/// emoji class (drawn by corpus frequency) and attracts sentences of that
/// class with relative weight exp(skew).
inline std::vector<ClientDataset> partition_clients(std::span<const Sentence> sentences,
                                                    const PartitionSpec &spec,
                                                    const Vocabulary &vocab,
                                                    const EmojiInventory &inventory) {
  if (spec.num_clients == 0) throw Error("num_clients must be at least 1");
  if (sentences.size() < spec.num_clients) throw Error("population underfilled");
  if (spec.dispersion < 0.0 || spec.skew < 0.0) throw Error("dispersion and skew must be >= 0");

  Rng rng = make_rng(spec.seed, Stream::kPartition);
  const std::size_t n = spec.num_clients;
  const auto sizes = detail::client_sizes(sentences.size(), spec, rng);

  std::vector<std::size_t> emoji_sentences, plain_sentences;
  std::vector<ClassId> sentence_class(sentences.size(), -1);
  std::vector<double> class_counts(inventory.num_emoji(), 0.0);
  for (std::size_t s = 0; s < sentences.size(); ++s) {
    if (auto c = detail::first_emoji(sentences[s], inventory)) {
      sentence_class[s] = *c;
      class_counts[static_cast<std::size_t>(*c)] += 1.0;
      emoji_sentences.push_back(s);
    } else {
      plain_sentences.push_back(s);
    }
  }

  std::vector<ClassId> preferred(n, -1);
  if (!emoji_sentences.empty())
    for (auto &p : preferred) p = static_cast<ClassId>(categorical(rng, class_counts));

  std::vector<std::size_t> free_slots(sizes);
  std::vector<std::vector<std::size_t>> assigned(n);
  const double boost = std::exp(spec.skew);
  shuffle(emoji_sentences, rng);
  std::vector<double> weights(n);
  for (std::size_t s : emoji_sentences) {
    for (std::size_t k = 0; k < n; ++k)
      weights[k] = static_cast<double>(free_slots[k]) *
                   (preferred[k] == sentence_class[s] ? boost : 1.0);
    const std::size_t k = categorical(rng, weights);
    assigned[k].push_back(s);
    --free_slots[k];
  }

  std::vector<std::size_t> slots;
  slots.reserve(plain_sentences.size());
  for (std::size_t k = 0; k < n; ++k) slots.insert(slots.end(), free_slots[k], k);
  shuffle(slots, rng);
  for (std::size_t i = 0; i < plain_sentences.size(); ++i)
    assigned[slots[i]].push_back(plain_sentences[i]);

  std::vector<ClientDataset> clients(n);
  for (std::size_t k = 0; k < n; ++k) {
    auto &c = clients[k];
    c.client_id = k;
    c.sentences = std::move(assigned[k]);
    std::sort(c.sentences.begin(), c.sentences.end());
    Rng trunc = make_rng(spec.seed, Stream::kTruncate, {k});
    for (std::size_t s : c.sentences) {
      auto ex = extract_examples(sentences[s], vocab, inventory, trunc, spec.max_context);
      c.examples.insert(c.examples.end(), std::make_move_iterator(ex.begin()),
                        std::make_move_iterator(ex.end()));
    }
  }
  return clients;
}

/// Rebuilds each client's examples as next-word (language model) instances
/// over the same sentences.
inline std::vector<ClientDataset> language_model_clients(std::span<const ClientDataset> clients,
                                                         std::span<const Sentence> sentences,
                                                         const Vocabulary &vocab,
                                                         const EmojiInventory &inventory,
                                                         std::size_t max_len = kDefaultMaxContext + 1) {
  std::vector<ClientDataset> out;
  out.reserve(clients.size());
  for (const auto &c : clients) {
    ClientDataset lm{c.client_id, c.sentences, {}};
    for (std::size_t s : c.sentences)
      if (auto ex = extract_lm_example(sentences[s], vocab, inventory, max_len))
        lm.examples.push_back(std::move(*ex));
    out.push_back(std::move(lm));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic corpus

/// Parameters of the synthetic generator. Each emoji owns a topic: a cue word
/// followed by a shared bridge word and a topic-specific completion word
/// ("cue bridge <emoji> completion"). Non-emoji sentences mention topics too,
/// without the emoji, so a next-word model learns the same structure.
struct TemplateSpec {
  std::size_t num_sentences = 60000;
  std::size_t num_emoji = 20;
  std::size_t num_filler_words = 400;
  double zipf_exponent = 1.0;
  double emoji_sentence_fraction = 0.03;
  double top_emoji_share = 0.30;
  double emoji_decay = 0.8;
  /// Probability that an emoji sentence uses its own emoji's topic phrase.
  double topic_affinity = 0.9;
  /// Probability that a non-emoji sentence mentions a topic phrase.
  double topic_mention_rate = 0.2;
  std::size_t min_filler = 2;
  std::size_t max_filler = 8;
};

/// Light-tailed emoji usage: the first class takes `top_share`, the others
/// decay geometrically.
inline std::vector<double> emoji_frequency_table(std::size_t n, double top_share, double decay) {
  if (n == 0) throw Error("need at least one emoji");
  if (n == 1) return {1.0};
  if (!(top_share > 0.0 && top_share < 1.0)) throw Error("top_emoji_share must be in (0,1)");
  std::vector<double> f(n);
  f[0] = top_share;
  double rest = 0.0;
  for (std::size_t i = 1; i < n; ++i) rest += std::pow(decay, static_cast<double>(i - 1));
  for (std::size_t i = 1; i < n; ++i)
    f[i] = (1.0 - top_share) * std::pow(decay, static_cast<double>(i - 1)) / rest;
  return f;
}

inline std::vector<std::string> default_emoji(std::size_t n) {
  static const char *const kCommon[] = {
      "😂", "❤️", "😍", "😭", "😊", "😘", "🎉", "🙏", "👍", "🔥", "💕", "😁", "🤣", "💯", "😎",
      "😩", "🙄", "😢", "💀", "✨", "😉", "🤔", "👏", "😅", "💪", "🙌", "😡", "🥰", "😴", "🤗"};
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i)
    out.push_back(i < std::size(kCommon) ? std::string(kCommon[i])
                                         : ":emoji" + std::to_string(i) + ":");
  return out;
}

/// Deterministic pronounceable pseudo-word for an index (CV syllables).
inline std::string synthetic_word(std::size_t index) {
  static constexpr std::string_view kConsonants = "bdfgklmnprstvz";
  static constexpr std::string_view kVowels = "aeiou";
  const std::size_t syllables = kConsonants.size() * kVowels.size();
  std::size_t count = 2, span = syllables * syllables;
  while (index >= span) {
    index -= span;
    ++count;
    span *= syllables;
  }
  std::string w;
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t s = index % syllables;
    index /= syllables;
    w += kConsonants[s / kVowels.size()];
    w += kVowels[s % kVowels.size()];
  }
  return w;
}

struct SynthCorpus {
  std::vector<std::string> lines;
  std::vector<std::string> emoji;
  std::vector<double> emoji_probs;
};

inline SynthCorpus synth_corpus(const TemplateSpec &spec, std::uint64_t seed) {
  if (spec.num_emoji == 0 || spec.num_filler_words == 0) throw Error("template spec is empty");
  if (!(spec.emoji_sentence_fraction > 0.0 && spec.emoji_sentence_fraction < 1.0))
    throw Error("emoji_sentence_fraction must be in (0,1)");
  if (spec.min_filler > spec.max_filler) throw Error("min_filler exceeds max_filler");

  SynthCorpus out;
  out.emoji = default_emoji(spec.num_emoji);
  out.emoji_probs = emoji_frequency_table(spec.num_emoji, spec.top_emoji_share, spec.emoji_decay);

  const std::size_t n_emoji = spec.num_emoji;
  std::vector<std::string> filler(spec.num_filler_words);
  for (std::size_t i = 0; i < filler.size(); ++i) filler[i] = synthetic_word(i);
  std::vector<std::string> cue(n_emoji), completion(2 * n_emoji);
  for (std::size_t t = 0; t < n_emoji; ++t) cue[t] = synthetic_word(spec.num_filler_words + t);
  for (std::size_t t = 0; t < 2 * n_emoji; ++t)
    completion[t] = synthetic_word(spec.num_filler_words + n_emoji + t);
  static const char *const kBridge[] = {"so", "really", "very"};

  std::vector<double> zipf_cdf(filler.size());
  double acc = 0.0;
  for (std::size_t r = 0; r < filler.size(); ++r) {
    acc += 1.0 / std::pow(static_cast<double>(r + 1), spec.zipf_exponent);
    zipf_cdf[r] = acc;
  }
  Rng rng = make_rng(seed, Stream::kSynth);
  auto draw_filler = [&]() -> const std::string & {
    const double u = uniform01(rng) * acc;
    auto it = std::upper_bound(zipf_cdf.begin(), zipf_cdf.end(), u);
    return filler[std::min<std::size_t>(static_cast<std::size_t>(it - zipf_cdf.begin()),
                                        filler.size() - 1)];
  };

  const auto n_with_emoji = static_cast<std::size_t>(
      std::llround(spec.emoji_sentence_fraction * static_cast<double>(spec.num_sentences)));
  std::vector<char> has_emoji(spec.num_sentences, 0);
  std::fill_n(has_emoji.begin(), std::min(n_with_emoji, spec.num_sentences), 1);
  shuffle(has_emoji, rng);

  out.lines.reserve(spec.num_sentences);
  std::vector<std::string> words;
  for (std::size_t s = 0; s < spec.num_sentences; ++s) {
    words.clear();
    const std::size_t len =
        spec.min_filler + uniform_index(rng, spec.max_filler - spec.min_filler + 1);
    for (std::size_t w = 0; w < len; ++w) words.push_back(draw_filler());

    std::vector<std::string> phrase;
    if (has_emoji[s]) {
      const std::size_t e = categorical(rng, out.emoji_probs);
      const std::size_t topic =
          bernoulli(rng, spec.topic_affinity) ? e : uniform_index(rng, n_emoji);
      phrase = {cue[topic], kBridge[uniform_index(rng, 3)], out.emoji[e],
                completion[2 * topic + uniform_index(rng, 2)]};
    } else if (bernoulli(rng, spec.topic_mention_rate)) {
      const std::size_t topic = categorical(rng, out.emoji_probs);
      phrase = {cue[topic], kBridge[uniform_index(rng, 3)],
                completion[2 * topic + uniform_index(rng, 2)]};
    }
    if (!phrase.empty()) {
      const std::size_t at = 1 + uniform_index(rng, words.size());
      words.insert(words.begin() + static_cast<std::ptrdiff_t>(at), phrase.begin(), phrase.end());
    }
    std::string line;
    for (std::size_t w = 0; w < words.size(); ++w) {
      if (w) line += ' ';
      line += words[w];
    }
    out.lines.push_back(std::move(line));
  }
  return out;
}

}  // namespace fedemoji
