// SPDX-License-Identifier: Apache-2.0
/**
 * @file   model.hpp
 * @brief  CIFG-LSTM emoji classifier with exact backpropagation through time,
 *         a tied-embedding language-model head and LM-to-classifier transfer.
 *
 *   tokens -> embedding (V x d) -> CIFG layer 0 -> ... -> CIFG layer L-1
 *          -> last hidden (h) -> output projection (h x C) -> logits
 *
 * One CIFG cell step (forget gate coupled to the input gate):
 *
 *   i  = sigmoid(W_i [x; h] + b_i)
 *   o  = sigmoid(W_o [x; h] + b_o)
 *   g  = tanh   (W_g [x; h] + b_g)
 *   c' = (1 - i) * c + i * g
 *   h' = o * tanh(c')
 *
 * Language-model head: logits_t = (h_t P) E^T with P an h x d projection and E
 * the input embedding.
 *
 * All parameters live in one flat vector with a fixed order: embedding, then
 * each layer's gates i, o, g (weight then bias), then output weight and bias,
 * then the LM projection when present. Gate weights are stored row-major as
 * (input_dim + hidden_dim) rows by hidden_dim columns.
 */
#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "fedemoji/corpus.hpp"
#include "fedemoji/error.hpp"
#include "fedemoji/rng.hpp"

namespace fedemoji {

struct ModelConfig {
  std::size_t vocab_size = 10000;
  std::size_t embed_dim = 96;
  std::size_t num_layers = 2;
  std::size_t hidden_dim = 256;
  std::size_t num_classes = 101;

  void validate() const {
    if (vocab_size == 0 || embed_dim == 0 || num_layers == 0 || hidden_dim == 0 ||
        num_classes == 0)
      throw Error("model dimensions must all be at least 1");
  }
  std::size_t input_dim(std::size_t layer) const { return layer == 0 ? embed_dim : hidden_dim; }
  /// Same embedding and recurrent stack; output layers may differ.
  bool same_body(const ModelConfig &o) const {
    return vocab_size == o.vocab_size && embed_dim == o.embed_dim &&
           num_layers == o.num_layers && hidden_dim == o.hidden_dim;
  }
  bool operator==(const ModelConfig &) const = default;
};

inline constexpr std::size_t kNumGates = 3;
enum Gate : std::size_t { kInputGate = 0, kOutputGate = 1, kCandidateGate = 2 };

/// Parameters held by the recurrent cells for a cell with `gates` gates
/// (3 for CIFG, 4 for a standard LSTM).
inline std::size_t gate_param_count(const ModelConfig &c, std::size_t gates = kNumGates) {
  std::size_t n = 0;
  for (std::size_t l = 0; l < c.num_layers; ++l)
    n += gates * ((c.input_dim(l) + c.hidden_dim) * c.hidden_dim + c.hidden_dim);
  return n;
}

inline std::size_t param_count(const ModelConfig &c) {
  return c.vocab_size * c.embed_dim + gate_param_count(c) + c.hidden_dim * c.num_classes +
         c.num_classes;
}

/// Offsets of every block inside the flat parameter vector.
struct ParamLayout {
  struct Layer {
    std::size_t input_dim = 0;
    std::array<std::size_t, kNumGates> weight{};
    std::array<std::size_t, kNumGates> bias{};
  };
  std::size_t embedding = 0;
  std::vector<Layer> layers;
  std::size_t output_weight = 0;
  std::size_t output_bias = 0;
  std::size_t projection = 0;
  std::size_t total = 0;

  static ParamLayout of(const ModelConfig &c, bool lm_head) {
    ParamLayout p;
    std::size_t at = c.vocab_size * c.embed_dim;
    const std::size_t h = c.hidden_dim;
    for (std::size_t l = 0; l < c.num_layers; ++l) {
      Layer layer;
      layer.input_dim = c.input_dim(l);
      for (std::size_t g = 0; g < kNumGates; ++g) {
        layer.weight[g] = at;
        at += (layer.input_dim + h) * h;
        layer.bias[g] = at;
        at += h;
      }
      p.layers.push_back(layer);
    }
    p.output_weight = at;
    at += h * c.num_classes;
    p.output_bias = at;
    at += c.num_classes;
    p.projection = at;
    if (lm_head) at += h * c.embed_dim;
    p.total = at;
    return p;
  }
};

/// Full model weights as one flat vector plus the layout to address it.
class Parameters {
 public:
  Parameters() = default;
  explicit Parameters(const ModelConfig &config, bool lm_head = false)
      : config_(config), lm_head_(lm_head) {
    config_.validate();
    layout_ = ParamLayout::of(config_, lm_head_);
    values_.assign(layout_.total, 0.0);
  }

  static Parameters unflatten(const ModelConfig &config, bool lm_head, std::vector<double> flat) {
    Parameters p(config, lm_head);
    if (flat.size() != p.values_.size()) throw Error("flat parameter length mismatch");
    p.values_ = std::move(flat);
    return p;
  }
  std::vector<double> flatten() const { return values_; }

  const ModelConfig &config() const { return config_; }
  bool has_lm_head() const { return lm_head_; }
  const ParamLayout &layout() const { return layout_; }
  std::size_t size() const { return values_.size(); }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  double *data() { return values_.data(); }
  const double *data() const { return values_.data(); }

  std::span<const double> embedding_row(TokenId t) const {
    return {values_.data() + layout_.embedding + static_cast<std::size_t>(t) * config_.embed_dim,
            config_.embed_dim};
  }

  bool all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
  }

  void set_zero() { std::fill(values_.begin(), values_.end(), 0.0); }

  bool operator==(const Parameters &o) const {
    return config_ == o.config_ && lm_head_ == o.lm_head_ && values_ == o.values_;
  }

 private:
  ModelConfig config_;
  bool lm_head_ = false;
  ParamLayout layout_;
  std::vector<double> values_;
};

/// Read-only view of one CIFG layer's weights.
struct CifgLayerView {
  std::size_t input_dim = 0;
  std::size_t hidden_dim = 0;
  std::array<const double *, kNumGates> weight{};
  std::array<const double *, kNumGates> bias{};

  static CifgLayerView of(const Parameters &p, std::size_t layer) {
    const auto &l = p.layout().layers.at(layer);
    CifgLayerView v;
    v.input_dim = l.input_dim;
    v.hidden_dim = p.config().hidden_dim;
    for (std::size_t g = 0; g < kNumGates; ++g) {
      v.weight[g] = p.data() + l.weight[g];
      v.bias[g] = p.data() + l.bias[g];
    }
    return v;
  }
};

struct LayerState {
  std::vector<double> c;
  std::vector<double> hid;
};

/// Recurrent state of every layer; zero at the start of a sequence.
struct CellState {
  std::vector<LayerState> layers;

  static CellState zeros(const ModelConfig &config) {
    CellState s;
    s.layers.assign(config.num_layers, LayerState{std::vector<double>(config.hidden_dim, 0.0),
                                                  std::vector<double>(config.hidden_dim, 0.0)});
    return s;
  }
};

namespace detail {

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

inline bool finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

/// Core cell arithmetic. `gates` receives i, o, g (3h values).
inline void cifg_kernel(const CifgLayerView &layer, const double *x, const double *c_prev,
                        const double *h_prev, double *gates, double *c_out, double *tanh_c,
                        double *h_out) {
  const std::size_t h = layer.hidden_dim;
  const std::size_t in = layer.input_dim;
  double *z[kNumGates] = {gates, gates + h, gates + 2 * h};
  for (std::size_t g = 0; g < kNumGates; ++g) std::copy_n(layer.bias[g], h, z[g]);
  auto accumulate = [&](double v, std::size_t row) {
    if (v == 0.0) return;
    for (std::size_t g = 0; g < kNumGates; ++g) {
      const double *w = layer.weight[g] + row * h;
      double *zg = z[g];
      for (std::size_t j = 0; j < h; ++j) zg[j] += v * w[j];
    }
  };
  for (std::size_t k = 0; k < in; ++k) accumulate(x[k], k);
  for (std::size_t k = 0; k < h; ++k) accumulate(h_prev[k], in + k);
  for (std::size_t j = 0; j < h; ++j) {
    const double i = sigmoid(z[kInputGate][j]);
    const double o = sigmoid(z[kOutputGate][j]);
    const double g = std::tanh(z[kCandidateGate][j]);
    z[kInputGate][j] = i;
    z[kOutputGate][j] = o;
    z[kCandidateGate][j] = g;
    const double c = (1.0 - i) * c_prev[j] + i * g;
    c_out[j] = c;
    tanh_c[j] = std::tanh(c);
    h_out[j] = o * tanh_c[j];
  }
}

inline void softmax_inplace(std::span<double> v) {
  const double m = *std::max_element(v.begin(), v.end());
  double sum = 0.0;
  for (auto &x : v) {
    x = std::exp(x - m);
    sum += x;
  }
  for (auto &x : v) x /= sum;
}

}  // namespace detail

inline std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> p(logits.begin(), logits.end());
  detail::softmax_inplace(p);
  return p;
}

/// Gate activations of one step, exposed for inspection.
struct GateValues {
  std::vector<double> input, output, candidate;
  /// Effective forget gate, always 1 - input.
  std::vector<double> forget() const {
    std::vector<double> f(input.size());
    for (std::size_t j = 0; j < f.size(); ++j) f[j] = 1.0 - input[j];
    return f;
  }
};

/// Advances one layer by one step in place and returns the new hidden vector.
inline std::span<const double> cifg_step(const CifgLayerView &layer, std::span<const double> x,
                                         LayerState &state, GateValues *gates_out = nullptr) {
  const std::size_t h = layer.hidden_dim;
  if (x.size() != layer.input_dim || state.c.size() != h || state.hid.size() != h)
    throw Error("cifg_step dimension mismatch");
  if (!detail::finite(x) || !detail::finite(state.c) || !detail::finite(state.hid))
    throw Error("numeric overflow");
  std::vector<double> gates(3 * h), c(h), tc(h), hid(h);
  detail::cifg_kernel(layer, x.data(), state.c.data(), state.hid.data(), gates.data(), c.data(),
                      tc.data(), hid.data());
  if (!detail::finite(c) || !detail::finite(hid)) throw Error("numeric overflow");
  state.c = std::move(c);
  state.hid = std::move(hid);
  if (gates_out != nullptr) {
    gates_out->input.assign(gates.begin(), gates.begin() + static_cast<std::ptrdiff_t>(h));
    gates_out->output.assign(gates.begin() + static_cast<std::ptrdiff_t>(h),
                             gates.begin() + static_cast<std::ptrdiff_t>(2 * h));
    gates_out->candidate.assign(gates.begin() + static_cast<std::ptrdiff_t>(2 * h), gates.end());
  }
  return state.hid;
}

/// Activations cached by a forward pass for backpropagation.
struct Tape {
  struct Layer {
    std::vector<double> gates;   ///< T x 3h: i, o, g
    std::vector<double> c;       ///< (T + 1) x h, row 0 is the initial state
    std::vector<double> tanh_c;  ///< T x h
    std::vector<double> hid;     ///< (T + 1) x h, row 0 is the initial state
  };
  std::size_t steps = 0;
  std::vector<Layer> layers;

  /// Hidden state of `layer` after consuming token t (0-based).
  std::span<const double> hidden(std::size_t layer, std::size_t t, std::size_t h) const {
    return {layers[layer].hid.data() + (t + 1) * h, h};
  }
};

namespace detail {

inline void check_tokens(const ModelConfig &c, std::span<const TokenId> tokens) {
  if (tokens.empty()) throw Error("empty token sequence");
  for (TokenId t : tokens)
    if (t < 0 || static_cast<std::size_t>(t) >= c.vocab_size) throw Error("token out of range");
}

/// Runs the recurrent stack over `tokens` from the zero state, filling `tape`.
inline void run_stack(const Parameters &params, std::span<const TokenId> tokens, Tape &tape) {
  const auto &cfg = params.config();
  check_tokens(cfg, tokens);
  const std::size_t T = tokens.size();
  const std::size_t h = cfg.hidden_dim;
  tape.steps = T;
  tape.layers.resize(cfg.num_layers);
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    auto &L = tape.layers[l];
    L.gates.resize(T * 3 * h);
    L.c.assign((T + 1) * h, 0.0);
    L.tanh_c.resize(T * h);
    L.hid.assign((T + 1) * h, 0.0);
    const auto view = CifgLayerView::of(params, l);
    for (std::size_t t = 0; t < T; ++t) {
      const double *x = l == 0 ? params.embedding_row(tokens[t]).data()
                               : tape.layers[l - 1].hid.data() + (t + 1) * h;
      cifg_kernel(view, x, L.c.data() + t * h, L.hid.data() + t * h, L.gates.data() + t * 3 * h,
                  L.c.data() + (t + 1) * h, L.tanh_c.data() + t * h, L.hid.data() + (t + 1) * h);
    }
  }
}

/// Backpropagates `dh_top` (T x h, gradient w.r.t. the top layer's hidden
/// output at every step) through the stack, accumulating into `grad`.
inline void backprop_stack(const Parameters &params, std::span<const TokenId> tokens,
                           const Tape &tape, std::vector<double> dh_top, Parameters &grad) {
  const auto &cfg = params.config();
  const std::size_t T = tape.steps;
  const std::size_t h = cfg.hidden_dim;
  const auto &layout = params.layout();
  std::vector<double> dh_in = std::move(dh_top);
  std::vector<double> dx, dz(3 * h), dh_next(h), dc_next(h), dconcat;
  double *g = grad.data();

  for (std::size_t l = cfg.num_layers; l-- > 0;) {
    const auto &L = tape.layers[l];
    const auto view = CifgLayerView::of(params, l);
    const std::size_t in = view.input_dim;
    const std::size_t rows = in + h;
    dx.assign(T * in, 0.0);
    dconcat.resize(rows);
    std::fill(dh_next.begin(), dh_next.end(), 0.0);
    std::fill(dc_next.begin(), dc_next.end(), 0.0);
    std::array<double *, kNumGates> gw{}, gb{};
    for (std::size_t k = 0; k < kNumGates; ++k) {
      gw[k] = g + layout.layers[l].weight[k];
      gb[k] = g + layout.layers[l].bias[k];
    }

    for (std::size_t t = T; t-- > 0;) {
      const double *gates = L.gates.data() + t * 3 * h;
      const double *c_prev = L.c.data() + t * h;
      const double *tc = L.tanh_c.data() + t * h;
      for (std::size_t j = 0; j < h; ++j) {
        const double i = gates[j], o = gates[h + j], gg = gates[2 * h + j];
        const double dh = dh_in[t * h + j] + dh_next[j];
        const double d_o = dh * tc[j];
        const double dc = dh * o * (1.0 - tc[j] * tc[j]) + dc_next[j];
        const double d_i = dc * (gg - c_prev[j]);
        const double d_g = dc * i;
        dc_next[j] = dc * (1.0 - i);
        dz[j] = d_i * i * (1.0 - i);
        dz[h + j] = d_o * o * (1.0 - o);
        dz[2 * h + j] = d_g * (1.0 - gg * gg);
      }
      const double *x = l == 0 ? params.embedding_row(tokens[t]).data()
                               : tape.layers[l - 1].hid.data() + (t + 1) * h;
      const double *h_prev = L.hid.data() + t * h;
      for (std::size_t k = 0; k < kNumGates; ++k) {
        const double *dzk = dz.data() + k * h;
        for (std::size_t j = 0; j < h; ++j) gb[k][j] += dzk[j];
      }
      for (std::size_t r = 0; r < rows; ++r) {
        const double v = r < in ? x[r] : h_prev[r - in];
        double acc = 0.0;
        for (std::size_t k = 0; k < kNumGates; ++k) {
          const double *dzk = dz.data() + k * h;
          const double *w = view.weight[k] + r * h;
          double *gwr = gw[k] + r * h;
          for (std::size_t j = 0; j < h; ++j) {
            gwr[j] += v * dzk[j];
            acc += w[j] * dzk[j];
          }
        }
        dconcat[r] = acc;
      }
      std::copy_n(dconcat.data(), in, dx.data() + t * in);
      std::copy_n(dconcat.data() + in, h, dh_next.data());
    }
    if (l > 0) dh_in = dx;
  }

  const std::size_t d = cfg.embed_dim;
  for (std::size_t t = 0; t < T; ++t) {
    double *row = g + layout.embedding + static_cast<std::size_t>(tokens[t]) * d;
    for (std::size_t j = 0; j < d; ++j) row[j] += dx[t * d + j];
  }
}

}  // namespace detail

struct ForwardResult {
  std::vector<double> logits;
  Tape tape;
};

/// Classifier logits from the final step's top-layer hidden state.
inline ForwardResult forward(const Parameters &params, std::span<const TokenId> tokens) {
  ForwardResult r;
  detail::run_stack(params, tokens, r.tape);
  const auto &cfg = params.config();
  const std::size_t h = cfg.hidden_dim, C = cfg.num_classes;
  const auto top = r.tape.hidden(cfg.num_layers - 1, tokens.size() - 1, h);
  const double *W = params.data() + params.layout().output_weight;
  const double *b = params.data() + params.layout().output_bias;
  r.logits.assign(b, b + C);
  for (std::size_t k = 0; k < h; ++k)
    for (std::size_t c = 0; c < C; ++c) r.logits[c] += top[k] * W[k * C + c];
  if (!detail::finite(r.logits)) throw Error("numeric overflow");
  return r;
}

inline std::vector<double> predict_probs(const Parameters &params,
                                         std::span<const TokenId> tokens) {
  auto r = forward(params, tokens);
  detail::softmax_inplace(r.logits);
  return std::move(r.logits);
}

struct LossAndGrads {
  double loss = 0.0;
  Parameters grads;
};

/// Weight-normalised mean cross-entropy of the classifier over `batch` and its
/// exact gradient. Zero-weight examples are ignored.
inline LossAndGrads loss_and_grads(const Parameters &params, std::span<const Example> batch) {
  const auto &cfg = params.config();
  double total_weight = 0.0;
  for (const auto &e : batch) {
    if (e.weight < 0.0 || !std::isfinite(e.weight)) throw Error("invalid example weight");
    total_weight += e.weight;
  }
  if (batch.empty() || total_weight <= 0.0) throw Error("empty effective batch");

  LossAndGrads out{0.0, Parameters(cfg, params.has_lm_head())};
  const std::size_t h = cfg.hidden_dim, C = cfg.num_classes;
  const auto &layout = params.layout();
  const double *W = params.data() + layout.output_weight;
  double *gW = out.grads.data() + layout.output_weight;
  double *gb = out.grads.data() + layout.output_bias;
  Tape tape;
  std::vector<double> logits(C);
  for (const auto &e : batch) {
    if (e.weight == 0.0) continue;
    if (e.label < 0 || static_cast<std::size_t>(e.label) >= C) throw Error("label out of range");
    detail::run_stack(params, e.tokens, tape);
    const std::size_t T = e.tokens.size();
    const auto top = tape.hidden(cfg.num_layers - 1, T - 1, h);
    const double *b = params.data() + layout.output_bias;
    std::copy_n(b, C, logits.begin());
    for (std::size_t k = 0; k < h; ++k)
      for (std::size_t c = 0; c < C; ++c) logits[c] += top[k] * W[k * C + c];
    detail::softmax_inplace(logits);
    const auto y = static_cast<std::size_t>(e.label);
    const double scale = e.weight / total_weight;
    out.loss -= scale * std::log(std::max(logits[y], std::numeric_limits<double>::min()));

    logits[y] -= 1.0;
    for (auto &v : logits) v *= scale;
    std::vector<double> dh_top(T * h, 0.0);
    double *dh_last = dh_top.data() + (T - 1) * h;
    for (std::size_t k = 0; k < h; ++k) {
      double acc = 0.0;
      for (std::size_t c = 0; c < C; ++c) {
        gW[k * C + c] += top[k] * logits[c];
        acc += W[k * C + c] * logits[c];
      }
      dh_last[k] = acc;
    }
    for (std::size_t c = 0; c < C; ++c) gb[c] += logits[c];
    detail::backprop_stack(params, e.tokens, tape, std::move(dh_top), out.grads);
  }
  if (!std::isfinite(out.loss)) throw Error("numeric overflow");
  return out;
}

/// Mean weighted classifier cross-entropy without gradients.
inline double classifier_loss(const Parameters &params, std::span<const Example> examples) {
  double loss = 0.0, total = 0.0;
  for (const auto &e : examples) {
    if (e.weight == 0.0) continue;
    const auto p = predict_probs(params, e.tokens);
    loss -= e.weight * std::log(std::max(p.at(static_cast<std::size_t>(e.label)),
                                         std::numeric_limits<double>::min()));
    total += e.weight;
  }
  if (total <= 0.0) throw Error("empty effective batch");
  return loss / total;
}

// ---------------------------------------------------------------------------
// Language-model head

/// Next-word logits over the vocabulary for every position of `tokens`
/// (position t predicts token t + 1; the last row has no target).
inline std::vector<std::vector<double>> lm_forward(const Parameters &params,
                                                   std::span<const TokenId> tokens) {
  if (!params.has_lm_head()) throw Error("parameters carry no language-model head");
  if (tokens.size() < 2) throw Error("language model needs at least two tokens");
  Tape tape;
  detail::run_stack(params, tokens, tape);
  const auto &cfg = params.config();
  const std::size_t h = cfg.hidden_dim, d = cfg.embed_dim, V = cfg.vocab_size;
  const double *P = params.data() + params.layout().projection;
  const double *E = params.data() + params.layout().embedding;
  std::vector<std::vector<double>> out(tokens.size(), std::vector<double>(V, 0.0));
  std::vector<double> u(d);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const auto hid = tape.hidden(cfg.num_layers - 1, t, h);
    std::fill(u.begin(), u.end(), 0.0);
    for (std::size_t k = 0; k < h; ++k)
      for (std::size_t j = 0; j < d; ++j) u[j] += hid[k] * P[k * d + j];
    for (std::size_t v = 0; v < V; ++v) {
      double acc = 0.0;
      for (std::size_t j = 0; j < d; ++j) acc += E[v * d + j] * u[j];
      out[t][v] = acc;
    }
    if (!detail::finite(out[t])) throw Error("numeric overflow");
  }
  return out;
}

/// Weighted mean next-word cross-entropy over all predicted positions and its
/// gradient, including both uses of the tied embedding.
inline LossAndGrads lm_loss_and_grads(const Parameters &params, std::span<const Example> batch) {
  if (!params.has_lm_head()) throw Error("parameters carry no language-model head");
  const auto &cfg = params.config();
  double total = 0.0;
  for (const auto &e : batch) {
    if (e.weight < 0.0 || !std::isfinite(e.weight)) throw Error("invalid example weight");
    if (e.weight > 0.0) {
      if (e.tokens.size() < 2) throw Error("language model needs at least two tokens");
      total += e.weight * static_cast<double>(e.tokens.size() - 1);
    }
  }
  if (batch.empty() || total <= 0.0) throw Error("empty effective batch");

  LossAndGrads out{0.0, Parameters(cfg, true)};
  const std::size_t h = cfg.hidden_dim, d = cfg.embed_dim, V = cfg.vocab_size;
  const auto &layout = params.layout();
  const double *P = params.data() + layout.projection;
  const double *E = params.data() + layout.embedding;
  double *gP = out.grads.data() + layout.projection;
  double *gE = out.grads.data() + layout.embedding;
  Tape tape;
  std::vector<double> u(d), du(d), logits(V);
  for (const auto &e : batch) {
    if (e.weight == 0.0) continue;
    detail::run_stack(params, e.tokens, tape);
    const std::size_t T = e.tokens.size();
    const double scale = e.weight / total;
    std::vector<double> dh_top(T * h, 0.0);
    for (std::size_t t = 0; t + 1 < T; ++t) {
      const auto hid = tape.hidden(cfg.num_layers - 1, t, h);
      std::fill(u.begin(), u.end(), 0.0);
      for (std::size_t k = 0; k < h; ++k)
        for (std::size_t j = 0; j < d; ++j) u[j] += hid[k] * P[k * d + j];
      for (std::size_t v = 0; v < V; ++v) {
        double acc = 0.0;
        for (std::size_t j = 0; j < d; ++j) acc += E[v * d + j] * u[j];
        logits[v] = acc;
      }
      detail::softmax_inplace(logits);
      const auto y = static_cast<std::size_t>(e.tokens[t + 1]);
      out.loss -= scale * std::log(std::max(logits[y], std::numeric_limits<double>::min()));
      logits[y] -= 1.0;
      std::fill(du.begin(), du.end(), 0.0);
      for (std::size_t v = 0; v < V; ++v) {
        const double dl = logits[v] * scale;
        if (dl == 0.0) continue;
        for (std::size_t j = 0; j < d; ++j) {
          gE[v * d + j] += dl * u[j];
          du[j] += dl * E[v * d + j];
        }
      }
      double *dh = dh_top.data() + t * h;
      for (std::size_t k = 0; k < h; ++k) {
        double acc = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          gP[k * d + j] += hid[k] * du[j];
          acc += P[k * d + j] * du[j];
        }
        dh[k] = acc;
      }
    }
    detail::backprop_stack(params, e.tokens, tape, std::move(dh_top), out.grads);
  }
  if (!std::isfinite(out.loss)) throw Error("numeric overflow");
  return out;
}

// ---------------------------------------------------------------------------
// Initialisation and transfer

namespace detail {

inline void fill_uniform(double *dst, std::size_t n, double scale, Rng &rng) {
  for (std::size_t i = 0; i < n; ++i) dst[i] = uniform_real(rng, -scale, scale);
}

}  // namespace detail

/// Weights ~ U(-s, s) with s = 1/sqrt(fan_in); biases zero. The embedding
/// uses fan_in = embed_dim.
inline Parameters init_params(const ModelConfig &config, std::uint64_t seed, bool lm_head = false) {
  Parameters p(config, lm_head);
  Rng rng = make_rng(seed, Stream::kInit);
  const auto &L = p.layout();
  const std::size_t h = config.hidden_dim;
  double *v = p.data();
  detail::fill_uniform(v + L.embedding, config.vocab_size * config.embed_dim,
                       1.0 / std::sqrt(static_cast<double>(config.embed_dim)), rng);
  for (const auto &layer : L.layers)
    for (std::size_t g = 0; g < kNumGates; ++g)
      detail::fill_uniform(v + layer.weight[g], (layer.input_dim + h) * h,
                           1.0 / std::sqrt(static_cast<double>(layer.input_dim + h)), rng);
  detail::fill_uniform(v + L.output_weight, h * config.num_classes,
                       1.0 / std::sqrt(static_cast<double>(h)), rng);
  if (lm_head)
    detail::fill_uniform(v + L.projection, h * config.embed_dim,
                         1.0 / std::sqrt(static_cast<double>(h)), rng);
  return p;
}

/// Classifier initialised from a pretrained language model: embedding and
/// every CIFG layer are copied, the output projection is freshly drawn and
/// the LM projection is dropped.
inline Parameters transfer_from_lm(const Parameters &lm, const ModelConfig &emoji_config,
                                   std::uint64_t seed) {
  if (!lm.config().same_body(emoji_config)) throw Error("incompatible architectures");
  Parameters out = init_params(emoji_config, seed);
  const std::size_t body = out.layout().output_weight;
  std::copy_n(lm.data(), body, out.data());
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: "FEDEMO1\n", "V d layers h C[ 1]\n", then little-endian doubles.

inline constexpr std::string_view kCheckpointMagic = "FEDEMO1";

inline void write_le_doubles(std::ostream &out, std::span<const double> values) {
  std::vector<unsigned char> buf(values.size() * 8);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto bits = std::bit_cast<std::uint64_t>(values[i]);
    for (int b = 0; b < 8; ++b) buf[i * 8 + b] = static_cast<unsigned char>(bits >> (8 * b));
  }
  out.write(reinterpret_cast<const char *>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

inline std::vector<double> read_le_doubles(std::istream &in, std::size_t n) {
  std::vector<unsigned char> buf(n * 8);
  in.read(reinterpret_cast<char *>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (static_cast<std::size_t>(in.gcount()) != buf.size()) throw Error("truncated checkpoint");
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(buf[i * 8 + b]) << (8 * b);
    out[i] = std::bit_cast<double>(bits);
  }
  return out;
}

inline void save_checkpoint(const std::string &path, const Parameters &params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint '" + path + "'");
  const auto &c = params.config();
  out << kCheckpointMagic << '\n'
      << c.vocab_size << ' ' << c.embed_dim << ' ' << c.num_layers << ' ' << c.hidden_dim << ' '
      << c.num_classes;
  if (params.has_lm_head()) out << " 1";
  out << '\n';
  write_le_doubles(out, params.values());
  if (!out) throw Error("checkpoint write failed for '" + path + "'");
}

inline Parameters load_checkpoint(const std::string &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint '" + path + "'");
  std::string magic, header;
  std::getline(in, magic);
  if (magic != kCheckpointMagic) throw Error("'" + path + "' is not a FEDEMO1 checkpoint");
  std::getline(in, header);
  std::istringstream hs(header);
  ModelConfig c;
  int head = 0;
  if (!(hs >> c.vocab_size >> c.embed_dim >> c.num_layers >> c.hidden_dim >> c.num_classes))
    throw Error("malformed checkpoint header in '" + path + "'");
  hs >> head;
  Parameters p(c, head == 1);
  auto values = read_le_doubles(in, p.size());
  if (in.peek() != std::char_traits<char>::eof()) throw Error("trailing bytes in checkpoint");
  return Parameters::unflatten(c, head == 1, std::move(values));
}

}  // namespace fedemoji
