// SPDX-License-Identifier: Apache-2.0
//
// Encoder-only classifier and its one-layer encoder-decoder variant.
//
// Layers are post-norm: x = LN(x + Sublayer(x)). The classifier reads the
// hidden state at position 0 (encoder-only) or the decoder's single <bos>
// state (encoder-decoder). Multi-head attention packs the h heads along the
// feature axis and applies one d x d output projection; row block i of that
// projection is W_i^O, so this equals the sum over heads of
// Attention(Q W_i^Q, K W_i^K, V W_i^V) W_i^O.

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "ectrace/autodiff.hpp"
#include "ectrace/metrics.hpp"
#include "ectrace/optim.hpp"
#include "ectrace/rng.hpp"
#include "ectrace/tokenizer.hpp"

namespace ectrace {

class ModelError : public std::runtime_error {
 public:
  enum class Kind { PositionOverflow, ConfigMismatch, InvalidConfig };

  ModelError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

struct TransformerConfig {
  int d_model = 256;
  int heads = 8;
  int encoder_layers = 4;
  int decoder_layers = 0;
  int ffn_hidden = 0;  // 0 = 4 * d_model
  int vocab_size = Vocab::kPad + 1;
  int max_positions = 64;
  int n_classes = 2;
  double dropout = 0.0;
  std::uint64_t seed = 0;

  int hidden() const { return ffn_hidden > 0 ? ffn_hidden : 4 * d_model; }

  void validate() const {
    auto fail = [](const std::string& m) { throw ModelError(ModelError::Kind::InvalidConfig, m); };
    if (d_model <= 0 || heads <= 0 || d_model % heads != 0) fail("d_model must be a positive multiple of heads");
    if (encoder_layers < 1) fail("encoder_layers must be at least 1");
    if (decoder_layers != 0 && decoder_layers != 1) fail("decoder_layers must be 0 or 1");
    if (vocab_size < 1 || max_positions < 1) fail("vocab_size and max_positions must be positive");
    if (n_classes < 2) fail("n_classes must be at least 2");
    if (dropout < 0.0 || dropout >= 1.0) fail("dropout must lie in [0, 1)");
  }
};

inline void to_json(nlohmann::json& j, const TransformerConfig& c) {
  j = {{"d_model", c.d_model},       {"heads", c.heads},
       {"encoder_layers", c.encoder_layers}, {"decoder_layers", c.decoder_layers},
       {"ffn_hidden", c.hidden()},   {"vocab_size", c.vocab_size},
       {"max_positions", c.max_positions},   {"n_classes", c.n_classes},
       {"dropout", c.dropout},       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, TransformerConfig& c) {
  TransformerConfig d;
  c.d_model = j.value("d_model", d.d_model);
  c.heads = j.value("heads", d.heads);
  c.encoder_layers = j.value("encoder_layers", d.encoder_layers);
  c.decoder_layers = j.value("decoder_layers", d.decoder_layers);
  c.ffn_hidden = j.value("ffn_hidden", 0);
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.max_positions = j.value("max_positions", d.max_positions);
  c.n_classes = j.value("n_classes", d.n_classes);
  c.dropout = j.value("dropout", d.dropout);
  c.seed = j.value("seed", d.seed);
}

template <class T>
using NamedTensors = std::vector<std::pair<std::string, ad::Tensor<T>>>;

namespace detail {

template <class T>
ad::Tensor<T> normal_init(Rng& rng, ad::Shape shape, double stddev = 0.02) {
  ad::Tensor<T> t(std::move(shape), true);
  for (auto& v : t.values()) v = static_cast<T>(rng.normal() * stddev);
  return t;
}

template <class T>
ad::Tensor<T> filled(ad::Shape shape, T value) {
  ad::Tensor<T> t(std::move(shape), true);
  std::fill(t.values().begin(), t.values().end(), value);
  return t;
}

}  // namespace detail

template <class T>
struct AttentionParams {
  ad::Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;

  static AttentionParams init(Rng& rng, std::size_t d) {
    AttentionParams a;
    a.wq = detail::normal_init<T>(rng, {d, d});
    a.bq = detail::filled<T>({d}, T(0));
    a.wk = detail::normal_init<T>(rng, {d, d});
    a.bk = detail::filled<T>({d}, T(0));
    a.wv = detail::normal_init<T>(rng, {d, d});
    a.bv = detail::filled<T>({d}, T(0));
    a.wo = detail::normal_init<T>(rng, {d, d});
    a.bo = detail::filled<T>({d}, T(0));
    return a;
  }

  void collect(NamedTensors<T>& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".wq", wq);
    out.emplace_back(prefix + ".bq", bq);
    out.emplace_back(prefix + ".wk", wk);
    out.emplace_back(prefix + ".bk", bk);
    out.emplace_back(prefix + ".wv", wv);
    out.emplace_back(prefix + ".bv", bv);
    out.emplace_back(prefix + ".wo", wo);
    out.emplace_back(prefix + ".bo", bo);
  }
};

template <class T>
struct LayerNormParams {
  ad::Tensor<T> gain, bias;

  static LayerNormParams init(std::size_t d) { return {detail::filled<T>({d}, T(1)), detail::filled<T>({d}, T(0))}; }

  void collect(NamedTensors<T>& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".gain", gain);
    out.emplace_back(prefix + ".bias", bias);
  }
};

template <class T>
struct FeedForwardParams {
  ad::Tensor<T> w1, b1, w2, b2;

  static FeedForwardParams init(Rng& rng, std::size_t d, std::size_t hidden) {
    return {detail::normal_init<T>(rng, {d, hidden}), detail::filled<T>({hidden}, T(0)),
            detail::normal_init<T>(rng, {hidden, d}), detail::filled<T>({d}, T(0))};
  }

  void collect(NamedTensors<T>& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".w1", w1);
    out.emplace_back(prefix + ".b1", b1);
    out.emplace_back(prefix + ".w2", w2);
    out.emplace_back(prefix + ".b2", b2);
  }
};

template <class T>
struct EncoderLayer {
  AttentionParams<T> attn;
  LayerNormParams<T> ln1;
  FeedForwardParams<T> ffn;
  LayerNormParams<T> ln2;
};

template <class T>
struct DecoderLayer {
  AttentionParams<T> self_attn;
  LayerNormParams<T> ln1;
  AttentionParams<T> cross_attn;
  LayerNormParams<T> ln2;
  FeedForwardParams<T> ffn;
  LayerNormParams<T> ln3;
};

/// Encoder-only model when config.decoder_layers == 0, encoder-decoder otherwise.
template <class T>
class TransformerModel {
 public:
  explicit TransformerModel(TransformerConfig config) : config_(config) {
    config_.validate();
    Rng rng(config_.seed);
    const auto d = static_cast<std::size_t>(config_.d_model);
    const auto hidden = static_cast<std::size_t>(config_.hidden());
    tok_emb = detail::normal_init<T>(rng, {static_cast<std::size_t>(config_.vocab_size), d});
    pos_emb = detail::normal_init<T>(rng, {static_cast<std::size_t>(config_.max_positions), d});
    for (int l = 0; l < config_.encoder_layers; ++l) {
      EncoderLayer<T> layer;
      layer.attn = AttentionParams<T>::init(rng, d);
      layer.ln1 = LayerNormParams<T>::init(d);
      layer.ffn = FeedForwardParams<T>::init(rng, d, hidden);
      layer.ln2 = LayerNormParams<T>::init(d);
      encoder.push_back(std::move(layer));
    }
    for (int l = 0; l < config_.decoder_layers; ++l) {
      DecoderLayer<T> layer;
      layer.self_attn = AttentionParams<T>::init(rng, d);
      layer.ln1 = LayerNormParams<T>::init(d);
      layer.cross_attn = AttentionParams<T>::init(rng, d);
      layer.ln2 = LayerNormParams<T>::init(d);
      layer.ffn = FeedForwardParams<T>::init(rng, d, hidden);
      layer.ln3 = LayerNormParams<T>::init(d);
      decoder.push_back(std::move(layer));
    }
    cls_w = detail::normal_init<T>(rng, {d, static_cast<std::size_t>(config_.n_classes)});
    cls_b = detail::filled<T>({static_cast<std::size_t>(config_.n_classes)}, T(0));
  }

  const TransformerConfig& config() const noexcept { return config_; }
  bool has_decoder() const noexcept { return config_.decoder_layers > 0; }

  NamedTensors<T> named_parameters() const {
    NamedTensors<T> out;
    out.emplace_back("tok_emb", tok_emb);
    out.emplace_back("pos_emb", pos_emb);
    for (std::size_t l = 0; l < encoder.size(); ++l) {
      const std::string p = "enc." + std::to_string(l);
      encoder[l].attn.collect(out, p + ".attn");
      encoder[l].ln1.collect(out, p + ".ln1");
      encoder[l].ffn.collect(out, p + ".ffn");
      encoder[l].ln2.collect(out, p + ".ln2");
    }
    for (std::size_t l = 0; l < decoder.size(); ++l) {
      const std::string p = "dec." + std::to_string(l);
      decoder[l].self_attn.collect(out, p + ".self_attn");
      decoder[l].ln1.collect(out, p + ".ln1");
      decoder[l].cross_attn.collect(out, p + ".cross_attn");
      decoder[l].ln2.collect(out, p + ".ln2");
      decoder[l].ffn.collect(out, p + ".ffn");
      decoder[l].ln3.collect(out, p + ".ln3");
    }
    out.emplace_back("cls.w", cls_w);
    out.emplace_back("cls.b", cls_b);
    return out;
  }

  std::vector<ad::Tensor<T>> parameters() const {
    std::vector<ad::Tensor<T>> out;
    for (auto& [_, t] : named_parameters()) out.push_back(t);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : named_parameters()) n += t.numel();
    return n;
  }

  ad::Tensor<T> tok_emb, pos_emb;
  std::vector<EncoderLayer<T>> encoder;
  std::vector<DecoderLayer<T>> decoder;
  ad::Tensor<T> cls_w, cls_b;

 private:
  TransformerConfig config_;
};

/// Closed-form parameter count for a configuration.
inline std::size_t parameter_count(const TransformerConfig& c) {
  const std::size_t d = c.d_model, h = c.hidden();
  const std::size_t attn = 4 * (d * d + d);
  const std::size_t ln = 2 * d;
  const std::size_t ffn = d * h + h + h * d + d;
  return c.vocab_size * d + c.max_positions * d + c.encoder_layers * (attn + ffn + 2 * ln) +
         c.decoder_layers * (2 * attn + ffn + 3 * ln) + d * c.n_classes + c.n_classes;
}

/// Equal-length token sequences padded with <pad>; pad positions are masked keys.
struct TokenBatch {
  std::vector<int> ids;
  std::vector<std::uint8_t> key_mask;
  std::size_t batch = 0;
  std::size_t length = 0;
};

inline TokenBatch make_batch(std::span<const TokenSeq* const> seqs) {
  TokenBatch b;
  b.batch = seqs.size();
  for (const auto* s : seqs) b.length = std::max(b.length, s->length());
  b.ids.assign(b.batch * b.length, Vocab::kPad);
  for (std::size_t i = 0; i < b.batch; ++i) std::copy(seqs[i]->ids.begin(), seqs[i]->ids.end(), b.ids.begin() + i * b.length);
  b.key_mask.resize(b.ids.size());
  for (std::size_t i = 0; i < b.ids.size(); ++i) b.key_mask[i] = b.ids[i] == Vocab::kPad;
  return b;
}

inline TokenBatch make_batch(std::span<const TokenSeq> seqs) {
  std::vector<const TokenSeq*> ptrs;
  for (const auto& s : seqs) ptrs.push_back(&s);
  return make_batch(std::span<const TokenSeq* const>(ptrs));
}

/// Token embedding plus learned positional embedding: [batch * length, d].
template <class T>
ad::Tensor<T> embed(ad::Graph<T>& g, const TransformerModel<T>& m, const TokenBatch& b) {
  if (b.length > static_cast<std::size_t>(m.config().max_positions)) {
    throw ModelError(ModelError::Kind::PositionOverflow, "sequence length " + std::to_string(b.length) +
                                                             " exceeds max_positions " +
                                                             std::to_string(m.config().max_positions));
  }
  std::vector<int> pos(b.ids.size());
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<int>(i % b.length);
  return ad::add(g, ad::embedding_lookup(g, b.ids, m.tok_emb), ad::embedding_lookup(g, pos, m.pos_emb));
}

/// Projected multi-head attention. xq is [batch * lq, d]; xkv is [batch * lk, d].
template <class T>
ad::Tensor<T> multi_head(ad::Graph<T>& g, const AttentionParams<T>& p, ad::Tensor<T> xq, ad::Tensor<T> xkv,
                         std::size_t heads, std::size_t batch, const std::vector<std::uint8_t>& key_mask) {
  auto q = ad::linear(g, xq, p.wq, p.bq);
  auto k = ad::linear(g, xkv, p.wk, p.bk);
  auto v = ad::linear(g, xkv, p.wv, p.bv);
  auto a = ad::attention(g, q, k, v, heads, batch, key_mask);
  return ad::linear(g, a, p.wo, p.bo);
}

namespace detail {

template <class T>
ad::Tensor<T> feed_forward(ad::Graph<T>& g, const FeedForwardParams<T>& p, ad::Tensor<T> x) {
  return ad::linear(g, ad::relu(g, ad::linear(g, x, p.w1, p.b1)), p.w2, p.b2);
}

template <class T>
ad::Tensor<T> residual_norm(ad::Graph<T>& g, const LayerNormParams<T>& ln, ad::Tensor<T> x, ad::Tensor<T> sub,
                            double dropout) {
  return ad::layer_norm(g, ad::add(g, x, ad::dropout(g, sub, dropout)), ln.gain, ln.bias);
}

inline std::vector<std::size_t> readout_rows(std::size_t batch, std::size_t length) {
  std::vector<std::size_t> rows(batch);
  for (std::size_t i = 0; i < batch; ++i) rows[i] = i * length;
  return rows;
}

}  // namespace detail

/// One post-norm encoder layer. With readout_only, queries, residuals and
/// the FFN are evaluated at position 0 only; keys and values still use
/// every position, so the position-0 output is unchanged.
template <class T>
ad::Tensor<T> encoder_layer(ad::Graph<T>& g, const TransformerModel<T>& m, const EncoderLayer<T>& layer,
                            ad::Tensor<T> x, const TokenBatch& b, bool readout_only = false) {
  const auto heads = static_cast<std::size_t>(m.config().heads);
  const double drop = m.config().dropout;
  auto xq = readout_only ? ad::gather_rows(g, x, detail::readout_rows(b.batch, b.length)) : x;
  auto a = multi_head(g, layer.attn, xq, x, heads, b.batch, b.key_mask);
  auto h = detail::residual_norm(g, layer.ln1, xq, a, drop);
  return detail::residual_norm(g, layer.ln2, h, detail::feed_forward(g, layer.ffn, h), drop);
}

/// Hidden states of every position after all encoder layers: [batch * length, d].
template <class T>
ad::Tensor<T> encoder_forward(ad::Graph<T>& g, const TransformerModel<T>& m, ad::Tensor<T> x, const TokenBatch& b) {
  for (const auto& layer : m.encoder) x = encoder_layer(g, m, layer, x, b);
  return x;
}

template <class T>
ad::Tensor<T> encoder_forward(ad::Graph<T>& g, const TransformerModel<T>& m, const TokenBatch& b) {
  return encoder_forward(g, m, embed(g, m, b), b);
}

/// Position-0 hidden state after all encoder layers: [batch, d].
template <class T>
ad::Tensor<T> encoder_readout(ad::Graph<T>& g, const TransformerModel<T>& m, ad::Tensor<T> x, const TokenBatch& b) {
  for (std::size_t l = 0; l + 1 < m.encoder.size(); ++l) x = encoder_layer(g, m, m.encoder[l], x, b);
  return encoder_layer(g, m, m.encoder.back(), x, b, true);
}

/// Single <bos> decoding step against encoder output: [batch, d].
template <class T>
ad::Tensor<T> decoder_forward(ad::Graph<T>& g, const TransformerModel<T>& m, ad::Tensor<T> enc, const TokenBatch& b) {
  if (!m.has_decoder()) throw ModelError(ModelError::Kind::ConfigMismatch, "model has no decoder");
  const auto heads = static_cast<std::size_t>(m.config().heads);
  const double drop = m.config().dropout;
  const std::vector<int> bos(b.batch, Vocab::kBos);
  const std::vector<int> pos0(b.batch, 0);
  auto y = ad::add(g, ad::embedding_lookup(g, bos, m.tok_emb), ad::embedding_lookup(g, pos0, m.pos_emb));
  const std::vector<std::uint8_t> no_mask;
  for (const auto& layer : m.decoder) {
    y = detail::residual_norm(g, layer.ln1, y, multi_head(g, layer.self_attn, y, y, heads, b.batch, no_mask), drop);
    y = detail::residual_norm(g, layer.ln2, y, multi_head(g, layer.cross_attn, y, enc, heads, b.batch, b.key_mask), drop);
    y = detail::residual_norm(g, layer.ln3, y, detail::feed_forward(g, layer.ffn, y), drop);
  }
  return y;
}

/// Readout hidden state from an embedded batch: [batch, d].
template <class T>
ad::Tensor<T> readout_hidden(ad::Graph<T>& g, const TransformerModel<T>& m, ad::Tensor<T> x, const TokenBatch& b) {
  if (m.has_decoder()) return decoder_forward(g, m, encoder_forward(g, m, x, b), b);
  return encoder_readout(g, m, x, b);
}

template <class T>
ad::Tensor<T> class_logits(ad::Graph<T>& g, const TransformerModel<T>& m, ad::Tensor<T> hidden) {
  return ad::linear(g, hidden, m.cls_w, m.cls_b);
}

template <class T>
ad::Tensor<T> logits(ad::Graph<T>& g, const TransformerModel<T>& m, const TokenBatch& b) {
  return class_logits(g, m, readout_hidden(g, m, embed(g, m, b), b));
}

/// Softmax over the classifier applied to readout hidden states.
template <class T>
ad::Tensor<T> classify(ad::Graph<T>& g, const TransformerModel<T>& m, ad::Tensor<T> hidden) {
  return ad::softmax(g, class_logits(g, m, hidden));
}

/// Index of the largest value; ties go to the lowest index.
template <class V>
int argmax(std::span<const V> v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

template <class T>
std::pair<int, std::vector<double>> predict(const TransformerModel<T>& m, const TokenSeq& seq) {
  ad::Graph<T> g(false);
  const TokenSeq* one[] = {&seq};
  const auto b = make_batch(std::span<const TokenSeq* const>(one));
  auto probs = classify(g, m, readout_hidden(g, m, embed(g, m, b), b));
  std::vector<double> p(probs.values().begin(), probs.values().end());
  return {argmax<double>(p), p};
}

/// Argmax classes for many sequences, evaluated in batches.
template <class T>
std::vector<int> predict_classes(const TransformerModel<T>& m, std::span<const TokenSeq> seqs, std::size_t batch = 256) {
  std::vector<int> out;
  out.reserve(seqs.size());
  for (std::size_t s = 0; s < seqs.size(); s += batch) {
    const auto n = std::min(batch, seqs.size() - s);
    ad::Graph<T> g(false);
    auto z = logits(g, m, make_batch(seqs.subspan(s, n)));
    const std::size_t c = z.cols();
    for (std::size_t i = 0; i < n; ++i) out.push_back(argmax<T>(std::span<const T>(z.data() + i * c, c)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct Schedule {
  int epochs = 1;
  std::size_t epoch_size = 0;  // 0 = size of the training set
  std::size_t batch_size = 64;
  double lr = 5e-5;
  std::string optimizer = "adam";  // "adam" | "adamw"
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  std::size_t eval_batch = 256;
};

inline void to_json(nlohmann::json& j, const Schedule& s) {
  j = {{"epochs", s.epochs}, {"epoch_size", s.epoch_size}, {"batch_size", s.batch_size},
       {"lr", s.lr},         {"optimizer", s.optimizer},   {"weight_decay", s.weight_decay},
       {"seed", s.seed},     {"eval_batch", s.eval_batch}};
}

inline void from_json(const nlohmann::json& j, Schedule& s) {
  Schedule d;
  s.epochs = j.value("epochs", d.epochs);
  s.epoch_size = j.value("epoch_size", d.epoch_size);
  s.batch_size = j.value("batch_size", d.batch_size);
  s.lr = j.value("lr", d.lr);
  s.optimizer = j.value("optimizer", d.optimizer);
  s.weight_decay = j.value("weight_decay", d.weight_decay);
  s.seed = j.value("seed", d.seed);
  s.eval_batch = j.value("eval_batch", d.eval_batch);
}

struct LabeledSeq {
  TokenSeq seq;
  int label = 0;  // class index
};

struct EpochLog {
  int epoch = 0;
  double train_loss = 0;
  double test_acc = 0;
  double test_mcc = 0;
  double elapsed_s = 0;  // kept out of the deterministic log line

  nlohmann::json to_json() const {
    return {{"epoch", epoch}, {"train_loss", train_loss}, {"test_acc", test_acc}, {"test_mcc", test_mcc}};
  }
};

struct TrainResult {
  std::vector<EpochLog> log;
  int best_epoch = -1;
  double best_mcc = -2.0;
  std::vector<std::vector<double>> best_state;  // parameter values at best_epoch
};

template <class T>
void restore_state(const TransformerModel<T>& m, const std::vector<std::vector<double>>& state) {
  auto params = m.parameters();
  for (std::size_t i = 0; i < params.size(); ++i)
    for (std::size_t k = 0; k < state[i].size(); ++k) params[i][k] = static_cast<T>(state[i][k]);
}

template <class T>
std::vector<std::vector<double>> snapshot_state(const TransformerModel<T>& m) {
  std::vector<std::vector<double>> out;
  for (const auto& p : m.parameters()) out.emplace_back(p.values().begin(), p.values().end());
  return out;
}

/// Called after each epoch with its log entry and whether it is the new best.
template <class T>
using EpochHook = std::function<void(const EpochLog&, bool is_best, const TransformerModel<T>&)>;

/// Minimizes cross-entropy with minibatches drawn with replacement. Each
/// epoch ends with a test evaluation; the best test-MCC state is kept.
template <class T>
TrainResult train(TransformerModel<T>& m, std::span<const LabeledSeq> train_set, std::span<const LabeledSeq> test_set,
                  const Schedule& s, const EpochHook<T>& hook = {}) {
  if (train_set.empty()) throw std::invalid_argument("empty training set");
  ad::AdamSettings settings;
  settings.lr = s.lr;
  settings.weight_decay = s.weight_decay;
  ad::Optimizer<T> opt(m.parameters(), settings, s.optimizer == "adamw");
  Rng rng(s.seed);
  std::uint64_t dropout_seed = s.seed ^ 0x9E3779B97F4A7C15ULL;

  std::vector<TokenSeq> test_seqs;
  std::vector<int> test_labels;
  for (const auto& e : test_set) {
    test_seqs.push_back(e.seq);
    test_labels.push_back(e.label);
  }

  TrainResult result;
  const auto start = std::chrono::steady_clock::now();
  const std::size_t epoch_size = s.epoch_size ? s.epoch_size : train_set.size();
  for (int epoch = 0; epoch < s.epochs; ++epoch) {
    double loss_sum = 0;
    std::size_t seen = 0;
    for (std::size_t done = 0; done < epoch_size; done += s.batch_size) {
      const std::size_t n = std::min(s.batch_size, epoch_size - done);
      std::vector<const TokenSeq*> seqs(n);
      std::vector<int> labels(n);
      for (std::size_t i = 0; i < n; ++i) {
        const auto& e = train_set[rng.below(train_set.size())];
        seqs[i] = &e.seq;
        labels[i] = e.label;
      }
      ad::Graph<T> g(true, m.config().dropout > 0.0, dropout_seed++);
      auto loss = ad::cross_entropy(g, logits(g, m, make_batch(std::span<const TokenSeq* const>(seqs))), labels);
      loss_sum += static_cast<double>(loss.item()) * static_cast<double>(n);
      seen += n;
      opt.zero_grad();
      g.backward(loss);
      opt.step();
    }
    EpochLog entry;
    entry.epoch = epoch;
    entry.train_loss = loss_sum / static_cast<double>(seen);
    if (!test_seqs.empty()) {
      const auto pred = predict_classes(m, std::span<const TokenSeq>(test_seqs), s.eval_batch);
      entry.test_acc = accuracy(test_labels, pred);
      entry.test_mcc = multiclass_mcc(test_labels, pred);
    }
    entry.elapsed_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool best = entry.test_mcc > result.best_mcc;
    if (best) {
      result.best_mcc = entry.test_mcc;
      result.best_epoch = epoch;
      result.best_state = snapshot_state(m);
    }
    result.log.push_back(entry);
    if (hook) hook(entry, best, m);
  }
  return result;
}

}  // namespace ectrace
