// SPDX-License-Identifier: Apache-2.0
//
// Feedforward baselines over per-prime trace features.

#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ectrace/autodiff.hpp"
#include "ectrace/dataset.hpp"
#include "ectrace/metrics.hpp"
#include "ectrace/optim.hpp"
#include "ectrace/transformer.hpp"

namespace ectrace {

enum class FeatureEncoding { OneHot, NormalizedReal };

/// Which primes feed the network and how each one is encoded.
struct FeatureSpec {
  FeatureEncoding encoding = FeatureEncoding::OneHot;
  std::vector<int> primes;
  std::vector<int> moduli;  // per prime, one-hot mode: 0 = exact value, 2 = parity
  bool raw_a2 = false;      // real mode: leave a_2 unscaled
  bool conductor = false;
  bool root_number = false;

  int modulus_of(std::size_t i) const { return moduli.empty() ? 0 : moduli.at(i); }

  /// Width of each prime's block, in prime order.
  std::vector<std::size_t> block_widths() const {
    std::vector<std::size_t> w;
    for (std::size_t i = 0; i < primes.size(); ++i) {
      if (encoding == FeatureEncoding::NormalizedReal) {
        w.push_back(1);
      } else {
        const int ell = modulus_of(i);
        w.push_back(ell == 0 ? static_cast<std::size_t>(2 * hasse_bound(primes[i]) + 1) : static_cast<std::size_t>(ell));
      }
    }
    return w;
  }

  std::size_t width() const {
    std::size_t n = 0;
    for (auto w : block_widths()) n += w;
    return n + (conductor ? 1 : 0) + (root_number ? 1 : 0);
  }
};

/// Concatenated indicator blocks. Bad-reduction slots give an all-zero block.
inline std::vector<double> one_hot_features(const TraceRecord& r, const FeatureSpec& spec) {
  std::vector<double> out;
  out.reserve(spec.width());
  const auto widths = spec.block_widths();
  for (std::size_t i = 0; i < spec.primes.size(); ++i) {
    const int p = spec.primes[i];
    const std::size_t slot = index_of_prime(p);
    const std::size_t base = out.size();
    out.resize(base + widths[i], 0.0);
    if (r.bad_mask[slot]) continue;
    const int ell = spec.modulus_of(i);
    const int a = r.traces[slot];
    long idx;
    if (ell == 0) {
      const int b = hasse_bound(p);
      if (a < -b || a > b) {
        throw TokenError(TokenError::Kind::OutOfRange, "a_" + std::to_string(p) + " = " + std::to_string(a) + " outside Hasse range");
      }
      idx = a + b;
    } else {
      idx = ((a % ell) + ell) % ell;
    }
    out[base + static_cast<std::size_t>(idx)] = 1.0;
  }
  if (spec.conductor) out.push_back(std::log10(static_cast<double>(r.size_key())));
  if (spec.root_number) out.push_back(static_cast<double>(r.root_number.value_or(0)));
  return out;
}

/// a_q / sqrt(q) per prime (a_2 raw when requested); holes are 0.
inline std::vector<double> real_valued_features(const TraceRecord& r, const FeatureSpec& spec) {
  std::vector<double> out;
  for (int p : spec.primes) {
    const std::size_t slot = index_of_prime(p);
    double v = r.bad_mask[slot] ? 0.0 : static_cast<double>(r.traces[slot]);
    if (!(spec.raw_a2 && p == 2)) v /= std::sqrt(static_cast<double>(p));
    out.push_back(v);
  }
  if (spec.conductor) out.push_back(std::log10(static_cast<double>(r.size_key())));
  if (spec.root_number) out.push_back(static_cast<double>(r.root_number.value_or(0)));
  return out;
}

inline std::vector<double> features(const TraceRecord& r, const FeatureSpec& spec) {
  return spec.encoding == FeatureEncoding::OneHot ? one_hot_features(r, spec) : real_valued_features(r, spec);
}

/// Per-column standardization fitted on training rows.
struct Standardizer {
  std::vector<std::size_t> columns;
  std::vector<double> mean, scale;

  static Standardizer fit(const std::vector<std::vector<double>>& rows, std::vector<std::size_t> columns) {
    Standardizer s{std::move(columns), {}, {}};
    for (auto c : s.columns) {
      double m = 0, v = 0;
      for (const auto& r : rows) m += r.at(c);
      m /= rows.empty() ? 1.0 : static_cast<double>(rows.size());
      for (const auto& r : rows) v += (r[c] - m) * (r[c] - m);
      v /= rows.empty() ? 1.0 : static_cast<double>(rows.size());
      s.mean.push_back(m);
      s.scale.push_back(v > 0 ? std::sqrt(v) : 1.0);
    }
    return s;
  }

  void apply(std::vector<std::vector<double>>& rows) const {
    for (auto& r : rows)
      for (std::size_t k = 0; k < columns.size(); ++k) r[columns[k]] = (r[columns[k]] - mean[k]) / scale[k];
  }
};

struct FFNConfig {
  std::vector<int> widths = {64, 32};
  double dropout = 0.0;
  bool sigmoid_head = false;  // one logit + binary log-loss when true
  int n_classes = 2;
  std::uint64_t seed = 0;

  /// Widths [2^(n+m), 2^(n+m-1), ..., 2^n].
  static std::vector<int> pyramid(int n, int m) {
    if (n < 0 || m < 0 || n + m > 24) throw std::invalid_argument("pyramid exponents out of range");
    std::vector<int> w;
    for (int e = n + m; e >= n; --e) w.push_back(1 << e);
    return w;
  }
};

inline void to_json(nlohmann::json& j, const FFNConfig& c) {
  j = {{"widths", c.widths}, {"dropout", c.dropout}, {"head", c.sigmoid_head ? "sigmoid" : "softmax"},
       {"n_classes", c.n_classes}, {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, FFNConfig& c) {
  if (j.contains("pyramid")) {
    c.widths = FFNConfig::pyramid(j["pyramid"].at(0).get<int>(), j["pyramid"].at(1).get<int>());
  } else {
    c.widths = j.value("widths", std::vector<int>{64, 32});
  }
  c.dropout = j.value("dropout", 0.0);
  c.sigmoid_head = j.value("head", std::string("softmax")) == "sigmoid";
  c.n_classes = j.value("n_classes", 2);
  c.seed = j.value("seed", std::uint64_t{0});
}

template <class T>
class FFNModel {
 public:
  FFNModel(std::size_t in_width, FFNConfig config) : config_(std::move(config)), in_(in_width) {
    if (config_.sigmoid_head && config_.n_classes != 2) throw std::invalid_argument("sigmoid head needs 2 classes");
    Rng rng(config_.seed);
    std::size_t prev = in_width;
    auto add_layer = [&](std::size_t out) {
      weights.push_back(detail::normal_init<T>(rng, {prev, out}));
      biases.push_back(detail::filled<T>({out}, T(0)));
      prev = out;
    };
    for (int w : config_.widths) add_layer(static_cast<std::size_t>(w));
    add_layer(config_.sigmoid_head ? 1 : static_cast<std::size_t>(config_.n_classes));
  }

  const FFNConfig& config() const noexcept { return config_; }
  std::size_t input_width() const noexcept { return in_; }

  NamedTensors<T> named_parameters() const {
    NamedTensors<T> out;
    for (std::size_t l = 0; l < weights.size(); ++l) {
      out.emplace_back("layer." + std::to_string(l) + ".w", weights[l]);
      out.emplace_back("layer." + std::to_string(l) + ".b", biases[l]);
    }
    return out;
  }

  std::vector<ad::Tensor<T>> parameters() const {
    std::vector<ad::Tensor<T>> out;
    for (auto& [_, t] : named_parameters()) out.push_back(t);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : parameters()) n += t.numel();
    return n;
  }

  std::vector<ad::Tensor<T>> weights, biases;

 private:
  FFNConfig config_;
  std::size_t in_;
};

/// Logits [n, C] (softmax head) or [n, 1] (sigmoid head).
template <class T>
ad::Tensor<T> forward(ad::Graph<T>& g, const FFNModel<T>& m, ad::Tensor<T> x) {
  for (std::size_t l = 0; l < m.weights.size(); ++l) {
    x = ad::linear(g, x, m.weights[l], m.biases[l]);
    if (l + 1 < m.weights.size()) x = ad::dropout(g, ad::relu(g, x), m.config().dropout);
  }
  return x;
}

template <class T>
ad::Tensor<T> ffn_loss(ad::Graph<T>& g, const FFNModel<T>& m, ad::Tensor<T> x, const std::vector<int>& labels) {
  auto z = forward(g, m, x);
  return m.config().sigmoid_head ? ad::binary_cross_entropy_with_logits(g, z, labels) : ad::cross_entropy(g, z, labels);
}

template <class T>
ad::Tensor<T> to_tensor(const std::vector<std::vector<double>>& rows, std::span<const std::size_t> pick = {}) {
  const std::size_t n = pick.empty() ? rows.size() : pick.size();
  const std::size_t w = rows.empty() ? 0 : rows.front().size();
  ad::Tensor<T> t({n, w});
  for (std::size_t i = 0; i < n; ++i) {
    const auto& r = rows[pick.empty() ? i : pick[i]];
    for (std::size_t j = 0; j < w; ++j) t[i * w + j] = static_cast<T>(r[j]);
  }
  return t;
}

template <class T>
std::vector<int> predict_classes(const FFNModel<T>& m, const std::vector<std::vector<double>>& x) {
  std::vector<int> out;
  const std::size_t chunk = 1024;
  for (std::size_t s = 0; s < x.size(); s += chunk) {
    std::vector<std::size_t> pick;
    for (std::size_t i = s; i < std::min(x.size(), s + chunk); ++i) pick.push_back(i);
    ad::Graph<T> g(false);
    auto z = forward(g, m, to_tensor<T>(x, pick));
    const std::size_t c = z.cols();
    for (std::size_t i = 0; i < pick.size(); ++i) {
      out.push_back(m.config().sigmoid_head ? (z[i] > T(0) ? 1 : 0)
                                            : argmax<T>(std::span<const T>(z.data() + i * c, c)));
    }
  }
  return out;
}

template <class T>
EvalSummary evaluate(const FFNModel<T>& m, const std::vector<std::vector<double>>& x, const std::vector<int>& y) {
  return summarize(y, predict_classes(m, x));
}

template <class T>
using FFNEpochHook = std::function<void(const EpochLog&, bool is_best, const FFNModel<T>&)>;

template <class T>
TrainResult train(FFNModel<T>& m, const std::vector<std::vector<double>>& x_train, const std::vector<int>& y_train,
                  const std::vector<std::vector<double>>& x_test, const std::vector<int>& y_test, const Schedule& s,
                  const FFNEpochHook<T>& hook = {}) {
  if (x_train.empty()) throw std::invalid_argument("empty training set");
  for (const auto& r : x_train) {
    if (r.size() != m.input_width()) throw ad::ShapeMismatch("feature width does not match the model input");
  }
  ad::AdamSettings settings;
  settings.lr = s.lr;
  settings.weight_decay = s.weight_decay;
  ad::Optimizer<T> opt(m.parameters(), settings, s.optimizer == "adamw");
  Rng rng(s.seed);
  std::uint64_t dropout_seed = s.seed ^ 0x9E3779B97F4A7C15ULL;
  const std::size_t epoch_size = s.epoch_size ? s.epoch_size : x_train.size();
  TrainResult result;
  const auto start = std::chrono::steady_clock::now();
  for (int epoch = 0; epoch < s.epochs; ++epoch) {
    double loss_sum = 0;
    for (std::size_t done = 0; done < epoch_size; done += s.batch_size) {
      const std::size_t n = std::min(s.batch_size, epoch_size - done);
      std::vector<std::size_t> pick(n);
      std::vector<int> labels(n);
      for (std::size_t i = 0; i < n; ++i) {
        pick[i] = rng.below(x_train.size());
        labels[i] = y_train[pick[i]];
      }
      ad::Graph<T> g(true, m.config().dropout > 0.0, dropout_seed++);
      auto loss = ffn_loss(g, m, to_tensor<T>(x_train, pick), labels);
      loss_sum += static_cast<double>(loss.item()) * static_cast<double>(n);
      opt.zero_grad();
      g.backward(loss);
      opt.step();
    }
    EpochLog entry;
    entry.epoch = epoch;
    entry.train_loss = loss_sum / static_cast<double>(epoch_size);
    if (!x_test.empty()) {
      const auto pred = predict_classes(m, x_test);
      entry.test_acc = accuracy(y_test, pred);
      entry.test_mcc = multiclass_mcc(y_test, pred);
    }
    entry.elapsed_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool best = entry.test_mcc > result.best_mcc;
    if (best) {
      result.best_mcc = entry.test_mcc;
      result.best_epoch = epoch;
      result.best_state.clear();
      for (const auto& p : m.parameters()) result.best_state.emplace_back(p.values().begin(), p.values().end());
    }
    result.log.push_back(entry);
    if (hook) hook(entry, best, m);
  }
  return result;
}

}  // namespace ectrace
