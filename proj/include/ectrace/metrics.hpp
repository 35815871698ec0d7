// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ectrace/rng.hpp"

namespace ectrace {

/// counts[i][j] = number of samples with true label labels[i] predicted as labels[j].
struct ConfusionMatrix {
  std::vector<int> labels;
  std::vector<std::vector<std::int64_t>> counts;

  std::size_t size() const noexcept { return labels.size(); }
  std::int64_t total() const {
    std::int64_t s = 0;
    for (const auto& row : counts)
      for (auto c : row) s += c;
    return s;
  }
};

namespace detail {

inline void check_same_length(std::span<const int> truth, std::span<const int> pred) {
  if (truth.size() != pred.size()) throw std::invalid_argument("truth and prediction lengths differ");
}

}  // namespace detail

inline double accuracy(std::span<const int> truth, std::span<const int> pred) {
  detail::check_same_length(truth, pred);
  if (truth.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hit += truth[i] == pred[i];
  return static_cast<double>(hit) / static_cast<double>(truth.size());
}

inline double binary_mcc(std::int64_t tp, std::int64_t fp, std::int64_t tn, std::int64_t fn) {
  if (tp < 0 || fp < 0 || tn < 0 || fn < 0) throw std::invalid_argument("binary_mcc: negative count");
  using LD = long double;
  const LD num = static_cast<LD>(tp) * tn - static_cast<LD>(fp) * fn;
  const LD den = static_cast<LD>(tp + fp) * (tp + fn) * (tn + fp) * (tn + fn);
  if (den == 0) return 0.0;
  return static_cast<double>(num / std::sqrt(den));
}

/// Confusion matrix over the sorted union of observed labels, unless
/// `labels` fixes the class list.
inline ConfusionMatrix confusion(std::span<const int> truth, std::span<const int> pred, std::vector<int> labels = {}) {
  detail::check_same_length(truth, pred);
  if (labels.empty()) {
    labels.assign(truth.begin(), truth.end());
    labels.insert(labels.end(), pred.begin(), pred.end());
    std::sort(labels.begin(), labels.end());
    labels.erase(std::unique(labels.begin(), labels.end()), labels.end());
  }
  std::map<int, std::size_t> index;
  for (std::size_t i = 0; i < labels.size(); ++i) index[labels[i]] = i;
  ConfusionMatrix c{labels, std::vector<std::vector<std::int64_t>>(labels.size(), std::vector<std::int64_t>(labels.size()))};
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const auto t = index.find(truth[i]);
    const auto p = index.find(pred[i]);
    if (t == index.end() || p == index.end()) throw std::invalid_argument("label outside the class list");
    ++c.counts[t->second][p->second];
  }
  return c;
}

/// Gorodkin's R_K:
///   (s * c - sum_k p_k t_k) / sqrt((s^2 - sum_k p_k^2) (s^2 - sum_k t_k^2))
/// with c the trace, s the total, t_k row sums and p_k column sums.
inline double multiclass_mcc(const ConfusionMatrix& cm) {
  using LD = long double;
  const std::size_t k = cm.size();
  std::vector<LD> t(k, 0), p(k, 0);
  LD c = 0, s = 0;
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      const LD v = static_cast<LD>(cm.counts[i][j]);
      t[i] += v;
      p[j] += v;
      s += v;
      if (i == j) c += v;
    }
  }
  LD pt = 0, pp = 0, tt = 0;
  for (std::size_t i = 0; i < k; ++i) {
    pt += p[i] * t[i];
    pp += p[i] * p[i];
    tt += t[i] * t[i];
  }
  const LD den = (s * s - pp) * (s * s - tt);
  if (den <= 0) return 0.0;
  return static_cast<double>((s * c - pt) / std::sqrt(den));
}

inline double multiclass_mcc(std::span<const int> truth, std::span<const int> pred) {
  return multiclass_mcc(confusion(truth, pred));
}

inline double sign_agnostic_mcc(std::span<const int> truth, std::span<const int> pred) {
  detail::check_same_length(truth, pred);
  std::vector<int> at(truth.size()), ap(pred.size());
  for (std::size_t i = 0; i < truth.size(); ++i) {
    at[i] = std::abs(truth[i]);
    ap[i] = std::abs(pred[i]);
  }
  return multiclass_mcc(at, ap);
}

inline double modl_converted_mcc(std::span<const int> truth, std::span<const int> pred, int ell) {
  if (ell < 2) throw std::invalid_argument("modulus must be at least 2");
  detail::check_same_length(truth, pred);
  std::vector<int> rt(truth.size()), rp(pred.size());
  for (std::size_t i = 0; i < truth.size(); ++i) {
    rt[i] = ((truth[i] % ell) + ell) % ell;
    rp[i] = ((pred[i] % ell) + ell) % ell;
  }
  return multiclass_mcc(rt, rp);
}

/// Row-normalized (by true class) confusion proportions; all-zero rows stay zero.
inline std::vector<std::vector<double>> normalized_confusion(const ConfusionMatrix& cm) {
  std::vector<std::vector<double>> out(cm.size(), std::vector<double>(cm.size(), 0.0));
  for (std::size_t i = 0; i < cm.size(); ++i) {
    std::int64_t row = 0;
    for (auto v : cm.counts[i]) row += v;
    if (row == 0) continue;
    for (std::size_t j = 0; j < cm.size(); ++j) out[i][j] = static_cast<double>(cm.counts[i][j]) / static_cast<double>(row);
  }
  return out;
}

inline std::vector<std::vector<double>> normalized_confusion(std::span<const int> truth, std::span<const int> pred) {
  return normalized_confusion(confusion(truth, pred));
}

/// Share of the most frequent label.
inline double majority_baseline(std::span<const int> labels) {
  if (labels.empty()) return 0.0;
  std::map<int, std::size_t> counts;
  for (int l : labels) ++counts[l];
  std::size_t best = 0;
  for (const auto& [_, n] : counts) best = std::max(best, n);
  return static_cast<double>(best) / static_cast<double>(labels.size());
}

/// Lower percentile bound of MCC over bootstrap resamples of (truth, pred) pairs.
inline double bootstrap_mcc_lower(std::span<const int> truth, std::span<const int> pred, std::size_t resamples,
                                  double level, std::uint64_t seed) {
  detail::check_same_length(truth, pred);
  if (truth.empty() || resamples == 0) return 0.0;
  Rng rng(seed);
  std::vector<double> stats;
  stats.reserve(resamples);
  std::vector<int> bt(truth.size()), bp(pred.size());
  for (std::size_t r = 0; r < resamples; ++r) {
    for (std::size_t i = 0; i < truth.size(); ++i) {
      const auto j = rng.below(truth.size());
      bt[i] = truth[j];
      bp[i] = pred[j];
    }
    stats.push_back(multiclass_mcc(bt, bp));
  }
  std::sort(stats.begin(), stats.end());
  const double alpha = (1.0 - level) / 2.0;
  const auto idx = static_cast<std::size_t>(std::floor(alpha * static_cast<double>(resamples)));
  return stats[std::min(idx, stats.size() - 1)];
}

struct EvalSummary {
  double accuracy = 0;
  double mcc = 0;
  double majority_baseline = 0;
  ConfusionMatrix confusion;
};

inline EvalSummary summarize(std::span<const int> truth, std::span<const int> pred) {
  EvalSummary s;
  s.accuracy = accuracy(truth, pred);
  s.confusion = confusion(truth, pred);
  s.mcc = multiclass_mcc(s.confusion);
  s.majority_baseline = majority_baseline(truth);
  return s;
}

inline nlohmann::json to_json(const ConfusionMatrix& cm) {
  return {{"labels", cm.labels}, {"counts", cm.counts}};
}

/// CSV with header `true,<pred labels...>` and one row of proportions per true label.
inline void write_confusion_csv(std::ostream& out, const ConfusionMatrix& cm) {
  const auto norm = normalized_confusion(cm);
  out << "true";
  for (int l : cm.labels) out << ',' << l;
  out << '\n';
  for (std::size_t i = 0; i < cm.size(); ++i) {
    out << cm.labels[i];
    for (double v : norm[i]) out << ',' << nlohmann::json(v).dump();
    out << '\n';
  }
}

struct PrimeMetric {
  int prime;
  double accuracy;
  double mcc;
};

/// CSV `prime,accuracy,mcc`, one row per target prime.
inline void write_prime_series_csv(std::ostream& out, std::span<const PrimeMetric> rows) {
  out << "prime,accuracy,mcc\n";
  for (const auto& r : rows) {
    out << r.prime << ',' << nlohmann::json(r.accuracy).dump() << ',' << nlohmann::json(r.mcc).dump() << '\n';
  }
}

}  // namespace ectrace
