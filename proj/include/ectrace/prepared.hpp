// SPDX-License-Identifier: Apache-2.0
//
// PreparedDataset: a trace dataset bound to a target prime, plus the
// append-only log of transforms that produced it. Every transform goes
// through apply_step(), so replay() on the raw records reproduces it.

#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ectrace/dataset.hpp"

namespace ectrace {

enum class Normalization { None, InverseSqrtQ };

struct TransformStep {
  std::string op;
  nlohmann::json params = nlohmann::json::object();
  nlohmann::json result = nlohmann::json::object();  // diagnostics only; not replayed

  bool operator==(const TransformStep& o) const { return op == o.op && params == o.params; }
};

struct PreparedDataset {
  std::vector<TraceRecord> records;
  std::vector<bool> is_test;  // parallel to records
  int target_prime = 97;
  int label_modulus = 0;    // 0 = exact value
  int feature_modulus = 0;  // 0 = exact value
  std::set<int> excluded_primes;
  Normalization normalization = Normalization::None;
  bool conductor_column = false;
  bool root_number_column = false;
  std::vector<TransformStep> provenance;

  std::size_t target_index() const { return index_of_prime(target_prime); }

  /// Primes feeding the features, ascending: all primes below 100 except the
  /// target and the excluded ones.
  std::vector<int> feature_primes() const {
    std::vector<int> out;
    for (int p : kPrimesBelow100) {
      if (p != target_prime && !excluded_primes.contains(p)) out.push_back(p);
    }
    return out;
  }

  /// Integer features; nullopt marks a bad-reduction hole.
  std::vector<std::optional<int>> int_features(const TraceRecord& r) const {
    std::vector<std::optional<int>> out;
    for (int p : feature_primes()) {
      const std::size_t i = index_of_prime(p);
      out.push_back(r.bad_mask[i] ? std::nullopt : std::optional<int>(r.traces[i]));
    }
    return out;
  }

  /// Real features: a_q / sqrt(q) under InverseSqrtQ, raw values otherwise;
  /// holes become 0. Extra columns are appended when enabled.
  std::vector<double> real_features(const TraceRecord& r) const {
    std::vector<double> out;
    for (int p : feature_primes()) {
      const std::size_t i = index_of_prime(p);
      double v = r.bad_mask[i] ? 0.0 : static_cast<double>(r.traces[i]);
      if (normalization == Normalization::InverseSqrtQ) v /= std::sqrt(static_cast<double>(p));
      out.push_back(v);
    }
    if (conductor_column) out.push_back(std::log10(static_cast<double>(r.size_key())));
    if (root_number_column) out.push_back(static_cast<double>(r.root_number.value_or(0)));
    return out;
  }

  int label(const TraceRecord& r) const { return r.traces[target_index()]; }

  std::vector<TraceRecord> train_records() const { return select(false); }
  std::vector<TraceRecord> test_records() const { return select(true); }

 private:
  std::vector<TraceRecord> select(bool test) const {
    std::vector<TraceRecord> out;
    for (std::size_t i = 0; i < records.size(); ++i) {
      if (is_test[i] == test) out.push_back(records[i]);
    }
    return out;
  }
};

namespace detail {

inline std::string reduce_target_name(ReduceTarget t) {
  switch (t) {
    case ReduceTarget::Features: return "features";
    case ReduceTarget::Labels: return "labels";
    case ReduceTarget::Both: return "both";
  }
  return "both";
}

inline ReduceTarget parse_reduce_target(const std::string& s) {
  if (s == "features") return ReduceTarget::Features;
  if (s == "labels") return ReduceTarget::Labels;
  if (s == "both") return ReduceTarget::Both;
  throw std::invalid_argument("unknown reduce target '" + s + "'");
}

inline void keep_records(PreparedDataset& ds, std::vector<TraceRecord> kept) {
  // Record-filtering transforms run before split; the partition is reset.
  ds.records = std::move(kept);
  ds.is_test.assign(ds.records.size(), false);
}

}  // namespace detail

/// Applies one logged transform in place and appends it to the provenance.
inline void apply_step(PreparedDataset& ds, TransformStep step) {
  const auto& p = step.params;
  const int t = ds.target_prime;
  if (step.op == "filter_good_reduction") {
    detail::keep_records(ds, filter_good_reduction(ds.records, p.at("prime").get<int>()));
  } else if (step.op == "fingerprint_dedup") {
    detail::keep_records(ds, fingerprint_dedup(ds.records));
  } else if (step.op == "reduce_mod") {
    const int ell = p.at("modulus").get<int>();
    const auto which = detail::parse_reduce_target(p.at("which").get<std::string>());
    // Excluded or bad slots are untouched; reduction applies to whole columns.
    ds.records = reduce_mod(std::move(ds.records), ell, which, t);
    if (which != ReduceTarget::Features) ds.label_modulus = ell;
    if (which != ReduceTarget::Labels) ds.feature_modulus = ell;
  } else if (step.op == "dedup_mod_tuples") {
    auto res = dedup_mod_tuples(ds.records, t);
    step.result["removed"] = res.removed;
    detail::keep_records(ds, std::move(res.kept));
  } else if (step.op == "drop_indeterminate") {
    const std::size_t before = ds.records.size();
    detail::keep_records(ds, drop_indeterminate(ds.records, t));
    step.result["removed"] = before - ds.records.size();
  } else if (step.op == "select_labels") {
    const auto vals = p.at("values").get<std::set<int>>();
    detail::keep_records(ds, select_labels(ds.records, t, vals));
  } else if (step.op == "balance") {
    detail::keep_records(ds, balance(ds.records, t, p.at("seed").get<std::uint64_t>()));
  } else if (step.op == "exclude_primes") {
    const auto primes = p.at("primes").get<std::set<int>>();
    const auto current = ds.feature_primes();
    for (int q : primes) {
      if (std::find(current.begin(), current.end(), q) == current.end()) {
        throw DatasetError(DatasetError::Kind::UnknownPrime, std::to_string(q) + " is not a feature prime");
      }
    }
    ds.excluded_primes.insert(primes.begin(), primes.end());
  } else if (step.op == "normalize") {
    const std::string mode = p.at("mode").get<std::string>();
    if (mode == "inverse_sqrt_q") {
      if (ds.feature_modulus != 0) {
        throw std::invalid_argument("normalization requires exact (unreduced) features");
      }
      ds.normalization = Normalization::InverseSqrtQ;
    } else if (mode == "none") {
      ds.normalization = Normalization::None;
    } else {
      throw std::invalid_argument("unknown normalization '" + mode + "'");
    }
    ds.conductor_column = p.value("conductor_column", false);
    ds.root_number_column = p.value("root_number_column", false);
    if (ds.root_number_column) {
      for (const auto& r : ds.records) {
        if (!r.root_number) throw DatasetError(DatasetError::Kind::Validation, r.id + ": root number unavailable");
      }
    }
  } else if (step.op == "split") {
    SplitSpec spec;
    spec.test_size = p.at("test_size").get<std::size_t>();
    spec.seed = p.at("seed").get<std::uint64_t>();
    for (const auto& b : p.value("buckets", nlohmann::json::array())) {
      spec.conductor_buckets.push_back({Integer(b.at(0).get<std::string>()), Integer(b.at(1).get<std::string>())});
    }
    ds.is_test = split_mask(ds.records, spec);
    step.result["train"] = ds.records.size() - spec.test_size;
    step.result["test"] = spec.test_size;
  } else {
    throw std::invalid_argument("unknown transform '" + step.op + "'");
  }
  step.result["records"] = ds.records.size();
  ds.provenance.push_back(std::move(step));
}

/// Binds raw records to a target prime; drops records with bad reduction there.
inline PreparedDataset make_prepared(const std::vector<TraceRecord>& raw, int target_prime) {
  index_of_prime(target_prime);
  PreparedDataset ds;
  ds.target_prime = target_prime;
  ds.records = raw;
  ds.is_test.assign(raw.size(), false);
  ds.provenance.push_back({"target", {{"prime", target_prime}}, {{"records", raw.size()}}});
  apply_step(ds, {"filter_good_reduction", {{"prime", target_prime}}});
  return ds;
}

inline void reduce_mod(PreparedDataset& ds, int ell, ReduceTarget which) {
  apply_step(ds, {"reduce_mod", {{"modulus", ell}, {"which", detail::reduce_target_name(which)}}});
}

inline std::size_t dedup_mod_tuples(PreparedDataset& ds) {
  apply_step(ds, {"dedup_mod_tuples"});
  return ds.provenance.back().result.at("removed").get<std::size_t>();
}

inline void balance(PreparedDataset& ds, std::uint64_t seed) { apply_step(ds, {"balance", {{"seed", seed}}}); }

inline PreparedDataset exclude_primes(PreparedDataset ds, const std::set<int>& primes) {
  apply_step(ds, {"exclude_primes", {{"primes", primes}}});
  return ds;
}

inline PreparedDataset normalize_features(PreparedDataset ds, Normalization mode, bool conductor_column = false,
                                          bool root_number_column = false) {
  apply_step(ds, {"normalize",
                  {{"mode", mode == Normalization::InverseSqrtQ ? "inverse_sqrt_q" : "none"},
                   {"conductor_column", conductor_column},
                   {"root_number_column", root_number_column}}});
  return ds;
}

inline void split(PreparedDataset& ds, const SplitSpec& spec) {
  nlohmann::json buckets = nlohmann::json::array();
  for (const auto& b : spec.conductor_buckets) buckets.push_back({b.lo.str(), b.hi.str()});
  apply_step(ds, {"split", {{"test_size", spec.test_size}, {"seed", spec.seed}, {"buckets", buckets}}});
}

/// Re-runs a provenance log against raw records.
inline PreparedDataset replay(const std::vector<TraceRecord>& raw, const std::vector<TransformStep>& log) {
  if (log.empty() || log.front().op != "target") throw std::invalid_argument("provenance must start with a target step");
  PreparedDataset ds;
  ds.target_prime = log.front().params.at("prime").get<int>();
  ds.records = raw;
  ds.is_test.assign(raw.size(), false);
  ds.provenance.push_back(log.front());
  for (std::size_t i = 1; i < log.size(); ++i) apply_step(ds, {log[i].op, log[i].params});
  return ds;
}

inline nlohmann::json provenance_json(const PreparedDataset& ds) {
  nlohmann::json steps = nlohmann::json::array();
  for (const auto& s : ds.provenance) steps.push_back({{"op", s.op}, {"params", s.params}, {"result", s.result}});
  return steps;
}

inline std::vector<TransformStep> provenance_from_json(const nlohmann::json& j) {
  std::vector<TransformStep> out;
  for (const auto& s : j) out.push_back({s.at("op").get<std::string>(), s.at("params"), s.value("result", nlohmann::json::object())});
  return out;
}

/// Newline-delimited {"x":[...],"y":...}; holes are null in integer mode.
inline void write_ndjson(std::ostream& out, const PreparedDataset& ds, bool test_part) {
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    if (ds.is_test[i] != test_part) continue;
    const auto& r = ds.records[i];
    nlohmann::json j;
    if (ds.normalization == Normalization::None && !ds.conductor_column && !ds.root_number_column) {
      nlohmann::json x = nlohmann::json::array();
      for (const auto& v : ds.int_features(r)) {
        if (v) {
          x.push_back(*v);
        } else {
          x.push_back(nullptr);
        }
      }
      j["x"] = std::move(x);
    } else {
      j["x"] = ds.real_features(r);
    }
    j["y"] = ds.label(r);
    out << j.dump() << '\n';
  }
}

}  // namespace ectrace
