// SPDX-License-Identifier: Apache-2.0
//
// Experiment configuration: parsing, validation, hashing, and the fixed
// prepare pipeline shared by the command-line tool and the acceptance suite.

#pragma once

#include <cstdint>
#include <cstdio>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ectrace/dataset.hpp"
#include "ectrace/ffn.hpp"
#include "ectrace/prepared.hpp"
#include "ectrace/tokenizer.hpp"
#include "ectrace/transformer.hpp"

namespace ectrace {

inline constexpr const char* kVersion = "0.1.0";

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// FNV-1a, 64-bit.
inline std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Hash of the canonical dump (object keys sorted, no whitespace).
inline std::string config_hash(const nlohmann::json& config) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(config.dump())));
  return buf;
}

inline const std::vector<std::string>& experiment_kinds() {
  static const std::vector<std::string> kinds{"predict_ap",
                                              "predict_ap_mod2_from_aq",
                                              "predict_apmod2_from_aqmod2",
                                              "ffn",
                                              "ffn_normalized",
                                              "encoder_decoder_a2",
                                              "ablation_exclude_primes"};
  return kinds;
}

struct DataSource {
  std::string kind = "synthesize";  // synthesize | synthesize_long | csv
  std::int64_t height_bound = 300;
  std::uint64_t seed = 0;
  std::string path;
  std::string schema = "traces";  // traces | weierstrass
};

struct PrepareSpec {
  std::set<int> label_values;  // empty = keep every label
  bool dedup = false;
  bool drop_indeterminate = false;
  bool balance = true;
  std::size_t test_size = 10000;
  std::vector<ConductorBucket> buckets;
  std::set<int> exclude_primes;
  bool normalize = false;
  bool conductor_column = false;
  bool root_number_column = false;
};

struct ExperimentConfig {
  std::string kind;
  int target_prime = 97;
  int label_modulus = 0;
  int feature_modulus = 0;
  DataSource data;
  PrepareSpec prepare;
  TransformerConfig model;
  FFNConfig ffn;
  Schedule schedule;
  std::uint64_t seed = 0;
  std::string out_dir = "out";
  std::vector<std::set<int>> exclusion_sets;
  nlohmann::json source;  // the document as given, after seed override

  bool uses_ffn() const { return kind == "ffn" || kind == "ffn_normalized"; }
  std::string hash() const { return config_hash(source); }
};

/// JSON Schema (draft 2020-12) for experiment configs.
inline nlohmann::json experiment_schema() {
  using nlohmann::json;
  const json int_set = {{"type", "array"}, {"items", {{"type", "integer"}}}};
  return {
      {"$schema", "https://json-schema.org/draft/2020-12/schema"},
      {"title", "ectrace experiment"},
      {"type", "object"},
      {"required", {"kind", "data"}},
      {"additionalProperties", false},
      {"properties",
       {{"kind", {{"enum", experiment_kinds()}}},
        {"target_prime", {{"type", "integer"}}},
        {"label_modulus", {{"enum", {0, 2, 3, 4}}}},
        {"feature_modulus", {{"enum", {0, 2, 3, 4}}}},
        {"seed", {{"type", "integer"}, {"minimum", 0}}},
        {"out", {{"type", "string"}}},
        {"data",
         {{"type", "object"},
          {"required", {"source"}},
          {"additionalProperties", false},
          {"properties",
           {{"source", {{"enum", {"synthesize", "synthesize_long", "csv"}}}},
            {"height_bound", {{"type", "integer"}, {"minimum", 1}}},
            {"seed", {{"type", "integer"}, {"minimum", 0}}},
            {"path", {{"type", "string"}}},
            {"schema", {{"enum", {"traces", "weierstrass"}}}}}}}},
        {"prepare",
         {{"type", "object"},
          {"additionalProperties", false},
          {"properties",
           {{"label_values", int_set},
            {"dedup", {{"type", "boolean"}}},
            {"drop_indeterminate", {{"type", "boolean"}}},
            {"balance", {{"type", "boolean"}}},
            {"test_size", {{"type", "integer"}, {"minimum", 1}}},
            {"buckets", {{"type", "array"}, {"items", {{"type", "array"}, {"items", {{"type", "string"}}}}}}},
            {"exclude_primes", int_set},
            {"normalize", {{"type", "boolean"}}},
            {"conductor_column", {{"type", "boolean"}}},
            {"root_number_column", {{"type", "boolean"}}}}}}},
        {"model",
         {{"type", "object"},
          {"additionalProperties", false},
          {"properties",
           {{"d_model", {{"type", "integer"}, {"minimum", 1}}},
            {"heads", {{"type", "integer"}, {"minimum", 1}}},
            {"encoder_layers", {{"type", "integer"}, {"minimum", 1}}},
            {"decoder_layers", {{"enum", {0, 1}}}},
            {"ffn_hidden", {{"type", "integer"}, {"minimum", 0}}},
            {"max_positions", {{"type", "integer"}, {"minimum", 1}}},
            {"dropout", {{"type", "number"}, {"minimum", 0}, {"exclusiveMaximum", 1}}}}}}},
        {"ffn",
         {{"type", "object"},
          {"additionalProperties", false},
          {"properties",
           {{"widths", int_set},
            {"pyramid", {{"type", "array"}, {"items", {{"type", "integer"}}}, {"minItems", 2}, {"maxItems", 2}}},
            {"dropout", {{"type", "number"}, {"minimum", 0}, {"exclusiveMaximum", 1}}},
            {"head", {{"enum", {"softmax", "sigmoid"}}}}}}}},
        {"schedule",
         {{"type", "object"},
          {"additionalProperties", false},
          {"properties",
           {{"epochs", {{"type", "integer"}, {"minimum", 1}}},
            {"epoch_size", {{"type", "integer"}, {"minimum", 0}}},
            {"batch_size", {{"type", "integer"}, {"minimum", 1}}},
            {"lr", {{"type", "number"}, {"exclusiveMinimum", 0}}},
            {"optimizer", {{"enum", {"adam", "adamw"}}}},
            {"weight_decay", {{"type", "number"}, {"minimum", 0}}},
            {"eval_batch", {{"type", "integer"}, {"minimum", 1}}}}}}},
        {"exclusion_sets", {{"type", "array"}, {"items", int_set}}}}}};
}

namespace detail {

/// Checks a document against the subset of JSON Schema used above: type,
/// enum, required, additionalProperties, properties, items, minimum,
/// exclusiveMinimum, exclusiveMaximum, minItems, maxItems.
inline void check_schema(const nlohmann::json& v, const nlohmann::json& s, const std::string& path) {
  auto fail = [&](const std::string& why) { throw ConfigError(path + ": " + why); };
  if (s.contains("type")) {
    const std::string t = s["type"];
    const bool ok = (t == "object" && v.is_object()) || (t == "array" && v.is_array()) ||
                    (t == "string" && v.is_string()) || (t == "boolean" && v.is_boolean()) ||
                    (t == "integer" && v.is_number_integer()) || (t == "number" && v.is_number());
    if (!ok) fail("expected " + t);
  }
  if (s.contains("enum")) {
    bool found = false;
    for (const auto& e : s["enum"]) found = found || e == v;
    if (!found) fail("value " + v.dump() + " not in " + s["enum"].dump());
  }
  if (v.is_number()) {
    const double x = v.get<double>();
    if (s.contains("minimum") && x < s["minimum"].get<double>()) fail("below minimum " + s["minimum"].dump());
    if (s.contains("exclusiveMinimum") && x <= s["exclusiveMinimum"].get<double>()) fail("must exceed " + s["exclusiveMinimum"].dump());
    if (s.contains("exclusiveMaximum") && x >= s["exclusiveMaximum"].get<double>()) fail("must be below " + s["exclusiveMaximum"].dump());
  }
  if (v.is_object()) {
    for (const auto& r : s.value("required", nlohmann::json::array())) {
      if (!v.contains(r.get<std::string>())) fail("missing required field '" + r.get<std::string>() + "'");
    }
    const auto props = s.value("properties", nlohmann::json::object());
    for (const auto& [key, val] : v.items()) {
      if (props.contains(key)) {
        check_schema(val, props[key], path + "." + key);
      } else if (s.contains("additionalProperties") && !s["additionalProperties"].get<bool>()) {
        fail("unknown field '" + key + "'");
      }
    }
  }
  if (v.is_array()) {
    if (s.contains("minItems") && v.size() < s["minItems"].get<std::size_t>()) fail("too few items");
    if (s.contains("maxItems") && v.size() > s["maxItems"].get<std::size_t>()) fail("too many items");
    if (s.contains("items")) {
      for (std::size_t i = 0; i < v.size(); ++i) check_schema(v[i], s["items"], path + "[" + std::to_string(i) + "]");
    }
  }
}

}  // namespace detail

inline void validate_against_schema(const nlohmann::json& doc) { detail::check_schema(doc, experiment_schema(), "$"); }

/// Validates and resolves kind-specific defaults. seed_override replaces
/// the top-level seed (and is folded into the hashed document).
inline ExperimentConfig parse_config(nlohmann::json doc, std::optional<std::uint64_t> seed_override = {}) {
  if (seed_override) doc["seed"] = *seed_override;
  validate_against_schema(doc);
  ExperimentConfig c;
  c.source = doc;
  c.kind = doc.at("kind").get<std::string>();
  c.seed = doc.value("seed", std::uint64_t{0});
  c.out_dir = doc.value("out", std::string("out/") + c.kind);

  const bool binary_mod2 = c.kind == "predict_ap_mod2_from_aq" || c.kind == "predict_apmod2_from_aqmod2";
  c.target_prime = doc.value("target_prime", c.kind == "encoder_decoder_a2" ? 2 : 97);
  if (!prime_index(c.target_prime)) throw ConfigError("$.target_prime: " + std::to_string(c.target_prime) + " is not a prime below 100");
  c.label_modulus = doc.value("label_modulus", binary_mod2 ? 2 : 0);
  c.feature_modulus = doc.value("feature_modulus", c.kind == "predict_apmod2_from_aqmod2" ? 2 : 0);

  const auto& d = doc.at("data");
  c.data.kind = d.at("source").get<std::string>();
  c.data.height_bound = d.value("height_bound", std::int64_t{300});
  c.data.seed = d.value("seed", c.seed);
  c.data.path = d.value("path", std::string());
  c.data.schema = d.value("schema", std::string("traces"));
  if (c.data.kind == "csv" && c.data.path.empty()) throw ConfigError("$.data.path: required for csv source");

  const auto p = doc.value("prepare", nlohmann::json::object());
  c.prepare.label_values = p.value("label_values", std::set<int>{});
  c.prepare.dedup = p.value("dedup", c.kind == "predict_apmod2_from_aqmod2");
  c.prepare.drop_indeterminate = p.value("drop_indeterminate", false);
  c.prepare.balance = p.value("balance", binary_mod2 || c.prepare.label_values.size() == 2);
  c.prepare.test_size = p.value("test_size", std::size_t{10000});
  for (const auto& b : p.value("buckets", nlohmann::json::array())) {
    if (b.size() != 2) throw ConfigError("$.prepare.buckets: each bucket is [lo, hi]");
    c.prepare.buckets.push_back({Integer(b[0].get<std::string>()), Integer(b[1].get<std::string>())});
  }
  c.prepare.exclude_primes = p.value("exclude_primes", std::set<int>{});
  c.prepare.normalize = p.value("normalize", c.kind == "ffn_normalized");
  c.prepare.conductor_column = p.value("conductor_column", false);
  c.prepare.root_number_column = p.value("root_number_column", false);
  if (c.prepare.normalize && c.feature_modulus != 0) throw ConfigError("$.prepare.normalize: requires feature_modulus 0");

  c.model = TransformerConfig{};
  if (doc.contains("model")) from_json(doc["model"], c.model);
  c.model.seed = c.seed;
  if (c.kind == "encoder_decoder_a2" && !(doc.contains("model") && doc["model"].contains("decoder_layers"))) {
    c.model.decoder_layers = 1;
  }
  if (c.kind == "encoder_decoder_a2" && c.model.decoder_layers != 1) throw ConfigError("$.model.decoder_layers: must be 1 for encoder_decoder_a2");

  c.ffn = FFNConfig{};
  if (doc.contains("ffn")) from_json(doc["ffn"], c.ffn);
  if (!(doc.contains("ffn") && doc["ffn"].contains("head"))) c.ffn.sigmoid_head = c.kind == "ffn_normalized";
  c.ffn.seed = c.seed;

  Schedule sched;
  sched.lr = c.label_modulus == 2 ? 5e-5 : 3e-5;
  if (c.uses_ffn()) {
    sched.lr = 1e-4;
    sched.optimizer = "adamw";
    sched.weight_decay = c.kind == "ffn_normalized" ? 0.01 : 0.1;
  }
  if (doc.contains("schedule")) {
    const auto& s = doc["schedule"];
    sched.epochs = s.value("epochs", sched.epochs);
    sched.epoch_size = s.value("epoch_size", sched.epoch_size);
    sched.batch_size = s.value("batch_size", sched.batch_size);
    sched.lr = s.value("lr", sched.lr);
    sched.optimizer = s.value("optimizer", sched.optimizer);
    sched.weight_decay = s.value("weight_decay", sched.weight_decay);
    sched.eval_batch = s.value("eval_batch", sched.eval_batch);
  }
  sched.seed = c.seed;
  c.schedule = sched;

  for (const auto& e : doc.value("exclusion_sets", nlohmann::json::array())) c.exclusion_sets.push_back(e.get<std::set<int>>());
  if (c.kind == "ablation_exclude_primes" && c.exclusion_sets.empty()) {
    throw ConfigError("$.exclusion_sets: required for ablation_exclude_primes");
  }
  for (const auto& set : c.exclusion_sets) {
    for (int q : set) {
      if (!prime_index(q) || q == c.target_prime) throw ConfigError("$.exclusion_sets: " + std::to_string(q) + " is not a feature prime");
    }
  }
  return c;
}

// ---------------------------------------------------------------------------
// Pipeline

inline std::vector<TraceRecord> load_raw(const DataSource& d) {
  if (d.kind == "synthesize") return synthesize(d.height_bound, d.seed);
  if (d.kind == "synthesize_long") return synthesize_long(d.height_bound, d.seed);
  return ingest_csv(d.path, d.schema == "weierstrass" ? CsvSchema::WeierstrassGiven : CsvSchema::TracesGiven);
}

/// Fixed order: filter good reduction at the target, select labels,
/// reduce, dedup, drop indeterminate, balance, exclude primes, normalize,
/// split.
inline PreparedDataset prepare(const ExperimentConfig& c, const std::vector<TraceRecord>& raw) {
  auto ds = make_prepared(raw, c.target_prime);
  const auto& p = c.prepare;
  if (!p.label_values.empty()) apply_step(ds, {"select_labels", {{"values", p.label_values}}});
  if (c.label_modulus && c.feature_modulus) {
    if (c.label_modulus != c.feature_modulus) {
      reduce_mod(ds, c.label_modulus, ReduceTarget::Labels);
      reduce_mod(ds, c.feature_modulus, ReduceTarget::Features);
    } else {
      reduce_mod(ds, c.label_modulus, ReduceTarget::Both);
    }
  } else if (c.label_modulus) {
    reduce_mod(ds, c.label_modulus, ReduceTarget::Labels);
  } else if (c.feature_modulus) {
    reduce_mod(ds, c.feature_modulus, ReduceTarget::Features);
  }
  if (p.dedup) dedup_mod_tuples(ds);
  if (p.drop_indeterminate) apply_step(ds, {"drop_indeterminate"});
  if (p.balance) balance(ds, c.seed);
  if (!p.exclude_primes.empty()) ds = exclude_primes(std::move(ds), p.exclude_primes);
  if (p.normalize || p.conductor_column || p.root_number_column) {
    ds = normalize_features(std::move(ds), p.normalize ? Normalization::InverseSqrtQ : Normalization::None,
                            p.conductor_column, p.root_number_column);
  }
  split(ds, SplitSpec{p.test_size, p.buckets, c.seed});
  return ds;
}

/// Ordered label values that become class indices 0, 1, ...
inline std::vector<int> label_classes(const ExperimentConfig& c) {
  if (!c.prepare.label_values.empty() && c.label_modulus == 0) {
    return {c.prepare.label_values.begin(), c.prepare.label_values.end()};
  }
  std::vector<int> out;
  if (c.label_modulus) {
    for (int r = 0; r < c.label_modulus; ++r) out.push_back(r);
  } else {
    const int b = hasse_bound(c.target_prime);
    for (int v = -b; v <= b; ++v) out.push_back(v);
  }
  return out;
}

inline int class_index(const std::vector<int>& classes, int value) {
  const auto it = std::lower_bound(classes.begin(), classes.end(), value);
  if (it == classes.end() || *it != value) {
    throw DatasetError(DatasetError::Kind::Validation, "label " + std::to_string(value) + " is outside the class list");
  }
  return static_cast<int>(it - classes.begin());
}

struct SequenceTask {
  std::vector<LabeledSeq> train, test;
  std::vector<std::string> test_ids;
  std::vector<int> classes;
};

inline SequenceTask sequence_task(const PreparedDataset& ds, std::vector<int> classes) {
  SequenceTask t;
  t.classes = std::move(classes);
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    const auto& r = ds.records[i];
    LabeledSeq e{encode_with_holes(ds.int_features(r)), class_index(t.classes, ds.label(r))};
    if (ds.is_test[i]) {
      t.test.push_back(std::move(e));
      t.test_ids.push_back(r.id);
    } else {
      t.train.push_back(std::move(e));
    }
  }
  return t;
}

struct FeatureTask {
  FeatureSpec spec;
  std::vector<std::vector<double>> x_train, x_test;
  std::vector<int> y_train, y_test;
  std::vector<int> classes;
};

inline FeatureTask feature_task(const ExperimentConfig& c, const PreparedDataset& ds) {
  FeatureTask t;
  t.classes = label_classes(c);
  t.spec.encoding = ds.normalization == Normalization::InverseSqrtQ ? FeatureEncoding::NormalizedReal : FeatureEncoding::OneHot;
  t.spec.primes = ds.feature_primes();
  t.spec.moduli.assign(t.spec.primes.size(), ds.feature_modulus);
  t.spec.raw_a2 = t.spec.encoding == FeatureEncoding::NormalizedReal;
  t.spec.conductor = ds.conductor_column;
  t.spec.root_number = ds.root_number_column;
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    const auto& r = ds.records[i];
    auto x = features(r, t.spec);
    const int y = class_index(t.classes, ds.label(r));
    if (ds.is_test[i]) {
      t.x_test.push_back(std::move(x));
      t.y_test.push_back(y);
    } else {
      t.x_train.push_back(std::move(x));
      t.y_train.push_back(y);
    }
  }
  if (t.spec.conductor) {
    // Standardize the conductor column with training statistics.
    const std::size_t col = t.spec.width() - 1 - (t.spec.root_number ? 1 : 0);
    const auto z = Standardizer::fit(t.x_train, {col});
    z.apply(t.x_train);
    z.apply(t.x_test);
  }
  return t;
}

/// {config_hash, seed, version} stamped into every artifact.
inline nlohmann::json stamp(const ExperimentConfig& c) {
  return {{"config_hash", c.hash()}, {"seed", c.seed}, {"version", kVersion}};
}

}  // namespace ectrace
