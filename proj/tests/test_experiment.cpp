// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <fstream>

#include "ectrace/experiment.hpp"

using namespace ectrace;
using nlohmann::json;

#ifndef ECTRACE_SOURCE_DIR
#define ECTRACE_SOURCE_DIR "."
#endif

namespace {

json small_doc(const std::string& kind) {
  return {{"kind", kind},
          {"seed", 3},
          {"data", {{"source", "synthesize"}, {"height_bound", 40}}},
          {"prepare", {{"test_size", 100}}}};
}

}  // namespace

TEST(Experiment, Fnv1aKnownValues) {
  // Offset basis for the empty string; "a" from the reference tables.
  EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cULL);
  EXPECT_EQ(config_hash(json::object()).size(), 16u);
}

TEST(Experiment, HashIgnoresKeyOrderAndTracksSeed) {
  const auto a = json::parse(R"({"kind":"predict_ap","data":{"source":"synthesize"},"seed":1})");
  const auto b = json::parse(R"({"seed":1,"data":{"source":"synthesize"},"kind":"predict_ap"})");
  EXPECT_EQ(parse_config(a).hash(), parse_config(b).hash());
  EXPECT_NE(parse_config(a).hash(), parse_config(a, 2).hash());
  EXPECT_EQ(parse_config(a, 2).seed, 2u);
}

TEST(Experiment, SchemaRejects) {
  auto expect_reject = [](json doc, const std::string& fragment) {
    try {
      parse_config(doc);
      ADD_FAILURE() << "accepted " << doc.dump();
    } catch (const ConfigError& e) {
      EXPECT_NE(std::string(e.what()).find(fragment), std::string::npos) << e.what();
    }
  };
  expect_reject({{"data", {{"source", "synthesize"}}}}, "kind");
  expect_reject({{"kind", "nope"}, {"data", {{"source", "synthesize"}}}}, "$.kind");
  auto d = small_doc("predict_ap");
  d["extra"] = 1;
  expect_reject(d, "unknown field 'extra'");
  d = small_doc("predict_ap");
  d["model"] = {{"dropout", 1.0}};
  expect_reject(d, "$.model.dropout");
  d = small_doc("predict_ap");
  d["schedule"] = {{"lr", 0}};
  expect_reject(d, "$.schedule.lr");
  d = small_doc("predict_ap");
  d["target_prime"] = 91;
  expect_reject(d, "$.target_prime");
  d = small_doc("ablation_exclude_primes");
  expect_reject(d, "$.exclusion_sets");
  d["exclusion_sets"] = {{2, 97}};
  expect_reject(d, "97");
  d = small_doc("ffn_normalized");
  d["feature_modulus"] = 2;
  expect_reject(d, "normalize");
  d = small_doc("predict_ap");
  d["data"] = {{"source", "csv"}};
  expect_reject(d, "$.data.path");
}

TEST(Experiment, KindDefaults) {
  const auto mod2 = parse_config(small_doc("predict_apmod2_from_aqmod2"));
  EXPECT_EQ(mod2.label_modulus, 2);
  EXPECT_EQ(mod2.feature_modulus, 2);
  EXPECT_TRUE(mod2.prepare.dedup);
  EXPECT_TRUE(mod2.prepare.balance);
  EXPECT_DOUBLE_EQ(mod2.schedule.lr, 5e-5);

  const auto ap = parse_config(small_doc("predict_ap"));
  EXPECT_EQ(ap.target_prime, 97);
  EXPECT_FALSE(ap.prepare.balance);
  EXPECT_DOUBLE_EQ(ap.schedule.lr, 3e-5);

  const auto ed = parse_config(small_doc("encoder_decoder_a2"));
  EXPECT_EQ(ed.target_prime, 2);
  EXPECT_EQ(ed.model.decoder_layers, 1);

  const auto f = parse_config(small_doc("ffn_normalized"));
  EXPECT_TRUE(f.uses_ffn());
  EXPECT_TRUE(f.prepare.normalize);
  EXPECT_TRUE(f.ffn.sigmoid_head);
  EXPECT_EQ(f.schedule.optimizer, "adamw");
  EXPECT_DOUBLE_EQ(f.schedule.weight_decay, 0.01);
  EXPECT_EQ(f.ffn.seed, 3u);
  EXPECT_EQ(f.schedule.seed, 3u);
}

TEST(Experiment, LabelClasses) {
  auto d = small_doc("predict_ap");
  EXPECT_EQ(label_classes(parse_config(d)).size(), 39u);
  d["target_prime"] = 2;
  EXPECT_EQ(label_classes(parse_config(d)), (std::vector<int>{-2, -1, 0, 1, 2}));
  d["prepare"]["label_values"] = {1, -1};
  EXPECT_EQ(label_classes(parse_config(d)), (std::vector<int>{-1, 1}));
  EXPECT_EQ(label_classes(parse_config(small_doc("predict_ap_mod2_from_aq"))), (std::vector<int>{0, 1}));
  EXPECT_THROW(class_index({0, 1}, 2), DatasetError);
}

TEST(Experiment, SequencePipelineOnSmallData) {
  const auto c = parse_config(small_doc("predict_apmod2_from_aqmod2"));
  const auto ds = prepare(c, load_raw(c.data));
  const auto t = sequence_task(ds, label_classes(c));
  EXPECT_EQ(t.test.size(), 100u);
  EXPECT_EQ(t.test_ids.size(), t.test.size());
  std::size_t ones = 0;
  for (const auto& e : t.train) ones += e.label;
  for (const auto& e : t.test) ones += e.label;
  const std::size_t total = t.train.size() + t.test.size();
  EXPECT_LE(std::max(ones, total - ones) - std::min(ones, total - ones), 1u);
  // 24 values of two tokens each, then eos.
  EXPECT_EQ(t.train.front().seq.ids.size(), 2u * 24u + 1u);
  // Rerun reproduces the split.
  const auto again = sequence_task(prepare(c, load_raw(c.data)), label_classes(c));
  EXPECT_EQ(again.test_ids, t.test_ids);
}

TEST(Experiment, FeaturePipelineNormalized) {
  auto d = small_doc("ffn_normalized");
  d["data"]["source"] = "synthesize_long";
  d["data"]["height_bound"] = 3;
  d["target_prime"] = 2;
  d["prepare"] = {{"label_values", {-1, 1}}, {"conductor_column", true}, {"test_size", 50}};
  const auto c = parse_config(d);
  const auto t = feature_task(c, prepare(c, load_raw(c.data)));
  EXPECT_EQ(t.classes, (std::vector<int>{-1, 1}));
  EXPECT_EQ(t.spec.encoding, FeatureEncoding::NormalizedReal);
  EXPECT_EQ(t.x_test.size(), 50u);
  ASSERT_FALSE(t.x_train.empty());
  EXPECT_EQ(t.x_train.front().size(), t.spec.width());
  // Standardized conductor column: training mean 0.
  const std::size_t col = t.spec.width() - 1;
  double mean = 0;
  for (const auto& r : t.x_train) mean += r[col];
  EXPECT_NEAR(mean / static_cast<double>(t.x_train.size()), 0.0, 1e-9);
}

TEST(Experiment, StampFields) {
  const auto c = parse_config(small_doc("predict_ap"));
  const auto s = stamp(c);
  EXPECT_EQ(s["config_hash"], c.hash());
  EXPECT_EQ(s["seed"], 3);
  EXPECT_EQ(s["version"], kVersion);
}

TEST(Experiment, PublishedSchemaIsCurrent) {
  std::ifstream in(std::string(ECTRACE_SOURCE_DIR) + "/schema/experiment.schema.json");
  ASSERT_TRUE(in) << "schema/experiment.schema.json missing";
  EXPECT_EQ(json::parse(in), experiment_schema());
}

TEST(Experiment, ExampleConfigsValidate) {
  for (const char* name : {"predict_ap", "predict_ap_mod2_from_aq", "predict_apmod2_from_aqmod2", "ffn", "ffn_normalized",
                           "encoder_decoder_a2", "ablation_exclude_primes"}) {
    std::ifstream in(std::string(ECTRACE_SOURCE_DIR) + "/configs/" + name + ".json");
    ASSERT_TRUE(in) << name;
    const auto c = parse_config(json::parse(in));
    EXPECT_EQ(c.kind, name);
  }
}
