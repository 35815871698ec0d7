// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "ectrace/checkpoint.hpp"
#include "ectrace/transformer.hpp"

using namespace ectrace;

namespace {

TransformerConfig tiny() {
  TransformerConfig c;
  c.d_model = 8;
  c.heads = 2;
  c.encoder_layers = 1;
  c.decoder_layers = 1;
  c.max_positions = 8;
  c.seed = 4;
  return c;
}

}  // namespace

TEST(Checkpoint, ByteLayout) {
  ad::Tensor<float> t({2}, std::vector<float>{1.0f, -2.0f});
  const std::vector<std::pair<std::string, ad::Tensor<float>>> named{{"w", t}};
  const auto bytes = encode_checkpoint(named, {{"k", 1}});
  std::string expect("ECTRCKPT", 8);
  expect += std::string("\x01\x00\x00\x00", 4);            // version
  expect += std::string("\x01\x00\x00\x00", 4);            // count
  expect += std::string("\x01\x00\x00\x00", 4) + "w";      // name
  expect += '\x01';                                        // f32
  expect += std::string("\x01\x00\x00\x00", 4);            // rank
  expect += std::string("\x02\x00\x00\x00\x00\x00\x00\x00", 8);
  expect += std::string("\x00\x00\x80\x3f", 4);            // 1.0f
  expect += std::string("\x00\x00\x00\xc0", 4);            // -2.0f
  expect += std::string("\x07\x00\x00\x00\x00\x00\x00\x00", 8) + "{\"k\":1}";
  EXPECT_EQ(bytes, expect);
}

TEST(Checkpoint, ModelRoundTrip) {
  TransformerModel<float> a(tiny());
  auto c2 = tiny();
  c2.seed = 99;
  TransformerModel<float> b(c2);
  const auto dir = std::filesystem::temp_directory_path() / "ectrace_ckpt_test";
  std::filesystem::create_directories(dir);
  const auto path = dir / "m.ckpt";
  write_checkpoint(path, a.named_parameters(), {{"config", tiny()}});
  EXPECT_FALSE(std::filesystem::exists(dir / "m.ckpt.tmp"));
  const auto ck = read_checkpoint(path);
  EXPECT_EQ(ck.metadata["config"]["d_model"], 8);
  auto named = b.named_parameters();
  load_into(ck, named);
  const auto seq = encode_ints(std::vector<int>{1, -2});
  EXPECT_EQ(predict(a, seq).second, predict(b, seq).second);
  EXPECT_EQ(snapshot_state(a), snapshot_state(b));
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, DoublePrecisionPreserved) {
  ad::Tensor<double> t({3}, std::vector<double>{0.1, 1e-300, -7.25});
  const std::vector<std::pair<std::string, ad::Tensor<double>>> named{{"x", t}};
  std::stringstream ss(encode_checkpoint(named, nlohmann::json::object()));
  const auto ck = decode_checkpoint(ss);
  EXPECT_TRUE(ck.at("x").is_double);
  EXPECT_EQ(ck.at("x").values, (std::vector<double>{0.1, 1e-300, -7.25}));
}

TEST(Checkpoint, Errors) {
  std::stringstream junk("NOTACKPT");
  EXPECT_THROW(decode_checkpoint(junk), CheckpointError);

  TransformerModel<float> a(tiny());
  const auto bytes = encode_checkpoint(a.named_parameters(), {});
  std::stringstream cut(bytes.substr(0, bytes.size() / 2));
  EXPECT_THROW(decode_checkpoint(cut), CheckpointError);

  std::stringstream ok(bytes);
  const auto ck = decode_checkpoint(ok);
  EXPECT_THROW(ck.at("missing"), CheckpointError);
  auto other = tiny();
  other.d_model = 16;
  TransformerModel<float> b(other);
  auto named = b.named_parameters();
  EXPECT_THROW(load_into(ck, named), CheckpointError);
}
