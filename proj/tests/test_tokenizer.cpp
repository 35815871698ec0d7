// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "ectrace/rng.hpp"
#include "ectrace/tokenizer.hpp"

using namespace ectrace;

TEST(Tokenizer, VocabularyLayout) {
  const Vocab v;
  EXPECT_EQ(v.size(), 25);
  EXPECT_EQ(v.token(0), "0");
  EXPECT_EQ(v.token(19), "19");
  EXPECT_EQ(v.id("+"), Vocab::kPlus);
  EXPECT_EQ(v.id("-"), Vocab::kMinus);
  EXPECT_EQ(v.id("<eos>"), Vocab::kEos);
  EXPECT_EQ(v.id("<bos>"), Vocab::kBos);
  EXPECT_EQ(v.id("<pad>"), Vocab::kPad);
  EXPECT_THROW(v.id("20"), TokenError);
  EXPECT_NO_THROW(Vocab::from_json(v.to_json()));
  EXPECT_THROW(Vocab::from_json(nlohmann::json::array({"0"})), TokenError);
}

TEST(Tokenizer, ReferenceString) {
  const std::vector<int> v{-1, 2, 5};
  EXPECT_EQ(to_string(encode_ints(v)), "- 1 + 2 + 5 <eos>");
}

TEST(Tokenizer, ZeroIsPositive) {
  const std::vector<int> v{0};
  EXPECT_EQ(to_string(encode_ints(v)), "+ 0 <eos>");
}

TEST(Tokenizer, RoundTripAllValues) {
  for (int x = -19; x <= 19; ++x) {
    const std::vector<int> v{x};
    EXPECT_EQ(decode_ints(encode_ints(v)), v);
  }
  Rng rng(9);
  for (int t = 0; t < 200; ++t) {
    std::vector<int> v(rng.below(30));
    for (auto& x : v) x = static_cast<int>(rng.below(39)) - 19;
    const auto seq = encode_ints(v);
    EXPECT_EQ(seq.length(), 2 * v.size() + 1);
    EXPECT_EQ(decode_ints(seq), v);
    EXPECT_EQ(parse_tokens(to_string(seq)), seq);
  }
}

TEST(Tokenizer, MagnitudeOverflow) {
  const std::vector<int> v{20};
  try {
    encode_ints(v);
    FAIL();
  } catch (const TokenError& e) {
    EXPECT_EQ(e.kind(), TokenError::Kind::MagnitudeOverflow);
  }
}

TEST(Tokenizer, MalformedSequences) {
  auto kind_of = [](const std::string& s) {
    try {
      decode_ints(parse_tokens(s));
    } catch (const TokenError& e) {
      return e.kind();
    }
    return TokenError::Kind::UnknownToken;
  };
  EXPECT_EQ(kind_of("+ 1"), TokenError::Kind::MalformedSequence);
  EXPECT_EQ(kind_of("1 + <eos>"), TokenError::Kind::MalformedSequence);
  EXPECT_EQ(kind_of("+ + <eos>"), TokenError::Kind::MalformedSequence);
  EXPECT_EQ(kind_of("+ 1 <eos> + 2"), TokenError::Kind::MalformedSequence);
}

TEST(Tokenizer, Holes) {
  const std::vector<std::optional<int>> v{std::nullopt, 3, -4};
  EXPECT_EQ(to_string(encode_with_holes(v)), "<pad> <pad> + 3 - 4 <eos>");
}

TEST(Tokenizer, ClassLabels) {
  EXPECT_EQ(class_count(2), 5);
  EXPECT_EQ(class_count(3), 7);
  EXPECT_EQ(class_count(97), 39);
  EXPECT_EQ(shift_label(-2, 2), 0);
  EXPECT_EQ(shift_label(2, 2), 4);
  EXPECT_EQ(shift_label(-19, 97), 0);
  EXPECT_EQ(shift_label(19, 97), 38);
  for (int a = -19; a <= 19; ++a) EXPECT_EQ(unshift_label(shift_label(a, 97), 97), a);
  EXPECT_THROW(shift_label(3, 2), TokenError);
  EXPECT_THROW(unshift_label(5, 2), TokenError);
}
