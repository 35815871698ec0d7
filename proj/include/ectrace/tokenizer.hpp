// SPDX-License-Identifier: Apache-2.0
//
// Sign + magnitude tokenization of small integer sequences: each integer
// becomes a sign token followed by a magnitude token, and the sequence ends
// with <eos>. Zero takes the "+" sign.

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "ectrace/curves.hpp"

namespace ectrace {

class TokenError : public std::runtime_error {
 public:
  enum class Kind { MagnitudeOverflow, MalformedSequence, OutOfRange, UnknownToken };

  TokenError(Kind kind, const std::string& what, std::size_t position = 0)
      : std::runtime_error(what), kind_(kind), position_(position) {}
  Kind kind() const noexcept { return kind_; }
  std::size_t position() const noexcept { return position_; }

 private:
  Kind kind_;
  std::size_t position_;
};

inline constexpr int kMaxMagnitude = 19;

class Vocab {
 public:
  static constexpr int kPlus = kMaxMagnitude + 1;
  static constexpr int kMinus = kMaxMagnitude + 2;
  static constexpr int kEos = kMaxMagnitude + 3;
  static constexpr int kBos = kMaxMagnitude + 4;
  static constexpr int kPad = kMaxMagnitude + 5;

  Vocab() {
    for (int n = 0; n <= kMaxMagnitude; ++n) tokens_.push_back(std::to_string(n));
    tokens_.insert(tokens_.end(), {"+", "-", "<eos>", "<bos>", "<pad>"});
    for (std::size_t i = 0; i < tokens_.size(); ++i) index_[tokens_[i]] = static_cast<int>(i);
  }

  int size() const noexcept { return static_cast<int>(tokens_.size()); }
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

  int id(const std::string& tok) const {
    const auto it = index_.find(tok);
    if (it == index_.end()) throw TokenError(TokenError::Kind::UnknownToken, "unknown token '" + tok + "'");
    return it->second;
  }

  static bool is_magnitude(int id) noexcept { return id >= 0 && id <= kMaxMagnitude; }

  nlohmann::json to_json() const { return tokens_; }

  static Vocab from_json(const nlohmann::json& j) {
    Vocab v;
    if (j.get<std::vector<std::string>>() != v.tokens_) {
      throw TokenError(TokenError::Kind::UnknownToken, "vocabulary does not match this build's token list");
    }
    return v;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

struct TokenSeq {
  std::vector<int> ids;

  std::size_t length() const noexcept { return ids.size(); }
  bool operator==(const TokenSeq&) const = default;
};

inline std::string to_string(const TokenSeq& seq, const Vocab& vocab = Vocab{}) {
  std::string out;
  for (std::size_t i = 0; i < seq.ids.size(); ++i) {
    if (i) out += ' ';
    out += vocab.token(seq.ids[i]);
  }
  return out;
}

inline TokenSeq parse_tokens(const std::string& text, const Vocab& vocab = Vocab{}) {
  TokenSeq seq;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const auto b = text.find_first_not_of(' ', pos);
    if (b == std::string::npos) break;
    const auto e = text.find(' ', b);
    seq.ids.push_back(vocab.id(text.substr(b, e == std::string::npos ? std::string::npos : e - b)));
    pos = e == std::string::npos ? text.size() : e;
  }
  return seq;
}

namespace detail {

inline void push_int(std::vector<int>& ids, int v) {
  const int mag = v < 0 ? -v : v;
  if (mag > kMaxMagnitude) {
    throw TokenError(TokenError::Kind::MagnitudeOverflow, "value " + std::to_string(v) + " exceeds magnitude 19");
  }
  ids.push_back(v < 0 ? Vocab::kMinus : Vocab::kPlus);
  ids.push_back(mag);
}

}  // namespace detail

inline TokenSeq encode_ints(std::span<const int> values) {
  TokenSeq seq;
  seq.ids.reserve(values.size() * 2 + 1);
  for (int v : values) detail::push_int(seq.ids, v);
  seq.ids.push_back(Vocab::kEos);
  return seq;
}

/// Like encode_ints, but a missing value (bad reduction) becomes a pair of
/// <pad> tokens, which attention masks out.
inline TokenSeq encode_with_holes(std::span<const std::optional<int>> values) {
  TokenSeq seq;
  seq.ids.reserve(values.size() * 2 + 1);
  for (const auto& v : values) {
    if (v) {
      detail::push_int(seq.ids, *v);
    } else {
      seq.ids.push_back(Vocab::kPad);
      seq.ids.push_back(Vocab::kPad);
    }
  }
  seq.ids.push_back(Vocab::kEos);
  return seq;
}

inline std::vector<int> decode_ints(const TokenSeq& seq) {
  std::vector<int> out;
  const auto& ids = seq.ids;
  std::size_t i = 0;
  for (; i < ids.size(); i += 2) {
    if (ids[i] == Vocab::kEos) break;
    if (ids[i] != Vocab::kPlus && ids[i] != Vocab::kMinus) {
      throw TokenError(TokenError::Kind::MalformedSequence, "expected sign token at position " + std::to_string(i), i);
    }
    if (i + 1 >= ids.size() || !Vocab::is_magnitude(ids[i + 1])) {
      throw TokenError(TokenError::Kind::MalformedSequence,
                       "expected magnitude token at position " + std::to_string(i + 1), i + 1);
    }
    out.push_back(ids[i] == Vocab::kMinus ? -ids[i + 1] : ids[i + 1]);
  }
  if (i >= ids.size()) {
    throw TokenError(TokenError::Kind::MalformedSequence, "missing <eos> at position " + std::to_string(ids.size()),
                     ids.size());
  }
  if (i + 1 != ids.size()) {
    throw TokenError(TokenError::Kind::MalformedSequence, "tokens after <eos> at position " + std::to_string(i + 1), i + 1);
  }
  return out;
}

/// Number of classes for exact a_p: 2 * floor(2 sqrt p) + 1.
inline int class_count(int p) { return 2 * hasse_bound(p) + 1; }

inline int shift_label(int a_p, int p) {
  const int b = hasse_bound(p);
  if (a_p < -b || a_p > b) {
    throw TokenError(TokenError::Kind::OutOfRange,
                     "a_" + std::to_string(p) + " = " + std::to_string(a_p) + " outside [-" + std::to_string(b) + ", " +
                         std::to_string(b) + "]");
  }
  return a_p + b;
}

inline int unshift_label(int cls, int p) {
  const int b = hasse_bound(p);
  if (cls < 0 || cls > 2 * b) {
    throw TokenError(TokenError::Kind::OutOfRange, "class " + std::to_string(cls) + " outside [0, " +
                                                       std::to_string(2 * b) + "] for p=" + std::to_string(p));
  }
  return cls - b;
}

}  // namespace ectrace
