// SPDX-License-Identifier: Apache-2.0
//
// Elliptic curves over Q in Weierstrass form, reduced modulo small primes:
// discriminants, naive point counting, Frobenius traces, and enumeration of
// short-form curves inside a coefficient box.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <boost/multiprecision/cpp_int.hpp>

#include "ectrace/rng.hpp"

namespace ectrace {

using Integer = boost::multiprecision::cpp_int;

/// The 25 primes below 100, the default trace index.
inline constexpr std::array<int, 25> kPrimesBelow100 = {
    2,  3,  5,  7,  11, 13, 17, 19, 23, 29, 31, 37, 41,
    43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97};

/// Upper bound on primes accepted by the naive point counter.
inline constexpr std::uint64_t kMaxCountingPrime = std::uint64_t{1} << 20;

class CurveError : public std::runtime_error {
 public:
  enum class Kind { Singular, NonPrime, BadReduction, PrimeTooLarge, UnsortedPrimes };

  CurveError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

/// Deterministic trial division.
constexpr bool is_prime(std::uint64_t n) noexcept {
  if (n < 2) return false;
  if (n < 4) return true;
  if (n % 2 == 0) return false;
  for (std::uint64_t d = 3; d * d <= n; d += 2) {
    if (n % d == 0) return false;
  }
  return true;
}

/// Index of p in kPrimesBelow100, or nullopt.
constexpr std::optional<std::size_t> prime_index(int p) noexcept {
  for (std::size_t i = 0; i < kPrimesBelow100.size(); ++i) {
    if (kPrimesBelow100[i] == p) return i;
  }
  return std::nullopt;
}

/// floor(2 * sqrt(p)), computed exactly in integers.
constexpr int hasse_bound(std::int64_t p) noexcept {
  // largest b with b*b <= 4p
  std::int64_t b = 0;
  while ((b + 1) * (b + 1) <= 4 * p) ++b;
  return static_cast<int>(b);
}

/// Standard Weierstrass invariants b2, b4, b6, b8.
struct BInvariants {
  Integer b2, b4, b6, b8;
};

/// Integral Weierstrass model y^2 + a1 xy + a3 y = x^3 + a2 x^2 + a4 x + a6.
/// Construction rejects singular models.
class Curve {
 public:
  static Curve long_form(Integer a1, Integer a2, Integer a3, Integer a4, Integer a6) {
    return Curve({std::move(a1), std::move(a2), std::move(a3), std::move(a4), std::move(a6)});
  }

  /// y^2 = x^3 + A x + B
  static Curve short_form(Integer A, Integer B) { return Curve({0, 0, 0, std::move(A), std::move(B)}); }

  const Integer& a1() const noexcept { return a_[0]; }
  const Integer& a2() const noexcept { return a_[1]; }
  const Integer& a3() const noexcept { return a_[2]; }
  const Integer& a4() const noexcept { return a_[3]; }
  const Integer& a6() const noexcept { return a_[4]; }
  const std::array<Integer, 5>& coefficients() const noexcept { return a_; }
  const Integer& discriminant() const noexcept { return disc_; }

  bool is_short() const noexcept { return a_[0] == 0 && a_[1] == 0 && a_[2] == 0; }

  bool operator==(const Curve& o) const { return a_ == o.a_; }

 private:
  explicit Curve(std::array<Integer, 5> a);

  std::array<Integer, 5> a_;
  Integer disc_;
};

inline BInvariants b_invariants(const std::array<Integer, 5>& a) {
  const auto& [a1, a2, a3, a4, a6] = a;
  BInvariants b;
  b.b2 = a1 * a1 + 4 * a2;
  b.b4 = 2 * a4 + a1 * a3;
  b.b6 = a3 * a3 + 4 * a6;
  b.b8 = a1 * a1 * a6 + 4 * a2 * a6 - a1 * a3 * a4 + a2 * a3 * a3 - a4 * a4;
  return b;
}

inline Integer discriminant_of(const std::array<Integer, 5>& a) {
  const BInvariants b = b_invariants(a);
  return -b.b2 * b.b2 * b.b8 - 8 * b.b4 * b.b4 * b.b4 - 27 * b.b6 * b.b6 + 9 * b.b2 * b.b4 * b.b6;
}

inline Curve::Curve(std::array<Integer, 5> a) : a_(std::move(a)), disc_(discriminant_of(a_)) {
  if (disc_ == 0) throw CurveError(CurveError::Kind::Singular, "singular Weierstrass model (discriminant 0)");
}

inline Integer discriminant(const Curve& curve) { return curve.discriminant(); }

/// Nonnegative residue of an arbitrary integer.
inline std::int64_t mod_small(const Integer& v, std::int64_t p) {
  Integer r = v % p;
  if (r < 0) r += p;
  return static_cast<std::int64_t>(r);
}

namespace detail {

inline void check_prime(std::uint64_t p) {
  if (!is_prime(p)) throw CurveError(CurveError::Kind::NonPrime, std::to_string(p) + " is not prime");
  if (p >= kMaxCountingPrime) {
    throw CurveError(CurveError::Kind::PrimeTooLarge, std::to_string(p) + " exceeds the naive counting bound");
  }
}

inline std::int64_t mulmod(std::int64_t a, std::int64_t b, std::int64_t p) { return (a * b) % p; }

// Direct enumeration of (x, y) in F_p^2 on the long form; used for p = 2, 3.
inline std::uint64_t count_direct(const std::array<std::int64_t, 5>& a, std::int64_t p) {
  const auto [a1, a2, a3, a4, a6] = a;
  std::uint64_t n = 1;  // point at infinity
  for (std::int64_t x = 0; x < p; ++x) {
    const std::int64_t rhs = (((x * x % p) * x) + a2 * (x * x % p) + a4 * x + a6) % p;
    for (std::int64_t y = 0; y < p; ++y) {
      const std::int64_t lhs = (y * y + a1 * x % p * y + a3 * y) % p;
      if (lhs == rhs) ++n;
    }
  }
  return n;
}

// Completed-square count for odd p: (2y + a1 x + a3)^2 = 4x^3 + b2 x^2 + 2 b4 x + b6.
inline std::uint64_t count_completed_square(const std::array<std::int64_t, 4>& b, std::int64_t p) {
  const auto [b2, b4, b6, unused] = b;
  (void)unused;
  // roots[r] = number of z with z^2 = r
  std::vector<std::uint8_t> roots(static_cast<std::size_t>(p), 0);
  for (std::int64_t z = 0; z < p; ++z) ++roots[static_cast<std::size_t>(z * z % p)];
  std::uint64_t n = 1;
  for (std::int64_t x = 0; x < p; ++x) {
    const std::int64_t x2 = x * x % p;
    const std::int64_t f = (4 * x2 % p * x + b2 * x2 + 2 * b4 * x + b6) % p;
    n += roots[static_cast<std::size_t>(f)];
  }
  return n;
}

}  // namespace detail

inline bool has_good_reduction(const Curve& curve, std::uint64_t p) {
  return mod_small(curve.discriminant(), static_cast<std::int64_t>(p)) != 0;
}

/// |E(F_p)| including the point at infinity.
inline std::uint64_t count_points(const Curve& curve, std::uint64_t p) {
  detail::check_prime(p);
  const auto ip = static_cast<std::int64_t>(p);
  if (!has_good_reduction(curve, p)) {
    throw CurveError(CurveError::Kind::BadReduction, "bad reduction at " + std::to_string(p));
  }
  if (p <= 3) {
    std::array<std::int64_t, 5> a{};
    for (std::size_t i = 0; i < 5; ++i) a[i] = mod_small(curve.coefficients()[i], ip);
    return detail::count_direct(a, ip);
  }
  const BInvariants b = b_invariants(curve.coefficients());
  return detail::count_completed_square({mod_small(b.b2, ip), mod_small(b.b4, ip), mod_small(b.b6, ip), 0}, ip);
}

enum class Reduction { Good, Bad };

struct TraceResult {
  int prime = 0;
  std::optional<int> value;  // present iff reduction == Good
  Reduction reduction = Reduction::Bad;

  bool good() const noexcept { return reduction == Reduction::Good; }
  bool operator==(const TraceResult&) const = default;
};

/// a_p = p + 1 - |E(F_p)| at good primes; a Bad flag otherwise.
inline TraceResult frobenius_trace(const Curve& curve, std::uint64_t p) {
  detail::check_prime(p);
  TraceResult r;
  r.prime = static_cast<int>(p);
  if (!has_good_reduction(curve, p)) return r;
  r.reduction = Reduction::Good;
  r.value = static_cast<int>(static_cast<std::int64_t>(p) + 1 - static_cast<std::int64_t>(count_points(curve, p)));
  return r;
}

inline std::vector<TraceResult> trace_vector(const Curve& curve, std::span<const int> primes) {
  for (std::size_t i = 1; i < primes.size(); ++i) {
    if (primes[i] <= primes[i - 1]) throw CurveError(CurveError::Kind::UnsortedPrimes, "primes must be strictly increasing");
  }
  std::vector<TraceResult> out;
  out.reserve(primes.size());
  for (int p : primes) {
    if (p < 0) throw CurveError(CurveError::Kind::NonPrime, std::to_string(p) + " is not prime");
    out.push_back(frobenius_trace(curve, static_cast<std::uint64_t>(p)));
  }
  return out;
}

/// Divide out u^4 | A, u^6 | B for every prime u until no such u remains.
inline std::pair<Integer, Integer> minimize_short(Integer A, Integer B) {
  if (A == 0 && B == 0) return {A, B};
  auto fits = [&](const Integer& u) {
    const Integer u2 = u * u;
    if (A != 0 && u2 * u2 > abs(A)) return false;
    if (B != 0 && u2 * u2 * u2 > abs(B)) return false;
    return true;
  };
  for (Integer u = 2; fits(u); u += (u == 2 ? 1 : 2)) {
    const Integer u4 = u * u * u * u;
    const Integer u6 = u4 * u * u;
    while ((A % u4) == 0 && (B % u6) == 0) {
      A /= u4;
      B /= u6;
      if (A == 0 && B == 0) break;
    }
  }
  return {A, B};
}

/// Calls fn(A, B) for every minimal nonsingular pair with |A|, |B| <= height_bound.
/// Order is a seeded permutation of the lexicographic order.
inline void for_each_short_curve(std::int64_t height_bound, std::uint64_t seed,
                                 const std::function<void(std::int64_t, std::int64_t)>& fn) {
  if (height_bound < 1) throw std::invalid_argument("height_bound must be >= 1");
  std::vector<std::pair<std::int64_t, std::int64_t>> pairs;
  for (std::int64_t A = -height_bound; A <= height_bound; ++A) {
    for (std::int64_t B = -height_bound; B <= height_bound; ++B) {
      // 4A^3 + 27B^2 fits easily for the bounds used here; fall back to Integer otherwise.
      const Integer d = 4 * Integer(A) * A * A + 27 * Integer(B) * B;
      if (d == 0) continue;
      const auto [mA, mB] = minimize_short(A, B);
      if (mA != A || mB != B) continue;
      pairs.emplace_back(A, B);
    }
  }
  Rng rng(seed);
  rng.shuffle(pairs);
  for (const auto& [A, B] : pairs) fn(A, B);
}

inline std::vector<Curve> enumerate_curves(std::int64_t height_bound, std::uint64_t seed) {
  std::vector<Curve> out;
  for_each_short_curve(height_bound, seed, [&](std::int64_t A, std::int64_t B) { out.push_back(Curve::short_form(A, B)); });
  return out;
}

}  // namespace ectrace
