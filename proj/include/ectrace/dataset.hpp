// SPDX-License-Identifier: Apache-2.0
//
// Trace datasets: ingestion, synthesis, and the transform pipeline that turns
// raw trace records into a prepared learning task.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "ectrace/curves.hpp"
#include "ectrace/rng.hpp"

namespace ectrace {

inline constexpr std::size_t kNumPrimes = kPrimesBelow100.size();

class DatasetError : public std::runtime_error {
 public:
  enum class Kind { Parse, Validation, DegenerateClass, UnknownPrime, InsufficientData, Io };

  DatasetError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

/// One isogeny-class proxy: traces at the 25 primes below 100.
struct TraceRecord {
  std::string id;
  std::optional<std::int64_t> conductor;
  std::optional<Integer> disc_proxy;  // |minimal discriminant| for synthesized curves
  std::optional<int> root_number;     // ingested only
  std::array<int, kNumPrimes> traces{};
  std::array<bool, kNumPrimes> bad_mask{};

  bool good_at(std::size_t i) const { return !bad_mask[i]; }

  /// Size used for "smallest representative" and bucketing: conductor when
  /// known, the discriminant proxy otherwise.
  Integer size_key() const {
    if (conductor) return Integer(*conductor);
    if (disc_proxy) return *disc_proxy;
    return Integer(0);
  }

  bool operator==(const TraceRecord&) const = default;
};

inline std::size_t index_of_prime(int p) {
  const auto idx = prime_index(p);
  if (!idx) throw DatasetError(DatasetError::Kind::UnknownPrime, std::to_string(p) + " is not a prime below 100");
  return *idx;
}

// ---------------------------------------------------------------------------
// Ingestion

enum class CsvSchema { TracesGiven, WeierstrassGiven };

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

inline Integer parse_integer(const std::string& s, std::size_t row, const std::string& column) {
  const std::string t = trim(s);
  bool ok = !t.empty();
  for (std::size_t i = 0; i < t.size() && ok; ++i) {
    ok = std::isdigit(static_cast<unsigned char>(t[i])) || (i == 0 && (t[i] == '-' || t[i] == '+'));
  }
  if (!ok || t == "-" || t == "+") {
    throw DatasetError(DatasetError::Kind::Parse,
                       "row " + std::to_string(row) + ": column " + column + ": not an integer: '" + s + "'");
  }
  return Integer(t[0] == '+' ? t.substr(1) : t);
}

inline std::vector<std::string> traces_header() {
  std::vector<std::string> h{"id", "conductor"};
  for (int p : kPrimesBelow100) h.push_back("a" + std::to_string(p));
  return h;
}

inline std::vector<int> prime_factors(std::int64_t n) {
  std::vector<int> out;
  for (std::int64_t d = 2; d * d <= n; ++d) {
    if (n % d == 0) {
      out.push_back(static_cast<int>(d));
      while (n % d == 0) n /= d;
    }
  }
  if (n > 1 && n < 100) out.push_back(static_cast<int>(n));
  return out;
}

}  // namespace detail

inline void validate_record(const TraceRecord& r, std::size_t row) {
  const std::string where = "row " + std::to_string(row) + " (" + r.id + "): ";
  for (std::size_t i = 0; i < kNumPrimes; ++i) {
    if (r.bad_mask[i]) continue;
    const int p = kPrimesBelow100[i];
    if (std::abs(r.traces[i]) > hasse_bound(p)) {
      throw DatasetError(DatasetError::Kind::Validation, where + "Hasse bound violated at p=" + std::to_string(p) +
                                                             " (a_p=" + std::to_string(r.traces[i]) + ")");
    }
  }
  if (r.conductor) {
    if (*r.conductor <= 0) throw DatasetError(DatasetError::Kind::Validation, where + "conductor must be positive");
    for (std::size_t i = 0; i < kNumPrimes; ++i) {
      const bool divides = *r.conductor % kPrimesBelow100[i] == 0;
      if (divides != r.bad_mask[i]) {
        throw DatasetError(DatasetError::Kind::Validation,
                           where + "bad-reduction mask disagrees with conductor at p=" +
                               std::to_string(kPrimesBelow100[i]));
      }
    }
  }
  if (!r.conductor && !r.disc_proxy) {
    throw DatasetError(DatasetError::Kind::Validation, where + "neither conductor nor discriminant proxy present");
  }
}

/// Builds a record from a curve model: traces at all 25 primes, bad mask from
/// p | discriminant, disc_proxy = |discriminant|.
inline TraceRecord record_from_curve(const Curve& curve, std::string id, std::optional<std::int64_t> conductor = {}) {
  TraceRecord r;
  r.id = std::move(id);
  r.conductor = conductor;
  r.disc_proxy = abs(curve.discriminant());
  const auto tv = trace_vector(curve, kPrimesBelow100);
  for (std::size_t i = 0; i < kNumPrimes; ++i) {
    r.bad_mask[i] = !tv[i].good();
    r.traces[i] = tv[i].good() ? *tv[i].value : 0;
  }
  return r;
}

inline std::vector<TraceRecord> ingest_csv_stream(std::istream& in, CsvSchema schema) {
  std::string line;
  bool got = false;
  while ((got = static_cast<bool>(std::getline(in, line))) && line.starts_with('#')) {
  }
  if (!got) throw DatasetError(DatasetError::Kind::Parse, "row 0: missing header");
  std::vector<std::string> header = detail::split_csv_line(line);
  for (auto& h : header) h = detail::trim(h);

  // Optional trailing columns of the traces schema, in any order.
  std::optional<std::size_t> root_col, proxy_col;
  if (schema == CsvSchema::TracesGiven) {
    const auto expected = detail::traces_header();
    for (std::size_t i = expected.size(); i < header.size(); ++i) {
      if (header[i] == "root_number" && !root_col) {
        root_col = i;
      } else if (header[i] == "disc_proxy" && !proxy_col) {
        proxy_col = i;
      } else {
        throw DatasetError(DatasetError::Kind::Parse, "row 0: unexpected column '" + header[i] + "'");
      }
    }
    if (header.size() < expected.size() || !std::equal(expected.begin(), expected.end(), header.begin())) {
      throw DatasetError(DatasetError::Kind::Parse, "row 0: header does not match id,conductor,a2,...,a97");
    }
  } else {
    const std::vector<std::string> expected{"id", "conductor", "a1", "a2", "a3", "a4", "a6"};
    if (header != expected) throw DatasetError(DatasetError::Kind::Parse, "row 0: header does not match id,conductor,a1,a2,a3,a4,a6");
  }
  const std::size_t width = header.size();

  std::vector<TraceRecord> out;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (detail::trim(line).empty() || detail::trim(line) == "\r" || line.starts_with('#')) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != width) {
      throw DatasetError(DatasetError::Kind::Parse, "row " + std::to_string(row) + ": expected " +
                                                         std::to_string(width) + " fields, got " +
                                                         std::to_string(cells.size()));
    }
    const std::string id = detail::trim(cells[0]);
    if (id.empty()) throw DatasetError(DatasetError::Kind::Parse, "row " + std::to_string(row) + ": empty id");
    std::optional<std::int64_t> conductor;
    if (!detail::trim(cells[1]).empty()) {
      conductor = static_cast<std::int64_t>(detail::parse_integer(cells[1], row, "conductor"));
    }

    if (schema == CsvSchema::TracesGiven) {
      TraceRecord r;
      r.id = id;
      r.conductor = conductor;
      for (std::size_t i = 0; i < kNumPrimes; ++i) {
        const std::string cell = detail::trim(cells[2 + i]);
        if (cell == "*") {
          r.bad_mask[i] = true;
        } else {
          r.traces[i] = static_cast<int>(detail::parse_integer(cell, row, header[2 + i]));
        }
      }
      if (proxy_col && !detail::trim(cells[*proxy_col]).empty()) {
        r.disc_proxy = detail::parse_integer(cells[*proxy_col], row, "disc_proxy");
      }
      if (root_col) {
        const Integer w = detail::parse_integer(cells[*root_col], row, "root_number");
        if (w != 1 && w != -1) {
          throw DatasetError(DatasetError::Kind::Validation, "row " + std::to_string(row) + ": root number must be +-1");
        }
        r.root_number = static_cast<int>(w);
      }
      validate_record(r, row);
      out.push_back(std::move(r));
    } else {
      std::array<Integer, 5> a;
      for (std::size_t i = 0; i < 5; ++i) a[i] = detail::parse_integer(cells[2 + i], row, header[2 + i]);
      try {
        Curve c = Curve::long_form(a[0], a[1], a[2], a[3], a[4]);
        TraceRecord r = record_from_curve(c, id, conductor);
        if (conductor) {
          // Only require that every bad prime divides the conductor; the
          // caller supplies minimal models.
          for (std::size_t i = 0; i < kNumPrimes; ++i) {
            if (r.bad_mask[i] && *conductor % kPrimesBelow100[i] != 0) {
              throw DatasetError(DatasetError::Kind::Validation,
                                 "row " + std::to_string(row) + " (" + id + "): p=" +
                                     std::to_string(kPrimesBelow100[i]) +
                                     " divides the discriminant but not the conductor (non-minimal model?)");
            }
          }
        }
        out.push_back(std::move(r));
      } catch (const CurveError& e) {
        throw DatasetError(DatasetError::Kind::Validation, "row " + std::to_string(row) + " (" + id + "): " + e.what());
      }
    }
  }
  return out;
}

inline std::vector<TraceRecord> ingest_csv(const std::string& path, CsvSchema schema) {
  std::ifstream in(path);
  if (!in) throw DatasetError(DatasetError::Kind::Io, "cannot open " + path);
  return ingest_csv_stream(in, schema);
}

/// TracesGiven CSV writer, the inverse of ingest.
/// A disc_proxy column is added when some record has no conductor, and a
/// root_number column when every record has one.
inline void write_traces_csv(std::ostream& out, const std::vector<TraceRecord>& records) {
  const bool proxy = std::any_of(records.begin(), records.end(), [](const auto& r) { return !r.conductor; });
  const bool root = !records.empty() && std::all_of(records.begin(), records.end(), [](const auto& r) { return r.root_number.has_value(); });
  const auto header = detail::traces_header();
  for (std::size_t i = 0; i < header.size(); ++i) out << (i ? "," : "") << header[i];
  if (root) out << ",root_number";
  if (proxy) out << ",disc_proxy";
  out << '\n';
  for (const auto& r : records) {
    out << r.id << ',';
    if (r.conductor) out << *r.conductor;
    for (std::size_t i = 0; i < kNumPrimes; ++i) {
      out << ',';
      if (r.bad_mask[i]) {
        out << '*';
      } else {
        out << r.traces[i];
      }
    }
    if (root) out << ',' << *r.root_number;
    if (proxy) {
      out << ',';
      if (r.disc_proxy) out << *r.disc_proxy;
    }
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Synthesis

namespace detail {

// Trace of y^2 = x^3 + A x + B at prime p depends only on (A mod p, B mod p);
// tabulate it once per prime. Entries for singular residues are unused.
class ShortTraceTable {
 public:
  ShortTraceTable() {
    for (std::size_t i = 0; i < kNumPrimes; ++i) {
      const int p = kPrimesBelow100[i];
      auto& t = tables_[i];
      t.assign(static_cast<std::size_t>(p * p), 0);
      if (p == 2) continue;  // every short model is singular mod 2
      if (p == 3) {
        for (int a = 0; a < p; ++a) {
          for (int b = 0; b < p; ++b) {
            if (a % 3 == 0) continue;  // singular mod 3
            const auto n = count_points(Curve::short_form(a, b), 3);
            t[static_cast<std::size_t>(a * p + b)] = 4 - static_cast<int>(n);
          }
        }
        continue;
      }
      std::vector<int> chi(static_cast<std::size_t>(p), -1);
      chi[0] = 0;
      for (int z = 1; z < p; ++z) chi[static_cast<std::size_t>(z * z % p)] = 1;
      for (int a = 0; a < p; ++a) {
        for (int b = 0; b < p; ++b) {
          int s = 0;
          for (int x = 0; x < p; ++x) s += chi[static_cast<std::size_t>(((x * x % p) * x + a * x + b) % p)];
          t[static_cast<std::size_t>(a * p + b)] = -s;
        }
      }
    }
  }

  int trace(std::size_t prime_idx, std::int64_t A, std::int64_t B) const {
    const std::int64_t p = kPrimesBelow100[prime_idx];
    const std::int64_t a = ((A % p) + p) % p;
    const std::int64_t b = ((B % p) + p) % p;
    return tables_[prime_idx][static_cast<std::size_t>(a * p + b)];
  }

 private:
  std::array<std::vector<int>, kNumPrimes> tables_;
};

inline const ShortTraceTable& short_trace_table() {
  static const ShortTraceTable table;
  return table;
}

}  // namespace detail

inline std::string short_curve_id(std::int64_t A, std::int64_t B) {
  return "sw:" + std::to_string(A) + ":" + std::to_string(B);
}

/// Record for y^2 = x^3 + A x + B with machine-size coefficients.
inline TraceRecord short_curve_record(std::int64_t A, std::int64_t B) {
  const auto& table = detail::short_trace_table();
  TraceRecord r;
  r.id = short_curve_id(A, B);
  const Integer disc = -16 * (4 * Integer(A) * A * A + 27 * Integer(B) * B);
  r.disc_proxy = abs(disc);
  for (std::size_t i = 0; i < kNumPrimes; ++i) {
    const int p = kPrimesBelow100[i];
    r.bad_mask[i] = mod_small(disc, p) == 0;
    r.traces[i] = r.bad_mask[i] ? 0 : table.trace(i, A, B);
  }
  return r;
}

/// Fingerprint = (traces at good primes, bad mask). Keeps the smallest
/// size_key per fingerprint, ties broken by id; survivors keep input order.
inline std::vector<TraceRecord> fingerprint_dedup(const std::vector<TraceRecord>& records) {
  using Key = std::pair<std::array<int, kNumPrimes>, std::array<bool, kNumPrimes>>;
  auto key_of = [](const TraceRecord& r) {
    Key k{r.traces, r.bad_mask};
    for (std::size_t i = 0; i < kNumPrimes; ++i) {
      if (r.bad_mask[i]) k.first[i] = 0;
    }
    return k;
  };
  std::map<Key, std::size_t> best;
  for (std::size_t i = 0; i < records.size(); ++i) {
    auto [it, inserted] = best.emplace(key_of(records[i]), i);
    if (inserted) continue;
    const auto& cur = records[it->second];
    const auto& cand = records[i];
    const auto ck = cur.size_key();
    const auto nk = cand.size_key();
    if (nk < ck || (nk == ck && cand.id < cur.id)) it->second = i;
  }
  std::vector<bool> keep(records.size(), false);
  for (const auto& [k, i] : best) keep[i] = true;
  std::vector<TraceRecord> out;
  out.reserve(best.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (keep[i]) out.push_back(records[i]);
  }
  return out;
}

/// All minimal short-form curves with |A|, |B| <= height_bound, as
/// fingerprint-deduplicated trace records.
inline std::vector<TraceRecord> synthesize(std::int64_t height_bound, std::uint64_t seed) {
  std::vector<TraceRecord> raw;
  for_each_short_curve(height_bound, seed, [&](std::int64_t A, std::int64_t B) { raw.push_back(short_curve_record(A, B)); });
  return fingerprint_dedup(raw);
}

/// Reduced long-form models [a1, a2, a3, a4, a6] with a1, a3 in {0, 1},
/// a2 in {-1, 0, 1} and |a4|, |a6| <= height_bound, nonsingular, in seeded
/// order, fingerprint-deduplicated. Unlike short forms these can have good
/// reduction at 2 and 3.
inline std::vector<TraceRecord> synthesize_long(std::int64_t height_bound, std::uint64_t seed) {
  if (height_bound < 1) throw std::invalid_argument("height_bound must be >= 1");
  std::vector<std::array<std::int64_t, 5>> coeffs;
  for (std::int64_t a1 = 0; a1 <= 1; ++a1)
    for (std::int64_t a2 = -1; a2 <= 1; ++a2)
      for (std::int64_t a3 = 0; a3 <= 1; ++a3)
        for (std::int64_t a4 = -height_bound; a4 <= height_bound; ++a4)
          for (std::int64_t a6 = -height_bound; a6 <= height_bound; ++a6) {
            if (discriminant_of({a1, a2, a3, a4, a6}) != 0) coeffs.push_back({a1, a2, a3, a4, a6});
          }
  Rng(seed).shuffle(coeffs);
  std::vector<TraceRecord> raw;
  raw.reserve(coeffs.size());
  for (const auto& a : coeffs) {
    std::string id = "lw";
    for (auto v : a) id += ":" + std::to_string(v);
    raw.push_back(record_from_curve(Curve::long_form(a[0], a[1], a[2], a[3], a[4]), std::move(id)));
  }
  return fingerprint_dedup(raw);
}

// ---------------------------------------------------------------------------
// Record-level transforms

inline std::vector<TraceRecord> filter_good_reduction(const std::vector<TraceRecord>& records, int p) {
  const std::size_t idx = index_of_prime(p);
  std::vector<TraceRecord> out;
  for (const auto& r : records) {
    if (r.good_at(idx)) out.push_back(r);
  }
  return out;
}

enum class ReduceTarget { Features, Labels, Both };

inline int mod_nonneg(int v, int m) { return ((v % m) + m) % m; }

/// Replaces good trace slots by their residue mod ell. Labels = the target
/// prime's slot; features = every other slot.
inline std::vector<TraceRecord> reduce_mod(std::vector<TraceRecord> records, int ell, ReduceTarget which,
                                           int target_prime) {
  if (ell < 2) throw std::invalid_argument("modulus must be >= 2");
  const std::size_t t = index_of_prime(target_prime);
  for (auto& r : records) {
    for (std::size_t i = 0; i < kNumPrimes; ++i) {
      if (r.bad_mask[i]) continue;
      const bool is_label = i == t;
      if ((is_label && which != ReduceTarget::Features) || (!is_label && which != ReduceTarget::Labels)) {
        r.traces[i] = mod_nonneg(r.traces[i], ell);
      }
    }
  }
  return records;
}

namespace detail {

// Parity tuple with holes: 0/1 at good slots, 2 at bad slots. Optionally
// skips one slot (the label).
inline std::string parity_key(const TraceRecord& r, std::optional<std::size_t> skip) {
  std::string k(kNumPrimes, '\0');
  for (std::size_t i = 0; i < kNumPrimes; ++i) {
    if (skip && i == *skip) {
      k[i] = 'x';
    } else {
      k[i] = r.bad_mask[i] ? '2' : static_cast<char>('0' + mod_nonneg(r.traces[i], 2));
    }
  }
  return k;
}

inline std::string value_key(const TraceRecord& r, std::optional<std::size_t> skip) {
  std::string k;
  for (std::size_t i = 0; i < kNumPrimes; ++i) {
    if (skip && i == *skip) continue;
    k += r.bad_mask[i] ? "*" : std::to_string(r.traces[i]);
    k += ',';
  }
  return k;
}

inline bool size_then_id_less(const TraceRecord& a, const TraceRecord& b) {
  const auto ka = a.size_key();
  const auto kb = b.size_key();
  return ka < kb || (ka == kb && a.id < b.id);
}

}  // namespace detail

struct DedupResult {
  std::vector<TraceRecord> kept;
  std::size_t removed = 0;
};

/// One representative per full mod-2 tuple (inputs and label together),
/// lowest conductor first. Survivors keep input order.
inline DedupResult dedup_mod_tuples(const std::vector<TraceRecord>& records, int target_prime) {
  index_of_prime(target_prime);
  std::unordered_map<std::string, std::size_t> best;
  for (std::size_t i = 0; i < records.size(); ++i) {
    auto [it, inserted] = best.emplace(detail::parity_key(records[i], std::nullopt), i);
    if (!inserted && detail::size_then_id_less(records[i], records[it->second])) it->second = i;
  }
  std::vector<bool> keep(records.size(), false);
  for (const auto& [k, i] : best) keep[i] = true;
  DedupResult res;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (keep[i]) {
      res.kept.push_back(records[i]);
    } else {
      ++res.removed;
    }
  }
  return res;
}

namespace detail {

inline std::unordered_map<std::string, std::set<int>> labels_by_input(const std::vector<TraceRecord>& records,
                                                                      std::size_t t) {
  std::unordered_map<std::string, std::set<int>> labels;
  for (const auto& r : records) labels[value_key(r, t)].insert(r.traces[t]);
  return labels;
}

}  // namespace detail

/// Fraction of records whose input tuple (label excluded) occurs with at
/// least two distinct labels.
inline double indeterminacy_rate(const std::vector<TraceRecord>& records, int target_prime) {
  if (records.empty()) return 0.0;
  const std::size_t t = index_of_prime(target_prime);
  const auto labels = detail::labels_by_input(records, t);
  std::size_t n = 0;
  for (const auto& r : records) {
    if (labels.at(detail::value_key(r, t)).size() >= 2) ++n;
  }
  return static_cast<double>(n) / static_cast<double>(records.size());
}

inline std::vector<TraceRecord> drop_indeterminate(const std::vector<TraceRecord>& records, int target_prime) {
  const std::size_t t = index_of_prime(target_prime);
  const auto labels = detail::labels_by_input(records, t);
  std::vector<TraceRecord> out;
  for (const auto& r : records) {
    if (labels.at(detail::value_key(r, t)).size() < 2) out.push_back(r);
  }
  return out;
}

/// Random undersampling of the majority label to the minority count. The
/// label slot must take exactly two values. Survivors keep input order.
inline std::vector<TraceRecord> balance(const std::vector<TraceRecord>& records, int target_prime,
                                        std::uint64_t seed) {
  const std::size_t t = index_of_prime(target_prime);
  std::map<int, std::vector<std::size_t>> by_label;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].bad_mask[t]) {
      throw DatasetError(DatasetError::Kind::Validation, records[i].id + ": label undefined (bad reduction)");
    }
    by_label[records[i].traces[t]].push_back(i);
  }
  if (by_label.size() != 2) {
    throw DatasetError(DatasetError::Kind::DegenerateClass,
                       "balance needs exactly two label classes, found " + std::to_string(by_label.size()));
  }
  auto& lo = by_label.begin()->second;
  auto& hi = std::next(by_label.begin())->second;
  auto& minority = lo.size() <= hi.size() ? lo : hi;
  auto& majority = lo.size() <= hi.size() ? hi : lo;
  Rng rng(seed);
  rng.shuffle(majority);
  majority.resize(minority.size());
  std::vector<bool> keep(records.size(), false);
  for (auto i : minority) keep[i] = true;
  for (auto i : majority) keep[i] = true;
  std::vector<TraceRecord> out;
  out.reserve(minority.size() * 2);
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (keep[i]) out.push_back(records[i]);
  }
  return out;
}

/// Proportion of the most common label (reduced mod ell; ell = 0 means exact).
inline double majority_ratio(const std::vector<TraceRecord>& records, int target_prime, int ell) {
  const std::size_t t = index_of_prime(target_prime);
  std::map<int, std::size_t> counts;
  std::size_t n = 0;
  for (const auto& r : records) {
    if (r.bad_mask[t]) continue;
    ++counts[ell == 0 ? r.traces[t] : mod_nonneg(r.traces[t], ell)];
    ++n;
  }
  if (n == 0) return 0.0;
  std::size_t best = 0;
  for (const auto& [k, c] : counts) best = std::max(best, c);
  return static_cast<double>(best) / static_cast<double>(n);
}

inline std::vector<TraceRecord> select_labels(const std::vector<TraceRecord>& records, int target_prime,
                                              const std::set<int>& allowed) {
  const std::size_t t = index_of_prime(target_prime);
  std::vector<TraceRecord> out;
  for (const auto& r : records) {
    if (!r.bad_mask[t] && allowed.contains(r.traces[t])) out.push_back(r);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Splitting

struct ConductorBucket {
  Integer lo;  // inclusive
  Integer hi;  // exclusive

  bool contains(const Integer& v) const { return lo <= v && v < hi; }
};

struct SplitSpec {
  std::size_t test_size = 0;
  std::vector<ConductorBucket> conductor_buckets;
  std::uint64_t seed = 0;
};

struct SplitResult {
  std::vector<TraceRecord> train;
  std::vector<TraceRecord> test;
};

/// Index form of split: is_test[i] for each input record.
inline std::vector<bool> split_mask(const std::vector<TraceRecord>& records, const SplitSpec& spec) {
  const auto& buckets = spec.conductor_buckets;
  for (std::size_t i = 0; i < buckets.size(); ++i) {
    if (!(buckets[i].lo < buckets[i].hi)) throw std::invalid_argument("empty conductor bucket");
    for (std::size_t j = 0; j < i; ++j) {
      if (buckets[i].lo < buckets[j].hi && buckets[j].lo < buckets[i].hi) {
        throw std::invalid_argument("conductor buckets overlap");
      }
    }
  }
  std::vector<bool> is_test(records.size(), false);
  Rng rng(spec.seed);
  auto draw = [&](std::vector<std::size_t> pool, std::size_t quota, const std::string& name) {
    if (pool.size() < quota) {
      throw DatasetError(DatasetError::Kind::InsufficientData,
                         name + ": need " + std::to_string(quota) + " test records, have " + std::to_string(pool.size()));
    }
    rng.shuffle(pool);
    for (std::size_t k = 0; k < quota; ++k) is_test[pool[k]] = true;
  };
  if (buckets.empty()) {
    std::vector<std::size_t> all(records.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    draw(std::move(all), spec.test_size, "dataset");
  } else {
    if (spec.test_size % buckets.size() != 0) {
      throw std::invalid_argument("test_size must be divisible by the number of buckets");
    }
    const std::size_t quota = spec.test_size / buckets.size();
    for (const auto& b : buckets) {
      std::vector<std::size_t> pool;
      for (std::size_t i = 0; i < records.size(); ++i) {
        if (b.contains(records[i].size_key())) pool.push_back(i);
      }
      draw(std::move(pool), quota, "bucket [" + b.lo.str() + ", " + b.hi.str() + ")");
    }
  }
  return is_test;
}

inline SplitResult split(const std::vector<TraceRecord>& records, const SplitSpec& spec) {
  const auto mask = split_mask(records, spec);
  SplitResult out;
  for (std::size_t i = 0; i < records.size(); ++i) (mask[i] ? out.test : out.train).push_back(records[i]);
  return out;
}

}  // namespace ectrace
