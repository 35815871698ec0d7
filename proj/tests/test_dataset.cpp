// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <map>
#include <set>
#include <sstream>

#include "ectrace/dataset.hpp"

using namespace ectrace;

namespace {

// Random record generator: traces within the Hasse bound, a few holes.
TraceRecord random_record(Rng& rng, int id, int value_range = 0) {
  TraceRecord r;
  r.id = "r" + std::to_string(id);
  r.disc_proxy = Integer(static_cast<std::int64_t>(rng.below(1000) + 1));
  for (std::size_t i = 0; i < kNumPrimes; ++i) {
    const int b = value_range ? value_range : hasse_bound(kPrimesBelow100[i]);
    r.bad_mask[i] = rng.below(20) == 0;
    r.traces[i] = r.bad_mask[i] ? 0 : static_cast<int>(rng.below(2 * b + 1)) - b;
  }
  return r;
}

std::vector<TraceRecord> random_records(std::uint64_t seed, std::size_t n, int value_range = 0) {
  Rng rng(seed);
  std::vector<TraceRecord> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(random_record(rng, static_cast<int>(i), value_range));
  return out;
}

std::string header_line() {
  std::string h = "id,conductor";
  for (int p : kPrimesBelow100) h += ",a" + std::to_string(p);
  return h;
}

}  // namespace

TEST(Dataset, ShortRecordMatchesCurveRecord) {
  for (auto [A, B] : std::vector<std::pair<int, int>>{{1, 1}, {-7, 10}, {3, -5}, {-1, 0}, {0, 7}}) {
    auto fast = short_curve_record(A, B);
    auto slow = record_from_curve(Curve::short_form(A, B), short_curve_id(A, B));
    EXPECT_EQ(fast, slow) << A << "," << B;
  }
}

TEST(Dataset, SynthesizeHeightOne) {
  const auto raw = synthesize(1, 0);
  EXPECT_LE(raw.size(), 8u);
  for (const auto& r : raw) EXPECT_TRUE(r.bad_mask[0]);
}

TEST(Dataset, SynthesizeDeterministic) {
  EXPECT_EQ(synthesize(8, 4), synthesize(8, 4));
  EXPECT_NE(synthesize(8, 4), synthesize(8, 5));
}

TEST(Dataset, SynthesizeLongHasGoodReductionAtTwo) {
  const auto raw = synthesize_long(2, 0);
  ASSERT_FALSE(raw.empty());
  std::size_t good2 = 0;
  for (const auto& r : raw) {
    if (!r.bad_mask[0]) {
      ++good2;
      EXPECT_LE(std::abs(r.traces[0]), 2);
    }
  }
  EXPECT_GT(good2, 0u);
}

TEST(Dataset, FingerprintDedupKeepsSmallest) {
  TraceRecord a, b, c;
  a.id = "a";
  a.disc_proxy = Integer(50);
  b = a;
  b.id = "b";
  b.disc_proxy = Integer(10);
  c = a;
  c.id = "c";
  c.traces[3] = 1;
  const auto out = fingerprint_dedup({a, b, c});
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[0].id, "b");
  EXPECT_EQ(out[1].id, "c");
}

TEST(Dataset, IngestRoundTrip) {
  auto recs = random_records(1, 30);
  for (auto& r : recs) {
    r.disc_proxy.reset();
    std::int64_t n = 1;
    for (std::size_t i = 0; i < kNumPrimes; ++i)
      if (r.bad_mask[i]) n *= kPrimesBelow100[i];
    r.conductor = n;
  }
  std::stringstream ss;
  write_traces_csv(ss, recs);
  const auto back = ingest_csv_stream(ss, CsvSchema::TracesGiven);
  EXPECT_EQ(back, recs);
}

TEST(Dataset, IngestRoundTripWithProxyAndRootNumber) {
  auto recs = random_records(2, 20);
  for (std::size_t k = 0; k < recs.size(); ++k) {
    recs[k].conductor.reset();
    recs[k].disc_proxy = Integer(1000 + k);
    recs[k].root_number = k % 2 ? 1 : -1;
  }
  std::stringstream ss;
  ss << "# stamp line\n";
  write_traces_csv(ss, recs);
  const auto back = ingest_csv_stream(ss, CsvSchema::TracesGiven);
  EXPECT_EQ(back, recs);
}

TEST(Dataset, IngestHeaderErrors) {
  std::stringstream empty;
  EXPECT_THROW(ingest_csv_stream(empty, CsvSchema::TracesGiven), DatasetError);
  std::stringstream bad("id,conductor,a2\n");
  EXPECT_THROW(ingest_csv_stream(bad, CsvSchema::TracesGiven), DatasetError);
}

TEST(Dataset, IngestRowErrorsNameTheRow) {
  std::stringstream ss;
  ss << header_line() << "\n";
  ss << "x,11";
  for (std::size_t i = 0; i < kNumPrimes; ++i) ss << (kPrimesBelow100[i] == 11 ? ",*" : ",0");
  ss << "\n";
  ss << "y,11";
  for (std::size_t i = 0; i < kNumPrimes; ++i) ss << (i == 0 ? ",9" : ",0");
  ss << "\n";
  try {
    ingest_csv_stream(ss, CsvSchema::TracesGiven);
    FAIL();
  } catch (const DatasetError& e) {
    EXPECT_EQ(e.kind(), DatasetError::Kind::Validation);
    EXPECT_NE(std::string(e.what()).find("row 2"), std::string::npos) << e.what();
  }
}

TEST(Dataset, IngestWeierstrass) {
  std::stringstream ss("id,conductor,a1,a2,a3,a4,a6\n11a1,11,0,-1,1,-10,-20\n");
  const auto recs = ingest_csv_stream(ss, CsvSchema::WeierstrassGiven);
  ASSERT_EQ(recs.size(), 1u);
  EXPECT_EQ(recs[0].traces[0], -2);
  EXPECT_TRUE(recs[0].bad_mask[index_of_prime(11)]);
  EXPECT_EQ(recs[0].traces[index_of_prime(97)], -7);

  std::stringstream sing("id,conductor,a1,a2,a3,a4,a6\nz,,0,0,0,0,0\n");
  EXPECT_THROW(ingest_csv_stream(sing, CsvSchema::WeierstrassGiven), DatasetError);
}

TEST(Dataset, ReduceModProperty) {
  const auto recs = random_records(2, 200);
  for (int ell : {2, 3, 4}) {
    const auto red = reduce_mod(recs, ell, ReduceTarget::Both, 97);
    for (std::size_t k = 0; k < recs.size(); ++k) {
      for (std::size_t i = 0; i < kNumPrimes; ++i) {
        if (recs[k].bad_mask[i]) continue;
        EXPECT_GE(red[k].traces[i], 0);
        EXPECT_LT(red[k].traces[i], ell);
        EXPECT_EQ((red[k].traces[i] - recs[k].traces[i]) % ell, 0);
      }
    }
  }
  const auto labels_only = reduce_mod(recs, 2, ReduceTarget::Labels, 97);
  for (std::size_t k = 0; k < recs.size(); ++k) EXPECT_EQ(labels_only[k].traces[3], recs[k].traces[3]);
  EXPECT_THROW(reduce_mod(recs, 1, ReduceTarget::Both, 97), std::invalid_argument);
}

TEST(Dataset, DedupModTuplesUnique) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto recs = reduce_mod(random_records(seed, 2000, 2), 2, ReduceTarget::Both, 97);
    const auto res = dedup_mod_tuples(recs, 97);
    std::set<std::string> keys;
    for (const auto& r : res.kept) EXPECT_TRUE(keys.insert(detail::parity_key(r, std::nullopt)).second);
    EXPECT_EQ(res.kept.size() + res.removed, recs.size());
    // Every original tuple survives.
    for (const auto& r : recs) EXPECT_TRUE(keys.contains(detail::parity_key(r, std::nullopt)));
  }
}

TEST(Dataset, IndeterminacyRecount) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto recs = reduce_mod(random_records(seed, 3000, 1), 2, ReduceTarget::Both, 97);
    // Independent recount: group indices by input vector.
    std::map<std::vector<int>, std::set<int>> groups;
    auto input = [](const TraceRecord& r) {
      std::vector<int> v;
      for (std::size_t i = 0; i < kNumPrimes; ++i)
        if (i != index_of_prime(97)) v.push_back(r.bad_mask[i] ? -100 : r.traces[i]);
      return v;
    };
    for (const auto& r : recs) groups[input(r)].insert(r.traces[index_of_prime(97)]);
    std::size_t n = 0;
    for (const auto& r : recs) n += groups[input(r)].size() > 1;
    EXPECT_DOUBLE_EQ(indeterminacy_rate(recs, 97), static_cast<double>(n) / recs.size());
    const auto kept = drop_indeterminate(recs, 97);
    EXPECT_EQ(kept.size(), recs.size() - n);
    EXPECT_DOUBLE_EQ(indeterminacy_rate(kept, 97), 0.0);
  }
}

TEST(Dataset, BalanceProperty) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto recs = reduce_mod(random_records(seed, 500 + seed * 37), 2, ReduceTarget::Labels, 97);
    for (auto& r : recs) r.bad_mask[index_of_prime(97)] = false;
    const auto out = balance(recs, 97, seed);
    std::map<int, int> counts;
    for (const auto& r : out) ++counts[r.traces[index_of_prime(97)]];
    ASSERT_EQ(counts.size(), 2u);
    EXPECT_EQ(counts[0], counts[1]);
    EXPECT_DOUBLE_EQ(majority_ratio(out, 97, 2), 0.5);
  }
}

TEST(Dataset, BalanceDegenerate) {
  auto recs = random_records(1, 50);
  for (auto& r : recs) {
    r.bad_mask[index_of_prime(97)] = false;
    r.traces[index_of_prime(97)] = 1;
  }
  try {
    balance(recs, 97, 0);
    FAIL();
  } catch (const DatasetError& e) {
    EXPECT_EQ(e.kind(), DatasetError::Kind::DegenerateClass);
  }
}

TEST(Dataset, SplitDisjointAndSized) {
  const auto recs = random_records(4, 1000);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto s = split(recs, SplitSpec{100, {}, seed});
    EXPECT_EQ(s.test.size(), 100u);
    EXPECT_EQ(s.train.size(), 900u);
    std::set<std::string> ids;
    for (const auto& r : s.train) ids.insert(r.id);
    for (const auto& r : s.test) EXPECT_FALSE(ids.contains(r.id));
  }
  EXPECT_THROW(split(recs, SplitSpec{1001, {}, 0}), DatasetError);
}

TEST(Dataset, SplitBuckets) {
  const auto recs = random_records(4, 2000);
  SplitSpec spec{40, {{Integer(1), Integer(100)}, {Integer(500), Integer(1001)}}, 3};
  const auto s = split(recs, spec);
  int lo = 0, hi = 0;
  for (const auto& r : s.test) {
    if (spec.conductor_buckets[0].contains(r.size_key())) ++lo;
    if (spec.conductor_buckets[1].contains(r.size_key())) ++hi;
  }
  EXPECT_EQ(lo, 20);
  EXPECT_EQ(hi, 20);
  SplitSpec overlap{40, {{Integer(1), Integer(100)}, {Integer(50), Integer(200)}}, 3};
  EXPECT_THROW(split(recs, overlap), std::invalid_argument);
}

TEST(Dataset, SelectLabels) {
  const auto recs = random_records(6, 400);
  const auto out = select_labels(recs, 2, {-1, 1});
  for (const auto& r : out) {
    EXPECT_FALSE(r.bad_mask[0]);
    EXPECT_EQ(std::abs(r.traces[0]), 1);
  }
}
