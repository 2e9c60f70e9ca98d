// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>
#include <thread>

#include "sum/error.hpp"
#include "sum/feature_store.hpp"
#include "sum/fp16.hpp"

namespace sum {
namespace {

// ---- fp16 -------------------------------------------------------------------

TEST(Fp16, ExactValues) {
  EXPECT_EQ(float_to_half(1.0f), 0x3c00);
  EXPECT_EQ(half_to_float(0x3c00), 1.0f);
  EXPECT_EQ(float_to_half(-2.0f), 0xc000);
  EXPECT_EQ(float_to_half(0.0f), 0x0000);
  EXPECT_EQ(float_to_half(-0.0f), 0x8000);
  EXPECT_EQ(float_to_half(65504.0f), 0x7bff);
  EXPECT_EQ(half_to_float(0x0001), std::ldexp(1.0f, -24));
  EXPECT_EQ(half_to_float(0x0400), std::ldexp(1.0f, -14));
}

TEST(Fp16, PointOneWithinBinary16Precision) {
  const float back = half_to_float(float_to_half(0.1f));
  EXPECT_LE(std::abs(back - 0.1f) / 0.1f, std::ldexp(1.0, -11));
}

TEST(Fp16, SaturatesWithFlag) {
  bool sat = false;
  EXPECT_EQ(half_to_float(float_to_half(1e5f, &sat)), 65504.0f);
  EXPECT_TRUE(sat);
  sat = false;
  EXPECT_EQ(half_to_float(float_to_half(-1e5f, &sat)), -65504.0f);
  EXPECT_TRUE(sat);
  sat = false;
  float_to_half(65504.0f, &sat);
  EXPECT_FALSE(sat);
  EXPECT_EQ(half_to_float(float_to_half(65519.0f, &sat)), 65504.0f);  // in range after rounding, still flagged
  EXPECT_TRUE(sat);
  sat = false;
  float_to_half(65520.0f, &sat);  // would round to infinity
  EXPECT_TRUE(sat);
  auto q = quantize_fp16(std::vector<float>{1.f, 7e4f, -7e4f});
  EXPECT_EQ(q.saturated, 2u);
}

TEST(Fp16, EveryHalfRoundTripsExactly) {
  for (std::uint32_t h = 0; h < 0x10000; ++h) {
    const float f = half_to_float(static_cast<std::uint16_t>(h));
    if (std::isnan(f)) continue;
    if (std::isinf(f)) continue;
    ASSERT_EQ(float_to_half(f), h) << std::hex << h;
  }
}

// Brute-force nearest-even oracle: the two fp16 neighbours bracketing f.
TEST(Fp16, MatchesNearestEvenOracle) {
  std::vector<float> table;
  for (std::uint32_t h = 0; h <= 0x7bff; ++h) table.push_back(half_to_float(static_cast<std::uint16_t>(h)));
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<float> mag(-30.f, 16.f);
  for (int i = 0; i < 200000; ++i) {
    const float f = std::exp2(mag(rng));
    const auto it = std::lower_bound(table.begin(), table.end(), f);
    std::uint16_t want;
    if (it == table.begin()) {
      want = 0;
    } else if (it == table.end()) {
      continue;
    } else {
      const auto hi = static_cast<std::uint16_t>(it - table.begin());
      const std::uint16_t lo = hi - 1;
      const double dl = double(f) - table[lo], dh = double(table[hi]) - f;
      want = dl < dh ? lo : dh < dl ? hi : (lo % 2 == 0 ? lo : hi);
    }
    ASSERT_EQ(float_to_half(f), want) << f;
  }
}

TEST(Fp16, RelativeErrorBoundOverNormalRange) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<float> u(-1e4f, 1e4f);
  double worst = 0;
  for (int i = 0; i < 100000; ++i) {
    float v = u(rng);
    if (std::abs(v) < std::ldexp(1.0f, -14)) continue;
    worst = std::max(worst, std::abs(double(half_to_float(float_to_half(v))) - v) / std::abs(v));
  }
  EXPECT_LE(worst, std::ldexp(1.0, -10));
}

// ---- store ------------------------------------------------------------------

StoreConfig small_cfg(std::size_t h = 4) { return {2, 3, h, 3}; }

Tensorf filled(float v) { return Tensorf(2, 3, v); }

TEST(Store, WriteThenReadRoundTrips) {
  FeatureStore s(small_cfg());
  Tensorf e = Tensorf::from_rows({{0.1f, -2.5f, 3.f}, {1e-3f, 100.f, -0.7f}});
  s.write(7, e, 4, 100);
  auto r = s.read_latest(7, 1);
  ASSERT_EQ(r.size(), 1u);
  EXPECT_EQ(r[0].snapshot_version, 4u);
  EXPECT_EQ(r[0].wall_time, 100);
  const Tensorf d = r[0].decode();
  for (std::size_t i = 0; i < e.size(); ++i) EXPECT_LE(std::abs(d[i] - e[i]), std::abs(e[i]) * std::ldexp(1.f, -11));
}

TEST(Store, UnknownUserIsEmpty) {
  FeatureStore s(small_cfg());
  EXPECT_TRUE(s.read_latest(1, 3).empty());
}

TEST(Store, ReadReturnsAtMostStored) {
  FeatureStore s(small_cfg());
  s.write(1, filled(1), 1, 0);
  EXPECT_EQ(s.read_latest(1, 3).size(), 1u);
}

TEST(Store, NewestFirstAndEviction) {
  FeatureStore s(small_cfg(2));
  for (int v = 1; v <= 3; ++v) s.write(1, filled(float(v)), v, v);
  auto r = s.read_latest(1, 5);
  ASSERT_EQ(r.size(), 2u);
  EXPECT_EQ(r[0].snapshot_version, 3u);
  EXPECT_EQ(r[1].snapshot_version, 2u);
}

TEST(Store, SameVersionWritesAppendByDefault) {
  FeatureStore s(small_cfg(3));
  for (int i = 1; i <= 3; ++i) s.write(1, filled(float(i)), 7, i);
  EXPECT_EQ(s.read_latest(1, 5).size(), 3u);
}

TEST(Store, OneRecordPerVersionReplacesNewest) {
  StoreConfig c = small_cfg(3);
  c.one_record_per_version = true;
  FeatureStore s(c);
  s.write(1, filled(1), 1, 1);
  s.write(1, filled(2), 2, 2);
  s.write(1, filled(3), 2, 3);
  auto r = s.read_latest(1, 5);
  ASSERT_EQ(r.size(), 2u);
  EXPECT_EQ(r[0].snapshot_version, 2u);
  EXPECT_EQ(r[0].wall_time, 3);
  EXPECT_EQ(r[0].decode()[0], 3.f);
  EXPECT_EQ(r[1].snapshot_version, 1u);
  // Only the newest record is ever replaced.
  s.write(1, filled(4), 1, 4);
  EXPECT_EQ(s.read_latest(1, 5).size(), 3u);
}

TEST(Store, OrderingMatchesWriteSequence) {
  FeatureStore s(small_cfg(4));
  for (int v = 1; v <= 10; ++v) {
    s.write(1, filled(float(v)), v, v);
    auto r = s.read_latest(1, 4);
    ASSERT_EQ(r.size(), std::min(v, 4));
    for (std::size_t i = 0; i < r.size(); ++i) EXPECT_EQ(r[i].snapshot_version, std::uint64_t(v - int(i)));
  }
}

TEST(Store, ShapeAndValueErrors) {
  FeatureStore s(small_cfg());
  EXPECT_THROW(s.write(1, Tensorf(3, 2), 1, 0), DimensionError);
  Tensorf bad = filled(1);
  bad[2] = std::nanf("");
  EXPECT_THROW(s.write(1, bad, 1, 0), NumericError);
  EXPECT_THROW(FeatureStore(StoreConfig{2, 3, 1, 3}), ConfigError);
}

TEST(Store, ClampsBeforeQuantisation) {
  FeatureStore s(small_cfg());
  Tensorf e = filled(0.f);
  e[0] = 5e4f;
  e[1] = -1e9f;
  s.write(1, e, 1, 0);
  EXPECT_EQ(s.clamped_values(), 2u);
  const Tensorf d = s.read_latest(1, 1)[0].decode();
  EXPECT_EQ(d[0], kStoreClamp);
  EXPECT_EQ(d[1], -kStoreClamp);
}

TEST(Store, ConcurrentWritersNeverMixPayloads) {
  FeatureStore s(StoreConfig{2, 48, 3, 3});
  constexpr int kThreads = 8, kWrites = 2000;
  std::atomic<bool> bad{false};
  std::vector<std::thread> ts;
  for (int t = 0; t < kThreads; ++t) {
    ts.emplace_back([&, t] {
      for (int i = 0; i < kWrites; ++i) {
        const std::uint64_t user = (i * 7 + t) % 13;
        // Every value in a payload equals a tag unique to this write.
        const float tag = float(t * kWrites + i) / 16.f;
        s.write(user, Tensorf(2, 48, tag), t * kWrites + i, i);
        for (const auto& rec : s.read_latest((user + 1) % 13, 3)) {
          const Tensorf d = rec.decode();
          for (float v : d.data())
            if (v != d[0]) bad = true;
        }
      }
    });
  }
  for (auto& th : ts) th.join();
  EXPECT_FALSE(bad.load());
  EXPECT_EQ(s.write_count(), std::uint64_t(kThreads * kWrites));
  for (std::uint64_t u = 0; u < 13; ++u) EXPECT_LE(s.read_latest(u, 100).size(), 3u);
}

TEST(Store, LogReplayRestoresState) {
  const auto path = std::filesystem::temp_directory_path() / "sum_store_test.log";
  std::filesystem::remove(path);
  {
    FeatureStore s(small_cfg(2), path);
    for (int v = 1; v <= 3; ++v) s.write(5, filled(float(v)), v, v);
    s.write(6, filled(9), 1, 4);
  }
  {
    FeatureStore s(small_cfg(2), path);
    auto r = s.read_latest(5, 3);
    ASSERT_EQ(r.size(), 2u);
    EXPECT_EQ(r[0].snapshot_version, 3u);
    EXPECT_EQ(r[0].decode()[0], 3.f);
    EXPECT_EQ(s.read_latest(6, 1).size(), 1u);
    EXPECT_EQ(s.replay_rejected(), 0u);
  }
  // Torn tail: replay keeps every complete frame.
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 5);
  {
    FeatureStore s(small_cfg(2), path);
    EXPECT_EQ(s.replay_rejected(), 1u);
    EXPECT_EQ(s.read_latest(5, 3)[0].snapshot_version, 3u);
    EXPECT_TRUE(s.read_latest(6, 1).empty());
  }
  std::filesystem::remove(path);
}

// ---- pooling ----------------------------------------------------------------

EmbeddingRecord rec_of(const Tensorf& t) {
  EmbeddingRecord r;
  r.rows = std::uint16_t(t.rows());
  r.cols = std::uint16_t(t.cols());
  r.payload = quantize_fp16(t.data()).bits;
  return r;
}

TEST(Pool, IdenticalInputsAreFixedPoint) {
  Tensorf v = Tensorf::from_rows({{0.5f, -1.25f}});
  std::vector<EmbeddingRecord> c = {rec_of(v), rec_of(v)};
  EXPECT_EQ(average_pool(v, c, 3), v);
}

TEST(Pool, MeanOverAvailable) {
  std::vector<EmbeddingRecord> c = {rec_of(Tensorf(1, 1, 0.f))};
  EXPECT_EQ(average_pool(Tensorf(1, 1, 2.f), c, 3)[0], 1.f);
}

TEST(Pool, NoCacheIsIdentityAndWindowOne) {
  Tensorf v = Tensorf::from_rows({{0.3f, 7.f}});
  EXPECT_EQ(average_pool(v, {}, 3), v);
  std::vector<EmbeddingRecord> c = {rec_of(Tensorf(1, 2, 100.f))};
  EXPECT_EQ(average_pool(v, c, 1), v);
}

TEST(Pool, UsesOnlyWindowMinusOneCached) {
  std::vector<EmbeddingRecord> c = {rec_of(Tensorf(1, 1, 3.f)), rec_of(Tensorf(1, 1, 6.f)),
                                    rec_of(Tensorf(1, 1, 1000.f))};
  EXPECT_EQ(average_pool(Tensorf(1, 1, 0.f), c, 3)[0], 3.f);
}

TEST(Pool, PermutationInvariantAndContracts) {
  std::mt19937_64 rng(3);
  std::normal_distribution<float> g;
  auto rnd = [&] {
    Tensorf t(2, 8);
    for (auto& v : t.data()) v = half_to_float(float_to_half(g(rng)));
    return t;
  };
  for (int trial = 0; trial < 100; ++trial) {
    Tensorf a = rnd(), b = rnd(), c1 = rnd(), c2 = rnd();
    std::vector<EmbeddingRecord> cache = {rec_of(c1), rec_of(c2)}, swapped = {rec_of(c2), rec_of(c1)};
    const Tensorf pa = average_pool(a, cache, 3), pb = average_pool(b, cache, 3);
    const Tensorf pa2 = average_pool(a, swapped, 3);
    // Current vs cached roles swapped as well.
    std::vector<EmbeddingRecord> roles = {rec_of(a), rec_of(c2)};
    const Tensorf pa3 = average_pool(c1, roles, 3);
    double dp = 0, dab = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      EXPECT_NEAR(pa[i], pa2[i], 1e-6);
      EXPECT_NEAR(pa[i], pa3[i], 1e-6);
      dp += double(pa[i] - pb[i]) * (pa[i] - pb[i]);
      dab += double(a[i] - b[i]) * (a[i] - b[i]);
    }
    EXPECT_NEAR(std::sqrt(dp), std::sqrt(dab) / 3, 1e-6);
  }
}

TEST(Pool, AverageCachedColdStartIsZero) {
  EXPECT_EQ(average_cached({}, 2, 2, 3), Tensorf(2, 3));
  std::vector<EmbeddingRecord> c = {rec_of(Tensorf(1, 1, 2.f)), rec_of(Tensorf(1, 1, 4.f)), rec_of(Tensorf(1, 1, 9.f))};
  EXPECT_EQ(average_cached(c, 2, 1, 1)[0], 3.f);
}

}  // namespace
}  // namespace sum
