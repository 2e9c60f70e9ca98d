// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "sum/error.hpp"
#include "sum/synth_data.hpp"

namespace sum {
namespace {

DriftConfig small(double churn = 0.1, double drift = 0.1) {
  DriftConfig c;
  c.num_users = 300;
  c.requests_per_day = 2000;
  c.churn = churn;
  c.drift = drift;
  return c;
}

std::set<std::uint64_t> sparse_ids(const DayData& d) {
  std::set<std::uint64_t> out;
  for (const auto& r : d.requests)
    for (const auto& f : r.features.sparse) out.insert(f.ids.begin(), f.ids.end());
  return out;
}

TEST(Synth, ReproducibleFromConfig) {
  SyntheticWorld a(small()), b(small());
  EXPECT_EQ(encode_day(a.generate_day(3), 1), encode_day(b.generate_day(3), 1));
  // Random access equals sequential access.
  SyntheticWorld c(small());
  EXPECT_EQ(c.generate_day(3).requests, a.generate_day(3).requests);
  DriftConfig other = small();
  other.seed = 2;
  EXPECT_NE(SyntheticWorld(other).generate_day(0).requests, a.generate_day(0).requests);
}

TEST(Synth, StationaryCaseKeepsFeatures) {
  DriftConfig c = small(0.0, 0.0);
  c.interest_switch_rate = 0.0;
  SyntheticWorld w(c);
  // Multi-id features draw an extra id per day; all other ids are fixed.
  for (std::uint64_t u = 0; u < c.num_users; u += 7) {
    const auto a = w.user_features(u, 0), b = w.user_features(u, 1);
    for (std::size_t i = 0; i < c.num_sparse(); ++i) {
      const bool multi = i >= c.cluster_features && i < c.cluster_features + c.multi_id_features;
      if (multi) {
        EXPECT_EQ(std::vector(a.sparse[i].ids.begin(), a.sparse[i].ids.begin() + 2),
                  std::vector(b.sparse[i].ids.begin(), b.sparse[i].ids.begin() + 2));
      } else {
        EXPECT_EQ(a.sparse[i].ids, b.sparse[i].ids);
      }
    }
    EXPECT_EQ(w.user_latent(u, 0), w.user_latent(u, 1));
  }
}

TEST(Synth, FullChurnLeavesNoOverlap) {
  SyntheticWorld w(small(1.0, 0.1));
  const auto a = sparse_ids(w.generate_day(4)), b = sparse_ids(w.generate_day(5));
  for (auto id : b) ASSERT_FALSE(a.count(id)) << id;
}

TEST(Synth, PartialChurnOverlapMatchesRate) {
  SyntheticWorld w(small(0.1, 0.0));
  std::size_t same = 0, total = 0;
  for (std::uint64_t u = 0; u < 300; ++u) {
    const auto f0 = w.user_features(u, 2), f1 = w.user_features(u, 3);
    if (w.user_cluster(u, 2) != w.user_cluster(u, 3)) continue;
    for (std::size_t i = 0; i < 16; ++i, ++total) same += f0.sparse[i].ids == f1.sparse[i].ids;
  }
  EXPECT_NEAR(double(same) / total, 0.9, 0.03);
}

TEST(Synth, EmpiricalRateNearBase) {
  DriftConfig c = small();
  c.requests_per_day = 20000;  // 1e5 events
  SyntheticWorld w(c);
  const DayData d = w.generate_day(0);
  ASSERT_EQ(d.event_count(), 100000u);
  std::vector<double> pos(c.num_tasks(), 0.0);
  for (const auto& r : d.requests)
    for (const auto& e : r.events)
      for (std::size_t t = 0; t < pos.size(); ++t) pos[t] += e.labels[t];
  for (std::size_t t = 0; t < pos.size(); ++t) EXPECT_NEAR(pos[t] / 1e5, c.base_rates[t], 0.02);
}

TEST(Synth, ZeroSignalGivesBiasProbability) {
  DriftConfig c = small();
  c.signal_scale = 0.0;
  c.label_noise = 0.0;
  SyntheticWorld w(c);
  for (std::size_t t = 0; t < c.num_tasks(); ++t) {
    EXPECT_NEAR(w.task_bias(t), std::log(c.base_rates[t] / (1 - c.base_rates[t])), 1e-9);
    EXPECT_DOUBLE_EQ(w.ground_truth_probability(5, 3, 2, t), 1 / (1 + std::exp(-w.task_bias(t))));
  }
}

TEST(Synth, EventsCarryGroundTruth) {
  SyntheticWorld w(small());
  const DayData d = w.generate_day(2);
  for (std::size_t i = 0; i < 50; ++i) {
    const auto& r = d.requests[i];
    for (const auto& e : r.events)
      for (std::size_t t = 0; t < e.truth.size(); ++t)
        EXPECT_EQ(e.truth[t], static_cast<float>(w.ground_truth_probability(r.user_id, e.ad_id, 2, t)));
  }
}

TEST(Synth, RotationPreservesNormWithoutSwitching) {
  DriftConfig c = small(0.0, 0.3);
  c.interest_switch_rate = 0.0;
  SyntheticWorld w(c);
  auto norm = [](const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
  };
  for (std::uint64_t u = 0; u < 10; ++u) {
    EXPECT_NEAR(norm(w.user_latent(u, 0)), norm(w.user_latent(u, 9)), 1e-9);
    EXPECT_NE(w.user_latent(u, 0), w.user_latent(u, 9));
  }
}

TEST(Synth, RequestsAreTimeOrderedWithinDay) {
  SyntheticWorld w(small());
  const DayData d = w.generate_day(1);
  for (std::size_t i = 1; i < d.requests.size(); ++i) ASSERT_LE(d.requests[i - 1].time_us, d.requests[i].time_us);
  EXPECT_GE(d.requests.front().time_us, kMicrosPerDay);
  EXPECT_LT(d.requests.back().time_us, 2 * kMicrosPerDay);
}

TEST(Synth, SchemaMatchesConfig) {
  DriftConfig c = small();
  SyntheticWorld w(c);
  auto f = w.user_features(0, 0);
  EXPECT_EQ(f.sparse.size(), c.num_sparse());
  EXPECT_EQ(f.dense.size(), c.dense_dim);
  EXPECT_EQ(w.sparse_feature_names().front(), "f00");
}

TEST(DayFile, RoundTripAndCorruption) {
  SyntheticWorld w(small());
  const DayData d = w.generate_day(1);
  const auto path = std::filesystem::temp_directory_path() / "sum_day_test.bin";
  write_day_file(path, d, 77);
  std::uint64_t fp = 0;
  const DayData back = read_day_file(path, &fp);
  EXPECT_EQ(fp, 77u);
  EXPECT_EQ(back.day, 1);
  EXPECT_EQ(back.requests, d.requests);
  auto bytes = encode_day(d, 77);
  bytes[bytes.size() / 3] ^= 1;
  EXPECT_THROW(decode_day(bytes), FormatError);
  bytes = encode_day(d, 77);
  bytes.resize(bytes.size() - 3);
  EXPECT_THROW(decode_day(bytes), FormatError);
  std::filesystem::remove(path);
}

TEST(Synth, ConfigValidation) {
  DriftConfig c;
  c.churn = 1.5;
  EXPECT_THROW(c.validate(), ConfigError);
  auto j = to_json(DriftConfig{});
  EXPECT_EQ(to_json(drift_config_from_json(j)), j);
  j["mystery"] = 2;
  EXPECT_THROW(drift_config_from_json(j), ConfigError);
}

}  // namespace
}  // namespace sum
