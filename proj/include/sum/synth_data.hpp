// SPDX-License-Identifier: Apache-2.0
//
// Synthetic impression stream with id churn, latent rotation and interest
// switching. Every day is a pure function of (config, day).
#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "json.hpp"
#include "sum/features.hpp"
#include "sum/tensor.hpp"

namespace sum {

struct DriftConfig {
  std::size_t num_users = 2500;
  std::size_t num_ads = 200;
  std::size_t requests_per_day = 10000;
  std::size_t impressions_per_request = 5;
  double churn = 0.1;                  // rho: chance per day that an id is replaced
  double drift = 0.1;                  // sigma: rotation angle per day (radians)
  double interest_switch_rate = 0.05;  // chance per day that a user changes cluster
  double label_noise = 0.3;            // std of the per (user, day) logit offset
  std::uint64_t seed = 1;

  std::size_t latent_dim = 16;
  std::size_t num_clusters = 20;
  std::size_t variants = 4;        // ids per (feature, cluster)
  std::size_t cluster_features = 16;
  std::size_t multi_id_features = 4;
  std::size_t personal_features = 4;
  std::size_t dense_dim = 32;      // the last dense input is pure noise
  std::size_t ad_dim = 8;
  double dense_noise = 2.0;
  double personal_scale = 0.5;     // personal offset relative to the cluster centre
  double signal_scale = 2.0;       // multiplies <u, a>
  std::vector<double> base_rates = {0.1, 0.03};

  std::size_t num_sparse() const { return cluster_features + multi_id_features + personal_features; }
  std::size_t num_tasks() const { return base_rates.size(); }
  std::size_t decoy_dense_index() const { return dense_dim - 1; }
  void validate() const;
};

nlohmann::json to_json(const DriftConfig& c);
std::vector<std::string> sparse_feature_names(const DriftConfig& c);
DriftConfig drift_config_from_json(const nlohmann::json& j);

// One impression of a request.
struct ImpressionEvent {
  std::uint32_t ad_id = 0;
  std::vector<float> ad_features;
  std::vector<std::uint8_t> labels;  // one per task
  std::vector<float> truth;          // ground-truth probability per task

  friend bool operator==(const ImpressionEvent&, const ImpressionEvent&) = default;
};

// A user request; the user tower runs once per request.
struct Request {
  std::uint64_t request_id = 0;
  std::int32_t day = 0;
  std::int64_t time_us = 0;  // absolute simulated time
  std::uint64_t user_id = 0;
  UserFeatures features;
  std::vector<ImpressionEvent> events;

  friend bool operator==(const Request&, const Request&) = default;
};

struct DayData {
  std::int32_t day = 0;
  std::vector<Request> requests;  // ordered by time

  std::size_t event_count() const;
};

inline constexpr std::int64_t kMicrosPerDay = 86'400'000'000LL;

class SyntheticWorld {
 public:
  explicit SyntheticWorld(DriftConfig cfg);
  ~SyntheticWorld();

  const DriftConfig& config() const noexcept { return cfg_; }
  std::vector<std::string> sparse_feature_names() const;

  DayData generate_day(std::int32_t day) const;

  // User features in effect on `day` (constant within a day).
  UserFeatures user_features(std::uint64_t user, std::int32_t day) const;
  std::vector<float> ad_features(std::uint32_t ad) const;
  // The exact probability the sampler uses.
  double ground_truth_probability(std::uint64_t user, std::uint32_t ad, std::int32_t day,
                                  std::size_t task) const;
  // Latent user vector on `day`.
  std::vector<double> user_latent(std::uint64_t user, std::int32_t day) const;
  std::size_t user_cluster(std::uint64_t user, std::int32_t day) const;
  double task_bias(std::size_t task) const { return task_bias_.at(task); }

 private:
  struct DayState;
  const DayState& state(std::int32_t day) const;
  double logit_offset(std::uint64_t user, std::int32_t day) const;

  DriftConfig cfg_;
  std::vector<std::vector<double>> centres_;   // cluster -> latent
  std::vector<std::vector<double>> personal_;  // user -> latent offset
  std::vector<std::vector<double>> ads_;       // ad -> latent
  std::vector<std::vector<float>> ad_feats_;
  std::vector<std::vector<double>> dense_proj_;  // (dense_dim - 1) x latent
  std::vector<double> activity_;
  std::vector<double> task_bias_;
  mutable std::mutex mu_;
  mutable std::vector<std::unique_ptr<DayState>> states_;
};

// Day-file layout (little-endian): "SUMDAY\0\0", u32 format version, u64
// config fingerprint, i32 day, u16 feature count and u32-length names, u32
// request count; then per request a frame of u32 body length, body, u32
// CRC-32 of body. Body: u64 request id, i64 time, u64 user, sparse features
// in header order (u16 id count, u64 ids), u16 dense count + f32s, u16
// impression count, each: u32 ad id, u16 ad dim + f32s, u16 task count,
// u8 labels, f32 truth per task.
inline constexpr std::uint32_t kDayFileFormat = 1;

std::vector<std::uint8_t> encode_day(const DayData& d, std::uint64_t fingerprint);
DayData decode_day(std::span<const std::uint8_t> bytes, std::uint64_t* fingerprint = nullptr);
void write_day_file(const std::filesystem::path& path, const DayData& d, std::uint64_t fingerprint);
DayData read_day_file(const std::filesystem::path& path, std::uint64_t* fingerprint = nullptr);
std::string day_file_name(std::int32_t day);

}  // namespace sum
