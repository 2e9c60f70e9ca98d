// SPDX-License-Identifier: Apache-2.0
//
// Initial training and daily recurring updates publishing versioned snapshots.
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "sum/snapshot.hpp"
#include "sum/synth_data.hpp"

namespace sum {

enum class OptimizerKind { Sgd, Adam };

struct TrainConfig {
  double learning_rate = 1e-3;
  OptimizerKind optimizer = OptimizerKind::Adam;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  std::size_t batch_size = 8;  // requests per optimizer step
  std::int32_t initial_first_day = 0;
  std::int32_t initial_last_day = 2;
  std::int32_t cadence = 1;  // days per published snapshot
  std::vector<double> task_weights = {1.0, 1.0};
  double grad_clip = 0.0;  // global-norm clip, 0 disables
  std::uint64_t seed = 1;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

// Published snapshots, newest last. Optionally mirrored to a directory with a
// manifest listing (version, day, file, crc32).
class SnapshotStore {
 public:
  explicit SnapshotStore(std::size_t retention = 8, std::optional<std::filesystem::path> dir = {});

  /// Requires version == latest + 1 (or 1 for an empty store); throws VersionError.
  void publish(SnapshotPtr s);
  SnapshotPtr latest() const;  // nullptr when empty
  SnapshotPtr find(std::uint64_t version) const;  // nullptr when absent or evicted
  std::vector<std::uint64_t> versions() const;
  std::size_t retention() const noexcept { return retention_; }

  /// Rebuilds a store from a directory manifest, verifying checksums.
  static SnapshotStore open(const std::filesystem::path& dir, std::size_t retention = 8);

 private:
  void write_manifest() const;

  std::size_t retention_;
  std::optional<std::filesystem::path> dir_;
  std::vector<SnapshotPtr> snapshots_;
  std::vector<std::uint32_t> crcs_;
};

std::string snapshot_file_name(std::uint64_t version);

// Mean multi-task loss of one request and, when `train` is set, its gradients
// accumulated into the model parameters.
double request_loss(UserModel<float>& model, const Request& r, std::span<const float> task_weights, bool train);

class Trainer {
 public:
  Trainer(TowerConfig tower, TrainConfig train);

  const TrainConfig& config() const noexcept { return cfg_; }
  UserModel<float>& model() noexcept { return model_; }

  /// One pass in event order over `days`; publishes version 1.
  SnapshotPtr train_initial(std::span<const DayData* const> days, SnapshotStore& store);
  /// Continues from the latest snapshot over `day` only; publishes version + 1.
  /// Throws StalenessError unless day == trained_through_day(latest) + cadence.
  SnapshotPtr recurring_update(SnapshotStore& store, const DayData& day);

  /// Mean loss over a day without updating anything.
  double mean_loss(const DayData& day) const;

 private:
  void train_day(const DayData& day);
  void step();
  void adopt(const ModelSnapshot& s);

  TowerConfig tower_;
  TrainConfig cfg_;
  UserModel<float> model_;
  std::vector<float> task_weights_;
  std::vector<std::vector<float>> m_, v_;
  std::uint64_t steps_ = 0;
  std::uint64_t model_version_ = 0;  // version the in-memory weights correspond to
  std::size_t pending_ = 0;
};

/// Per-task NE of the upstream model's predictions over `days`.
std::vector<double> evaluate(const ModelSnapshot& s, std::span<const DayData* const> days);

}  // namespace sum
