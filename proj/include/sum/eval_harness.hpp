// SPDX-License-Identifier: Apache-2.0
//
// Downstream evaluation: a small logistic ranker over SUM embeddings, the
// serving-scheme comparison, the pooling ablation, the embedding-shift study
// and permutation feature importance.
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "sum/feature_store.hpp"
#include "sum/soap_service.hpp"
#include "sum/synth_data.hpp"
#include "sum/trainer.hpp"

namespace sum {

// ---- downstream model ---------------------------------------------------------

struct FeatureGroup {
  std::string name;
  std::size_t begin = 0, end = 0;  // column range
};

// Row-major design matrix with binary labels.
struct Dataset {
  std::size_t cols = 0;
  std::vector<float> x;
  std::vector<std::uint8_t> y;
  std::vector<FeatureGroup> groups;

  std::size_t rows() const { return y.size(); }
  const float* row(std::size_t i) const { return x.data() + i * cols; }
  void add_row(std::span<const float> values, bool label);
};

struct DownstreamConfig {
  double ridge = 1e-4;  // L2 penalty per example on standardised weights
  std::size_t max_iterations = 30;
  double tolerance = 1e-8;  // stop when the largest Newton step is below this
  std::vector<std::size_t> dense_subset = {0, 1, 2};
  bool include_decoy = true;
  std::size_t task = 0;

  void validate() const;
};

class LogisticModel {
 public:
  std::vector<double> mean, scale, weights;  // weights on standardised columns
  double bias = 0.0;

  double logit(const float* row) const;
  std::vector<double> predict(const Dataset& d) const;
};

/// Ridge-regularised logistic regression solved by Newton's method.
LogisticModel fit_logistic(const Dataset& d, const DownstreamConfig& cfg);
double dataset_ne(const LogisticModel& m, const Dataset& d);

struct Importance {
  std::string group;
  double mean = 0.0;    // NE increase when the group is permuted
  double stddev = 0.0;  // across repeats
};

/// Permutation importance per feature group, ranked by descending mean.
std::vector<Importance> feature_importance(const LogisticModel& m, const Dataset& d, std::size_t repeats,
                                           std::uint64_t seed);

// ---- embedding shift ----------------------------------------------------------

struct ShiftStats {
  std::size_t slot = 0;
  double mean_cosine = 0.0;
  double mean_l2_change_pct = 0.0;  // mean of | |b| - |a| | / |a|, in percent
  std::size_t pairs = 0;
  std::size_t excluded_zero_norm = 0;
};

/// Consecutive-version statistics per embedding slot. Each sequence holds one
/// user's K x D embeddings in version order. With pool > 1 every element is
/// first replaced by the mean of itself and up to pool - 1 predecessors.
std::vector<ShiftStats> embedding_shift(const std::vector<std::vector<Tensorf>>& sequences, std::size_t pool);

// ---- experiments ---------------------------------------------------------------

struct ExperimentConfig {
  DriftConfig drift;
  TowerConfig tower = TowerConfig::desk_default();
  TrainConfig train;
  StoreConfig store{.one_record_per_version = true};  // pool over distinct versions
  DownstreamConfig downstream;
  std::int32_t days = 20;
  std::int32_t train_first = 8, train_last = 15;  // downstream training span
  std::int32_t eval_first = 16, eval_last = 19;   // held-out span
  std::int32_t warmup_days = 2;                   // serving days before train_first
  std::int64_t simulated_compute_us = 2'000;
  bool recurring = true;  // false: every day is served by version 1
  std::size_t importance_repeats = 3;
  std::size_t shift_users = 500;

  void validate() const;
  /// Tower with sparse names and input widths taken from the data schema.
  TowerConfig resolved_tower() const;
  StoreConfig resolved_store() const;
  /// Copy with data and training seeds set to `seed`.
  ExperimentConfig with_seed(std::uint64_t seed) const;
};

nlohmann::json to_json(const ExperimentConfig& c);
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
/// Identifies the event stream and upstream lineage: drift, tower, train and span settings.
std::uint64_t lineage_fingerprint(const ExperimentConfig& c);

// Every snapshot published for one experiment configuration.
class Lineage {
 public:
  /// Trains v1 on the initial span and one recurring update per day up to
  /// the day before eval_last. When `cache_dir` is set, a matching cached
  /// lineage is loaded instead and a fresh one is saved there.
  static Lineage build(const ExperimentConfig& cfg, const SyntheticWorld& world,
                       const std::filesystem::path* cache_dir = nullptr,
                       const std::function<void(const std::string&)>& log = {});

  SnapshotPtr version(std::uint64_t v) const;
  /// Snapshot a fresh scheme serves on `day`: the newest one trained through day - 1.
  SnapshotPtr serving(std::int32_t day) const;
  std::uint64_t latest_version() const { return snapshots_.size(); }
  std::uint64_t fingerprint() const noexcept { return fingerprint_; }

 private:
  std::vector<SnapshotPtr> snapshots_;  // index v - 1
  bool recurring_ = true;
  std::uint64_t fingerprint_ = 0;
};

enum class ArmKind { Baseline, Frozen, OfflineBatch, Realtime, Async };
const char* to_string(ArmKind a);

struct ArmSpec {
  std::string name;
  ArmKind kind = ArmKind::Baseline;
  std::size_t pool_window = 0;  // 0: the store config's window
};

struct ArmResult {
  std::string name;
  std::string kind;
  double train_ne = 0.0, eval_ne = 0.0;
  double train_diff_pct = 0.0, eval_diff_pct = 0.0;  // relative to the baseline arm
  double mean_staleness_days = 0.0;                  // over responses carrying an embedding
  std::uint64_t cold_responses = 0;                  // responses with no embedding version
  std::vector<Importance> importance;
  std::uint64_t train_rows = 0, eval_rows = 0;
};

inline constexpr int kReportSchemaVersion = 1;

struct ExperimentReport {
  std::string experiment;
  std::uint64_t config_fingerprint = 0;
  std::uint64_t seed = 0;
  std::vector<ArmResult> arms;
  std::vector<ShiftStats> shift_raw, shift_pooled;
  std::size_t shift_pool = 0;

  const ArmResult& arm(const std::string& name) const;
  nlohmann::json to_json() const;
  static ExperimentReport from_json(const nlohmann::json& j);
  std::string to_text() const;
};

/// Builds train and eval datasets for one arm. Runs the serving scheme over
/// [train_first - warmup, eval_last] on a simulated clock.
struct ArmData {
  Dataset train, eval;
  double mean_staleness_days = 0.0;
  std::uint64_t cold_responses = 0;
};
ArmData produce_arm(const ArmSpec& arm, const ExperimentConfig& cfg, const Lineage& lineage,
                    const SyntheticWorld& world);

/// Baseline, frozen, offline batch, realtime and async.
ExperimentReport run_scheme_comparison(const ExperimentConfig& cfg, const Lineage& lineage,
                                       const SyntheticWorld& world);
/// Baseline, SUM without pooling (P = 1) and SUM with P = 3, all realtime.
ExperimentReport run_pooling_ablation(const ExperimentConfig& cfg, const Lineage& lineage,
                                      const SyntheticWorld& world);
/// Raw versus pooled consecutive-version shift over the snapshots that serve
/// [train_first, eval_last], with each sampled user's features held fixed.
ExperimentReport embedding_shift_report(const ExperimentConfig& cfg, const Lineage& lineage,
                                        const SyntheticWorld& world, std::size_t pool);

}  // namespace sum
