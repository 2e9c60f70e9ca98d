// SPDX-License-Identifier: Apache-2.0
//
// One-file run configuration for the command-line tool, and the directional
// gates checked over a set of per-seed experiment reports.
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "sum/eval_harness.hpp"
#include "sum/soap_service.hpp"

namespace sum {

struct RunConfig {
  ExperimentConfig experiment;
  ServiceConfig serving;
  std::vector<std::string> experiments = {"scheme_comparison", "pooling_ablation", "embedding_shift"};
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  std::size_t shift_pool = 3;
  std::string out = "run";
  std::uint16_t port = 7070;

  // FNV-1a 64 of the canonical JSON form (sorted keys, no comments or
  // whitespace) of the file the config was read from.
  std::uint64_t fingerprint = 0;

  void validate() const;
};

nlohmann::json to_json(const RunConfig& c);
/// Strict: unknown keys anywhere raise ConfigError. Sets `fingerprint`.
RunConfig run_config_from_json(const nlohmann::json& j);
/// Reads a JSON file that may contain // and /* */ comments.
RunConfig load_run_config(const std::filesystem::path& path);
std::uint64_t canonical_fingerprint(const nlohmann::json& j);
std::string fingerprint_hex(std::uint64_t v);

// ---- acceptance gates ------------------------------------------------------------

struct GateResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

/// Seeds on which a directional claim must hold: 4 of 5, generalised to ceil(0.8 n).
std::size_t required_seeds(std::size_t n);

/// realtime <= async <= offline_batch <= frozen <= baseline on eval NE.
bool scheme_ordering_holds(const ExperimentReport& comparison);
/// Pooled cosine above raw and pooled L2 change below raw in every slot.
bool pooling_smooths_every_slot(const ExperimentReport& shift);
/// SUM with pooling gains more eval NE over baseline than SUM without.
bool pooling_improves_eval(const ExperimentReport& ablation);
/// SUM without pooling gains less on eval than on train.
bool unpooled_gain_shrinks_on_eval(const ExperimentReport& ablation);
/// In every arm the decoy group ranks last with |mean| <= 3 stddev + `floor`;
/// in SUM arms that beat baseline every embedding group ranks above it.
bool importance_sane(const ExperimentReport& comparison, double floor, std::string* why = nullptr);

/// Evaluates every gate the given reports support. Reports are grouped by
/// experiment name; each group is judged over its seeds.
std::vector<GateResult> evaluate_gates(const std::vector<ExperimentReport>& reports);

}  // namespace sum
