// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace sum {

enum class ExtractorKind { Mlp, DotCompression, Dcn, Mixer };

std::string_view to_string(ExtractorKind k);
ExtractorKind extractor_kind_from_string(std::string_view s);

struct ExtractorSpec {
  ExtractorKind kind = ExtractorKind::Mlp;
  std::size_t tokens = 1;
};

// One interaction module: parallel extractors, optional dense re-injection,
// and a residual token block.
struct LayerSpec {
  std::vector<ExtractorSpec> extractors;
  std::size_t residual_tokens = 0;
  bool concat_dense = true;
};

struct SparseFeatureSpec {
  std::string name;
  std::size_t num_buckets = 1024;  // power of two, >= 2
};

struct TowerConfig {
  std::vector<SparseFeatureSpec> sparse;
  std::size_t dense_raw = 32;
  std::size_t dense_tokens = 8;
  std::size_t dim = 16;
  std::size_t num_embeddings = 2;  // K
  std::vector<LayerSpec> layers;

  // Extractor widths.
  std::size_t mlp_hidden = 32;
  std::size_t dc_sparse_lc = 4;   // tokens after LC on the sparse side
  std::size_t dc_dense_lc = 2;    // tokens after FC on the dense side
  std::size_t dc_hidden = 32;
  std::size_t dcn_depth = 2;
  std::size_t mixer_token_hidden = 8;
  std::size_t mixer_channel_hidden = 16;
  float layer_norm_eps = 1e-5f;

  // Mix tower.
  std::size_t ad_dim = 8;
  std::size_t ad_projection = 16;
  std::size_t mix_hidden = 32;
  std::size_t num_tasks = 2;

  std::uint64_t hash_seed = 0x5eed;

  std::size_t input_tokens() const noexcept { return sparse.size(); }
  // Token count produced by layer `i`.
  std::size_t layer_output_tokens(std::size_t i) const;

  // Throws ConfigError when any structural invariant is violated.
  void validate() const;

  // Desk-scale default: 24 sparse, 32 dense inputs, D=16, K=2, three layers.
  static TowerConfig desk_default();
  // Small configuration used by gradient checks.
  static TowerConfig tiny();
};

nlohmann::json to_json(const TowerConfig& c);
// Rejects unknown keys.
TowerConfig tower_config_from_json(const nlohmann::json& j);
// Stable across runs: FNV-1a over the canonical JSON encoding.
std::uint64_t config_hash(const TowerConfig& c);

}  // namespace sum
