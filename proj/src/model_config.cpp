// SPDX-License-Identifier: Apache-2.0
#include "sum/model_config.hpp"

#include <bit>

#include "sum/binary_io.hpp"
#include "sum/error.hpp"
#include "sum/json_util.hpp"

namespace sum {

using nlohmann::json;

std::string_view to_string(ExtractorKind k) {
  switch (k) {
    case ExtractorKind::Mlp: return "mlp";
    case ExtractorKind::DotCompression: return "dot_compression";
    case ExtractorKind::Dcn: return "dcn";
    case ExtractorKind::Mixer: return "mixer";
  }
  return "?";
}

ExtractorKind extractor_kind_from_string(std::string_view s) {
  if (s == "mlp") return ExtractorKind::Mlp;
  if (s == "dot_compression") return ExtractorKind::DotCompression;
  if (s == "dcn") return ExtractorKind::Dcn;
  if (s == "mixer") return ExtractorKind::Mixer;
  throw ConfigError("unknown extractor kind '" + std::string(s) + "'");
}

std::size_t TowerConfig::layer_output_tokens(std::size_t i) const {
  const LayerSpec& l = layers.at(i);
  std::size_t n = l.residual_tokens + (l.concat_dense ? dense_tokens : 0);
  for (const auto& e : l.extractors) n += e.tokens;
  return n;
}

void TowerConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("tower config: " + m); };
  if (sparse.empty()) fail("at least one sparse feature required");
  for (const auto& f : sparse) {
    if (f.num_buckets < 2 || !std::has_single_bit(f.num_buckets))
      fail("feature '" + f.name + "' num_buckets must be a power of two >= 2");
  }
  for (std::size_t i = 0; i < sparse.size(); ++i)
    for (std::size_t j = i + 1; j < sparse.size(); ++j)
      if (sparse[i].name == sparse[j].name) fail("duplicate sparse feature '" + sparse[i].name + "'");
  if (dim == 0 || dense_raw == 0 || dense_tokens == 0) fail("dim, dense_raw and dense_tokens must be positive");
  if (num_embeddings == 0) fail("K must be positive");
  if (num_tasks == 0) fail("at least one task required");
  if (layers.empty()) fail("at least one interaction layer required");
  if (!(input_tokens() > num_embeddings)) fail("N_0 must exceed K");
  std::size_t prev = input_tokens();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    if (l.extractors.empty()) fail("layer " + std::to_string(i) + " has no extractors");
    for (const auto& e : l.extractors)
      if (e.tokens == 0) fail("layer " + std::to_string(i) + " extractor with zero tokens");
    const std::size_t n = layer_output_tokens(i);
    if (n > prev) {
      fail("layer " + std::to_string(i) + " widens the pyramid (" + std::to_string(prev) + " -> " +
           std::to_string(n) + " tokens)");
    }
    prev = n;
  }
  if (prev != num_embeddings) {
    fail("final layer yields " + std::to_string(prev) + " tokens, expected K=" +
         std::to_string(num_embeddings));
  }
  if (mlp_hidden == 0 || dc_hidden == 0 || dc_sparse_lc == 0 || dc_dense_lc == 0 ||
      mixer_token_hidden == 0 || mixer_channel_hidden == 0 || dcn_depth == 0 || mix_hidden == 0 ||
      ad_dim == 0 || ad_projection == 0) {
    fail("hidden widths must be positive");
  }
  if (!(layer_norm_eps > 0.f)) fail("layer_norm_eps must be positive");
}

TowerConfig TowerConfig::desk_default() {
  TowerConfig c;
  for (int i = 0; i < 24; ++i) {
    char name[8];
    std::snprintf(name, sizeof name, "f%02d", i);
    c.sparse.push_back({name, 512});
  }
  using K = ExtractorKind;
  c.layers = {
      {{{K::Mlp, 4}, {K::DotCompression, 4}, {K::Mixer, 4}}, 4, true},
      {{{K::Mlp, 2}, {K::DotCompression, 2}, {K::Mixer, 2}}, 2, true},
      {{{K::Mlp, 1}, {K::DotCompression, 1}}, 0, false},
  };
  return c;
}

TowerConfig TowerConfig::tiny() {
  TowerConfig c;
  for (int i = 0; i < 8; ++i) c.sparse.push_back({"s" + std::to_string(i), 16});
  c.dense_raw = 6;
  c.dense_tokens = 4;
  c.dim = 8;
  c.num_embeddings = 2;
  using K = ExtractorKind;
  c.layers = {
      {{{K::Mlp, 1}, {K::DotCompression, 1}, {K::Mixer, 1}, {K::Dcn, 1}}, 0, true},
      {{{K::Mlp, 1}, {K::DotCompression, 1}}, 0, false},
  };
  c.mlp_hidden = 6;
  c.dc_sparse_lc = 2;
  c.dc_dense_lc = 1;
  c.dc_hidden = 5;
  c.dcn_depth = 2;
  c.mixer_token_hidden = 3;
  c.mixer_channel_hidden = 4;
  c.ad_dim = 3;
  c.ad_projection = 4;
  c.mix_hidden = 5;
  c.num_tasks = 2;
  return c;
}

json to_json(const TowerConfig& c) {
  json sparse = json::array();
  for (const auto& f : c.sparse) sparse.push_back({{"name", f.name}, {"num_buckets", f.num_buckets}});
  json layers = json::array();
  for (const auto& l : c.layers) {
    json ex = json::array();
    for (const auto& e : l.extractors) ex.push_back({{"kind", to_string(e.kind)}, {"tokens", e.tokens}});
    layers.push_back({{"extractors", ex}, {"residual_tokens", l.residual_tokens}, {"concat_dense", l.concat_dense}});
  }
  return json{{"sparse", sparse},
              {"dense_raw", c.dense_raw},
              {"dense_tokens", c.dense_tokens},
              {"dim", c.dim},
              {"num_embeddings", c.num_embeddings},
              {"layers", layers},
              {"mlp_hidden", c.mlp_hidden},
              {"dc_sparse_lc", c.dc_sparse_lc},
              {"dc_dense_lc", c.dc_dense_lc},
              {"dc_hidden", c.dc_hidden},
              {"dcn_depth", c.dcn_depth},
              {"mixer_token_hidden", c.mixer_token_hidden},
              {"mixer_channel_hidden", c.mixer_channel_hidden},
              {"layer_norm_eps", c.layer_norm_eps},
              {"ad_dim", c.ad_dim},
              {"ad_projection", c.ad_projection},
              {"mix_hidden", c.mix_hidden},
              {"num_tasks", c.num_tasks},
              {"hash_seed", c.hash_seed}};
}

TowerConfig tower_config_from_json(const json& j) {
  StrictObject o(j, "tower");
  TowerConfig d = TowerConfig::desk_default();
  TowerConfig c = d;
  if (o.has("sparse")) {
    c.sparse.clear();
    const json& arr = o.raw("sparse");
    if (arr.is_number_unsigned()) {
      // Shorthand: a count of features with generated names.
      const std::size_t n = arr.get<std::size_t>();
      for (std::size_t i = 0; i < n; ++i) {
        char name[12];
        std::snprintf(name, sizeof name, "f%02zu", i);
        c.sparse.push_back({name, 512});
      }
    } else {
      for (const auto& f : arr) {
        StrictObject fo(f, "tower.sparse[]");
        c.sparse.push_back({fo.require<std::string>("name"), fo.get<std::size_t>("num_buckets", 512)});
        fo.finish();
      }
    }
  }
  c.dense_raw = o.get("dense_raw", d.dense_raw);
  c.dense_tokens = o.get("dense_tokens", d.dense_tokens);
  c.dim = o.get("dim", d.dim);
  c.num_embeddings = o.get("num_embeddings", d.num_embeddings);
  if (o.has("layers")) {
    c.layers.clear();
    for (const auto& l : o.raw("layers")) {
      StrictObject lo(l, "tower.layers[]");
      LayerSpec spec;
      for (const auto& e : lo.raw("extractors")) {
        StrictObject eo(e, "tower.layers[].extractors[]");
        spec.extractors.push_back({extractor_kind_from_string(eo.require<std::string>("kind")),
                                   eo.require<std::size_t>("tokens")});
        eo.finish();
      }
      spec.residual_tokens = lo.get<std::size_t>("residual_tokens", 0);
      spec.concat_dense = lo.get<bool>("concat_dense", true);
      lo.finish();
      c.layers.push_back(std::move(spec));
    }
  }
  c.mlp_hidden = o.get("mlp_hidden", d.mlp_hidden);
  c.dc_sparse_lc = o.get("dc_sparse_lc", d.dc_sparse_lc);
  c.dc_dense_lc = o.get("dc_dense_lc", d.dc_dense_lc);
  c.dc_hidden = o.get("dc_hidden", d.dc_hidden);
  c.dcn_depth = o.get("dcn_depth", d.dcn_depth);
  c.mixer_token_hidden = o.get("mixer_token_hidden", d.mixer_token_hidden);
  c.mixer_channel_hidden = o.get("mixer_channel_hidden", d.mixer_channel_hidden);
  c.layer_norm_eps = o.get("layer_norm_eps", d.layer_norm_eps);
  c.ad_dim = o.get("ad_dim", d.ad_dim);
  c.ad_projection = o.get("ad_projection", d.ad_projection);
  c.mix_hidden = o.get("mix_hidden", d.mix_hidden);
  c.num_tasks = o.get("num_tasks", d.num_tasks);
  c.hash_seed = o.get("hash_seed", d.hash_seed);
  o.finish();
  c.validate();
  return c;
}

std::uint64_t config_hash(const TowerConfig& c) { return io::fnv1a64(to_json(c).dump()); }

}  // namespace sum
