// SPDX-License-Identifier: Apache-2.0
//
// Upstream user model: hashed embedding tables, the pyramid user tower and a
// plain MLP mix tower producing one logit per task.
#pragma once

#include <cmath>
#include <memory>
#include <random>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "sum/autograd.hpp"
#include "sum/error.hpp"
#include "sum/extractors.hpp"
#include "sum/features.hpp"
#include "sum/model_config.hpp"

namespace sum {

// Output of the initial embedding layers.
template <typename T>
struct EmbeddedFeatures {
  Var<T> sparse;  // [N_0 x D]
  Var<T> dense;   // [N_dense x D]
  std::vector<bool> covered;  // false where a sparse feature had no ids
};

template <typename T>
class UserModel {
 public:
  // Random initialisation: weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases
  // zero, layer-norm gain one.
  UserModel(TowerConfig config, std::uint64_t init_seed) : cfg_(std::move(config)) {
    cfg_.validate();
    std::mt19937_64 rng(init_seed);
    build([&](const std::string& name, std::size_t r, std::size_t c, Init init, std::size_t fan_in) {
      Tensor<T> t(r, c);
      if (init == Init::Uniform) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        std::uniform_real_distribution<double> u(-bound, bound);
        for (auto& v : t.data()) v = static_cast<T>(u(rng));
      } else if (init == Init::One) {
        t.fill(T{1});
      }
      return Parameter<T>(name, std::move(t));
    });
  }

  // Rebuild from named tensors (snapshot load, precision cast).
  template <typename U>
  UserModel(TowerConfig config, const std::vector<Parameter<U>>& source) : cfg_(std::move(config)) {
    cfg_.validate();
    std::size_t next = 0;
    build([&](const std::string& name, std::size_t r, std::size_t c, Init, std::size_t) {
      if (next >= source.size()) throw ConfigError("snapshot is missing parameter '" + name + "'");
      const auto& src = source[next++];
      if (src.name != name || src.value.rows() != r || src.value.cols() != c) {
        throw ConfigError("snapshot parameter '" + src.name + "' " + src.value.shape_str() +
                          " does not match expected '" + name + "' " +
                          Tensor<T>::shape_string(r, c));
      }
      return Parameter<T>(name, src.value.template cast<T>());
    });
    if (next != source.size()) throw ConfigError("snapshot has unexpected extra parameters");
  }

  template <typename U>
  UserModel<U> cast() const {
    return UserModel<U>(cfg_, params_);
  }

  const TowerConfig& config() const noexcept { return cfg_; }
  std::vector<Parameter<T>>& parameters() noexcept { return params_; }
  const std::vector<Parameter<T>>& parameters() const noexcept { return params_; }
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }
  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  // Trainable forward passes (gradients flow into parameters).
  EmbeddedFeatures<T> embed_features(Tape<T>& tape, const UserFeatures& f) {
    return embed_impl(*this, tape, f);
  }
  Var<T> tower(Tape<T>& tape, const UserFeatures& f) { return tower_impl(*this, tape, f); }
  Var<T> mix(Tape<T>& tape, Var<T> user_embeddings, Var<T> ad_features) {
    return mix_impl(*this, tape, user_embeddings, ad_features);
  }

  // Read-only forward passes; safe to call concurrently on a shared model.
  EmbeddedFeatures<T> embed_features(Tape<T>& tape, const UserFeatures& f) const {
    return embed_impl(*this, tape, f);
  }
  Var<T> tower(Tape<T>& tape, const UserFeatures& f) const { return tower_impl(*this, tape, f); }
  Var<T> mix(Tape<T>& tape, Var<T> user_embeddings, Var<T> ad_features) const {
    return mix_impl(*this, tape, user_embeddings, ad_features);
  }

  // K x D user embeddings.
  Tensor<T> embed(const UserFeatures& f) const {
    Tape<T> tape(false);
    return tower(tape, f).value();
  }

  // Interaction module `layer` applied to explicit token blocks.
  Var<T> interaction(Tape<T>& tape, std::size_t layer, Var<T> tokens, Var<T> dense) {
    return layer_impl(*this, tape, layer, tokens, dense);
  }

 private:
  enum class Init { Uniform, Zero, One };

  struct MlpIdx {
    std::size_t w1, b1, w2, b2;
  };
  struct DotBranchIdx {
    std::size_t lc, fc_w, fc_b;
    MlpIdx mlp;
  };
  struct ExtractorIdx {
    ExtractorKind kind;
    std::size_t tokens;
    MlpIdx mlp{};                     // Mlp
    DotBranchIdx dot_y{}, dot_z{};    // DotCompression
    std::vector<std::size_t> cross;   // Dcn: w, b pairs
    std::size_t head_w = 0, head_b = 0;  // Dcn head / Mixer LC head (w only)
    std::size_t mixer[8]{};           // Mixer block
  };
  struct LayerIdx {
    std::size_t in_tokens;
    std::vector<ExtractorIdx> extractors;
    std::size_t residual = 0;
    bool has_residual = false;
  };

  template <typename Make>
  void build(Make&& make) {
    const std::size_t d = cfg_.dim;
    auto add = [&](const std::string& name, std::size_t r, std::size_t c, Init init,
                   std::size_t fan_in) {
      params_.push_back(make(name, r, c, init, fan_in));
      return params_.size() - 1;
    };
    auto add_mlp = [&](const std::string& p, std::size_t in, std::size_t hidden, std::size_t out) {
      MlpIdx m;
      m.w1 = add(p + "/w1", in, hidden, Init::Uniform, in);
      m.b1 = add(p + "/b1", 1, hidden, Init::Zero, 1);
      m.w2 = add(p + "/w2", hidden, out, Init::Uniform, hidden);
      m.b2 = add(p + "/b2", 1, out, Init::Zero, 1);
      return m;
    };

    for (std::size_t i = 0; i < cfg_.sparse.size(); ++i) {
      const auto& f = cfg_.sparse[i];
      tables_.push_back(add("emb/" + f.name, f.num_buckets, d, Init::Uniform, d));
      index_.emplace(f.name, i);
    }
    dense_w_ = add("dense/w", cfg_.dense_raw, cfg_.dense_tokens * d, Init::Uniform, cfg_.dense_raw);
    dense_b_ = add("dense/b", 1, cfg_.dense_tokens * d, Init::Zero, 1);

    std::size_t n_in = cfg_.input_tokens();
    for (std::size_t li = 0; li < cfg_.layers.size(); ++li) {
      const LayerSpec& spec = cfg_.layers[li];
      LayerIdx layer;
      layer.in_tokens = n_in;
      const std::string lp = "layer" + std::to_string(li);
      for (std::size_t ei = 0; ei < spec.extractors.size(); ++ei) {
        const ExtractorSpec& es = spec.extractors[ei];
        const std::string p = lp + "/" + std::string(to_string(es.kind)) + std::to_string(ei);
        ExtractorIdx ex{es.kind, es.tokens};
        switch (es.kind) {
          case ExtractorKind::Mlp:
            ex.mlp = add_mlp(p, n_in * d, cfg_.mlp_hidden, es.tokens * d);
            break;
          case ExtractorKind::DotCompression: {
            auto branch = [&](const std::string& bp, std::size_t out) {
              DotBranchIdx b;
              b.lc = add(bp + "/lc", cfg_.dc_sparse_lc, n_in, Init::Uniform, n_in);
              const std::size_t fin = cfg_.dense_tokens * d;
              b.fc_w = add(bp + "/fc_w", fin, cfg_.dc_dense_lc * d, Init::Uniform, fin);
              b.fc_b = add(bp + "/fc_b", 1, cfg_.dc_dense_lc * d, Init::Zero, 1);
              b.mlp = add_mlp(bp + "/mlp", (cfg_.dc_sparse_lc + cfg_.dc_dense_lc) * d, cfg_.dc_hidden, out);
              return b;
            };
            ex.dot_y = branch(p + "/y", d * es.tokens);
            ex.dot_z = branch(p + "/z", n_in * es.tokens);
            break;
          }
          case ExtractorKind::Dcn: {
            const std::size_t n = n_in * d;
            for (std::size_t k = 0; k < cfg_.dcn_depth; ++k) {
              ex.cross.push_back(add(p + "/cross" + std::to_string(k) + "/w", n, n, Init::Uniform, n));
              ex.cross.push_back(add(p + "/cross" + std::to_string(k) + "/b", 1, n, Init::Zero, 1));
            }
            ex.head_w = add(p + "/head_w", n, es.tokens * d, Init::Uniform, n);
            ex.head_b = add(p + "/head_b", 1, es.tokens * d, Init::Zero, 1);
            break;
          }
          case ExtractorKind::Mixer: {
            const std::size_t ht = cfg_.mixer_token_hidden, hc = cfg_.mixer_channel_hidden;
            ex.mixer[0] = add(p + "/ln1_gain", 1, d, Init::One, 1);
            ex.mixer[1] = add(p + "/ln1_shift", 1, d, Init::Zero, 1);
            ex.mixer[2] = add(p + "/token_w1", ht, n_in, Init::Uniform, n_in);
            ex.mixer[3] = add(p + "/token_w2", n_in, ht, Init::Uniform, ht);
            ex.mixer[4] = add(p + "/ln2_gain", 1, d, Init::One, 1);
            ex.mixer[5] = add(p + "/ln2_shift", 1, d, Init::Zero, 1);
            ex.mixer[6] = add(p + "/channel_w3", d, hc, Init::Uniform, d);
            ex.mixer[7] = add(p + "/channel_w4", hc, d, Init::Uniform, hc);
            ex.head_w = add(p + "/head", es.tokens, n_in, Init::Uniform, n_in);
            break;
          }
        }
        layer.extractors.push_back(std::move(ex));
      }
      if (spec.residual_tokens > 0) {
        layer.residual = add(lp + "/residual", spec.residual_tokens, n_in, Init::Uniform, n_in);
        layer.has_residual = true;
      }
      layers_.push_back(std::move(layer));
      n_in = cfg_.layer_output_tokens(li);
    }

    const std::size_t user_in = cfg_.num_embeddings * d;
    mix_ad_w_ = add("mix/ad_w", cfg_.ad_dim, cfg_.ad_projection, Init::Uniform, cfg_.ad_dim);
    mix_ad_b_ = add("mix/ad_b", 1, cfg_.ad_projection, Init::Zero, 1);
    const std::size_t fan = user_in + cfg_.ad_projection;
    mix_user_w_ = add("mix/user_w", user_in, cfg_.mix_hidden, Init::Uniform, fan);
    mix_proj_w_ = add("mix/proj_w", cfg_.ad_projection, cfg_.mix_hidden, Init::Uniform, fan);
    mix_b1_ = add("mix/b1", 1, cfg_.mix_hidden, Init::Zero, 1);
    mix_out_w_ = add("mix/out_w", cfg_.mix_hidden, cfg_.num_tasks, Init::Uniform, cfg_.mix_hidden);
    mix_out_b_ = add("mix/out_b", 1, cfg_.num_tasks, Init::Zero, 1);
  }

  template <typename Self>
  static EmbeddedFeatures<T> embed_impl(Self& self, Tape<T>& tape, const UserFeatures& f) {
    const TowerConfig& cfg = self.cfg_;
    if (f.dense.size() != cfg.dense_raw) {
      throw ConfigError("dense feature length " + std::to_string(f.dense.size()) +
                        " does not match configured " + std::to_string(cfg.dense_raw));
    }
    if (f.sparse.size() != cfg.sparse.size()) {
      throw ConfigError("got " + std::to_string(f.sparse.size()) + " sparse features, model expects " +
                        std::to_string(cfg.sparse.size()));
    }
    std::vector<const SparseFeature*> by_slot(cfg.sparse.size(), nullptr);
    for (std::size_t i = 0; i < f.sparse.size(); ++i) {
      std::size_t slot = i;
      if (f.sparse[i].name != cfg.sparse[i].name) {
        auto it = self.index_.find(f.sparse[i].name);
        if (it == self.index_.end()) throw ConfigError("unknown sparse feature '" + f.sparse[i].name + "'");
        slot = it->second;
      }
      if (by_slot[slot]) throw ConfigError("sparse feature '" + f.sparse[i].name + "' given twice");
      by_slot[slot] = &f.sparse[i];
    }

    EmbeddedFeatures<T> out;
    std::vector<Var<T>> tokens;
    tokens.reserve(cfg.sparse.size());
    out.covered.resize(cfg.sparse.size());
    std::vector<std::size_t> rows;
    for (std::size_t s = 0; s < cfg.sparse.size(); ++s) {
      const auto& spec = cfg.sparse[s];
      rows.clear();
      for (std::uint64_t id : by_slot[s]->ids)
        rows.push_back(bucket_of(id, cfg.hash_seed + s, spec.num_buckets));
      out.covered[s] = !rows.empty();
      tokens.push_back(ops::gather_mean(tape.bind(self.params_[self.tables_[s]]), rows));
    }
    out.sparse = ops::concat_rows(std::span<const Var<T>>(tokens));

    Tensor<T> raw(1, cfg.dense_raw);
    for (std::size_t i = 0; i < cfg.dense_raw; ++i) raw[i] = static_cast<T>(f.dense[i]);
    Var<T> proj = ops::linear(tape.constant(std::move(raw)), tape.bind(self.params_[self.dense_w_]),
                              tape.bind(self.params_[self.dense_b_]));
    out.dense = ops::reshape(proj, cfg.dense_tokens, cfg.dim);
    return out;
  }

  template <typename Self>
  static Var<T> layer_impl(Self& self, Tape<T>& tape, std::size_t li, Var<T> x, Var<T> dense) {
    const TowerConfig& cfg = self.cfg_;
    const LayerIdx& layer = self.layers_.at(li);
    const std::size_t d = cfg.dim;
    if (x.rows() != layer.in_tokens || x.cols() != d) {
      throw DimensionError("layer " + std::to_string(li) + " expects " +
                           Tensor<T>::shape_string(layer.in_tokens, d) + " tokens, got " +
                           x.value().shape_str());
    }
    auto P = [&](std::size_t i) { return tape.bind(self.params_[i]); };
    auto mlp_vars = [&](const MlpIdx& m) {
      return extract::MlpVars<T>{P(m.w1), P(m.b1), P(m.w2), P(m.b2)};
    };
    std::vector<Var<T>> blocks;
    for (const ExtractorIdx& ex : layer.extractors) {
      switch (ex.kind) {
        case ExtractorKind::Mlp:
          blocks.push_back(ops::reshape(extract::mlp(ops::flatten(x), mlp_vars(ex.mlp)), ex.tokens, d));
          break;
        case ExtractorKind::DotCompression: {
          auto branch = [&](const DotBranchIdx& b) {
            return extract::DotBranchVars<T>{P(b.lc), P(b.fc_w), P(b.fc_b), mlp_vars(b.mlp)};
          };
          extract::DotCompressionVars<T> v{branch(ex.dot_y), branch(ex.dot_z)};
          Var<T> cols = extract::dot_compression_attention(ops::transpose(x), ops::transpose(dense), v,
                                                           ex.tokens);
          blocks.push_back(ops::transpose(cols));
          break;
        }
        case ExtractorKind::Dcn: {
          std::vector<extract::CrossLayerVars<T>> cross;
          for (std::size_t k = 0; k + 1 < ex.cross.size(); k += 2)
            cross.push_back({P(ex.cross[k]), P(ex.cross[k + 1])});
          Var<T> flat = extract::dcn_cross_stack(ops::flatten(x), cross);
          blocks.push_back(ops::reshape(ops::linear(flat, P(ex.head_w), P(ex.head_b)), ex.tokens, d));
          break;
        }
        case ExtractorKind::Mixer: {
          extract::MixerVars<T> v{P(ex.mixer[0]), P(ex.mixer[1]), P(ex.mixer[2]), P(ex.mixer[3]),
                                  P(ex.mixer[4]), P(ex.mixer[5]), P(ex.mixer[6]), P(ex.mixer[7])};
          Var<T> mixed = extract::mlp_mixer_block(x, v, static_cast<T>(cfg.layer_norm_eps));
          blocks.push_back(ops::weighted_row_sum(mixed, P(ex.head_w)));
          break;
        }
      }
    }
    if (cfg.layers[li].concat_dense) blocks.push_back(dense);
    if (layer.has_residual) blocks.push_back(ops::weighted_row_sum(x, P(layer.residual)));
    return ops::concat_rows(std::span<const Var<T>>(blocks));
  }

  template <typename Self>
  static Var<T> tower_impl(Self& self, Tape<T>& tape, const UserFeatures& f) {
    EmbeddedFeatures<T> e = embed_impl(self, tape, f);
    Var<T> x = e.sparse;
    for (std::size_t li = 0; li < self.layers_.size(); ++li) x = layer_impl(self, tape, li, x, e.dense);
    return x;
  }

  // user_embeddings [K x D], ad_features [B x ad_dim] -> logits [B x T].
  template <typename Self>
  static Var<T> mix_impl(Self& self, Tape<T>& tape, Var<T> user, Var<T> ads) {
    const TowerConfig& cfg = self.cfg_;
    if (user.rows() != cfg.num_embeddings || user.cols() != cfg.dim) {
      throw DimensionError("mix tower expects user embeddings " +
                           Tensor<T>::shape_string(cfg.num_embeddings, cfg.dim) + ", got " +
                           user.value().shape_str());
    }
    if (ads.cols() != cfg.ad_dim) {
      throw DimensionError("mix tower expects ad features with " + std::to_string(cfg.ad_dim) +
                           " columns, got " + ads.value().shape_str());
    }
    auto P = [&](std::size_t i) { return tape.bind(self.params_[i]); };
    Var<T> hu = ops::linear(ops::flatten(user), P(self.mix_user_w_), P(self.mix_b1_));  // [1 x H]
    Var<T> proj = ops::linear(ads, P(self.mix_ad_w_), P(self.mix_ad_b_));             // [B x A]
    Var<T> ones = tape.constant(Tensor<T>(ads.rows(), 1, T{1}));
    Var<T> h = ops::relu(ops::add(ops::matmul(ones, hu), ops::matmul(proj, P(self.mix_proj_w_))));
    return ops::linear(h, P(self.mix_out_w_), P(self.mix_out_b_));
  }

  template <typename U>
  friend class UserModel;

  TowerConfig cfg_;
  std::vector<Parameter<T>> params_;
  std::vector<std::size_t> tables_;
  std::unordered_map<std::string, std::size_t> index_;
  std::size_t dense_w_ = 0, dense_b_ = 0;
  std::vector<LayerIdx> layers_;
  std::size_t mix_ad_w_ = 0, mix_ad_b_ = 0, mix_user_w_ = 0, mix_proj_w_ = 0, mix_b1_ = 0;
  std::size_t mix_out_w_ = 0, mix_out_b_ = 0;
};

/// L = -sum_t w_t [y log p + (1-y) log(1-p)], averaged over rows.
template <typename T>
Var<T> multi_task_loss(Var<T> logits, const Tensor<T>& labels, std::span<const T> task_weights) {
  for (T w : task_weights)
    if (!(w > T{0})) throw Error("multi_task_loss: task weights must be positive");
  return ops::multi_task_bce(logits, labels, task_weights);
}

}  // namespace sum
