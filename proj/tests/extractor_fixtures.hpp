// SPDX-License-Identifier: Apache-2.0
//
// Randomly initialised extractor instances in double precision, shared by the
// unit tests and the acceptance runner.
#pragma once

#include <deque>
#include <random>
#include <string>
#include <vector>

#include "sum/autograd.hpp"
#include "sum/extractors.hpp"
#include "sum/features.hpp"
#include "sum/model_config.hpp"

namespace sum::fixtures {

inline Tensord random_tensor(std::size_t r, std::size_t c, std::mt19937_64& rng, double lo = -1.0,
                             double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensord t(r, c);
  for (auto& v : t.data()) v = u(rng);
  return t;
}

// Owns parameters at stable addresses.
class ParamSet {
 public:
  explicit ParamSet(std::uint64_t seed) : rng_(seed) {}

  Parameter<double>& add(const std::string& name, std::size_t r, std::size_t c, double lo = -0.7,
                         double hi = 0.7) {
    params_.emplace_back(name, random_tensor(r, c, rng_, lo, hi));
    return params_.back();
  }
  Tensord input(std::size_t r, std::size_t c) { return random_tensor(r, c, rng_); }

  std::vector<Parameter<double>*> pointers() {
    std::vector<Parameter<double>*> out;
    for (auto& p : params_) out.push_back(&p);
    return out;
  }

 private:
  std::mt19937_64 rng_;
  std::deque<Parameter<double>> params_;
};

// sum(out * probe) with a fixed random probe.
inline Var<double> probe_sum(Var<double> out, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return ops::sum(ops::mul(out, out.tape->constant(random_tensor(out.rows(), out.cols(), rng))));
}

struct MlpParams {
  Parameter<double>*w1, *b1, *w2, *b2;
  extract::MlpVars<double> bind(Tape<double>& t) const {
    return {t.bind(*w1), t.bind(*b1), t.bind(*w2), t.bind(*b2)};
  }
};

inline MlpParams make_mlp(ParamSet& ps, const std::string& p, std::size_t in, std::size_t hidden,
                          std::size_t out) {
  return {&ps.add(p + "/w1", in, hidden), &ps.add(p + "/b1", 1, hidden), &ps.add(p + "/w2", hidden, out),
          &ps.add(p + "/b2", 1, out)};
}

struct MlpCase {
  ParamSet ps{11};
  Tensord x = ps.input(1, 12);
  MlpParams p = make_mlp(ps, "mlp", 12, 7, 6);
  Var<double> loss(Tape<double>& t) { return probe_sum(extract::mlp(t.constant(x), p.bind(t)), 1); }
};

struct DotBranchParams {
  Parameter<double>*lc, *fc_w, *fc_b;
  MlpParams mlp;
  extract::DotBranchVars<double> bind(Tape<double>& t) const {
    return {t.bind(*lc), t.bind(*fc_w), t.bind(*fc_b), mlp.bind(t)};
  }
};

// D=4, N=5 sparse tokens, 3 dense tokens, M=2 output tokens.
struct DotCompressionCase {
  static constexpr std::size_t D = 4, N = 5, Nd = 3, M = 2, L = 2, Ld = 1, H = 6;
  ParamSet ps{12};
  Tensord x = ps.input(D, N);
  Tensord xd = ps.input(D, Nd);
  DotBranchParams y = branch("y", D * M);
  DotBranchParams z = branch("z", N * M);

  DotBranchParams branch(const std::string& p, std::size_t out) {
    DotBranchParams b{&ps.add(p + "/lc", L, N), &ps.add(p + "/fc_w", Nd * D, Ld * D),
                      &ps.add(p + "/fc_b", 1, Ld * D), {}};
    b.mlp = make_mlp(ps, p + "/mlp", (L + Ld) * D, H, out);
    return b;
  }
  Var<double> forward(Tape<double>& t, Var<double> xv) {
    return extract::dot_compression_attention(xv, t.constant(xd), {y.bind(t), z.bind(t)}, M);
  }
  Var<double> loss(Tape<double>& t) { return probe_sum(forward(t, t.constant(x)), 2); }
};

struct DcnCase {
  static constexpr std::size_t n = 10, depth = 2;
  ParamSet ps{13};
  Tensord x0 = ps.input(1, n);
  std::vector<std::pair<Parameter<double>*, Parameter<double>*>> layers = make();

  std::vector<std::pair<Parameter<double>*, Parameter<double>*>> make() {
    std::vector<std::pair<Parameter<double>*, Parameter<double>*>> out;
    for (std::size_t k = 0; k < depth; ++k)
      out.emplace_back(&ps.add("w" + std::to_string(k), n, n, -0.4, 0.4), &ps.add("b" + std::to_string(k), 1, n));
    return out;
  }
  Var<double> forward(Tape<double>& t, Var<double> x) {
    std::vector<extract::CrossLayerVars<double>> v;
    for (auto [w, b] : layers) v.push_back({t.bind(*w), t.bind(*b)});
    return extract::dcn_cross_stack(x, v);
  }
  Var<double> loss(Tape<double>& t) { return probe_sum(forward(t, t.constant(x0)), 3); }
};

struct MixerCase {
  static constexpr std::size_t N = 6, D = 5, Ht = 4, Hc = 7;
  ParamSet ps{14};
  Tensord x = ps.input(N, D);
  Parameter<double>* p[8] = {&ps.add("ln1_gain", 1, D, 0.5, 1.5), &ps.add("ln1_shift", 1, D),
                             &ps.add("token_w1", Ht, N),         &ps.add("token_w2", N, Ht),
                             &ps.add("ln2_gain", 1, D, 0.5, 1.5), &ps.add("ln2_shift", 1, D),
                             &ps.add("channel_w3", D, Hc),       &ps.add("channel_w4", Hc, D)};
  extract::MixerVars<double> bind(Tape<double>& t) const {
    return {t.bind(*p[0]), t.bind(*p[1]), t.bind(*p[2]), t.bind(*p[3]),
            t.bind(*p[4]), t.bind(*p[5]), t.bind(*p[6]), t.bind(*p[7])};
  }
  Var<double> forward(Tape<double>& t, Var<double> xv) { return extract::mlp_mixer_block(xv, bind(t), 1e-5); }
  Var<double> loss(Tape<double>& t) { return probe_sum(forward(t, t.constant(x)), 4); }
};

// Random features valid for `cfg`; each sparse feature gets 1..3 ids.
inline UserFeatures random_features(const TowerConfig& cfg, std::mt19937_64& rng) {
  UserFeatures f;
  std::uniform_int_distribution<std::uint64_t> id(0, 1u << 20);
  std::uniform_int_distribution<int> count(1, 3);
  for (const auto& s : cfg.sparse) {
    SparseFeature sf{s.name, {}};
    for (int i = count(rng); i > 0; --i) sf.ids.push_back(id(rng));
    f.sparse.push_back(std::move(sf));
  }
  std::normal_distribution<float> g(0.f, 1.f);
  for (std::size_t i = 0; i < cfg.dense_raw; ++i) f.dense.push_back(g(rng));
  return f;
}

}  // namespace sum::fixtures
