// SPDX-License-Identifier: Apache-2.0
#include "sum/synth_data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>

#include "sum/binary_io.hpp"
#include "sum/error.hpp"
#include "sum/json_util.hpp"

namespace sum {

namespace {

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// Independent stream per (seed, purpose, a, b).
std::mt19937_64 stream(std::uint64_t seed, std::uint64_t purpose, std::uint64_t a = 0, std::uint64_t b = 0) {
  std::uint64_t h = mix64(seed);
  h = mix64(h ^ purpose);
  h = mix64(h ^ a);
  h = mix64(h ^ b);
  std::seed_seq seq{static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(h >> 32)};
  return std::mt19937_64(seq);
}

enum Purpose : std::uint64_t {
  kCentres = 1,
  kPersonal,
  kAds,
  kDenseProj,
  kActivity,
  kInitial,
  kTransition,
  kUserDay,
  kEvents,
  kCalibration,
};

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

std::vector<double> gaussian_vec(std::mt19937_64& rng, std::size_t n, double sd) {
  std::normal_distribution<double> g(0.0, sd);
  std::vector<double> v(n);
  for (auto& x : v) x = g(rng);
  return v;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

constexpr std::uint64_t kFreshIdBase = 1ULL << 40;

}  // namespace

void DriftConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("drift config: " + m); };
  if (!(churn >= 0.0 && churn <= 1.0)) fail("churn must lie in [0, 1]");
  if (!(drift >= 0.0)) fail("drift must be >= 0");
  if (!(interest_switch_rate >= 0.0 && interest_switch_rate <= 1.0)) fail("interest_switch_rate must lie in [0, 1]");
  if (!(label_noise >= 0.0) || !(dense_noise >= 0.0)) fail("noise levels must be >= 0");
  if (num_users == 0 || num_ads == 0 || impressions_per_request == 0) fail("users, ads and impressions must be positive");
  if (latent_dim < 2 || num_clusters == 0 || variants == 0) fail("latent_dim >= 2, clusters and variants positive");
  if (num_sparse() == 0) fail("at least one sparse feature");
  if (dense_dim < 2 || ad_dim == 0) fail("dense_dim >= 2 and ad_dim > 0 required");
  if (base_rates.empty()) fail("at least one task");
  for (double r : base_rates)
    if (!(r > 0.0 && r < 1.0)) fail("base rates must lie in (0, 1)");
}

nlohmann::json to_json(const DriftConfig& c) {
  return {{"num_users", c.num_users},
          {"num_ads", c.num_ads},
          {"requests_per_day", c.requests_per_day},
          {"impressions_per_request", c.impressions_per_request},
          {"churn", c.churn},
          {"drift", c.drift},
          {"interest_switch_rate", c.interest_switch_rate},
          {"label_noise", c.label_noise},
          {"seed", c.seed},
          {"latent_dim", c.latent_dim},
          {"num_clusters", c.num_clusters},
          {"variants", c.variants},
          {"cluster_features", c.cluster_features},
          {"multi_id_features", c.multi_id_features},
          {"personal_features", c.personal_features},
          {"dense_dim", c.dense_dim},
          {"ad_dim", c.ad_dim},
          {"dense_noise", c.dense_noise},
          {"personal_scale", c.personal_scale},
          {"signal_scale", c.signal_scale},
          {"base_rates", c.base_rates}};
}

DriftConfig drift_config_from_json(const nlohmann::json& j) {
  StrictObject o(j, "data");
  DriftConfig d, c;
  c.num_users = o.get("num_users", d.num_users);
  c.num_ads = o.get("num_ads", d.num_ads);
  c.requests_per_day = o.get("requests_per_day", d.requests_per_day);
  c.impressions_per_request = o.get("impressions_per_request", d.impressions_per_request);
  c.churn = o.get("churn", d.churn);
  c.drift = o.get("drift", d.drift);
  c.interest_switch_rate = o.get("interest_switch_rate", d.interest_switch_rate);
  c.label_noise = o.get("label_noise", d.label_noise);
  c.seed = o.get("seed", d.seed);
  c.latent_dim = o.get("latent_dim", d.latent_dim);
  c.num_clusters = o.get("num_clusters", d.num_clusters);
  c.variants = o.get("variants", d.variants);
  c.cluster_features = o.get("cluster_features", d.cluster_features);
  c.multi_id_features = o.get("multi_id_features", d.multi_id_features);
  c.personal_features = o.get("personal_features", d.personal_features);
  c.dense_dim = o.get("dense_dim", d.dense_dim);
  c.ad_dim = o.get("ad_dim", d.ad_dim);
  c.dense_noise = o.get("dense_noise", d.dense_noise);
  c.personal_scale = o.get("personal_scale", d.personal_scale);
  c.signal_scale = o.get("signal_scale", d.signal_scale);
  c.base_rates = o.get("base_rates", d.base_rates);
  o.finish();
  c.validate();
  return c;
}

std::size_t DayData::event_count() const {
  std::size_t n = 0;
  for (const auto& r : requests) n += r.events.size();
  return n;
}

// World state in effect during one day.
struct SyntheticWorld::DayState {
  std::vector<std::uint16_t> cluster;            // per user
  std::vector<std::vector<double>> rotation;     // latent x latent, cumulative
  std::vector<std::uint64_t> vocab;              // [feature][cluster][variant]
  std::vector<std::uint64_t> personal_ids;       // [personal feature][user]
  std::uint64_t next_fresh = kFreshIdBase;
  // Per (user, day) draws.
  std::vector<float> dense_noise;                // [user][dense_dim]
  std::vector<double> logit_offset;              // per user
  std::vector<std::int64_t> extra_id;            // [user][multi feature], -1 for none
};

SyntheticWorld::SyntheticWorld(DriftConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  const std::size_t L = cfg_.latent_dim;
  {
    auto rng = stream(cfg_.seed, kCentres);
    for (std::size_t c = 0; c < cfg_.num_clusters; ++c) centres_.push_back(gaussian_vec(rng, L, 0.35));
  }
  {
    auto rng = stream(cfg_.seed, kPersonal);
    for (std::size_t u = 0; u < cfg_.num_users; ++u)
      personal_.push_back(gaussian_vec(rng, L, 0.35 * cfg_.personal_scale));
  }
  {
    auto rng = stream(cfg_.seed, kAds);
    const auto mean = gaussian_vec(rng, L, 0.45);
    std::vector<std::vector<double>> proj;
    for (std::size_t i = 0; i < cfg_.ad_dim; ++i) proj.push_back(gaussian_vec(rng, L, 1.0 / std::sqrt(double(L))));
    for (std::size_t j = 0; j < cfg_.num_ads; ++j) {
      auto a = gaussian_vec(rng, L, 0.3);
      for (std::size_t i = 0; i < L; ++i) a[i] += mean[i];
      std::vector<float> f(cfg_.ad_dim);
      for (std::size_t i = 0; i < cfg_.ad_dim; ++i) f[i] = static_cast<float>(dot(proj[i], a));
      ads_.push_back(std::move(a));
      ad_feats_.push_back(std::move(f));
    }
  }
  {
    auto rng = stream(cfg_.seed, kDenseProj);
    for (std::size_t i = 0; i + 1 < cfg_.dense_dim; ++i)
      dense_proj_.push_back(gaussian_vec(rng, L, 1.0 / std::sqrt(double(L))));
  }
  {
    auto rng = stream(cfg_.seed, kActivity);
    std::lognormal_distribution<double> ln(0.0, 0.75);
    for (std::size_t u = 0; u < cfg_.num_users; ++u) activity_.push_back(ln(rng));
  }

  // Per-task bias so that the day-0 expected rate matches the base rate.
  auto rng = stream(cfg_.seed, kCalibration);
  std::discrete_distribution<std::size_t> pick_user(activity_.begin(), activity_.end());
  std::uniform_int_distribution<std::uint32_t> pick_ad(0, static_cast<std::uint32_t>(cfg_.num_ads - 1));
  std::vector<double> score;
  for (int i = 0; i < 20000; ++i) {
    const std::size_t u = pick_user(rng);
    score.push_back(cfg_.signal_scale * dot(user_latent(u, 0), ads_[pick_ad(rng)]) + logit_offset(u, 0));
  }
  for (double rate : cfg_.base_rates) {
    double lo = -30, hi = 30;
    for (int it = 0; it < 100; ++it) {
      const double mid = 0.5 * (lo + hi);
      double m = 0;
      for (double s : score) m += sigmoid(s + mid);
      (m / double(score.size()) < rate ? lo : hi) = mid;
    }
    task_bias_.push_back(0.5 * (lo + hi));
  }
}

SyntheticWorld::~SyntheticWorld() = default;

std::vector<std::string> SyntheticWorld::sparse_feature_names() const { return sum::sparse_feature_names(cfg_); }

std::vector<std::string> sparse_feature_names(const DriftConfig& cfg) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < cfg.num_sparse(); ++i) {
    char name[12];
    std::snprintf(name, sizeof name, "f%02zu", i);
    out.emplace_back(name);
  }
  return out;
}

const SyntheticWorld::DayState& SyntheticWorld::state(std::int32_t day) const {
  if (day < 0) throw Error("synthetic world: negative day");
  std::lock_guard lk(mu_);
  const std::size_t U = cfg_.num_users, L = cfg_.latent_dim, C = cfg_.num_clusters, V = cfg_.variants;
  const std::size_t vocab_features = cfg_.cluster_features + cfg_.multi_id_features;
  while (states_.size() <= static_cast<std::size_t>(day)) {
    const auto d = static_cast<std::int32_t>(states_.size());
    auto s = std::make_unique<DayState>();
    if (d == 0) {
      auto rng = stream(cfg_.seed, kInitial);
      std::uniform_int_distribution<std::size_t> pc(0, C - 1);
      for (std::size_t u = 0; u < U; ++u) s->cluster.push_back(static_cast<std::uint16_t>(pc(rng)));
      s->rotation.assign(L, std::vector<double>(L, 0.0));
      for (std::size_t i = 0; i < L; ++i) s->rotation[i][i] = 1.0;
      s->vocab.resize(vocab_features * C * V);
      for (auto& id : s->vocab) id = s->next_fresh++;
      s->personal_ids.resize(cfg_.personal_features * U);
      for (auto& id : s->personal_ids) id = s->next_fresh++;
    } else {
      const DayState& p = *states_.back();
      auto rng = stream(cfg_.seed, kTransition, static_cast<std::uint64_t>(d));
      std::uniform_real_distribution<double> unit(0.0, 1.0);
      std::uniform_int_distribution<std::size_t> pc(0, C - 1);
      s->cluster = p.cluster;
      for (auto& c : s->cluster)
        if (unit(rng) < cfg_.interest_switch_rate) c = static_cast<std::uint16_t>(pc(rng));
      // Rotate by `drift` radians in a random 2-plane: R' = G R.
      auto e1 = gaussian_vec(rng, L, 1.0), e2 = gaussian_vec(rng, L, 1.0);
      const double n1 = std::sqrt(dot(e1, e1));
      for (auto& x : e1) x /= n1;
      const double proj = dot(e1, e2);
      for (std::size_t i = 0; i < L; ++i) e2[i] -= proj * e1[i];
      const double n2 = std::sqrt(dot(e2, e2));
      for (auto& x : e2) x /= n2;
      const double cs = std::cos(cfg_.drift) - 1.0, sn = std::sin(cfg_.drift);
      s->rotation = p.rotation;
      for (std::size_t col = 0; col < L; ++col) {
        double a = 0, b = 0;
        for (std::size_t i = 0; i < L; ++i) {
          a += e1[i] * p.rotation[i][col];
          b += e2[i] * p.rotation[i][col];
        }
        // G = I + (cos-1)(e1 e1' + e2 e2') + sin (e2 e1' - e1 e2')
        for (std::size_t i = 0; i < L; ++i)
          s->rotation[i][col] += cs * (e1[i] * a + e2[i] * b) + sn * (e2[i] * a - e1[i] * b);
      }
      s->next_fresh = p.next_fresh;
      s->vocab = p.vocab;
      for (auto& id : s->vocab)
        if (unit(rng) < cfg_.churn) id = s->next_fresh++;
      s->personal_ids = p.personal_ids;
      for (auto& id : s->personal_ids)
        if (unit(rng) < cfg_.churn) id = s->next_fresh++;
    }
    auto rng = stream(cfg_.seed, kUserDay, static_cast<std::uint64_t>(d));
    std::normal_distribution<float> g(0.f, 1.f);
    std::normal_distribution<double> gd(0.0, 1.0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    s->dense_noise.resize(U * cfg_.dense_dim);
    for (auto& x : s->dense_noise) x = g(rng);
    s->logit_offset.resize(U);
    for (auto& x : s->logit_offset) x = cfg_.label_noise * gd(rng);
    s->extra_id.resize(U * cfg_.multi_id_features);
    for (auto& x : s->extra_id) {
      const bool has = unit(rng) < 0.5;
      const auto f = static_cast<std::size_t>(&x - s->extra_id.data()) % cfg_.multi_id_features;
      const std::size_t c = static_cast<std::size_t>(unit(rng) * double(C)) % C;
      const std::size_t v = static_cast<std::size_t>(unit(rng) * double(V)) % V;
      x = has ? static_cast<std::int64_t>(s->vocab[((cfg_.cluster_features + f) * C + c) * V + v]) : -1;
    }
    states_.push_back(std::move(s));
  }
  return *states_[static_cast<std::size_t>(day)];
}

std::size_t SyntheticWorld::user_cluster(std::uint64_t user, std::int32_t day) const {
  return state(day).cluster.at(user);
}

std::vector<double> SyntheticWorld::user_latent(std::uint64_t user, std::int32_t day) const {
  const DayState& s = state(day);
  const std::size_t L = cfg_.latent_dim;
  const auto& c = centres_[s.cluster.at(user)];
  const auto& p = personal_.at(user);
  std::vector<double> base(L), out(L, 0.0);
  for (std::size_t i = 0; i < L; ++i) base[i] = c[i] + p[i];
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t j = 0; j < L; ++j) out[i] += s.rotation[i][j] * base[j];
  return out;
}

double SyntheticWorld::logit_offset(std::uint64_t user, std::int32_t day) const {
  return state(day).logit_offset.at(user);
}

std::vector<float> SyntheticWorld::ad_features(std::uint32_t ad) const { return ad_feats_.at(ad); }

double SyntheticWorld::ground_truth_probability(std::uint64_t user, std::uint32_t ad, std::int32_t day,
                                                std::size_t task) const {
  const double z = cfg_.signal_scale * dot(user_latent(user, day), ads_.at(ad)) + task_bias_.at(task) +
                   logit_offset(user, day);
  return sigmoid(z);
}

UserFeatures SyntheticWorld::user_features(std::uint64_t user, std::int32_t day) const {
  const DayState& s = state(day);
  const std::size_t C = cfg_.num_clusters, V = cfg_.variants, U = cfg_.num_users;
  if (user >= U) throw Error("synthetic world: unknown user " + std::to_string(user));
  const auto names = sparse_feature_names();
  const std::size_t c = s.cluster[user];
  auto variant = [&](std::size_t f) { return mix64(cfg_.seed ^ mix64(user * 131 + f)) % V; };
  UserFeatures out;
  std::size_t f = 0;
  for (std::size_t i = 0; i < cfg_.cluster_features; ++i, ++f)
    out.sparse.push_back({names[f], {s.vocab[(f * C + c) * V + variant(f)]}});
  for (std::size_t i = 0; i < cfg_.multi_id_features; ++i, ++f) {
    const std::size_t v = variant(f);
    SparseFeature sf{names[f], {s.vocab[(f * C + c) * V + v], s.vocab[(f * C + c) * V + (v + 1) % V]}};
    const auto extra = s.extra_id[user * cfg_.multi_id_features + i];
    if (extra >= 0) sf.ids.push_back(static_cast<std::uint64_t>(extra));
    out.sparse.push_back(std::move(sf));
  }
  for (std::size_t i = 0; i < cfg_.personal_features; ++i, ++f)
    out.sparse.push_back({names[f], {s.personal_ids[i * U + user]}});

  const auto u = user_latent(user, day);
  const float* noise = &s.dense_noise[user * cfg_.dense_dim];
  for (std::size_t i = 0; i + 1 < cfg_.dense_dim; ++i)
    out.dense.push_back(static_cast<float>(dot(dense_proj_[i], u) + cfg_.dense_noise * noise[i]));
  out.dense.push_back(noise[cfg_.dense_dim - 1]);  // decoy: independent of everything
  return out;
}

DayData SyntheticWorld::generate_day(std::int32_t day) const {
  DayData out;
  out.day = day;
  auto rng = stream(cfg_.seed, kEvents, static_cast<std::uint64_t>(day));
  std::uniform_int_distribution<std::int64_t> when(0, kMicrosPerDay - 1);
  std::vector<std::int64_t> times(cfg_.requests_per_day);
  for (auto& t : times) t = when(rng);
  std::sort(times.begin(), times.end());
  std::discrete_distribution<std::size_t> pick_user(activity_.begin(), activity_.end());
  std::uniform_int_distribution<std::uint32_t> pick_ad(0, static_cast<std::uint32_t>(cfg_.num_ads - 1));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  out.requests.reserve(times.size());
  for (std::size_t i = 0; i < times.size(); ++i) {
    Request r;
    r.request_id = (static_cast<std::uint64_t>(day) << 32) | i;
    r.day = day;
    r.time_us = static_cast<std::int64_t>(day) * kMicrosPerDay + times[i];
    r.user_id = pick_user(rng);
    r.features = user_features(r.user_id, day);
    for (std::size_t k = 0; k < cfg_.impressions_per_request; ++k) {
      ImpressionEvent e;
      e.ad_id = pick_ad(rng);
      e.ad_features = ad_feats_[e.ad_id];
      for (std::size_t t = 0; t < cfg_.num_tasks(); ++t) {
        const double p = ground_truth_probability(r.user_id, e.ad_id, day, t);
        e.truth.push_back(static_cast<float>(p));
        e.labels.push_back(unit(rng) < p ? 1 : 0);
      }
      r.events.push_back(std::move(e));
    }
    out.requests.push_back(std::move(r));
  }
  return out;
}

namespace {
constexpr char kDayMagic[8] = {'S', 'U', 'M', 'D', 'A', 'Y', '\0', '\0'};
}

std::vector<std::uint8_t> encode_day(const DayData& d, std::uint64_t fingerprint) {
  io::ByteWriter w;
  w.put_bytes({reinterpret_cast<const std::uint8_t*>(kDayMagic), sizeof kDayMagic});
  w.put<std::uint32_t>(kDayFileFormat);
  w.put<std::uint64_t>(fingerprint);
  w.put<std::int32_t>(d.day);
  std::vector<std::string> names;
  if (!d.requests.empty())
    for (const auto& f : d.requests.front().features.sparse) names.push_back(f.name);
  w.put<std::uint16_t>(static_cast<std::uint16_t>(names.size()));
  for (const auto& n : names) w.put_string(n);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(d.requests.size()));
  io::ByteWriter body;
  for (const auto& r : d.requests) {
    body = io::ByteWriter();
    body.put<std::uint64_t>(r.request_id);
    body.put<std::int64_t>(r.time_us);
    body.put<std::uint64_t>(r.user_id);
    if (r.features.sparse.size() != names.size()) throw FormatError("day file: inconsistent feature schema");
    for (std::size_t i = 0; i < names.size(); ++i) {
      const auto& f = r.features.sparse[i];
      if (f.name != names[i]) throw FormatError("day file: inconsistent feature order");
      body.put<std::uint16_t>(static_cast<std::uint16_t>(f.ids.size()));
      for (auto id : f.ids) body.put<std::uint64_t>(id);
    }
    body.put<std::uint16_t>(static_cast<std::uint16_t>(r.features.dense.size()));
    body.put_floats(r.features.dense);
    body.put<std::uint16_t>(static_cast<std::uint16_t>(r.events.size()));
    for (const auto& e : r.events) {
      body.put<std::uint32_t>(e.ad_id);
      body.put<std::uint16_t>(static_cast<std::uint16_t>(e.ad_features.size()));
      body.put_floats(e.ad_features);
      body.put<std::uint16_t>(static_cast<std::uint16_t>(e.labels.size()));
      for (auto l : e.labels) body.put<std::uint8_t>(l);
      body.put_floats(e.truth);
    }
    w.put<std::uint32_t>(static_cast<std::uint32_t>(body.size()));
    w.put_bytes(body.bytes());
    w.put<std::uint32_t>(io::crc32(body.bytes()));
  }
  return w.take();
}

DayData decode_day(std::span<const std::uint8_t> bytes, std::uint64_t* fingerprint) {
  io::ByteReader r(bytes);
  if (std::memcmp(r.get_bytes(sizeof kDayMagic).data(), kDayMagic, sizeof kDayMagic) != 0)
    throw FormatError("day file: bad magic");
  const auto format = r.get<std::uint32_t>();
  if (format != kDayFileFormat) throw FormatError("day file: unsupported format " + std::to_string(format));
  const auto fp = r.get<std::uint64_t>();
  if (fingerprint) *fingerprint = fp;
  DayData d;
  d.day = r.get<std::int32_t>();
  std::vector<std::string> names(r.get<std::uint16_t>());
  for (auto& n : names) n = r.get_string(256);
  const auto count = r.get<std::uint32_t>();
  d.requests.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.get<std::uint32_t>();
    const auto body = r.get_bytes(len);
    if (io::crc32(body) != r.get<std::uint32_t>())
      throw FormatError("day file: checksum mismatch in record " + std::to_string(i));
    io::ByteReader b(body);
    Request q;
    q.day = d.day;
    q.request_id = b.get<std::uint64_t>();
    q.time_us = b.get<std::int64_t>();
    q.user_id = b.get<std::uint64_t>();
    for (const auto& n : names) {
      SparseFeature f{n, std::vector<std::uint64_t>(b.get<std::uint16_t>())};
      for (auto& id : f.ids) id = b.get<std::uint64_t>();
      q.features.sparse.push_back(std::move(f));
    }
    q.features.dense.resize(b.get<std::uint16_t>());
    b.get_floats(q.features.dense);
    q.events.resize(b.get<std::uint16_t>());
    for (auto& e : q.events) {
      e.ad_id = b.get<std::uint32_t>();
      e.ad_features.resize(b.get<std::uint16_t>());
      b.get_floats(e.ad_features);
      const auto tasks = b.get<std::uint16_t>();
      e.labels.resize(tasks);
      for (auto& l : e.labels) l = b.get<std::uint8_t>();
      e.truth.resize(tasks);
      b.get_floats(e.truth);
    }
    if (!b.done()) throw FormatError("day file: trailing bytes in record " + std::to_string(i));
    d.requests.push_back(std::move(q));
  }
  if (!r.done()) throw FormatError("day file: trailing bytes");
  return d;
}

void write_day_file(const std::filesystem::path& path, const DayData& d, std::uint64_t fingerprint) {
  io::write_file_atomic(path.string(), encode_day(d, fingerprint));
}

DayData read_day_file(const std::filesystem::path& path, std::uint64_t* fingerprint) {
  const auto bytes = io::read_file(path.string());
  try {
    return decode_day(bytes, fingerprint);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

std::string day_file_name(std::int32_t day) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "day_%03d.bin", day);
  return buf;
}

}  // namespace sum
