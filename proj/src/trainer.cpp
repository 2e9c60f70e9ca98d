// SPDX-License-Identifier: Apache-2.0
#include "sum/trainer.hpp"

#include <cmath>
#include <cstring>

#include "sum/binary_io.hpp"
#include "sum/error.hpp"
#include "sum/json_util.hpp"
#include "sum/metrics.hpp"

namespace sum {

using nlohmann::json;

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("train config: " + m); };
  if (!(learning_rate >= 0.0)) fail("learning rate must be >= 0");
  if (batch_size < 1) fail("batch size must be >= 1");
  if (cadence < 1) fail("cadence must be >= 1");
  if (initial_last_day < initial_first_day || initial_first_day < 0) fail("initial day span is empty");
  if (task_weights.empty()) fail("task weights required");
  for (double w : task_weights)
    if (!(w > 0.0)) fail("task weights must be positive");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1 && adam_eps > 0)) fail("invalid Adam parameters");
  if (!(grad_clip >= 0.0)) fail("grad_clip must be >= 0");
}

json to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate},
          {"optimizer", c.optimizer == OptimizerKind::Adam ? "adam" : "sgd"},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"adam_eps", c.adam_eps},
          {"batch_size", c.batch_size},
          {"initial_first_day", c.initial_first_day},
          {"initial_last_day", c.initial_last_day},
          {"cadence", c.cadence},
          {"task_weights", c.task_weights},
          {"grad_clip", c.grad_clip},
          {"seed", c.seed}};
}

TrainConfig train_config_from_json(const json& j) {
  StrictObject o(j, "train");
  TrainConfig d, c;
  c.learning_rate = o.get("learning_rate", d.learning_rate);
  const auto opt = o.get<std::string>("optimizer", "adam");
  if (opt == "adam") {
    c.optimizer = OptimizerKind::Adam;
  } else if (opt == "sgd") {
    c.optimizer = OptimizerKind::Sgd;
  } else {
    throw ConfigError("train.optimizer: expected 'adam' or 'sgd', got '" + opt + "'");
  }
  c.beta1 = o.get("beta1", d.beta1);
  c.beta2 = o.get("beta2", d.beta2);
  c.adam_eps = o.get("adam_eps", d.adam_eps);
  c.batch_size = o.get("batch_size", d.batch_size);
  c.initial_first_day = o.get("initial_first_day", d.initial_first_day);
  c.initial_last_day = o.get("initial_last_day", d.initial_last_day);
  c.cadence = o.get("cadence", d.cadence);
  c.task_weights = o.get("task_weights", d.task_weights);
  c.grad_clip = o.get("grad_clip", d.grad_clip);
  c.seed = o.get("seed", d.seed);
  o.finish();
  c.validate();
  return c;
}

// ---- snapshot store ---------------------------------------------------------

std::string snapshot_file_name(std::uint64_t version) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "snapshot_v%06llu.bin", static_cast<unsigned long long>(version));
  return buf;
}

SnapshotStore::SnapshotStore(std::size_t retention, std::optional<std::filesystem::path> dir)
    : retention_(retention), dir_(std::move(dir)) {
  if (retention_ < 1) throw ConfigError("snapshot store: retention must be >= 1");
  if (dir_) std::filesystem::create_directories(*dir_);
}

void SnapshotStore::publish(SnapshotPtr s) {
  if (!s || !s->model) throw Error("snapshot store: null snapshot");
  const std::uint64_t expect = snapshots_.empty() ? 1 : snapshots_.back()->version + 1;
  if (s->version != expect) {
    throw VersionError("snapshot store: got version " + std::to_string(s->version) + ", expected " +
                       std::to_string(expect));
  }
  if (!snapshots_.empty() && s->config_hash != snapshots_.back()->config_hash)
    throw ConfigError("snapshot store: config hash differs from the lineage");
  std::uint32_t crc = 0;
  if (dir_) crc = save_snapshot(*s, *dir_ / snapshot_file_name(s->version));
  snapshots_.push_back(std::move(s));
  crcs_.push_back(crc);
  while (snapshots_.size() > retention_) {
    if (dir_) std::filesystem::remove(*dir_ / snapshot_file_name(snapshots_.front()->version));
    snapshots_.erase(snapshots_.begin());
    crcs_.erase(crcs_.begin());
  }
  if (dir_) write_manifest();
}

SnapshotPtr SnapshotStore::latest() const { return snapshots_.empty() ? nullptr : snapshots_.back(); }

SnapshotPtr SnapshotStore::find(std::uint64_t version) const {
  for (const auto& s : snapshots_)
    if (s->version == version) return s;
  return nullptr;
}

std::vector<std::uint64_t> SnapshotStore::versions() const {
  std::vector<std::uint64_t> out;
  for (const auto& s : snapshots_) out.push_back(s->version);
  return out;
}

void SnapshotStore::write_manifest() const {
  json m = {{"schema", 1}, {"snapshots", json::array()}};
  for (std::size_t i = 0; i < snapshots_.size(); ++i) {
    m["snapshots"].push_back({{"version", snapshots_[i]->version},
                              {"trained_through_day", snapshots_[i]->trained_through_day},
                              {"file", snapshot_file_name(snapshots_[i]->version)},
                              {"crc32", crcs_[i]},
                              {"config_hash", snapshots_[i]->config_hash}});
  }
  const std::string text = m.dump(2) + "\n";
  io::write_file_atomic((*dir_ / "manifest.json").string(),
                        {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

SnapshotStore SnapshotStore::open(const std::filesystem::path& dir, std::size_t retention) {
  const auto bytes = io::read_file((dir / "manifest.json").string());
  const json m = json::parse(bytes.begin(), bytes.end());
  SnapshotStore store(retention, dir);
  for (const auto& e : m.at("snapshots")) {
    const auto path = dir / e.at("file").get<std::string>();
    auto s = load_snapshot(path);
    const auto file = io::read_file(path.string());
    std::uint32_t crc;
    std::memcpy(&crc, file.data() + file.size() - 4, 4);
    if (crc != e.at("crc32").get<std::uint32_t>()) throw FormatError(path.string() + ": manifest checksum mismatch");
    if (s->version != e.at("version").get<std::uint64_t>()) throw FormatError(path.string() + ": version mismatch");
    store.snapshots_.push_back(std::move(s));
    store.crcs_.push_back(crc);
  }
  return store;
}

// ---- training ---------------------------------------------------------------

double request_loss(UserModel<float>& model, const Request& r, std::span<const float> task_weights, bool train) {
  const TowerConfig& cfg = model.config();
  const std::size_t n = r.events.size(), T = cfg.num_tasks;
  if (n == 0) return 0.0;
  Tensorf ads(n, cfg.ad_dim), labels(n, T);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& e = r.events[i];
    if (e.ad_features.size() != cfg.ad_dim || e.labels.size() != T)
      throw ConfigError("training event does not match model schema (ad_dim/tasks)");
    for (std::size_t j = 0; j < cfg.ad_dim; ++j) ads(i, j) = e.ad_features[j];
    for (std::size_t t = 0; t < T; ++t) labels(i, t) = e.labels[t];
  }
  Tape<float> tape(train);
  Var<float> logits = model.mix(tape, model.tower(tape, r.features), tape.constant(std::move(ads)));
  Var<float> loss = multi_task_loss(logits, labels, task_weights);
  if (train) tape.backward(loss);
  return loss.value()[0];
}

Trainer::Trainer(TowerConfig tower, TrainConfig train)
    : tower_(std::move(tower)), cfg_(std::move(train)), model_(tower_, cfg_.seed) {
  cfg_.validate();
  if (cfg_.task_weights.size() != tower_.num_tasks)
    throw ConfigError("train config has " + std::to_string(cfg_.task_weights.size()) +
                      " task weights, tower has " + std::to_string(tower_.num_tasks) + " tasks");
  for (double w : cfg_.task_weights) task_weights_.push_back(static_cast<float>(w));
  for (const auto& p : model_.parameters()) {
    m_.emplace_back(p.value.size(), 0.f);
    v_.emplace_back(p.value.size(), 0.f);
  }
  model_.zero_grad();
}

void Trainer::step() {
  if (pending_ == 0) return;
  auto& params = model_.parameters();
  const float scale = 1.f / static_cast<float>(pending_);
  double norm2 = 0;
  for (auto& p : params)
    for (float& g : p.grad.data()) {
      g *= scale;
      norm2 += double(g) * g;
    }
  if (!std::isfinite(norm2)) throw NumericError("trainer: non-finite gradient");
  float clip = 1.f;
  if (cfg_.grad_clip > 0 && norm2 > cfg_.grad_clip * cfg_.grad_clip)
    clip = static_cast<float>(cfg_.grad_clip / std::sqrt(norm2));
  ++steps_;
  const float lr = static_cast<float>(cfg_.learning_rate);
  if (cfg_.optimizer == OptimizerKind::Sgd) {
    for (auto& p : params) {
      auto w = p.value.data();
      auto g = p.grad.data();
      for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * clip * g[i];
    }
  } else {
    const float b1 = static_cast<float>(cfg_.beta1), b2 = static_cast<float>(cfg_.beta2);
    const float eps = static_cast<float>(cfg_.adam_eps);
    const float c1 = static_cast<float>(1.0 / (1.0 - std::pow(cfg_.beta1, double(steps_))));
    const float c2 = static_cast<float>(1.0 / (1.0 - std::pow(cfg_.beta2, double(steps_))));
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto w = params[k].value.data();
      auto g = params[k].grad.data();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        const float gi = g[i] * clip;
        m[i] = b1 * m[i] + (1 - b1) * gi;
        v[i] = b2 * v[i] + (1 - b2) * gi * gi;
        w[i] -= lr * (m[i] * c1) / (std::sqrt(v[i] * c2) + eps);
      }
    }
  }
  model_.zero_grad();
  pending_ = 0;
}

void Trainer::train_day(const DayData& day) {
  for (const auto& r : day.requests) {
    request_loss(model_, r, task_weights_, true);
    if (++pending_ == cfg_.batch_size) step();
  }
  step();
}

SnapshotPtr Trainer::train_initial(std::span<const DayData* const> days, SnapshotStore& store) {
  std::size_t events = 0;
  for (const auto* d : days) events += d->event_count();
  if (days.empty() || events == 0) throw Error("train_initial: empty stream");
  if (store.latest()) throw VersionError("train_initial: store already holds snapshots");
  for (std::size_t i = 1; i < days.size(); ++i)
    if (days[i]->day <= days[i - 1]->day) throw StalenessError("train_initial: days must be increasing");
  for (const auto* d : days) train_day(*d);
  auto s = publish_snapshot(model_, 1, days.back()->day);
  store.publish(s);
  model_version_ = 1;
  return s;
}

void Trainer::adopt(const ModelSnapshot& s) {
  model_ = UserModel<float>(s.config(), s.model->parameters());
  for (auto& m : m_) std::fill(m.begin(), m.end(), 0.f);
  for (auto& v : v_) std::fill(v.begin(), v.end(), 0.f);
  steps_ = 0;
  model_version_ = s.version;
}

SnapshotPtr Trainer::recurring_update(SnapshotStore& store, const DayData& day) {
  SnapshotPtr latest = store.latest();
  if (!latest) throw StalenessError("recurring_update: no snapshot to continue from");
  const std::int64_t expect = latest->trained_through_day + cfg_.cadence;
  if (day.day != expect) {
    throw StalenessError("recurring_update: snapshot v" + std::to_string(latest->version) + " is trained through day " +
                         std::to_string(latest->trained_through_day) + "; refusing day " + std::to_string(day.day) +
                         " (expected " + std::to_string(expect) + ")");
  }
  if (day.event_count() == 0) throw Error("recurring_update: day " + std::to_string(day.day) + " has no events");
  if (latest->config_hash != config_hash(tower_)) throw ConfigError("recurring_update: snapshot config differs");
  // Optimizer state carries over only when the in-memory weights are the latest snapshot.
  if (model_version_ != latest->version) adopt(*latest);
  train_day(day);
  auto s = publish_snapshot(model_, latest->version + 1, day.day);
  store.publish(s);
  model_version_ = s->version;
  return s;
}

double Trainer::mean_loss(const DayData& day) const {
  UserModel<float>& m = const_cast<UserModel<float>&>(model_);
  double total = 0;
  std::size_t n = 0;
  for (const auto& r : day.requests) {
    total += request_loss(m, r, task_weights_, false) * double(r.events.size());
    n += r.events.size();
  }
  if (n == 0) throw Error("mean_loss: empty day");
  return total / double(n);
}

std::vector<double> evaluate(const ModelSnapshot& s, std::span<const DayData* const> days) {
  const UserModel<float>& m = *s.model;
  const std::size_t T = m.config().num_tasks;
  std::vector<NeAccumulator> acc(T);
  for (const auto* d : days) {
    for (const auto& r : d->requests) {
      if (r.events.empty()) continue;
      Tape<float> tape(false);
      Tensorf ads(r.events.size(), m.config().ad_dim);
      for (std::size_t i = 0; i < r.events.size(); ++i)
        for (std::size_t j = 0; j < ads.cols(); ++j) ads(i, j) = r.events[i].ad_features[j];
      const Tensorf logits = m.mix(tape, m.tower(tape, r.features), tape.constant(std::move(ads))).value();
      for (std::size_t i = 0; i < r.events.size(); ++i)
        for (std::size_t t = 0; t < T; ++t)
          acc[t].add(1.0 / (1.0 + std::exp(-double(logits(i, t)))), r.events[i].labels[t] != 0);
    }
  }
  if (acc[0].count() == 0) throw Error("evaluate: empty span");
  std::vector<double> ne;
  for (const auto& a : acc) ne.push_back(a.value());
  return ne;
}

}  // namespace sum
