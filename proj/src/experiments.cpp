// SPDX-License-Identifier: Apache-2.0
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <unistd.h>
#include <unordered_map>

#include "sum/binary_io.hpp"
#include "sum/error.hpp"
#include "sum/eval_harness.hpp"
#include "sum/json_util.hpp"

namespace sum {

using nlohmann::json;

// ---- config ---------------------------------------------------------------------

TowerConfig ExperimentConfig::resolved_tower() const {
  TowerConfig t = tower;
  if (t.sparse.empty())
    for (const auto& n : sparse_feature_names(drift)) t.sparse.push_back({n, 512});
  return t;
}

StoreConfig ExperimentConfig::resolved_store() const {
  StoreConfig s = store;
  s.num_embeddings = tower.num_embeddings;
  s.dim = tower.dim;
  return s;
}

void ExperimentConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("experiment: " + m); };
  drift.validate();
  train.validate();
  downstream.validate();
  const TowerConfig t = resolved_tower();
  t.validate();
  resolved_store().validate();
  if (t.sparse.size() != drift.num_sparse()) fail("tower has " + std::to_string(t.sparse.size()) +
                                                  " sparse features, data has " + std::to_string(drift.num_sparse()));
  if (t.dense_raw != drift.dense_dim) fail("tower dense_raw differs from data dense_dim");
  if (t.ad_dim != drift.ad_dim) fail("tower ad_dim differs from data ad_dim");
  if (t.num_tasks != drift.num_tasks()) fail("tower task count differs from data");
  if (train.task_weights.size() != t.num_tasks) fail("task weight count differs from tower tasks");
  if (warmup_days < 0) fail("warmup_days must be >= 0");
  if (!(train.initial_last_day < train_first - warmup_days))
    fail("serving must start after the initial training span");
  if (!(train_first <= train_last && train_last < eval_first && eval_first <= eval_last && eval_last < days))
    fail("spans must satisfy train_first <= train_last < eval_first <= eval_last < days");
  if (downstream.task >= t.num_tasks) fail("downstream task out of range");
  for (auto i : downstream.dense_subset)
    if (i >= drift.dense_dim - 1) fail("dense_subset index " + std::to_string(i) + " out of range");
  if (downstream.dense_subset.size() + (downstream.include_decoy ? 1 : 0) >= drift.dense_dim)
    fail("downstream dense subset must be smaller than the upstream dense input");
  if (importance_repeats < 1) fail("importance_repeats must be >= 1");
  if (shift_users < 1) fail("shift_users must be >= 1");
  if (simulated_compute_us < 0) fail("simulated_compute_us must be >= 0");
}

ExperimentConfig ExperimentConfig::with_seed(std::uint64_t seed) const {
  ExperimentConfig c = *this;
  c.drift.seed = seed;
  c.train.seed = seed;
  return c;
}

json to_json(const ExperimentConfig& c) {
  return {{"drift", to_json(c.drift)},
          {"tower", to_json(c.tower)},
          {"train", to_json(c.train)},
          {"store",
           {{"history", c.store.history},
            {"pool_window", c.store.pool_window},
            {"one_record_per_version", c.store.one_record_per_version}}},
          {"downstream",
           {{"ridge", c.downstream.ridge},
            {"max_iterations", c.downstream.max_iterations},
            {"tolerance", c.downstream.tolerance},
            {"dense_subset", c.downstream.dense_subset},
            {"include_decoy", c.downstream.include_decoy},
            {"task", c.downstream.task}}},
          {"days", c.days},
          {"train_first", c.train_first},
          {"train_last", c.train_last},
          {"eval_first", c.eval_first},
          {"eval_last", c.eval_last},
          {"warmup_days", c.warmup_days},
          {"simulated_compute_us", c.simulated_compute_us},
          {"recurring", c.recurring},
          {"importance_repeats", c.importance_repeats},
          {"shift_users", c.shift_users}};
}

ExperimentConfig experiment_config_from_json(const json& j) {
  StrictObject o(j, "experiment");
  ExperimentConfig d, c;
  if (o.has("drift")) c.drift = drift_config_from_json(o.raw("drift"));
  if (o.has("tower")) c.tower = tower_config_from_json(o.raw("tower"));
  if (o.has("train")) c.train = train_config_from_json(o.raw("train"));
  if (o.has("store")) {
    StrictObject s(o.raw("store"), "experiment.store");
    c.store.history = s.get("history", d.store.history);
    c.store.pool_window = s.get("pool_window", d.store.pool_window);
    c.store.one_record_per_version = s.get("one_record_per_version", d.store.one_record_per_version);
    s.finish();
  }
  if (o.has("downstream")) {
    StrictObject s(o.raw("downstream"), "experiment.downstream");
    c.downstream.ridge = s.get("ridge", d.downstream.ridge);
    c.downstream.max_iterations = s.get("max_iterations", d.downstream.max_iterations);
    c.downstream.tolerance = s.get("tolerance", d.downstream.tolerance);
    c.downstream.dense_subset = s.get("dense_subset", d.downstream.dense_subset);
    c.downstream.include_decoy = s.get("include_decoy", d.downstream.include_decoy);
    c.downstream.task = s.get("task", d.downstream.task);
    s.finish();
  }
  c.days = o.get("days", d.days);
  c.train_first = o.get("train_first", d.train_first);
  c.train_last = o.get("train_last", d.train_last);
  c.eval_first = o.get("eval_first", d.eval_first);
  c.eval_last = o.get("eval_last", d.eval_last);
  c.warmup_days = o.get("warmup_days", d.warmup_days);
  c.simulated_compute_us = o.get("simulated_compute_us", d.simulated_compute_us);
  c.recurring = o.get("recurring", d.recurring);
  c.importance_repeats = o.get("importance_repeats", d.importance_repeats);
  c.shift_users = o.get("shift_users", d.shift_users);
  o.finish();
  c.validate();
  return c;
}

std::uint64_t lineage_fingerprint(const ExperimentConfig& c) {
  const json j = {{"drift", to_json(c.drift)},
                  {"tower", to_json(c.resolved_tower())},
                  {"train", to_json(c.train)},
                  {"eval_last", c.eval_last},
                  {"recurring", c.recurring}};
  return io::fnv1a64(j.dump());
}

// ---- lineage ----------------------------------------------------------------------

namespace {

std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, v);
  return buf;
}

std::int32_t last_trained_day(const ExperimentConfig& c) {
  return c.recurring ? c.eval_last - 1 : c.train.initial_last_day;
}

}  // namespace

Lineage Lineage::build(const ExperimentConfig& cfg, const SyntheticWorld& world,
                       const std::filesystem::path* cache_dir, const std::function<void(const std::string&)>& log) {
  cfg.validate();
  Lineage out;
  out.recurring_ = cfg.recurring;
  out.fingerprint_ = lineage_fingerprint(cfg);
  const TowerConfig tower = cfg.resolved_tower();
  const std::int32_t first = cfg.train.initial_first_day, init_last = cfg.train.initial_last_day;
  const std::int32_t last = last_trained_day(cfg);
  const std::size_t expected = cfg.recurring ? 1 + std::size_t((last - init_last) / cfg.train.cadence) : 1;

  std::filesystem::path final_dir;
  if (cache_dir) {
    final_dir = *cache_dir / ("lineage_" + hex64(out.fingerprint_));
    if (std::filesystem::exists(final_dir / "manifest.json")) {
      SnapshotStore store = SnapshotStore::open(final_dir, expected);
      if (store.versions().size() == expected && store.latest()->version == expected) {
        for (std::uint64_t v = 1; v <= expected; ++v) out.snapshots_.push_back(store.find(v));
        if (log) log("loaded cached lineage " + final_dir.string());
        return out;
      }
    }
  }

  std::filesystem::path tmp_dir;
  std::optional<std::filesystem::path> store_dir;
  if (cache_dir) {
    tmp_dir = *cache_dir / ("lineage_" + hex64(out.fingerprint_) + ".tmp" + std::to_string(::getpid()));
    std::filesystem::remove_all(tmp_dir);
    store_dir = tmp_dir;
  }
  SnapshotStore store(expected, store_dir);
  Trainer trainer(tower, cfg.train);
  {
    std::vector<DayData> initial;
    for (std::int32_t d = first; d <= init_last; ++d) initial.push_back(world.generate_day(d));
    std::vector<const DayData*> ptrs;
    for (const auto& d : initial) ptrs.push_back(&d);
    trainer.train_initial(ptrs, store);
    if (log) log("trained v1 on days " + std::to_string(first) + ".." + std::to_string(init_last));
  }
  if (cfg.recurring) {
    for (std::int32_t d = init_last + cfg.train.cadence; d <= last; d += cfg.train.cadence) {
      const auto s = trainer.recurring_update(store, world.generate_day(d));
      if (log) log("recurring update v" + std::to_string(s->version) + " through day " + std::to_string(d));
    }
  }
  for (std::uint64_t v = 1; v <= expected; ++v) out.snapshots_.push_back(store.find(v));
  if (cache_dir) {
    std::error_code ec;
    std::filesystem::rename(tmp_dir, final_dir, ec);
    if (ec) std::filesystem::remove_all(tmp_dir);  // another process published it first
  }
  return out;
}

SnapshotPtr Lineage::version(std::uint64_t v) const {
  if (v < 1 || v > snapshots_.size())
    throw VersionError("lineage: no version " + std::to_string(v) + " (have 1.." + std::to_string(snapshots_.size()) +
                       ")");
  return snapshots_[v - 1];
}

SnapshotPtr Lineage::serving(std::int32_t day) const {
  // Newest snapshot trained through day - 1 or earlier.
  SnapshotPtr best;
  for (const auto& s : snapshots_)
    if (s->trained_through_day <= day - 1) best = s;
  if (!best) throw StalenessError("lineage: no snapshot trained before day " + std::to_string(day));
  if (recurring_ && best->trained_through_day < day - 1 && best == snapshots_.back())
    throw StalenessError("lineage: snapshots end at day " + std::to_string(best->trained_through_day) +
                         ", cannot serve day " + std::to_string(day));
  return best;
}

// ---- arms -------------------------------------------------------------------------

const char* to_string(ArmKind a) {
  switch (a) {
    case ArmKind::Baseline: return "baseline";
    case ArmKind::Frozen: return "frozen";
    case ArmKind::OfflineBatch: return "offline_batch";
    case ArmKind::Realtime: return "realtime";
    case ArmKind::Async: return "async";
  }
  return "?";
}

namespace {

Dataset empty_dataset(const ExperimentConfig& cfg, bool with_sum) {
  Dataset d;
  std::size_t col = 0;
  auto add = [&](const std::string& name, std::size_t width) {
    d.groups.push_back({name, col, col + width});
    col += width;
  };
  if (with_sum)
    for (std::size_t k = 0; k < cfg.tower.num_embeddings; ++k) add("sum_emb_" + std::to_string(k), cfg.tower.dim);
  add("ad", cfg.drift.ad_dim);
  if (!cfg.downstream.dense_subset.empty()) add("user_dense", cfg.downstream.dense_subset.size());
  if (cfg.downstream.include_decoy) add("decoy", 1);
  d.cols = col;
  return d;
}

ModeKind mode_of(ArmKind a) {
  switch (a) {
    case ArmKind::Frozen: return ModeKind::Frozen;
    case ArmKind::OfflineBatch: return ModeKind::OfflineBatch;
    case ArmKind::Realtime: return ModeKind::Realtime;
    default: return ModeKind::Async;
  }
}

}  // namespace

ArmData produce_arm(const ArmSpec& arm, const ExperimentConfig& cfg, const Lineage& lineage,
                    const SyntheticWorld& world) {
  cfg.validate();
  if (lineage.fingerprint() != lineage_fingerprint(cfg)) throw ConfigError("arm/config mismatch: lineage fingerprint");
  const bool with_sum = arm.kind != ArmKind::Baseline;
  ArmData out;
  out.train = empty_dataset(cfg, with_sum);
  out.eval = out.train;
  const std::int32_t start = cfg.train_first - cfg.warmup_days;
  const std::size_t K = cfg.tower.num_embeddings, D = cfg.tower.dim;

  std::unique_ptr<SoapService> service;
  if (with_sum) {
    StoreConfig sc = cfg.resolved_store();
    if (arm.pool_window) sc.pool_window = arm.pool_window;
    ServiceConfig svc;
    svc.mode.kind = mode_of(arm.kind);
    svc.compute_workers = 0;
    svc.simulated_compute_us = cfg.simulated_compute_us;
    svc.mode.budget_ms = 1e9;  // the comparison models an ideal realtime path
    service = std::make_unique<SoapService>(svc, std::make_shared<FeatureStore>(sc), lineage.serving(start),
                                            lineage.version(1));
    service->start();
  }

  using Population = std::vector<std::pair<std::uint64_t, UserFeatures>>;
  auto population_of = [](const DayData& day) {
    std::unordered_map<std::uint64_t, std::size_t> last;
    for (std::size_t i = 0; i < day.requests.size(); ++i) last[day.requests[i].user_id] = i;
    Population p;
    p.reserve(last.size());
    for (const auto& r : day.requests)
      if (last[r.user_id] != SIZE_MAX) {
        p.emplace_back(r.user_id, day.requests[last[r.user_id]].features);
        last[r.user_id] = SIZE_MAX;
      }
    return p;
  };
  Population population;
  if (arm.kind == ArmKind::OfflineBatch) population = population_of(world.generate_day(start - 1));

  double staleness_sum = 0.0;
  std::uint64_t staleness_n = 0;
  std::vector<float> row;
  for (std::int32_t d = start; d <= cfg.eval_last; ++d) {
    const DayData day = world.generate_day(d);
    if (arm.kind == ArmKind::Realtime || arm.kind == ArmKind::Async) {
      const SnapshotPtr s = lineage.serving(d);
      if (s->version > service->current_snapshot()->version) service->swap_snapshot(s);
    } else if (arm.kind == ArmKind::OfflineBatch) {
      // The job ran at the end of day d - 1 with the snapshot then in service.
      service->run_batch_job(*lineage.serving(d - 1), population, std::int64_t(d) * kMicrosPerDay);
    }
    Dataset* target = d >= cfg.train_first && d <= cfg.train_last  ? &out.train
                      : d >= cfg.eval_first && d <= cfg.eval_last ? &out.eval
                                                                   : nullptr;
    for (const auto& r : day.requests) {
      Tensorf emb;
      if (service) {
        const ServeResponse resp = service->serve({r.request_id, r.user_id, r.features, r.time_us});
        emb = resp.embedding;
        if (target) {
          if (resp.versions.empty()) {
            ++out.cold_responses;
          } else {
            double s = 0.0;
            for (std::size_t i = 0; i < resp.versions.size(); ++i) {
              const double trained_end =
                  double(lineage.version(resp.versions[i])->trained_through_day + 1) * double(kMicrosPerDay);
              s += (double(r.time_us) - trained_end) + double(r.time_us - resp.computed_at_us[i]);
            }
            staleness_sum += s / double(resp.versions.size()) / double(kMicrosPerDay);
            ++staleness_n;
          }
        }
      }
      if (!target) continue;
      for (const auto& ev : r.events) {
        row.clear();
        if (with_sum) row.insert(row.end(), emb.data().begin(), emb.data().begin() + K * D);
        row.insert(row.end(), ev.ad_features.begin(), ev.ad_features.end());
        for (auto i : cfg.downstream.dense_subset) row.push_back(r.features.dense.at(i));
        if (cfg.downstream.include_decoy) row.push_back(r.features.dense.at(cfg.drift.decoy_dense_index()));
        target->add_row(row, ev.labels.at(cfg.downstream.task) != 0);
      }
    }
    if (arm.kind == ArmKind::OfflineBatch) population = population_of(day);
  }
  out.mean_staleness_days = staleness_n ? staleness_sum / double(staleness_n) : 0.0;
  return out;
}

namespace {

ExperimentReport run_arms(const std::string& name, const std::vector<ArmSpec>& arms, const ExperimentConfig& cfg,
                          const Lineage& lineage, const SyntheticWorld& world) {
  ExperimentReport rep;
  rep.experiment = name;
  rep.config_fingerprint = lineage.fingerprint();
  rep.seed = cfg.drift.seed;
  for (const auto& arm : arms) {
    ArmData data = produce_arm(arm, cfg, lineage, world);
    const LogisticModel m = fit_logistic(data.train, cfg.downstream);
    ArmResult r;
    r.name = arm.name;
    r.kind = to_string(arm.kind);
    r.train_ne = dataset_ne(m, data.train);
    r.eval_ne = dataset_ne(m, data.eval);
    r.mean_staleness_days = data.mean_staleness_days;
    r.cold_responses = data.cold_responses;
    r.importance = feature_importance(m, data.eval, cfg.importance_repeats, cfg.drift.seed);
    r.train_rows = data.train.rows();
    r.eval_rows = data.eval.rows();
    rep.arms.push_back(std::move(r));
  }
  const ArmResult& base = rep.arms.front();
  const double bt = base.train_ne, be = base.eval_ne;
  for (auto& r : rep.arms) {
    r.train_diff_pct = (r.train_ne - bt) / bt * 100.0;
    r.eval_diff_pct = (r.eval_ne - be) / be * 100.0;
  }
  return rep;
}

}  // namespace

ExperimentReport run_scheme_comparison(const ExperimentConfig& cfg, const Lineage& lineage,
                                       const SyntheticWorld& world) {
  return run_arms("scheme_comparison",
                  {{"baseline", ArmKind::Baseline},
                   {"frozen", ArmKind::Frozen},
                   {"offline_batch", ArmKind::OfflineBatch},
                   {"realtime", ArmKind::Realtime},
                   {"async", ArmKind::Async}},
                  cfg, lineage, world);
}

ExperimentReport run_pooling_ablation(const ExperimentConfig& cfg, const Lineage& lineage,
                                      const SyntheticWorld& world) {
  if (cfg.recurring && lineage.latest_version() < 6)
    throw Error("pooling ablation needs at least 6 published snapshots, lineage has " +
                std::to_string(lineage.latest_version()));
  if (!cfg.recurring) throw Error("pooling ablation needs a recurring lineage");
  return run_arms("pooling_ablation",
                  {{"baseline", ArmKind::Baseline},
                   {"sum_without_ap", ArmKind::Realtime, 1},
                   {"sum_with_ap", ArmKind::Realtime, 3}},
                  cfg, lineage, world);
}

ExperimentReport embedding_shift_report(const ExperimentConfig& cfg, const Lineage& lineage,
                                        const SyntheticWorld& world, std::size_t pool) {
  const std::uint64_t first = lineage.serving(cfg.train_first)->version;
  const std::uint64_t last = lineage.serving(cfg.eval_last)->version;
  if (last <= first) throw Error("embedding shift needs at least two consecutive versions");
  const DayData day = world.generate_day(cfg.eval_first);
  std::vector<const UserFeatures*> users;
  std::unordered_map<std::uint64_t, bool> seen;
  for (const auto& r : day.requests) {
    if (users.size() >= cfg.shift_users) break;
    if (seen.emplace(r.user_id, true).second) users.push_back(&r.features);
  }
  std::vector<std::vector<Tensorf>> seqs(users.size());
  for (std::uint64_t v = first; v <= last; ++v) {
    const auto snap = lineage.version(v);
    for (std::size_t u = 0; u < users.size(); ++u) seqs[u].push_back(snap->model->embed(*users[u]));
  }
  ExperimentReport rep;
  rep.experiment = "embedding_shift";
  rep.config_fingerprint = lineage.fingerprint();
  rep.seed = cfg.drift.seed;
  rep.shift_pool = pool;
  rep.shift_raw = embedding_shift(seqs, 1);
  rep.shift_pooled = embedding_shift(seqs, pool);
  return rep;
}

// ---- reports ------------------------------------------------------------------------

const ArmResult& ExperimentReport::arm(const std::string& name) const {
  for (const auto& a : arms)
    if (a.name == name) return a;
  throw Error("report has no arm '" + name + "'");
}

namespace {

json shift_json(const std::vector<ShiftStats>& v) {
  json a = json::array();
  for (const auto& s : v)
    a.push_back({{"slot", s.slot},
                 {"mean_cosine", s.mean_cosine},
                 {"mean_l2_change_pct", s.mean_l2_change_pct},
                 {"pairs", s.pairs},
                 {"excluded_zero_norm", s.excluded_zero_norm}});
  return a;
}

std::vector<ShiftStats> shift_from_json(const json& a) {
  std::vector<ShiftStats> v;
  for (const auto& s : a)
    v.push_back({s.at("slot").get<std::size_t>(), s.at("mean_cosine").get<double>(),
                 s.at("mean_l2_change_pct").get<double>(), s.at("pairs").get<std::size_t>(),
                 s.at("excluded_zero_norm").get<std::size_t>()});
  return v;
}

}  // namespace

json ExperimentReport::to_json() const {
  json arms_j = json::array();
  for (const auto& a : arms) {
    json imp = json::array();
    for (const auto& i : a.importance) imp.push_back({{"group", i.group}, {"mean", i.mean}, {"stddev", i.stddev}});
    arms_j.push_back({{"name", a.name},
                      {"kind", a.kind},
                      {"train_ne", a.train_ne},
                      {"eval_ne", a.eval_ne},
                      {"train_ne_diff_pct", a.train_diff_pct},
                      {"eval_ne_diff_pct", a.eval_diff_pct},
                      {"mean_staleness_days", a.mean_staleness_days},
                      {"cold_responses", a.cold_responses},
                      {"train_rows", a.train_rows},
                      {"eval_rows", a.eval_rows},
                      {"importance", imp}});
  }
  json j = {{"schema_version", kReportSchemaVersion},
            {"experiment", experiment},
            {"config_fingerprint", hex64(config_fingerprint)},
            {"seed", seed},
            {"arms", arms_j}};
  if (!shift_raw.empty())
    j["shift"] = {{"pool", shift_pool}, {"raw", shift_json(shift_raw)}, {"pooled", shift_json(shift_pooled)}};
  return j;
}

ExperimentReport ExperimentReport::from_json(const json& j) {
  try {
    if (j.at("schema_version").get<int>() != kReportSchemaVersion)
      throw FormatError("report: unsupported schema version " + j.at("schema_version").dump());
    ExperimentReport r;
    r.experiment = j.at("experiment").get<std::string>();
    r.config_fingerprint = std::stoull(j.at("config_fingerprint").get<std::string>(), nullptr, 16);
    r.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& a : j.at("arms")) {
      ArmResult x;
      x.name = a.at("name").get<std::string>();
      x.kind = a.at("kind").get<std::string>();
      x.train_ne = a.at("train_ne").get<double>();
      x.eval_ne = a.at("eval_ne").get<double>();
      x.train_diff_pct = a.at("train_ne_diff_pct").get<double>();
      x.eval_diff_pct = a.at("eval_ne_diff_pct").get<double>();
      x.mean_staleness_days = a.at("mean_staleness_days").get<double>();
      x.cold_responses = a.at("cold_responses").get<std::uint64_t>();
      x.train_rows = a.at("train_rows").get<std::uint64_t>();
      x.eval_rows = a.at("eval_rows").get<std::uint64_t>();
      for (const auto& i : a.at("importance"))
        x.importance.push_back({i.at("group").get<std::string>(), i.at("mean").get<double>(),
                                i.at("stddev").get<double>()});
      r.arms.push_back(std::move(x));
    }
    if (j.contains("shift")) {
      r.shift_pool = j["shift"].at("pool").get<std::size_t>();
      r.shift_raw = shift_from_json(j["shift"].at("raw"));
      r.shift_pooled = shift_from_json(j["shift"].at("pooled"));
    }
    return r;
  } catch (const json::exception& e) {
    throw FormatError(std::string("report: ") + e.what());
  }
}

std::string ExperimentReport::to_text() const {
  std::ostringstream o;
  char buf[256];
  o << "experiment " << experiment << "  seed " << seed << "  fingerprint " << hex64(config_fingerprint) << "\n";
  if (!arms.empty()) {
    std::snprintf(buf, sizeof buf, "%-16s %10s %10s %12s %12s %10s\n", "arm", "train NE", "eval NE", "train diff%",
                  "eval diff%", "stale(d)");
    o << buf;
    for (const auto& a : arms) {
      std::snprintf(buf, sizeof buf, "%-16s %10.5f %10.5f %12.3f %12.3f %10.3f\n", a.name.c_str(), a.train_ne,
                    a.eval_ne, a.train_diff_pct, a.eval_diff_pct, a.mean_staleness_days);
      o << buf;
    }
    for (const auto& a : arms) {
      o << "importance[" << a.name << "]:";
      for (const auto& i : a.importance) {
        std::snprintf(buf, sizeof buf, " %s=%.5f(+-%.5f)", i.group.c_str(), i.mean, i.stddev);
        o << buf;
      }
      o << "\n";
    }
  }
  if (!shift_raw.empty()) {
    std::snprintf(buf, sizeof buf, "%-6s %12s %12s %14s %14s\n", "slot", "cos raw", "cos P=" , "l2% raw", "l2% pooled");
    o << "embedding shift, pool " << shift_pool << "\n" << buf;
    for (std::size_t k = 0; k < shift_raw.size(); ++k) {
      std::snprintf(buf, sizeof buf, "%-6zu %12.4f %12.4f %14.3f %14.3f\n", k, shift_raw[k].mean_cosine,
                    shift_pooled[k].mean_cosine, shift_raw[k].mean_l2_change_pct, shift_pooled[k].mean_l2_change_pct);
      o << buf;
    }
  }
  return o.str();
}

}  // namespace sum
