// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "sum/binary_io.hpp"
#include "sum/error.hpp"
#include "sum/json_util.hpp"
#include "sum/run_config.hpp"

namespace sum {

using nlohmann::json;

namespace {

const std::vector<std::string> kExperiments = {"scheme_comparison", "pooling_ablation", "embedding_shift"};

}  // namespace

void RunConfig::validate() const {
  experiment.validate();
  serving.validate();
  if (experiments.empty()) throw ConfigError("run: experiments must not be empty");
  for (const auto& e : experiments)
    if (std::find(kExperiments.begin(), kExperiments.end(), e) == kExperiments.end())
      throw ConfigError("run: unknown experiment '" + e + "'");
  if (seeds.empty()) throw ConfigError("run: seeds must not be empty");
  if (shift_pool < 2) throw ConfigError("run: shift_pool must be >= 2");
  if (out.empty()) throw ConfigError("run: out must not be empty");
}

json to_json(const RunConfig& c) {
  return {{"experiment", to_json(c.experiment)},
          {"serving",
           {{"mode", to_string(c.serving.mode.kind)},
            {"budget_ms", c.serving.mode.budget_ms},
            {"queue_capacity", c.serving.queue_capacity},
            {"compute_workers", c.serving.compute_workers},
            {"injected_compute_delay_ms", c.serving.injected_compute_delay_ms}}},
          {"experiments", c.experiments},
          {"seeds", c.seeds},
          {"shift_pool", c.shift_pool},
          {"out", c.out},
          {"port", c.port}};
}

RunConfig run_config_from_json(const json& j) {
  StrictObject o(j, "config");
  RunConfig d, c;
  if (o.has("experiment")) c.experiment = experiment_config_from_json(o.raw("experiment"));
  if (o.has("serving")) {
    StrictObject s(o.raw("serving"), "config.serving");
    c.serving.mode.kind = mode_kind_from_string(s.get("mode", std::string(to_string(d.serving.mode.kind))));
    c.serving.mode.budget_ms = s.get("budget_ms", d.serving.mode.budget_ms);
    c.serving.queue_capacity = s.get("queue_capacity", d.serving.queue_capacity);
    c.serving.compute_workers = s.get("compute_workers", d.serving.compute_workers);
    c.serving.injected_compute_delay_ms = s.get("injected_compute_delay_ms", d.serving.injected_compute_delay_ms);
    s.finish();
  }
  c.experiments = o.get("experiments", d.experiments);
  c.seeds = o.get("seeds", d.seeds);
  c.shift_pool = o.get("shift_pool", d.shift_pool);
  c.out = o.get("out", d.out);
  c.port = o.get("port", d.port);
  o.finish();
  if (c.serving.compute_workers < 1) throw ConfigError("config.serving: compute_workers must be >= 1");
  c.validate();
  c.fingerprint = canonical_fingerprint(j);
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

std::uint64_t canonical_fingerprint(const json& j) { return io::fnv1a64(j.dump()); }

std::string fingerprint_hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, v);
  return buf;
}

// ---- gates ------------------------------------------------------------------------

std::size_t required_seeds(std::size_t n) { return (4 * n + 4) / 5; }

bool scheme_ordering_holds(const ExperimentReport& r) {
  const double rt = r.arm("realtime").eval_ne, as = r.arm("async").eval_ne, ob = r.arm("offline_batch").eval_ne,
               fr = r.arm("frozen").eval_ne, ba = r.arm("baseline").eval_ne;
  return rt <= as && as <= ob && ob <= fr && fr <= ba;
}

bool pooling_smooths_every_slot(const ExperimentReport& r) {
  if (r.shift_raw.empty() || r.shift_raw.size() != r.shift_pooled.size()) return false;
  for (std::size_t k = 0; k < r.shift_raw.size(); ++k)
    if (!(r.shift_pooled[k].mean_cosine > r.shift_raw[k].mean_cosine &&
          r.shift_pooled[k].mean_l2_change_pct < r.shift_raw[k].mean_l2_change_pct))
      return false;
  return true;
}

bool pooling_improves_eval(const ExperimentReport& r) {
  // Diffs are negative when an arm beats baseline.
  return -r.arm("sum_with_ap").eval_diff_pct > -r.arm("sum_without_ap").eval_diff_pct;
}

bool unpooled_gain_shrinks_on_eval(const ExperimentReport& r) {
  const auto& a = r.arm("sum_without_ap");
  return -a.eval_diff_pct < -a.train_diff_pct;
}

bool importance_sane(const ExperimentReport& r, double floor, std::string* why) {
  auto fail = [&](const std::string& m) {
    if (why) *why = m;
    return false;
  };
  for (const auto& a : r.arms) {
    if (a.importance.empty()) return fail(a.name + ": no importance");
    const auto& last = a.importance.back();
    if (last.group != "decoy") return fail(a.name + ": " + last.group + " ranks last, not decoy");
    if (std::abs(last.mean) > 3.0 * last.stddev + floor)
      return fail(a.name + ": decoy importance " + std::to_string(last.mean) + " is not within noise of 0");
    if (a.kind == "baseline" || !(a.eval_diff_pct < 0.0)) continue;
    // Every embedding group must sit above the decoy, which is last.
    for (std::size_t i = 0; i + 1 < a.importance.size(); ++i)
      if (a.importance[i].group.rfind("sum_emb_", 0) == 0 && !(a.importance[i].mean > last.mean))
        return fail(a.name + ": " + a.importance[i].group + " ties the decoy");
  }
  return true;
}

std::vector<GateResult> evaluate_gates(const std::vector<ExperimentReport>& reports) {
  std::map<std::string, std::vector<const ExperimentReport*>> by;
  for (const auto& r : reports) by[r.experiment].push_back(&r);
  std::vector<GateResult> out;
  auto count_gate = [&](const std::string& name, const std::vector<const ExperimentReport*>& rs, auto&& pred,
                        bool all) {
    std::size_t ok = 0;
    std::string seeds;
    for (const auto* r : rs) {
      const bool p = pred(*r);
      ok += p;
      seeds += " " + std::to_string(r->seed) + (p ? "+" : "-");
    }
    const std::size_t need = all ? rs.size() : required_seeds(rs.size());
    out.push_back({name, ok >= need,
                   std::to_string(ok) + "/" + std::to_string(rs.size()) + " seeds (need " + std::to_string(need) +
                       "):" + seeds});
  };
  if (by.count("scheme_comparison")) {
    const auto& rs = by["scheme_comparison"];
    count_gate("scheme_ordering", rs, scheme_ordering_holds, false);
    count_gate("importance_sanity", rs, [](const ExperimentReport& r) { return importance_sane(r, 1e-4); }, true);
  }
  if (by.count("embedding_shift"))
    count_gate("pooling_smooths_shift", by["embedding_shift"], pooling_smooths_every_slot, true);
  if (by.count("pooling_ablation")) {
    const auto& rs = by["pooling_ablation"];
    count_gate("pooling_improves_eval", rs, pooling_improves_eval, false);
    count_gate("unpooled_eval_gain_below_train", rs, unpooled_gain_shrinks_on_eval, false);
  }
  return out;
}

}  // namespace sum
