// SPDX-License-Identifier: Apache-2.0
//
// sumctl: generate data, train the upstream lineage, serve embeddings over the
// wire protocol, run the offline experiments and summarise their reports.
//
// Exit codes: 0 success, 1 usage error or missing prerequisite, 2 failed
// acceptance gate (--check), 3 internal error.
#include <algorithm>
#include <chrono>
#include <csignal>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <unistd.h>

#include "CLI11.hpp"
#include "sum/binary_io.hpp"
#include "sum/error.hpp"
#include "sum/run_config.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace sum;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct GateFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void log(const std::string& m) { std::fprintf(stderr, "sumctl: %s\n", m.c_str()); }

std::vector<std::uint8_t> read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot read " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_text(const fs::path& p, const std::string& s) {
  const fs::path tmp = p.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << s;
    if (!out.flush()) throw IoError("write failed: " + tmp.string());
  }
  fs::rename(tmp, p);
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot read " + p.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
}

// Replaces `dir` with a freshly built sibling so re-runs never leave a mix of
// old and new files.
template <typename Fn>
void build_dir(const fs::path& dir, Fn&& fill) {
  const fs::path tmp = dir.string() + ".tmp" + std::to_string(::getpid());
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  fill(tmp);
  fs::remove_all(dir);
  fs::rename(tmp, dir);
}

struct Options {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::int32_t> days;
  std::string mode;
  bool check = false;
  std::optional<std::uint16_t> port;
  double max_seconds = 0;
  std::string report_dir;
};

struct Loaded {
  RunConfig run;
  fs::path out;
  std::uint64_t seed = 0;
};

Loaded load(const Options& o) {
  if (o.config.empty()) throw UsageError("--config is required");
  Loaded l;
  l.run = load_run_config(o.config);
  l.out = o.out.empty() ? fs::path(l.run.out) : fs::path(o.out);
  l.seed = o.seed ? *o.seed : l.run.seeds.front();
  l.run.experiment = l.run.experiment.with_seed(l.seed);
  return l;
}

// ---- gen-data ---------------------------------------------------------------------

int cmd_gen_data(const Options& o) {
  const Loaded l = load(o);
  const std::int32_t days = o.days ? *o.days : l.run.experiment.days;
  if (days < 0) throw UsageError("--days must be >= 0");
  if (days == 0) {
    log("no days requested, nothing written");
    return 0;
  }
  const SyntheticWorld world(l.run.experiment.drift);
  const fs::path dir = l.out / "data";
  fs::create_directories(l.out);
  build_dir(dir, [&](const fs::path& tmp) {
    json files = json::array();
    for (std::int32_t d = 0; d < days; ++d) {
      const std::string name = day_file_name(d);
      write_day_file(tmp / name, world.generate_day(d), l.run.fingerprint);
      const auto bytes = read_bytes(tmp / name);
      files.push_back({{"file", name}, {"day", d}, {"bytes", bytes.size()}, {"crc32", io::crc32(bytes)}});
    }
    const json manifest = {{"schema_version", 1},
                           {"config_fingerprint", fingerprint_hex(l.run.fingerprint)},
                           {"seed", l.seed},
                           {"files", files}};
    write_text(tmp / "manifest.json", manifest.dump(2) + "\n");
  });
  log("wrote " + std::to_string(days) + " day files to " + dir.string());
  return 0;
}

// ---- train ------------------------------------------------------------------------

struct DayFiles {
  std::map<std::int32_t, fs::path> paths;
};

DayFiles check_data(const Loaded& l) {
  const fs::path dir = l.out / "data";
  if (!fs::exists(dir / "manifest.json"))
    throw UsageError("missing prerequisite " + (dir / "manifest.json").string() + ": run gen-data first");
  const json m = read_json(dir / "manifest.json");
  if (m.at("config_fingerprint").get<std::string>() != fingerprint_hex(l.run.fingerprint))
    throw UsageError(dir.string() + " was generated from a different config (fingerprint " +
                     m.at("config_fingerprint").get<std::string>() + ", this config " +
                     fingerprint_hex(l.run.fingerprint) + ")");
  if (m.at("seed").get<std::uint64_t>() != l.seed)
    throw UsageError(dir.string() + " was generated with seed " + m.at("seed").dump() + ", not " +
                     std::to_string(l.seed));
  DayFiles out;
  for (const auto& f : m.at("files")) {
    const fs::path p = dir / f.at("file").get<std::string>();
    if (!fs::exists(p)) throw UsageError("missing day file " + p.string());
    if (io::crc32(read_bytes(p)) != f.at("crc32").get<std::uint32_t>())
      throw FormatError("checksum mismatch in " + p.string());
    out.paths[f.at("day").get<std::int32_t>()] = p;
  }
  return out;
}

DayData load_day(const DayFiles& files, std::int32_t d, std::uint64_t fingerprint) {
  const auto it = files.paths.find(d);
  if (it == files.paths.end()) throw UsageError("missing day " + std::to_string(d) + ": run gen-data with more days");
  std::uint64_t fp = 0;
  DayData day = read_day_file(it->second, &fp);
  if (fp != fingerprint) throw FormatError(it->second.string() + " carries a different config fingerprint");
  return day;
}

int cmd_train(const Options& o) {
  const Loaded l = load(o);
  const DayFiles files = check_data(l);
  const ExperimentConfig& cfg = l.run.experiment;
  const std::int32_t first = cfg.train.initial_first_day, init_last = cfg.train.initial_last_day;
  const std::int32_t last = files.paths.empty() ? -1 : files.paths.rbegin()->first;
  if (last < init_last)
    throw UsageError("initial training needs days " + std::to_string(first) + ".." + std::to_string(init_last) +
                     ", data ends at day " + std::to_string(last));
  const std::size_t versions = 1 + std::size_t((last - init_last) / cfg.train.cadence);
  const fs::path dir = l.out / "snapshots";
  build_dir(dir, [&](const fs::path& tmp) {
    SnapshotStore store(versions, tmp);
    Trainer trainer(cfg.resolved_tower(), cfg.train);
    {
      std::vector<DayData> initial;
      for (std::int32_t d = first; d <= init_last; ++d) initial.push_back(load_day(files, d, l.run.fingerprint));
      std::vector<const DayData*> ptrs;
      for (const auto& d : initial) ptrs.push_back(&d);
      trainer.train_initial(ptrs, store);
      log("published v1 (days " + std::to_string(first) + ".." + std::to_string(init_last) + ")");
    }
    for (std::int32_t d = init_last + cfg.train.cadence; d <= last; d += cfg.train.cadence) {
      const auto s = trainer.recurring_update(store, load_day(files, d, l.run.fingerprint));
      log("published v" + std::to_string(s->version) + " (through day " + std::to_string(d) + ")");
    }
    const json run = {{"schema_version", 1},
                      {"config_fingerprint", fingerprint_hex(l.run.fingerprint)},
                      {"seed", l.seed},
                      {"latest_version", store.latest()->version},
                      {"manifest_crc32", io::crc32(read_bytes(tmp / "manifest.json"))}};
    write_text(tmp / "run.json", run.dump(2) + "\n");
  });
  log("snapshots in " + dir.string());
  return 0;
}

// ---- serve ------------------------------------------------------------------------

int cmd_serve(const Options& o) {
  Loaded l = load(o);
  const fs::path dir = l.out / "snapshots";
  if (!fs::exists(dir / "run.json")) throw UsageError("missing prerequisite " + (dir / "run.json").string() + ": run train first");
  const json run = read_json(dir / "run.json");
  if (run.at("config_fingerprint").get<std::string>() != fingerprint_hex(l.run.fingerprint))
    throw UsageError(dir.string() + " was trained from a different config");
  ServiceConfig svc = l.run.serving;
  if (!o.mode.empty()) svc.mode.kind = mode_kind_from_string(o.mode);
  const std::uint16_t port = o.port ? *o.port : l.run.port;

  // Block the control signals before any thread starts so only sigtimedwait sees them.
  sigset_t sigs;
  sigemptyset(&sigs);
  sigaddset(&sigs, SIGINT);
  sigaddset(&sigs, SIGTERM);
  sigaddset(&sigs, SIGUSR1);
  pthread_sigmask(SIG_BLOCK, &sigs, nullptr);

  SnapshotStore snaps = SnapshotStore::open(dir, 1u << 20);
  const auto vs = snaps.versions();
  const SnapshotPtr frozen = snaps.find(vs.front());
  auto store = std::make_shared<FeatureStore>(l.run.experiment.resolved_store());
  SoapService service(svc, store, snaps.latest(), frozen);
  service.start();
  if (svc.mode.kind == ModeKind::OfflineBatch) {
    // Batch mode serves the population of the newest day with the newest snapshot.
    const DayFiles files = check_data(l);
    if (files.paths.empty()) throw UsageError("offline_batch serving needs day files");
    const DayData day = load_day(files, files.paths.rbegin()->first, l.run.fingerprint);
    std::map<std::uint64_t, UserFeatures> last;
    for (const auto& r : day.requests) last[r.user_id] = r.features;
    std::vector<std::pair<std::uint64_t, UserFeatures>> pop(last.begin(), last.end());
    service.run_batch_job(*snaps.latest(), pop);
    log("batch job computed " + std::to_string(pop.size()) + " users");
  }
  WireServer server(service, port);
  std::printf("listening on 127.0.0.1:%u mode %s snapshot v%llu\n", unsigned(server.port()),
              to_string(svc.mode.kind), static_cast<unsigned long long>(snaps.latest()->version));
  std::fflush(stdout);

  const fs::path metrics_path = l.out / "metrics.txt";
  auto dump_metrics = [&] {
    write_text(metrics_path, service.metrics().to_text());
    log("metrics written to " + metrics_path.string());
  };
  const auto t0 = std::chrono::steady_clock::now();
  std::uint32_t manifest_crc = io::crc32(read_bytes(dir / "manifest.json"));
  for (;;) {
    timespec wait{1, 0};
    const int sig = sigtimedwait(&sigs, nullptr, &wait);
    if (sig == SIGUSR1) dump_metrics();
    if (sig == SIGINT || sig == SIGTERM) break;
    if (o.max_seconds > 0 &&
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() >= o.max_seconds)
      break;
    // Hot swap when train has published a newer lineage.
    std::error_code ec;
    if (!fs::exists(dir / "manifest.json", ec)) continue;
    try {
      const std::uint32_t crc = io::crc32(read_bytes(dir / "manifest.json"));
      if (crc == manifest_crc) continue;
      manifest_crc = crc;
      const SnapshotStore fresh = SnapshotStore::open(dir, 1u << 20);
      if (fresh.latest()->version > service.current_snapshot()->version) {
        service.swap_snapshot(fresh.latest());
        log("swapped to snapshot v" + std::to_string(fresh.latest()->version));
      }
    } catch (const std::exception& e) {
      log(std::string("snapshot reload skipped: ") + e.what());
    }
  }
  server.stop();
  service.stop();
  dump_metrics();
  return 0;
}

// ---- simulate and report ------------------------------------------------------------

std::string report_stem(const ExperimentReport& r) { return r.experiment + "_seed" + std::to_string(r.seed); }

std::string gate_text(const std::vector<GateResult>& gates) {
  std::string s;
  for (const auto& g : gates) s += std::string(g.passed ? "PASS " : "FAIL ") + g.name + "  " + g.detail + "\n";
  return s;
}

int finish_gates(const std::vector<ExperimentReport>& reports, bool check) {
  const auto gates = evaluate_gates(reports);
  std::cout << gate_text(gates);
  if (check && std::any_of(gates.begin(), gates.end(), [](const GateResult& g) { return !g.passed; }))
    throw GateFailure("one or more acceptance gates failed");
  return 0;
}

int cmd_simulate(const Options& o) {
  const Loaded base = load(o);
  std::vector<std::uint64_t> seeds = o.seed ? std::vector<std::uint64_t>{*o.seed} : base.run.seeds;
  const fs::path reports_dir = base.out / "reports", cache = base.out / "cache";
  fs::create_directories(reports_dir);
  fs::create_directories(cache);
  std::vector<ExperimentReport> reports;
  for (const auto seed : seeds) {
    ExperimentConfig cfg = base.run.experiment.with_seed(seed);
    if (o.days) cfg.days = *o.days;
    cfg.validate();
    const SyntheticWorld world(cfg.drift);
    const Lineage lineage = Lineage::build(cfg, world, &cache, log);
    for (const auto& name : base.run.experiments) {
      log("seed " + std::to_string(seed) + ": " + name);
      ExperimentReport r = name == "scheme_comparison" ? run_scheme_comparison(cfg, lineage, world)
                           : name == "pooling_ablation"
                               ? run_pooling_ablation(cfg, lineage, world)
                               : embedding_shift_report(cfg, lineage, world, base.run.shift_pool);
      r.config_fingerprint = base.run.fingerprint;
      write_text(reports_dir / (report_stem(r) + ".json"), r.to_json().dump(2) + "\n");
      write_text(reports_dir / (report_stem(r) + ".txt"), r.to_text());
      std::cout << r.to_text() << "\n";
      reports.push_back(std::move(r));
    }
  }
  return finish_gates(reports, o.check);
}

std::string summary_text(const std::vector<ExperimentReport>& reports) {
  std::ostringstream o;
  char buf[256];
  o << "config fingerprint " << fingerprint_hex(reports.front().config_fingerprint) << "\n\n";
  std::map<std::string, std::vector<const ExperimentReport*>> by;
  for (const auto& r : reports) by[r.experiment].push_back(&r);
  for (const auto& [name, rs] : by) {
    o << "== " << name << " (" << rs.size() << " seeds)\n";
    if (!rs.front()->arms.empty()) {
      std::snprintf(buf, sizeof buf, "%-16s %14s %14s %10s\n", "arm", "eval diff% mean", "train diff% mean",
                    "stale(d)");
      o << buf;
      for (const auto& arm : rs.front()->arms) {
        double e = 0, t = 0, s = 0;
        for (const auto* r : rs) {
          const auto& a = r->arm(arm.name);
          e += a.eval_diff_pct;
          t += a.train_diff_pct;
          s += a.mean_staleness_days;
        }
        const double n = double(rs.size());
        std::snprintf(buf, sizeof buf, "%-16s %14.3f %14.3f %10.3f\n", arm.name.c_str(), e / n, t / n, s / n);
        o << buf;
      }
    }
    if (!rs.front()->shift_raw.empty()) {
      std::snprintf(buf, sizeof buf, "%-6s %10s %10s %12s %12s\n", "slot", "cos raw", "cos pool", "l2% raw",
                    "l2% pool");
      o << buf;
      for (std::size_t k = 0; k < rs.front()->shift_raw.size(); ++k) {
        double cr = 0, cp = 0, lr = 0, lp = 0;
        for (const auto* r : rs) {
          cr += r->shift_raw.at(k).mean_cosine;
          cp += r->shift_pooled.at(k).mean_cosine;
          lr += r->shift_raw.at(k).mean_l2_change_pct;
          lp += r->shift_pooled.at(k).mean_l2_change_pct;
        }
        const double n = double(rs.size());
        std::snprintf(buf, sizeof buf, "%-6zu %10.4f %10.4f %12.3f %12.3f\n", k, cr / n, cp / n, lr / n, lp / n);
        o << buf;
      }
    }
    o << "\n";
  }
  o << gate_text(evaluate_gates(reports));
  return o.str();
}

int cmd_report(const Options& o) {
  const fs::path dir = !o.report_dir.empty() ? fs::path(o.report_dir) : !o.out.empty() ? fs::path(o.out) : fs::path();
  if (dir.empty()) throw UsageError("report needs a run directory");
  const fs::path reports_dir = dir / "reports";
  std::vector<fs::path> files;
  if (fs::is_directory(reports_dir))
    for (const auto& e : fs::directory_iterator(reports_dir))
      if (e.path().extension() == ".json") files.push_back(e.path());
  if (files.empty()) throw UsageError("no reports under " + reports_dir.string() + ": run simulate first");
  std::sort(files.begin(), files.end());
  std::vector<ExperimentReport> reports;
  for (const auto& f : files) {
    reports.push_back(ExperimentReport::from_json(read_json(f)));
    if (reports.back().config_fingerprint != reports.front().config_fingerprint)
      throw UsageError("refusing to merge " + f.string() + " (fingerprint " +
                       fingerprint_hex(reports.back().config_fingerprint) + ") with " + files.front().string() +
                       " (fingerprint " + fingerprint_hex(reports.front().config_fingerprint) + ")");
  }
  const std::string text = summary_text(reports);
  write_text(dir / "summary.txt", text);
  std::cout << text;
  const auto gates = evaluate_gates(reports);
  if (o.check && std::any_of(gates.begin(), gates.end(), [](const GateResult& g) { return !g.passed; }))
    throw GateFailure("one or more acceptance gates failed");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SUM user-embedding pipeline: data, training, serving and experiments"};
  app.require_subcommand(1);
  Options o;
  auto add_common = [&](CLI::App* c, const char* seed_help = "override the seed (default: first of the config's seeds)") {
    c->add_option("--config", o.config, "run config (JSON, // comments allowed)")->check(CLI::ExistingFile);
    c->add_option("--out", o.out, "output directory (default: the config's \"out\")");
    c->add_option("--seed", o.seed, seed_help);
  };
  auto* gen = app.add_subcommand("gen-data", "write day files and a checksummed manifest");
  add_common(gen);
  gen->add_option("--days", o.days, "number of days (default: experiment.days)");
  auto* train = app.add_subcommand("train", "initial training plus one recurring update per day");
  add_common(train);
  auto* serve = app.add_subcommand("serve", "serve embeddings over the wire protocol until SIGINT or SIGTERM");
  add_common(serve);
  serve->add_option("--mode", o.mode, "frozen, offline_batch, realtime or async");
  serve->add_option("--port", o.port, "TCP port on 127.0.0.1 (0 picks a free one)");
  serve->add_option("--max-seconds", o.max_seconds, "stop after this many seconds");
  auto* sim = app.add_subcommand("simulate", "run the configured experiments for each seed");
  add_common(sim, "run only this seed (default: every seed in the config)");
  sim->add_option("--days", o.days, "override experiment.days");
  sim->add_flag("--check", o.check, "exit 2 when an acceptance gate fails");
  auto* rep = app.add_subcommand("report", "summarise every report under <dir>/reports");
  rep->add_option("dir", o.report_dir, "run directory");
  rep->add_option("--out", o.out, "run directory");
  rep->add_flag("--check", o.check, "exit 2 when an acceptance gate fails");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }
  try {
    if (*gen) return cmd_gen_data(o);
    if (*train) return cmd_train(o);
    if (*serve) return cmd_serve(o);
    if (*sim) return cmd_simulate(o);
    if (*rep) return cmd_report(o);
    return 1;
  } catch (const UsageError& e) {
    log(std::string("error: ") + e.what());
    return 1;
  } catch (const ConfigError& e) {
    log(std::string("config error: ") + e.what());
    return 1;
  } catch (const GateFailure& e) {
    log(e.what());
    return 2;
  } catch (const std::exception& e) {
    log(std::string("internal error: ") + e.what());
    return 3;
  }
}
