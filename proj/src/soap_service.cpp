// SPDX-License-Identifier: Apache-2.0
#include "sum/soap_service.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <bit>
#include <cerrno>
#include <cmath>
#include <cstring>
#include <future>
#include <sstream>

#include "sum/binary_io.hpp"
#include "sum/error.hpp"

namespace sum {

const char* to_string(Provenance p) {
  switch (p) {
    case Provenance::AsyncCached: return "async_cached";
    case Provenance::Realtime: return "realtime";
    case Provenance::Batch: return "batch";
    case Provenance::Frozen: return "frozen";
    case Provenance::FallbackDefault: return "fallback_default";
  }
  return "?";
}

const char* to_string(ModeKind m) {
  switch (m) {
    case ModeKind::Frozen: return "frozen";
    case ModeKind::OfflineBatch: return "offline_batch";
    case ModeKind::Realtime: return "realtime";
    case ModeKind::Async: return "async";
  }
  return "?";
}

ModeKind mode_kind_from_string(const std::string& s) {
  for (ModeKind m : {ModeKind::Frozen, ModeKind::OfflineBatch, ModeKind::Realtime, ModeKind::Async})
    if (s == to_string(m)) return m;
  throw ConfigError("unknown serving mode '" + s + "' (expected frozen, offline_batch, realtime or async)");
}

void ServingMode::validate() const {
  if (kind == ModeKind::Realtime && !(budget_ms > 0.0)) throw ConfigError("realtime budget must be > 0 ms");
}

void ServiceConfig::validate() const {
  mode.validate();
  if (queue_capacity < 1) throw ConfigError("queue capacity must be >= 1");
  if (!(injected_compute_delay_ms >= 0.0)) throw ConfigError("injected compute delay must be >= 0");
  if (simulated_compute_us < 0) throw ConfigError("simulated compute time must be >= 0");
}

// ---- histogram ---------------------------------------------------------------

int LatencyHistogram::bucket_of(std::uint64_t v) {
  if (v < kSub) return static_cast<int>(v);
  const int e = std::bit_width(v) - 1;  // >= 5
  const int sub = static_cast<int>(v >> (e - 5)) - kSub;
  return kSub + (e - 5) * kSub + sub;
}

std::uint64_t LatencyHistogram::bucket_upper(int b) {
  if (b < kSub) return static_cast<std::uint64_t>(b);
  const int e = (b - kSub) / kSub + 5, sub = (b - kSub) % kSub;
  const std::uint64_t lower = static_cast<std::uint64_t>(kSub + sub) << (e - 5);
  return lower + (std::uint64_t{1} << (e - 5)) - 1;
}

void LatencyHistogram::record(std::int64_t micros) {
  const std::uint64_t v = micros < 0 ? 0 : static_cast<std::uint64_t>(micros);
  buckets_[static_cast<std::size_t>(bucket_of(v))].fetch_add(1, std::memory_order_relaxed);
  count_.fetch_add(1, std::memory_order_relaxed);
  std::uint64_t m = max_.load(std::memory_order_relaxed);
  while (v > m && !max_.compare_exchange_weak(m, v, std::memory_order_relaxed)) {
  }
}

double LatencyHistogram::percentile(double q) const {
  const std::uint64_t n = count();
  if (n == 0) return 0.0;
  const auto rank = static_cast<std::uint64_t>(std::ceil(std::clamp(q, 0.0, 1.0) * double(n)));
  std::uint64_t seen = 0;
  for (int b = 0; b < kBuckets; ++b) {
    seen += buckets_[static_cast<std::size_t>(b)].load(std::memory_order_relaxed);
    if (seen >= std::max<std::uint64_t>(rank, 1)) return double(std::min(bucket_upper(b), max_.load()));
  }
  return max();
}

void LatencyHistogram::reset() {
  for (auto& b : buckets_) b.store(0);
  count_.store(0);
  max_.store(0);
}

std::string ServiceMetrics::to_text() const {
  std::ostringstream o;
  o << "requests " << requests << "\n";
  for (std::size_t p = 0; p < kProvenanceCount; ++p)
    o << "provenance." << to_string(static_cast<Provenance>(p)) << " " << by_provenance[p] << "\n";
  o << "fallbacks " << fallbacks << "\n"
    << "compute.enqueued " << enqueued << "\n"
    << "compute.coalesced " << coalesced << "\n"
    << "compute.dropped " << dropped << "\n"
    << "compute.writes " << compute_writes << "\n"
    << "queue_depth " << queue_depth << "\n"
    << "snapshot_swaps " << swaps << "\n"
    << "read_latency_us.p50 " << read_p50_us << "\n"
    << "read_latency_us.p99 " << read_p99_us << "\n"
    << "read_latency_us.max " << read_max_us << "\n"
    << "compute_latency_us.p50 " << compute_p50_us << "\n"
    << "compute_latency_us.p99 " << compute_p99_us << "\n";
  return o.str();
}

// ---- service -------------------------------------------------------------------

namespace {

// Keeps timed-out realtime computations alive until they finish so that
// dropping the future never blocks the request path.
struct Orphans {
  std::mutex mu;
  std::vector<std::future<Tensorf>> futures;

  void add(std::future<Tensorf> f) {
    std::lock_guard lk(mu);
    std::erase_if(futures, [](auto& x) { return x.wait_for(std::chrono::seconds(0)) == std::future_status::ready; });
    futures.push_back(std::move(f));
  }
};

Orphans& orphans() {
  static Orphans o;
  return o;
}

void sleep_ms(double ms) {
  if (ms > 0) std::this_thread::sleep_for(std::chrono::duration<double, std::milli>(ms));
}

}  // namespace

SoapService::SoapService(ServiceConfig cfg, std::shared_ptr<FeatureStore> store, SnapshotPtr initial,
                         SnapshotPtr frozen)
    : cfg_(std::move(cfg)), store_(std::move(store)), snapshot_(std::move(initial)), frozen_(std::move(frozen)) {
  cfg_.validate();
  if (!store_) throw ConfigError("soap service: no feature store");
  if (!snapshot_) throw ConfigError("soap service: no initial snapshot");
  if (!frozen_) frozen_ = snapshot_;
  const TowerConfig& tc = snapshot_->config();
  const StoreConfig& sc = store_->config();
  if (tc.num_embeddings != sc.num_embeddings || tc.dim != sc.dim)
    throw ConfigError("soap service: store holds " + std::to_string(sc.num_embeddings) + "x" + std::to_string(sc.dim) +
                      " embeddings, model produces " + std::to_string(tc.num_embeddings) + "x" +
                      std::to_string(tc.dim));
  batch_ = std::make_shared<const BatchCache>();
  epoch_ = std::chrono::steady_clock::now();
}

SoapService::~SoapService() { stop(); }

void SoapService::start() {
  if (started_.exchange(true)) return;
  stopping_ = false;
  for (std::size_t i = 0; i < cfg_.compute_workers; ++i) workers_.emplace_back([this] { worker_loop(); });
}

void SoapService::stop() {
  if (!started_.exchange(false)) return;
  {
    std::lock_guard lk(q_mu_);
    stopping_ = true;
  }
  q_cv_.notify_all();
  for (auto& w : workers_) w.join();
  workers_.clear();
}

std::int64_t SoapService::steady_us() const {
  return std::chrono::duration_cast<std::chrono::microseconds>(std::chrono::steady_clock::now() - epoch_).count();
}

std::int64_t SoapService::now_us(const ServeRequest& req) const { return simulated() ? req.arrival_us : steady_us(); }

Tensorf SoapService::zero() const { return Tensorf(store_->config().num_embeddings, store_->config().dim); }

SnapshotPtr SoapService::current_snapshot() const { return std::atomic_load(&snapshot_); }

void SoapService::swap_snapshot(SnapshotPtr next) {
  if (!next || !next->model) throw Error("swap_snapshot: null snapshot");
  std::lock_guard lk(swap_mu_);
  const SnapshotPtr cur = std::atomic_load(&snapshot_);
  if (next->version <= cur->version)
    throw VersionError("swap_snapshot: version " + std::to_string(next->version) + " does not exceed current " +
                       std::to_string(cur->version));
  if (next->config_hash != cur->config_hash) throw ConfigError("swap_snapshot: model config differs");
  std::atomic_store(&snapshot_, std::move(next));
  swaps_.fetch_add(1);
}

ServeResponse SoapService::serve(const ServeRequest& req) {
  if (!started_.load()) throw Error("soap service: not started");
  const auto t0 = std::chrono::steady_clock::now();
  ServeResponse r;
  switch (cfg_.mode.kind) {
    case ModeKind::Async: r = serve_async(req); break;
    case ModeKind::Realtime: r = serve_realtime(req); break;
    case ModeKind::OfflineBatch: r = serve_batch(req); break;
    case ModeKind::Frozen: r = serve_frozen(req); break;
  }
  r.request_id = req.request_id;
  const auto elapsed =
      std::chrono::duration_cast<std::chrono::microseconds>(std::chrono::steady_clock::now() - t0).count();
  if (!simulated() || cfg_.mode.kind != ModeKind::Realtime) r.service_time_us = elapsed;
  read_latency_.record(elapsed);
  requests_.fetch_add(1);
  by_provenance_[static_cast<std::size_t>(r.provenance)].fetch_add(1);
  return r;
}

ServeResponse SoapService::serve_async(const ServeRequest& req) {
  if (simulated()) run_ready(req.arrival_us);
  const StoreConfig& sc = store_->config();
  const auto cached = store_->read_latest(req.user_id, sc.pool_window - 1);
  ServeResponse r;
  r.embedding = average_cached(cached, sc.pool_window - 1, sc.num_embeddings, sc.dim);
  r.provenance = Provenance::AsyncCached;
  for (const auto& c : cached) {
    r.versions.push_back(c.snapshot_version);
    r.computed_at_us.push_back(c.wall_time);
  }
  enqueue(req);
  return r;
}

ServeResponse SoapService::serve_realtime(const ServeRequest& req) {
  const StoreConfig& sc = store_->config();
  const SnapshotPtr snap = current_snapshot();
  const double delay_ms = cfg_.injected_compute_delay_ms;
  Tensorf current;
  bool on_time;
  std::int64_t compute_us;
  if (simulated()) {
    current = snap->model->embed(req.features);
    compute_us = cfg_.simulated_compute_us + static_cast<std::int64_t>(delay_ms * 1000.0);
    on_time = double(compute_us) <= cfg_.mode.budget_ms * 1000.0;
  } else {
    const auto t0 = std::chrono::steady_clock::now();
    auto fut = std::async(std::launch::async, [snap, features = req.features, delay_ms] {
      sleep_ms(delay_ms);
      return snap->model->embed(features);
    });
    on_time = fut.wait_for(std::chrono::duration<double, std::milli>(cfg_.mode.budget_ms)) ==
              std::future_status::ready;
    if (on_time) {
      current = fut.get();
    } else {
      orphans().add(std::move(fut));
    }
    compute_us = std::chrono::duration_cast<std::chrono::microseconds>(std::chrono::steady_clock::now() - t0).count();
  }
  compute_latency_.record(compute_us);
  ServeResponse r;
  r.service_time_us = compute_us;
  const auto cached = store_->read_latest(req.user_id, sc.pool_window - 1);
  for (const auto& c : cached) {
    r.versions.push_back(c.snapshot_version);
    r.computed_at_us.push_back(c.wall_time);
  }
  if (!on_time) {
    // The late result is discarded; only what is already cached is served.
    fallbacks_.fetch_add(1);
    r.embedding = average_cached(cached, sc.pool_window - 1, sc.num_embeddings, sc.dim);
    r.provenance = Provenance::FallbackDefault;
    return r;
  }
  r.embedding = average_pool(current, cached, sc.pool_window);
  const std::int64_t done = now_us(req) + (simulated() ? compute_us : 0);
  r.versions.insert(r.versions.begin(), snap->version);
  r.computed_at_us.insert(r.computed_at_us.begin(), done);
  r.provenance = Provenance::Realtime;
  store_->write(req.user_id, current, snap->version, done);
  compute_writes_.fetch_add(1);
  return r;
}

ServeResponse SoapService::serve_batch(const ServeRequest& req) {
  const auto cache = std::atomic_load(&batch_);
  ServeResponse r;
  r.provenance = Provenance::Batch;
  if (auto it = cache->find(req.user_id); it != cache->end()) {
    r.embedding = it->second.embedding;
    r.versions = {it->second.version};
    r.computed_at_us = {it->second.computed_at_us};
  } else {
    r.embedding = zero();
  }
  return r;
}

ServeResponse SoapService::serve_frozen(const ServeRequest& req) {
  ServeResponse r;
  r.embedding = frozen_->model->embed(req.features);
  r.versions = {frozen_->version};
  r.computed_at_us = {now_us(req)};
  r.provenance = Provenance::Frozen;
  return r;
}

void SoapService::run_batch_job(const ModelSnapshot& snap,
                                const std::vector<std::pair<std::uint64_t, UserFeatures>>& population,
                                std::int64_t job_time_us) {
  if (population.empty()) throw Error("run_batch_job: empty user population");
  auto next = std::make_shared<BatchCache>();
  next->reserve(population.size());
  for (const auto& [user, features] : population) (*next)[user] = BatchEntry{snap.version, job_time_us, snap.model->embed(features)};
  std::atomic_store(&batch_, std::shared_ptr<const BatchCache>(std::move(next)));
}

void SoapService::enqueue(const ServeRequest& req) {
  enqueued_.fetch_add(1);
  {
    std::lock_guard lk(q_mu_);
    if (queued_users_.count(req.user_id)) {
      coalesced_.fetch_add(1);
      return;
    }
    if (queue_.size() >= cfg_.queue_capacity) {
      dropped_.fetch_add(1);
      return;
    }
    const std::int64_t ready =
        req.arrival_us + cfg_.simulated_compute_us + static_cast<std::int64_t>(cfg_.injected_compute_delay_ms * 1000.0);
    queue_.push_back(Task{req.user_id, req.features, ready});
    queued_users_.insert(req.user_id);
  }
  q_cv_.notify_one();
}

void SoapService::execute(Task& task, std::int64_t write_time) {
  const auto t0 = std::chrono::steady_clock::now();
  const SnapshotPtr snap = current_snapshot();  // taken at task start
  if (!simulated()) sleep_ms(cfg_.injected_compute_delay_ms);
  const Tensorf emb = snap->model->embed(task.features);
  store_->write(task.user_id, emb, snap->version, simulated() ? write_time : steady_us());
  compute_writes_.fetch_add(1);
  compute_latency_.record(
      std::chrono::duration_cast<std::chrono::microseconds>(std::chrono::steady_clock::now() - t0).count());
}

void SoapService::worker_loop() {
  for (;;) {
    Task task;
    {
      std::unique_lock lk(q_mu_);
      q_cv_.wait(lk, [&] { return stopping_ || !queue_.empty(); });
      if (queue_.empty()) return;  // stopping with nothing left
      task = std::move(queue_.front());
      queue_.pop_front();
      queued_users_.erase(task.user_id);
      ++running_;
    }
    execute(task, 0);
    {
      std::lock_guard lk(q_mu_);
      --running_;
    }
    idle_cv_.notify_all();
  }
}

std::size_t SoapService::run_ready(std::int64_t now) {
  if (!simulated()) return 0;
  std::size_t n = 0;
  for (;;) {
    Task task;
    {
      std::lock_guard lk(q_mu_);
      if (queue_.empty() || queue_.front().ready_us > now) break;
      task = std::move(queue_.front());
      queue_.pop_front();
      queued_users_.erase(task.user_id);
    }
    execute(task, task.ready_us);
    ++n;
  }
  return n;
}

void SoapService::drain() {
  if (simulated()) {
    run_ready(std::numeric_limits<std::int64_t>::max());
    return;
  }
  std::unique_lock lk(q_mu_);
  idle_cv_.wait(lk, [&] { return queue_.empty() && running_ == 0; });
}

ServiceMetrics SoapService::metrics() const {
  ServiceMetrics m;
  m.requests = requests_.load();
  for (std::size_t p = 0; p < kProvenanceCount; ++p) m.by_provenance[p] = by_provenance_[p].load();
  m.fallbacks = fallbacks_.load();
  m.enqueued = enqueued_.load();
  m.coalesced = coalesced_.load();
  m.dropped = dropped_.load();
  m.compute_writes = compute_writes_.load();
  {
    std::lock_guard lk(const_cast<std::mutex&>(q_mu_));
    m.queue_depth = queue_.size();
  }
  m.swaps = swaps_.load();
  m.read_p50_us = read_latency_.percentile(0.5);
  m.read_p99_us = read_latency_.percentile(0.99);
  m.read_max_us = read_latency_.max();
  m.compute_p50_us = compute_latency_.percentile(0.5);
  m.compute_p99_us = compute_latency_.percentile(0.99);
  return m;
}

// ---- wire protocol ---------------------------------------------------------------

std::vector<std::uint8_t> encode_request(const ServeRequest& r) {
  io::ByteWriter w;
  w.put<std::uint16_t>(kWireVersion);
  w.put<std::uint64_t>(r.request_id);
  w.put<std::uint64_t>(r.user_id);
  w.put<std::uint16_t>(static_cast<std::uint16_t>(r.features.sparse.size()));
  for (const auto& f : r.features.sparse) {
    w.put<std::uint16_t>(static_cast<std::uint16_t>(f.name.size()));
    w.put_bytes({reinterpret_cast<const std::uint8_t*>(f.name.data()), f.name.size()});
    w.put<std::uint16_t>(static_cast<std::uint16_t>(f.ids.size()));
    for (auto id : f.ids) w.put<std::uint64_t>(id);
  }
  w.put<std::uint16_t>(static_cast<std::uint16_t>(r.features.dense.size()));
  w.put_floats(r.features.dense);
  return w.take();
}

namespace {

std::string get_short_string(io::ByteReader& rd) {
  const auto n = rd.get<std::uint16_t>();
  const auto b = rd.get_bytes(n);
  return std::string(b.begin(), b.end());
}

void check_version(std::uint16_t v) {
  if (v != kWireVersion)
    throw FormatError("wire: protocol version " + std::to_string(v) + ", expected " + std::to_string(kWireVersion));
}

}  // namespace

ServeRequest decode_request(std::span<const std::uint8_t> body) {
  io::ByteReader rd(body);
  check_version(rd.get<std::uint16_t>());
  ServeRequest r;
  r.request_id = rd.get<std::uint64_t>();
  r.user_id = rd.get<std::uint64_t>();
  const auto ns = rd.get<std::uint16_t>();
  for (std::uint16_t i = 0; i < ns; ++i) {
    SparseFeature f;
    f.name = get_short_string(rd);
    const auto ni = rd.get<std::uint16_t>();
    for (std::uint16_t k = 0; k < ni; ++k) f.ids.push_back(rd.get<std::uint64_t>());
    r.features.sparse.push_back(std::move(f));
  }
  r.features.dense.resize(rd.get<std::uint16_t>());
  rd.get_floats(r.features.dense);
  if (!rd.done()) throw FormatError("wire: trailing bytes in request");
  return r;
}

std::vector<std::uint8_t> encode_response(const ServeResponse& r) {
  io::ByteWriter w;
  w.put<std::uint16_t>(kWireVersion);
  w.put<std::uint64_t>(r.request_id);
  w.put<std::uint8_t>(0);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(r.provenance));
  w.put<std::uint16_t>(static_cast<std::uint16_t>(r.versions.size()));
  for (auto v : r.versions) w.put<std::uint64_t>(v);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(r.embedding.rows()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(r.embedding.cols()));
  w.put_floats(r.embedding.data());
  w.put<std::int64_t>(r.service_time_us);
  return w.take();
}

std::vector<std::uint8_t> encode_error(std::uint64_t request_id, const std::string& message) {
  io::ByteWriter w;
  w.put<std::uint16_t>(kWireVersion);
  w.put<std::uint64_t>(request_id);
  w.put<std::uint8_t>(1);
  const std::string m = message.substr(0, 0xffff);
  w.put<std::uint16_t>(static_cast<std::uint16_t>(m.size()));
  w.put_bytes({reinterpret_cast<const std::uint8_t*>(m.data()), m.size()});
  return w.take();
}

ServeResponse decode_response(std::span<const std::uint8_t> body) {
  io::ByteReader rd(body);
  check_version(rd.get<std::uint16_t>());
  ServeResponse r;
  r.request_id = rd.get<std::uint64_t>();
  const auto status = rd.get<std::uint8_t>();
  if (status != 0) throw Error("server error for request " + std::to_string(r.request_id) + ": " + get_short_string(rd));
  const auto prov = rd.get<std::uint8_t>();
  if (prov >= kProvenanceCount) throw FormatError("wire: bad provenance code " + std::to_string(prov));
  r.provenance = static_cast<Provenance>(prov);
  const auto nv = rd.get<std::uint16_t>();
  for (std::uint16_t i = 0; i < nv; ++i) r.versions.push_back(rd.get<std::uint64_t>());
  const auto rows = rd.get<std::uint32_t>(), cols = rd.get<std::uint32_t>();
  if (std::uint64_t(rows) * cols > kMaxFrameBytes / 4) throw FormatError("wire: embedding too large");
  r.embedding = Tensorf(rows, cols);
  rd.get_floats(r.embedding.data());
  r.service_time_us = rd.get<std::int64_t>();
  if (!rd.done()) throw FormatError("wire: trailing bytes in response");
  return r;
}

namespace {

bool read_exact(int fd, void* buf, std::size_t n) {
  auto* p = static_cast<std::uint8_t*>(buf);
  while (n > 0) {
    const ssize_t k = ::recv(fd, p, n, 0);
    if (k == 0) return false;
    if (k < 0) {
      if (errno == EINTR) continue;
      return false;
    }
    p += k;
    n -= static_cast<std::size_t>(k);
  }
  return true;
}

bool write_exact(int fd, const void* buf, std::size_t n) {
  const auto* p = static_cast<const std::uint8_t*>(buf);
  while (n > 0) {
    const ssize_t k = ::send(fd, p, n, MSG_NOSIGNAL);
    if (k < 0) {
      if (errno == EINTR) continue;
      return false;
    }
    p += k;
    n -= static_cast<std::size_t>(k);
  }
  return true;
}

bool send_frame(int fd, const std::vector<std::uint8_t>& body) {
  std::uint8_t len[4];
  const auto n = static_cast<std::uint32_t>(body.size());
  for (int i = 0; i < 4; ++i) len[i] = static_cast<std::uint8_t>(n >> (8 * i));
  return write_exact(fd, len, 4) && write_exact(fd, body.data(), body.size());
}

// Returns false on a clean close before the frame starts.
bool recv_frame(int fd, std::vector<std::uint8_t>& body) {
  std::uint8_t len[4];
  if (!read_exact(fd, len, 4)) return false;
  const std::uint32_t n = std::uint32_t(len[0]) | std::uint32_t(len[1]) << 8 | std::uint32_t(len[2]) << 16 |
                          std::uint32_t(len[3]) << 24;
  if (n > kMaxFrameBytes) throw FormatError("wire: frame of " + std::to_string(n) + " bytes exceeds limit");
  body.resize(n);
  if (!read_exact(fd, body.data(), n)) throw IoError("wire: connection closed mid-frame");
  return true;
}

}  // namespace

WireServer::WireServer(SoapService& service, std::uint16_t port) : service_(service) {
  listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (listen_fd_ < 0) throw IoError(std::string("socket: ") + std::strerror(errno));
  int one = 1;
  ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = htons(port);
  if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) < 0 || ::listen(listen_fd_, 64) < 0) {
    const std::string msg = std::strerror(errno);
    ::close(listen_fd_);
    throw IoError("bind/listen on port " + std::to_string(port) + ": " + msg);
  }
  socklen_t len = sizeof addr;
  ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = ntohs(addr.sin_port);
  acceptor_ = std::thread([this] { accept_loop(); });
}

WireServer::~WireServer() { stop(); }

void WireServer::stop() {
  if (stopping_.exchange(true)) return;
  ::shutdown(listen_fd_, SHUT_RDWR);
  ::close(listen_fd_);
  if (acceptor_.joinable()) acceptor_.join();
  std::vector<std::thread> conns;
  {
    std::lock_guard lk(conn_mu_);
    for (int fd : fds_) ::shutdown(fd, SHUT_RDWR);
    conns.swap(connections_);
  }
  for (auto& t : conns) t.join();
}

void WireServer::accept_loop() {
  while (!stopping_.load()) {
    const int fd = ::accept(listen_fd_, nullptr, nullptr);
    if (fd < 0) {
      if (errno == EINTR) continue;
      return;
    }
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    std::lock_guard lk(conn_mu_);
    fds_.push_back(fd);
    connections_.emplace_back([this, fd] { handle(fd); });
  }
}

void WireServer::handle(int fd) {
  std::vector<std::uint8_t> body;
  try {
    while (recv_frame(fd, body)) {
      std::uint64_t id = 0;
      std::vector<std::uint8_t> out;
      try {
        const ServeRequest req = decode_request(body);
        id = req.request_id;
        out = encode_response(service_.serve(req));
      } catch (const std::exception& e) {
        out = encode_error(id, e.what());
      }
      if (!send_frame(fd, out)) break;
    }
  } catch (const std::exception&) {
    // Malformed framing: drop the connection.
  }
  std::lock_guard lk(conn_mu_);
  std::erase(fds_, fd);
  ::close(fd);
}

WireClient::WireClient(const std::string& host, std::uint16_t port) {
  fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd_ < 0) throw IoError(std::string("socket: ") + std::strerror(errno));
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
    ::close(fd_);
    throw ConfigError("wire client: bad IPv4 address '" + host + "'");
  }
  if (::connect(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) < 0) {
    const std::string msg = std::strerror(errno);
    ::close(fd_);
    throw IoError("connect " + host + ":" + std::to_string(port) + ": " + msg);
  }
  int one = 1;
  ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
}

WireClient::~WireClient() {
  if (fd_ >= 0) ::close(fd_);
}

ServeResponse WireClient::call(const ServeRequest& r) {
  if (!send_frame(fd_, encode_request(r))) throw IoError("wire client: send failed");
  std::vector<std::uint8_t> body;
  if (!recv_frame(fd_, body)) throw IoError("wire client: connection closed");
  return decode_response(body);
}

}  // namespace sum
