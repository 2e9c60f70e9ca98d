// SPDX-License-Identifier: Apache-2.0
//
// Embedding serving under four schemes. Async mode answers from cached
// versions immediately and refreshes the store in the background.
#pragma once

#include <array>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "sum/feature_store.hpp"
#include "sum/snapshot.hpp"

namespace sum {

enum class Provenance : std::uint8_t { AsyncCached = 0, Realtime = 1, Batch = 2, Frozen = 3, FallbackDefault = 4 };
inline constexpr std::size_t kProvenanceCount = 5;
const char* to_string(Provenance p);

enum class ModeKind { Frozen, OfflineBatch, Realtime, Async };
const char* to_string(ModeKind m);
ModeKind mode_kind_from_string(const std::string& s);

struct ServingMode {
  ModeKind kind = ModeKind::Async;
  double budget_ms = 30.0;  // realtime only

  void validate() const;
};

struct ServeRequest {
  std::uint64_t request_id = 0;
  std::uint64_t user_id = 0;
  UserFeatures features;
  std::int64_t arrival_us = 0;  // used as the clock in simulated mode
};

struct ServeResponse {
  std::uint64_t request_id = 0;
  Tensorf embedding;  // K x D
  Provenance provenance = Provenance::AsyncCached;
  std::vector<std::uint64_t> versions;  // snapshot versions that went into `embedding`
  std::vector<std::int64_t> computed_at_us;  // compute time of each version's embedding; not sent on the wire
  std::int64_t service_time_us = 0;
};

// Log-linear latency histogram: 32 sub-buckets per power of two, so
// percentiles carry at most ~3% relative error.
class LatencyHistogram {
 public:
  void record(std::int64_t micros);
  std::uint64_t count() const noexcept { return count_.load(std::memory_order_relaxed); }
  /// Upper bound of the bucket holding the q-quantile; 0 when empty.
  double percentile(double q) const;
  double max() const noexcept { return double(max_.load(std::memory_order_relaxed)); }
  void reset();

 private:
  static constexpr int kSub = 32;
  static constexpr int kBuckets = 64 * kSub;
  static int bucket_of(std::uint64_t v);
  static std::uint64_t bucket_upper(int b);

  std::array<std::atomic<std::uint64_t>, kBuckets> buckets_{};
  std::atomic<std::uint64_t> count_{0};
  std::atomic<std::uint64_t> max_{0};
};

struct ServiceMetrics {
  std::uint64_t requests = 0;
  std::array<std::uint64_t, kProvenanceCount> by_provenance{};
  std::uint64_t fallbacks = 0;
  std::uint64_t enqueued = 0;   // compute submissions, including coalesced and dropped ones
  std::uint64_t coalesced = 0;
  std::uint64_t dropped = 0;
  std::uint64_t compute_writes = 0;
  std::uint64_t queue_depth = 0;
  std::uint64_t swaps = 0;
  double read_p50_us = 0, read_p99_us = 0, read_max_us = 0;
  double compute_p50_us = 0, compute_p99_us = 0;

  std::string to_text() const;
};

struct ServiceConfig {
  ServingMode mode;
  std::size_t queue_capacity = 1024;
  std::size_t compute_workers = 1;  // 0: tasks run only via run_ready() (simulated clock)
  double injected_compute_delay_ms = 0.0;
  // Simulated mode: virtual time one compute takes, used for async
  // readiness and the realtime budget.
  std::int64_t simulated_compute_us = 2'000;

  void validate() const;
};

class SoapService {
 public:
  /// `frozen` is the snapshot frozen mode computes with; it defaults to `initial`.
  SoapService(ServiceConfig cfg, std::shared_ptr<FeatureStore> store, SnapshotPtr initial,
              SnapshotPtr frozen = nullptr);
  ~SoapService();
  SoapService(const SoapService&) = delete;
  SoapService& operator=(const SoapService&) = delete;

  void start();
  void stop();  // finishes queued tasks, then joins workers
  bool started() const noexcept { return started_.load(); }

  ServeResponse serve(const ServeRequest& req);

  /// Atomic with respect to task start. Throws VersionError unless the
  /// version strictly increases.
  void swap_snapshot(SnapshotPtr next);
  SnapshotPtr current_snapshot() const;

  /// Computes every listed user's embedding with `snap` and replaces the batch cache.
  void run_batch_job(const ModelSnapshot& snap, const std::vector<std::pair<std::uint64_t, UserFeatures>>& population,
                     std::int64_t job_time_us = 0);

  /// Simulated mode: runs queued tasks whose virtual completion time is <= now.
  std::size_t run_ready(std::int64_t now_us);
  /// Blocks until the queue is empty and no task is running.
  void drain();

  ServiceMetrics metrics() const;
  const ServiceConfig& config() const noexcept { return cfg_; }
  FeatureStore& store() noexcept { return *store_; }

 private:
  struct Task {
    std::uint64_t user_id;
    UserFeatures features;
    std::int64_t ready_us;  // simulated mode only
  };
  struct BatchEntry {
    std::uint64_t version;
    std::int64_t computed_at_us;
    Tensorf embedding;
  };
  using BatchCache = std::unordered_map<std::uint64_t, BatchEntry>;

  bool simulated() const noexcept { return cfg_.compute_workers == 0; }
  std::int64_t now_us(const ServeRequest& req) const;
  ServeResponse serve_async(const ServeRequest& req);
  ServeResponse serve_realtime(const ServeRequest& req);
  ServeResponse serve_batch(const ServeRequest& req);
  ServeResponse serve_frozen(const ServeRequest& req);
  void enqueue(const ServeRequest& req);
  void execute(Task& task, std::int64_t write_time);
  void worker_loop();
  Tensorf zero() const;
  std::int64_t steady_us() const;

  ServiceConfig cfg_;
  std::shared_ptr<FeatureStore> store_;
  SnapshotPtr snapshot_;  // atomic_load / atomic_store
  SnapshotPtr frozen_;
  std::shared_ptr<const BatchCache> batch_;  // atomic_load / atomic_store
  std::mutex swap_mu_;
  std::chrono::steady_clock::time_point epoch_;

  std::mutex q_mu_;
  std::condition_variable q_cv_, idle_cv_;
  std::deque<Task> queue_;
  std::unordered_set<std::uint64_t> queued_users_;
  std::size_t running_ = 0;
  bool stopping_ = false;
  std::vector<std::thread> workers_;
  std::atomic<bool> started_{false};

  std::atomic<std::uint64_t> requests_{0}, fallbacks_{0}, enqueued_{0}, coalesced_{0}, dropped_{0},
      compute_writes_{0}, swaps_{0};
  std::array<std::atomic<std::uint64_t>, kProvenanceCount> by_provenance_{};
  LatencyHistogram read_latency_, compute_latency_;
};

// ---- wire protocol -----------------------------------------------------------
//
// Every message is a u32 little-endian body length followed by the body.
// Request body: u16 protocol version, u64 request id, u64 user id, u16 sparse
// count, each (u16 name length, name, u16 id count, u64 ids), u16 dense count,
// f32 values. Response body: u16 protocol version, u64 request id, u8 status
// (0 ok, 1 error), then on success u8 provenance, u16 version count, u64
// versions, u32 rows, u32 cols, f32 payload, i64 service time; on error a
// u16-length message.
inline constexpr std::uint16_t kWireVersion = 1;
inline constexpr std::uint32_t kMaxFrameBytes = 16u << 20;

std::vector<std::uint8_t> encode_request(const ServeRequest& r);
ServeRequest decode_request(std::span<const std::uint8_t> body);
std::vector<std::uint8_t> encode_response(const ServeResponse& r);
std::vector<std::uint8_t> encode_error(std::uint64_t request_id, const std::string& message);
/// Throws Error carrying the server's message for error responses.
ServeResponse decode_response(std::span<const std::uint8_t> body);

// Blocking TCP server on 127.0.0.1, one thread per connection.
class WireServer {
 public:
  WireServer(SoapService& service, std::uint16_t port);  // port 0 picks a free one
  ~WireServer();
  std::uint16_t port() const noexcept { return port_; }
  void stop();

 private:
  void accept_loop();
  void handle(int fd);

  SoapService& service_;
  int listen_fd_ = -1;
  std::uint16_t port_ = 0;
  std::atomic<bool> stopping_{false};
  std::thread acceptor_;
  std::mutex conn_mu_;
  std::vector<std::thread> connections_;
  std::vector<int> fds_;
};

class WireClient {
 public:
  WireClient(const std::string& host, std::uint16_t port);
  ~WireClient();
  ServeResponse call(const ServeRequest& r);

 private:
  int fd_ = -1;
};

}  // namespace sum
