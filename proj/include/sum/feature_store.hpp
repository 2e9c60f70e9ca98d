// SPDX-License-Identifier: Apache-2.0
//
// Versioned per-user embedding cache. Payloads are stored as fp16; each user
// keeps at most H records, newest first.
#pragma once

#include <atomic>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <mutex>
#include <shared_mutex>
#include <span>
#include <unordered_map>
#include <vector>

#include "sum/tensor.hpp"

namespace sum {

struct StoreConfig {
  std::size_t num_embeddings = 2;  // K
  std::size_t dim = 16;            // D
  std::size_t history = 4;         // H, records kept per user
  std::size_t pool_window = 3;     // P
  // A write carrying the newest record's snapshot version replaces that
  // record, so the history holds distinct versions.
  bool one_record_per_version = false;

  void validate() const;
};

struct EmbeddingRecord {
  std::uint64_t user_id = 0;
  std::uint64_t snapshot_version = 0;
  std::int64_t wall_time = 0;  // microseconds; simulated or steady clock
  std::uint16_t rows = 0, cols = 0;
  std::vector<std::uint16_t> payload;  // fp16 bits, row-major K x D

  Tensorf decode() const;
};

// Values are clamped to +-kStoreClamp before quantisation.
inline constexpr float kStoreClamp = 1e4f;

/// Mean of `current` and up to window-1 cached records (newest first),
/// over what is available.
Tensorf average_pool(const Tensorf& current, std::span<const EmbeddingRecord> cached,
                     std::size_t window);
/// Mean of up to `count` cached records; zero when none are given.
Tensorf average_cached(std::span<const EmbeddingRecord> cached, std::size_t count, std::size_t rows,
                       std::size_t cols);

class FeatureStore {
 public:
  explicit FeatureStore(StoreConfig cfg);
  /// With persistence: replays `log_path` if present, then appends every write.
  FeatureStore(StoreConfig cfg, const std::filesystem::path& log_path);
  ~FeatureStore();
  FeatureStore(const FeatureStore&) = delete;
  FeatureStore& operator=(const FeatureStore&) = delete;

  const StoreConfig& config() const noexcept { return cfg_; }

  /// Quantises and prepends a record, evicting beyond H. Throws
  /// DimensionError on shape mismatch and NumericError on non-finite input.
  void write(std::uint64_t user_id, const Tensorf& embeddings, std::uint64_t snapshot_version,
             std::int64_t time);
  /// Up to n records, newest first; empty for an unknown user.
  std::vector<EmbeddingRecord> read_latest(std::uint64_t user_id, std::size_t n) const;

  std::size_t user_count() const;
  std::uint64_t write_count() const noexcept;
  std::uint64_t clamped_values() const noexcept;
  /// Frames skipped during replay because of a bad checksum or truncation.
  std::uint64_t replay_rejected() const noexcept { return replay_rejected_; }
  void flush();
  void clear();

 private:
  using RecordList = std::vector<EmbeddingRecord>;
  struct Slot {
    std::mutex write_mu;
    std::shared_ptr<const RecordList> records;  // accessed via atomic_load/store
  };
  static constexpr std::size_t kShards = 64;
  struct Shard {
    mutable std::shared_mutex mu;
    std::unordered_map<std::uint64_t, std::unique_ptr<Slot>> users;
  };

  Slot& slot_for(std::uint64_t user_id);
  const Slot* find_slot(std::uint64_t user_id) const;
  void insert(EmbeddingRecord rec);
  void append_log(const EmbeddingRecord& rec);
  void replay(const std::filesystem::path& path);

  StoreConfig cfg_;
  Shard shards_[kShards];
  std::atomic<std::uint64_t> writes_{0};
  std::atomic<std::uint64_t> clamped_{0};
  std::uint64_t replay_rejected_ = 0;
  std::mutex log_mu_;
  std::FILE* log_ = nullptr;
};

// Log frame: u32 body length, body, u32 CRC-32 of body. Body: u64 user,
// u64 snapshot version, i64 time, u16 K, u16 D, K*D fp16 values.
std::vector<std::uint8_t> encode_record_frame(const EmbeddingRecord& rec);

}  // namespace sum
