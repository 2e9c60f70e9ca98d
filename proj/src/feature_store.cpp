// SPDX-License-Identifier: Apache-2.0
#include "sum/feature_store.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "sum/binary_io.hpp"
#include "sum/error.hpp"
#include "sum/fp16.hpp"

namespace sum {

void StoreConfig::validate() const {
  if (num_embeddings == 0 || dim == 0) throw ConfigError("store: K and D must be positive");
  if (num_embeddings > 0xffff || dim > 0xffff) throw ConfigError("store: K and D must fit in 16 bits");
  if (pool_window < 1) throw ConfigError("store: pooling window must be >= 1");
  if (history < 1 || history + 1 < pool_window)
    throw ConfigError("store: history must be >= max(1, pool_window - 1)");
}

Tensorf EmbeddingRecord::decode() const {
  Tensorf t(rows, cols);
  for (std::size_t i = 0; i < payload.size(); ++i) t[i] = half_to_float(payload[i]);
  return t;
}

Tensorf average_pool(const Tensorf& current, std::span<const EmbeddingRecord> cached,
                     std::size_t window) {
  const std::size_t use = std::min(cached.size(), window > 0 ? window - 1 : 0);
  if (use == 0) return current;
  std::vector<double> acc(current.data().begin(), current.data().end());
  for (std::size_t r = 0; r < use; ++r) {
    if (cached[r].payload.size() != acc.size())
      throw DimensionError("average_pool: cached record shape differs from current " + current.shape_str());
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += half_to_float(cached[r].payload[i]);
  }
  Tensorf out(current.rows(), current.cols());
  const double n = static_cast<double>(use + 1);
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<float>(acc[i] / n);
  return out;
}

Tensorf average_cached(std::span<const EmbeddingRecord> cached, std::size_t count, std::size_t rows,
                       std::size_t cols) {
  const std::size_t use = std::min(cached.size(), count);
  Tensorf out(rows, cols);
  if (use == 0) return out;
  std::vector<double> acc(rows * cols, 0.0);
  for (std::size_t r = 0; r < use; ++r) {
    if (cached[r].payload.size() != acc.size())
      throw DimensionError("average_cached: record shape mismatch");
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += half_to_float(cached[r].payload[i]);
  }
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<float>(acc[i] / static_cast<double>(use));
  return out;
}

std::vector<std::uint8_t> encode_record_frame(const EmbeddingRecord& rec) {
  io::ByteWriter body;
  body.put<std::uint64_t>(rec.user_id);
  body.put<std::uint64_t>(rec.snapshot_version);
  body.put<std::int64_t>(rec.wall_time);
  body.put<std::uint16_t>(rec.rows);
  body.put<std::uint16_t>(rec.cols);
  for (auto h : rec.payload) body.put<std::uint16_t>(h);
  io::ByteWriter frame;
  frame.put<std::uint32_t>(static_cast<std::uint32_t>(body.size()));
  frame.put_bytes(body.bytes());
  frame.put<std::uint32_t>(io::crc32(body.bytes()));
  return frame.take();
}

FeatureStore::FeatureStore(StoreConfig cfg) : cfg_(cfg) { cfg_.validate(); }

FeatureStore::FeatureStore(StoreConfig cfg, const std::filesystem::path& log_path) : FeatureStore(cfg) {
  if (std::filesystem::exists(log_path)) replay(log_path);
  if (log_path.has_parent_path()) std::filesystem::create_directories(log_path.parent_path());
  log_ = std::fopen(log_path.c_str(), "ab");
  if (!log_) throw IoError("cannot open store log " + log_path.string());
}

FeatureStore::~FeatureStore() {
  if (log_) std::fclose(log_);
}

FeatureStore::Slot& FeatureStore::slot_for(std::uint64_t user_id) {
  Shard& sh = shards_[user_id % kShards];
  {
    std::shared_lock lk(sh.mu);
    auto it = sh.users.find(user_id);
    if (it != sh.users.end()) return *it->second;
  }
  std::unique_lock lk(sh.mu);
  auto& p = sh.users[user_id];
  if (!p) p = std::make_unique<Slot>();
  return *p;
}

const FeatureStore::Slot* FeatureStore::find_slot(std::uint64_t user_id) const {
  const Shard& sh = shards_[user_id % kShards];
  std::shared_lock lk(sh.mu);
  auto it = sh.users.find(user_id);
  return it == sh.users.end() ? nullptr : it->second.get();
}

void FeatureStore::insert(EmbeddingRecord rec) {
  Slot& s = slot_for(rec.user_id);
  std::lock_guard lk(s.write_mu);
  auto prev = std::atomic_load(&s.records);
  auto next = std::make_shared<RecordList>();
  next->reserve(cfg_.history);
  next->push_back(std::move(rec));
  if (prev) {
    const bool replace = cfg_.one_record_per_version && !prev->empty() &&
                         prev->front().snapshot_version == next->front().snapshot_version;
    for (std::size_t i = replace ? 1 : 0; i < prev->size(); ++i) {
      const auto& r = (*prev)[i];
      if (next->size() >= cfg_.history) break;
      next->push_back(r);
    }
  }
  std::atomic_store(&s.records, std::shared_ptr<const RecordList>(std::move(next)));
}

void FeatureStore::write(std::uint64_t user_id, const Tensorf& embeddings, std::uint64_t snapshot_version,
                         std::int64_t time) {
  if (embeddings.rows() != cfg_.num_embeddings || embeddings.cols() != cfg_.dim) {
    throw DimensionError("store write: expected " +
                         Tensorf::shape_string(cfg_.num_embeddings, cfg_.dim) + ", got " +
                         embeddings.shape_str());
  }
  EmbeddingRecord rec;
  rec.user_id = user_id;
  rec.snapshot_version = snapshot_version;
  rec.wall_time = time;
  rec.rows = static_cast<std::uint16_t>(cfg_.num_embeddings);
  rec.cols = static_cast<std::uint16_t>(cfg_.dim);
  rec.payload.reserve(embeddings.size());
  std::uint64_t clamped = 0;
  for (float v : embeddings.data()) {
    if (!std::isfinite(v)) throw NumericError("store write: non-finite embedding value");
    if (std::abs(v) > kStoreClamp) {
      v = std::copysign(kStoreClamp, v);
      ++clamped;
    }
    rec.payload.push_back(float_to_half(v));
  }
  if (clamped) clamped_ += clamped;
  if (log_) append_log(rec);
  insert(std::move(rec));
  ++writes_;
}

std::vector<EmbeddingRecord> FeatureStore::read_latest(std::uint64_t user_id, std::size_t n) const {
  const Slot* s = find_slot(user_id);
  if (!s) return {};
  auto list = std::atomic_load(&s->records);
  if (!list) return {};
  const std::size_t m = std::min(n, list->size());
  return {list->begin(), list->begin() + static_cast<std::ptrdiff_t>(m)};
}

std::size_t FeatureStore::user_count() const {
  std::size_t n = 0;
  for (const auto& sh : shards_) {
    std::shared_lock lk(sh.mu);
    n += sh.users.size();
  }
  return n;
}

std::uint64_t FeatureStore::write_count() const noexcept { return writes_.load(); }
std::uint64_t FeatureStore::clamped_values() const noexcept { return clamped_.load(); }

void FeatureStore::clear() {
  for (auto& sh : shards_) {
    std::unique_lock lk(sh.mu);
    sh.users.clear();
  }
}

void FeatureStore::append_log(const EmbeddingRecord& rec) {
  const auto frame = encode_record_frame(rec);
  std::lock_guard lk(log_mu_);
  if (std::fwrite(frame.data(), 1, frame.size(), log_) != frame.size()) throw IoError("store log write failed");
}

void FeatureStore::flush() {
  std::lock_guard lk(log_mu_);
  if (log_) std::fflush(log_);
}

void FeatureStore::replay(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path.string());
  std::size_t pos = 0;
  const std::size_t expect = 8 + 8 + 8 + 2 + 2 + 2 * cfg_.num_embeddings * cfg_.dim;
  while (pos + 4 <= bytes.size()) {
    std::uint32_t len;
    std::memcpy(&len, bytes.data() + pos, 4);
    if (len != expect || pos + 8 + len > bytes.size()) {
      ++replay_rejected_;  // torn tail or foreign frame: stop here
      break;
    }
    std::span<const std::uint8_t> body(bytes.data() + pos + 4, len);
    std::uint32_t crc;
    std::memcpy(&crc, bytes.data() + pos + 4 + len, 4);
    pos += 8 + len;
    if (io::crc32(body) != crc) {
      ++replay_rejected_;
      continue;
    }
    io::ByteReader r(body);
    EmbeddingRecord rec;
    rec.user_id = r.get<std::uint64_t>();
    rec.snapshot_version = r.get<std::uint64_t>();
    rec.wall_time = r.get<std::int64_t>();
    rec.rows = r.get<std::uint16_t>();
    rec.cols = r.get<std::uint16_t>();
    if (rec.rows != cfg_.num_embeddings || rec.cols != cfg_.dim) {
      ++replay_rejected_;
      continue;
    }
    rec.payload.resize(std::size_t(rec.rows) * rec.cols);
    for (auto& h : rec.payload) h = r.get<std::uint16_t>();
    insert(std::move(rec));
  }
}

}  // namespace sum
