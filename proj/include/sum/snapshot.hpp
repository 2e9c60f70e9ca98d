// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <vector>

#include "sum/user_model.hpp"

namespace sum {

// Immutable published model. Shared read-only between trainer and servers.
struct ModelSnapshot {
  std::uint64_t version = 0;
  std::int64_t trained_through_day = -1;
  std::uint64_t config_hash = 0;
  std::shared_ptr<const UserModel<float>> model;

  const TowerConfig& config() const { return model->config(); }
};

using SnapshotPtr = std::shared_ptr<const ModelSnapshot>;

// Deep-copies `model` into a new immutable snapshot.
SnapshotPtr publish_snapshot(const UserModel<float>& model, std::uint64_t version,
                             std::int64_t trained_through_day);

inline constexpr std::uint32_t kSnapshotFormatVersion = 1;

// Layout (little-endian): "SUMSNAP\0", u32 format, u64 config hash, u64 version,
// i64 trained_through_day, tower config as u32-length JSON, u32 tensor count,
// then per tensor: u32-length name, u64 rows, u64 cols, fp32 payload; trailing
// u32 CRC-32 of everything before it.
std::vector<std::uint8_t> encode_snapshot(const ModelSnapshot& s);
ModelSnapshot decode_snapshot(std::span<const std::uint8_t> bytes);

// Returns the CRC-32 stored in the file trailer.
std::uint32_t save_snapshot(const ModelSnapshot& s, const std::filesystem::path& path);
SnapshotPtr load_snapshot(const std::filesystem::path& path);

}  // namespace sum
