// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace sum {

struct SparseFeature {
  std::string name;
  std::vector<std::uint64_t> ids;

  friend bool operator==(const SparseFeature&, const SparseFeature&) = default;
};

// User-side inputs of one request.
struct UserFeatures {
  std::vector<SparseFeature> sparse;
  std::vector<float> dense;

  friend bool operator==(const UserFeatures&, const UserFeatures&) = default;
};

// Seeded multiplicative hash; `num_buckets` must be a power of two.
inline std::size_t bucket_of(std::uint64_t id, std::uint64_t seed, std::size_t num_buckets) {
  std::uint64_t h = id + seed * 0x9E3779B97F4A7C15ULL;
  h ^= h >> 31;
  h *= 0x9E3779B97F4A7C15ULL;
  h ^= h >> 29;
  return static_cast<std::size_t>(h & (num_buckets - 1));
}

}  // namespace sum
