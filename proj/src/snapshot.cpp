// SPDX-License-Identifier: Apache-2.0
#include "sum/snapshot.hpp"

#include <cstring>

#include "sum/binary_io.hpp"

namespace sum {

namespace {
constexpr char kMagic[8] = {'S', 'U', 'M', 'S', 'N', 'A', 'P', '\0'};
}

SnapshotPtr publish_snapshot(const UserModel<float>& model, std::uint64_t version,
                             std::int64_t trained_through_day) {
  auto s = std::make_shared<ModelSnapshot>();
  s->version = version;
  s->trained_through_day = trained_through_day;
  s->config_hash = config_hash(model.config());
  s->model = std::make_shared<const UserModel<float>>(model);
  return s;
}

std::vector<std::uint8_t> encode_snapshot(const ModelSnapshot& s) {
  io::ByteWriter w;
  w.put_bytes({reinterpret_cast<const std::uint8_t*>(kMagic), sizeof kMagic});
  w.put<std::uint32_t>(kSnapshotFormatVersion);
  w.put<std::uint64_t>(s.config_hash);
  w.put<std::uint64_t>(s.version);
  w.put<std::int64_t>(s.trained_through_day);
  w.put_string(to_json(s.config()).dump());
  const auto& params = s.model->parameters();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    w.put_string(p.name);
    w.put<std::uint64_t>(p.value.rows());
    w.put<std::uint64_t>(p.value.cols());
    w.put_floats(p.value.data());
  }
  w.put<std::uint32_t>(io::crc32(w.bytes()));
  return w.take();
}

ModelSnapshot decode_snapshot(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < sizeof kMagic + 4) throw FormatError("snapshot: file too short");
  const auto body = bytes.first(bytes.size() - 4);
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + body.size(), 4);
  if (io::crc32(body) != stored) throw FormatError("snapshot: checksum mismatch");

  io::ByteReader r(body);
  if (std::memcmp(r.get_bytes(sizeof kMagic).data(), kMagic, sizeof kMagic) != 0)
    throw FormatError("snapshot: bad magic");
  const auto format = r.get<std::uint32_t>();
  if (format != kSnapshotFormatVersion)
    throw FormatError("snapshot: unsupported format version " + std::to_string(format));
  ModelSnapshot s;
  s.config_hash = r.get<std::uint64_t>();
  s.version = r.get<std::uint64_t>();
  s.trained_through_day = r.get<std::int64_t>();
  TowerConfig cfg = tower_config_from_json(nlohmann::json::parse(r.get_string()));
  if (config_hash(cfg) != s.config_hash) throw FormatError("snapshot: config hash mismatch");
  const auto n = r.get<std::uint32_t>();
  std::vector<Parameter<float>> params;
  params.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string name = r.get_string(4096);
    const auto rows = r.get<std::uint64_t>();
    const auto cols = r.get<std::uint64_t>();
    if (rows * cols > r.remaining() / 4) throw FormatError("snapshot: tensor '" + name + "' truncated");
    Tensorf t(rows, cols);
    r.get_floats(t.data());
    params.emplace_back(std::move(name), std::move(t));
  }
  if (!r.done()) throw FormatError("snapshot: trailing bytes");
  s.model = std::make_shared<const UserModel<float>>(std::move(cfg), params);
  return s;
}

std::uint32_t save_snapshot(const ModelSnapshot& s, const std::filesystem::path& path) {
  auto bytes = encode_snapshot(s);
  std::uint32_t crc;
  std::memcpy(&crc, bytes.data() + bytes.size() - 4, 4);
  io::write_file_atomic(path.string(), bytes);
  return crc;
}

SnapshotPtr load_snapshot(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path.string());
  try {
    return std::make_shared<const ModelSnapshot>(decode_snapshot(bytes));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace sum
