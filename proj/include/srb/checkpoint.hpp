#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "srb/encoder.hpp"

// Binary checkpoint container: magic, format version, a JSON header, then
// named raw little-endian double arrays. Roundtrips are bitwise lossless.
namespace srb {

inline constexpr char kCheckpointMagic[8] = {'S', 'R', 'B', 'C', 'K', 'P', 'T', '\n'};
inline constexpr uint32_t kCheckpointVersion = 1;

struct CheckpointData {
  nlohmann::json header;
  std::vector<std::pair<std::string, Tensor>> arrays;

  const Tensor& find(const std::string& name) const {
    for (const auto& [n, t] : arrays)
      if (n == name) return t;
    throw IncompatibleCheckpointError("checkpoint lacks array '" + name + "'");
  }
};

namespace detail {
template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IoError("checkpoint truncated");
  return v;
}
inline void write_bytes(std::ostream& os, const std::string& s) {
  write_pod<uint64_t>(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline std::string read_bytes(std::istream& is) {
  uint64_t n = read_pod<uint64_t>(is);
  if (n > (1ULL << 32)) throw IoError("checkpoint string length implausible");
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (!is) throw IoError("checkpoint truncated");
  return s;
}
}  // namespace detail

inline void write_checkpoint(const std::string& path, const CheckpointData& ckpt) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::write_pod<uint32_t>(os, kCheckpointVersion);
  detail::write_bytes(os, ckpt.header.dump());
  detail::write_pod<uint64_t>(os, ckpt.arrays.size());
  for (const auto& [name, t] : ckpt.arrays) {
    detail::write_bytes(os, name);
    detail::write_pod<uint64_t>(os, t.rank());
    for (size_t i = 0; i < t.rank(); ++i) detail::write_pod<int64_t>(os, t.dim(i));
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(t.numel() * sizeof(Real)));
  }
  if (!os) throw IoError("write to '" + path + "' failed");
}

inline CheckpointData read_checkpoint(const std::string& path) {
  if (!std::filesystem::exists(path)) throw NotFoundError("checkpoint '" + path + "' not found");
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path + "' for reading");
  char magic[sizeof(kCheckpointMagic)];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw IoError("'" + path + "' is not a checkpoint file");
  uint32_t version = detail::read_pod<uint32_t>(is);
  if (version != kCheckpointVersion)
    throw IncompatibleCheckpointError("unsupported checkpoint version " +
                                      std::to_string(version));
  CheckpointData out;
  std::string header = detail::read_bytes(is);
  out.header = nlohmann::json::parse(header, nullptr, /*allow_exceptions=*/false);
  if (out.header.is_discarded()) throw IoError("checkpoint header is not valid JSON");
  uint64_t count = detail::read_pod<uint64_t>(is);
  for (uint64_t i = 0; i < count; ++i) {
    std::string name = detail::read_bytes(is);
    uint64_t rank = detail::read_pod<uint64_t>(is);
    if (rank > 8) throw IoError("checkpoint array rank implausible");
    Shape shape(rank);
    for (auto& d : shape) d = detail::read_pod<int64_t>(is);
    Tensor t(shape);
    is.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.numel() * sizeof(Real)));
    if (!is) throw IoError("checkpoint truncated");
    out.arrays.emplace_back(std::move(name), std::move(t));
  }
  return out;
}

inline void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = {{"patch_size", c.patch_size},
       {"dim", c.dim},
       {"depth", c.depth},
       {"heads", c.heads},
       {"mlp_ratio", c.mlp_ratio}};
}

inline void from_json(const nlohmann::json& j, EncoderConfig& c) {
  c.patch_size = j.at("patch_size").get<int64_t>();
  c.dim = j.at("dim").get<int64_t>();
  c.depth = j.at("depth").get<int64_t>();
  c.heads = j.at("heads").get<int64_t>();
  c.mlp_ratio = j.at("mlp_ratio").get<Real>();
}

inline void checkpoint_save(const Encoder& encoder, const std::string& path) {
  CheckpointData ckpt;
  ckpt.header = {{"kind", "encoder"}, {"config", encoder.config()}};
  for (const auto& p : encoder.params()) ckpt.arrays.emplace_back(p.name, p.var->value);
  write_checkpoint(path, ckpt);
}

namespace detail {
inline Encoder encoder_from_checkpoint(const CheckpointData& ckpt) {
  if (ckpt.header.value("kind", "") != "encoder")
    throw IncompatibleCheckpointError("checkpoint does not hold an encoder");
  EncoderConfig cfg = ckpt.header.at("config").get<EncoderConfig>();
  Encoder enc(cfg);
  for (auto& p : enc.params()) {
    const Tensor& stored = ckpt.find(p.name);
    if (!stored.same_shape(p.var->value))
      throw IncompatibleCheckpointError("checkpoint array '" + p.name + "' has shape " +
                                        shape_str(stored.shape()) + ", expected " +
                                        shape_str(p.var->value.shape()));
    p.var->value = stored;
  }
  return enc;
}
}  // namespace detail

// Load into the shape of `like`: the stored config must match exactly.
inline Encoder checkpoint_load(const Encoder& like, const std::string& path) {
  CheckpointData ckpt = read_checkpoint(path);
  if (ckpt.header.value("kind", "") != "encoder")
    throw IncompatibleCheckpointError("checkpoint does not hold an encoder");
  EncoderConfig stored = ckpt.header.at("config").get<EncoderConfig>();
  if (!(stored == like.config()))
    throw IncompatibleCheckpointError("checkpoint encoder config does not match");
  return detail::encoder_from_checkpoint(ckpt);
}

// Load standalone, reconstructing the encoder from the stored config.
inline Encoder checkpoint_load(const std::string& path) {
  return detail::encoder_from_checkpoint(read_checkpoint(path));
}

}  // namespace srb
