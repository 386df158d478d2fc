#pragma once

#include <cstring>
#include <fstream>
#include <string>

#include <json.hpp>

#include "boxgen/core/params.hpp"

namespace boxgen {

// Checkpoint layout: 8-byte magic, u32 header length, JSON header, then all
// tensor data as little-endian float32 in header order. The header carries
// the full config snapshot plus free-form metadata so any artifact can be
// traced back to the settings that produced it.
inline constexpr char kCheckpointMagic[9] = "BXGCKPT1";

struct CheckpointMeta {
  std::string phase;            // "base", "spatiallock" or "detector"
  nlohmann::json config;        // full normalized config
  nlohmann::json extra;         // schedule state, step counters, etc.
};

template <typename S>
void save_checkpoint(const std::string& path, const ParamStore<S>& params,
                     const CheckpointMeta& meta) {
  nlohmann::json header;
  header["version"] = 1;
  header["phase"] = meta.phase;
  header["config"] = meta.config;
  header["extra"] = meta.extra.is_null() ? nlohmann::json::object() : meta.extra;
  nlohmann::json tensors = nlohmann::json::array();
  int64_t offset = 0;
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& v = params.at(i);
    tensors.push_back({{"name", params.names()[i]}, {"shape", v.shape()}, {"offset", offset}});
    offset += v.numel();
  }
  header["tensors"] = tensors;
  const std::string hs = header.dump();

  std::ofstream f(path, std::ios::binary);
  if (!f) throw RuntimeFailure("cannot write checkpoint: " + path);
  f.write(kCheckpointMagic, 8);
  const uint32_t hlen = static_cast<uint32_t>(hs.size());
  f.write(reinterpret_cast<const char*>(&hlen), 4);
  f.write(hs.data(), hs.size());
  std::vector<float> blob;
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& v = params.at(i).val();
    blob.resize(v.numel());
    for (int64_t j = 0; j < v.numel(); ++j) blob[j] = static_cast<float>(v[j]);
    f.write(reinterpret_cast<const char*>(blob.data()), blob.size() * sizeof(float));
  }
  if (!f) throw RuntimeFailure("short write for checkpoint: " + path);
}

// Reads header only; cheap way to inspect config/phase of an artifact.
inline CheckpointMeta read_checkpoint_meta(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ValidationError("cannot open checkpoint: " + path);
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw ValidationError("not a checkpoint file: " + path);
  uint32_t hlen = 0;
  f.read(reinterpret_cast<char*>(&hlen), 4);
  std::string hs(hlen, '\0');
  f.read(hs.data(), hlen);
  if (!f) throw ValidationError("truncated checkpoint header: " + path);
  nlohmann::json header = nlohmann::json::parse(hs);
  CheckpointMeta meta;
  meta.phase = header.at("phase").get<std::string>();
  meta.config = header.at("config");
  meta.extra = header.value("extra", nlohmann::json::object());
  return meta;
}

// Loads tensors into an already-built store; names and shapes must agree
// exactly with the checkpoint.
template <typename S>
CheckpointMeta load_checkpoint(const std::string& path, ParamStore<S>& params) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ValidationError("cannot open checkpoint: " + path);
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw ValidationError("not a checkpoint file: " + path);
  uint32_t hlen = 0;
  f.read(reinterpret_cast<char*>(&hlen), 4);
  std::string hs(hlen, '\0');
  f.read(hs.data(), hlen);
  if (!f) throw ValidationError("truncated checkpoint header: " + path);
  nlohmann::json header = nlohmann::json::parse(hs);

  const auto& tensors = header.at("tensors");
  if (tensors.size() != params.size())
    throw ValidationError("checkpoint has " + std::to_string(tensors.size()) +
                          " tensors, model expects " + std::to_string(params.size()));
  const std::streampos data_start = f.tellg();
  std::vector<float> blob;
  for (const auto& t : tensors) {
    const std::string name = t.at("name").get<std::string>();
    if (!params.has(name)) throw ValidationError("checkpoint tensor unknown to model: " + name);
    auto v = params.get(name);
    const Shape shape = t.at("shape").get<Shape>();
    if (shape != v.shape())
      throw ValidationError("shape mismatch for " + name + ": checkpoint " + shape_str(shape) +
                            " vs model " + shape_str(v.shape()));
    const int64_t offset = t.at("offset").get<int64_t>();
    f.seekg(data_start + static_cast<std::streamoff>(offset * sizeof(float)));
    blob.resize(v.numel());
    f.read(reinterpret_cast<char*>(blob.data()), blob.size() * sizeof(float));
    if (!f) throw ValidationError("truncated checkpoint data: " + path);
    auto& dst = v.mutable_val();
    for (int64_t j = 0; j < dst.numel(); ++j) dst[j] = static_cast<S>(blob[j]);
  }

  CheckpointMeta meta;
  meta.phase = header.at("phase").get<std::string>();
  meta.config = header.at("config");
  meta.extra = header.value("extra", nlohmann::json::object());
  return meta;
}

inline uint64_t file_fnv1a64(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ValidationError("cannot open file for hashing: " + path);
  uint64_t h = 14695981039346656037ull;
  char buf[65536];
  while (f) {
    f.read(buf, sizeof(buf));
    const std::streamsize n = f.gcount();
    for (std::streamsize i = 0; i < n; ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ull;
    }
  }
  return h;
}

}  // namespace boxgen
