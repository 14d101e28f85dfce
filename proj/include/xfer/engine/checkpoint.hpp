#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "xfer/engine/tensor.hpp"

namespace xfer {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format is little-endian");

inline constexpr int kCheckpointVersion = 1;

// Writes `<prefix>.bin` (flat little-endian f32, one run per parameter)
// and `<prefix>.json` (manifest: version, name -> shape and byte offset,
// plus caller-supplied extra fields).
template <typename S>
void save_checkpoint(const std::vector<Parameter<S>>& params,
                     const std::filesystem::path& prefix,
                     const nlohmann::json& extra = nlohmann::json::object()) {
  const auto bin_path = prefix.string() + ".bin";
  std::ofstream bin(bin_path, std::ios::binary);
  if (!bin) throw std::runtime_error("cannot write " + bin_path);

  nlohmann::json manifest;
  manifest["version"] = kCheckpointVersion;
  manifest["dtype"] = "f32";
  for (auto it = extra.begin(); it != extra.end(); ++it) {
    manifest[it.key()] = it.value();
  }
  auto& plist = manifest["params"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  std::vector<float> buf;
  for (const auto& p : params) {
    const auto& v = p.tensor.value();
    buf.resize(v.size());
    for (long i = 0; i < v.size(); ++i) buf[i] = static_cast<float>(v[i]);
    bin.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(float)));
    plist.push_back({{"name", p.name},
                     {"shape", p.tensor.shape()},
                     {"offset", offset}});
    offset += buf.size() * sizeof(float);
  }
  if (!bin) throw std::runtime_error("write failed: " + bin_path);

  const auto json_path = prefix.string() + ".json";
  std::ofstream mf(json_path);
  if (!mf) throw std::runtime_error("cannot write " + json_path);
  mf << manifest.dump(2) << "\n";
}

// Loads values into an existing parameter list (names and shapes must
// match the manifest exactly, in order).  Returns the manifest for access
// to extra fields.
template <typename S>
nlohmann::json load_checkpoint(std::vector<Parameter<S>>& params,
                               const std::filesystem::path& prefix) {
  const auto json_path = prefix.string() + ".json";
  std::ifstream mf(json_path);
  if (!mf) throw ValidationError("cannot open manifest: " + json_path);
  nlohmann::json manifest;
  mf >> manifest;
  if (!manifest.contains("version")) {
    throw ValidationError(json_path + ": manifest missing version field");
  }
  if (manifest["version"].get<int>() != kCheckpointVersion) {
    throw ValidationError(json_path + ": unsupported checkpoint version");
  }
  const auto& plist = manifest.at("params");
  if (plist.size() != params.size()) {
    throw ValidationError(json_path + ": parameter count mismatch");
  }

  const auto bin_path = prefix.string() + ".bin";
  std::ifstream bin(bin_path, std::ios::binary);
  if (!bin) throw ValidationError("cannot open checkpoint: " + bin_path);

  std::vector<float> buf;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& entry = plist[i];
    if (entry.at("name").get<std::string>() != params[i].name) {
      throw ValidationError(json_path + ": parameter name mismatch at index " +
                            std::to_string(i));
    }
    if (entry.at("shape").get<Shape>() != params[i].tensor.shape()) {
      throw ValidationError(json_path + ": shape mismatch for " +
                            params[i].name);
    }
    auto& v = params[i].tensor.value();
    buf.resize(v.size());
    bin.seekg(static_cast<std::streamoff>(entry.at("offset").get<std::uint64_t>()));
    bin.read(reinterpret_cast<char*>(buf.data()),
             static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!bin) {
      throw ValidationError(bin_path + ": truncated reading " + params[i].name);
    }
    for (long j = 0; j < v.size(); ++j) v[j] = static_cast<S>(buf[j]);
  }
  return manifest;
}

}  // namespace xfer
