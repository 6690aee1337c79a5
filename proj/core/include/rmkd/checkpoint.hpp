#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "rmkd/model.hpp"

namespace rmkd {

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { kF32 = 0, kF64 = 1 };

// Named parameter arrays plus key=value metadata. The model config lives in
// the metadata under "model.*" keys; training provenance (stage, omega, seed,
// steps, ...) sits next to it.
struct Checkpoint {
  ParameterStore params;
  ModelConfig config;
  std::map<std::string, std::string> metadata;

  std::string stage() const;
  std::string get(const std::string& key, const std::string& fallback = "") const;
};

// "RMKD1", u32 version, u32 array count; per array: u32 name length + UTF-8
// name, u32 rank, u32 dims..., u8 dtype (0 = f32, 1 = f64), raw LE data; then
// u32 metadata length + "key=value\n" lines sorted by key.
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& checkpoint, DType dtype = DType::kF64);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint, DType dtype = DType::kF64);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace rmkd
