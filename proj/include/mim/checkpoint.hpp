#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "mim/model.hpp"
#include "mim/training.hpp"

namespace mim {

// File layout: "MIMCKPT1", u64 little-endian header length, JSON header, then
// the payload of little-endian f32 values. Tensor offsets in the header are
// byte offsets from the start of the payload.
inline constexpr std::string_view kCheckpointMagic = "MIMCKPT1";

// 64-bit FNV-1a, printed as 16 lowercase hex digits.
std::uint64_t fnv1a(std::string_view bytes);
std::string hex64(std::uint64_t value);
std::string file_hash(const std::filesystem::path& path);

struct CheckpointData {
  Parameters<float> params;
  std::optional<OptimizerState<float>> optimizer;
  nlohmann::json run_config;  // the full run configuration, stored verbatim
  std::string config_hash;
  std::uint64_t step = 0;
  std::uint64_t tokens_seen = 0;
};

void save_checkpoint(const std::filesystem::path& path, const CheckpointData& data);

// Throws IoError on a missing, truncated or malformed file and ConfigError
// when `expected_hash` is given and differs from the stored hash.
CheckpointData load_checkpoint(const std::filesystem::path& path,
                               const std::optional<std::string>& expected_hash = std::nullopt);

// Header only; the payload is not read.
nlohmann::json read_checkpoint_header(const std::filesystem::path& path);

}  // namespace mim
