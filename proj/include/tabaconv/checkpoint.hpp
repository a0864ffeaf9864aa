#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tabaconv/model.hpp"

namespace tabaconv {

struct AdamState {
  std::uint64_t step = 0;
  std::map<std::string, std::vector<float>> m, v;
  bool operator==(const AdamState&) const = default;
};

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  ModelConfig config;
  FeatureSchema schema;
  HeadKind head = HeadKind::kPretrain;
  Parameters<float> params;
  std::optional<AdamState> optimizer;
  std::uint64_t step = 0;
  std::uint64_t rng_key = 0;
  std::uint64_t rng_counter = 0;

  static Checkpoint from_model(const TabAConvBert<float>& model);
  TabAConvBert<float> model() const;
};

// Little-endian: "TACB1", u32 version, u32 + JSON metadata, u32 tensor count,
// per tensor (u32 name length, name, u32 rank, u64 dims, f32 data), optional
// Adam moments in the same layout, then a CRC-32 of everything before it.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace tabaconv
