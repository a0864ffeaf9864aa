#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tabaconv/schema.hpp"

namespace tabaconv {

enum class WindowMode { kPretrain, kDownstream };

/// One training example: T consecutive rows of one user, row-major per matrix.
struct WindowSample {
  std::size_t length = 0;  // T
  std::size_t num_cat = 0;
  std::size_t num_cont = 0;
  std::vector<std::int32_t> cat_tokens;     // T × num_cat
  std::vector<float> cont_values;           // T × num_cont, z-scored
  std::vector<std::int32_t> ts_components;  // T × 8
  std::vector<float> ts_floats;             // T × 4
  std::optional<std::int8_t> label;
  std::string user_id;

  std::int32_t& cat(std::size_t t, std::size_t c) { return cat_tokens[t * num_cat + c]; }
  std::int32_t cat(std::size_t t, std::size_t c) const { return cat_tokens[t * num_cat + c]; }
  float& cont(std::size_t t, std::size_t c) { return cont_values[t * num_cont + c]; }
  float cont(std::size_t t, std::size_t c) const { return cont_values[t * num_cont + c]; }

  bool operator==(const WindowSample&) const = default;
};

inline constexpr std::size_t kPretrainWindow = 10;
inline constexpr std::size_t kPretrainStride = 5;
inline constexpr std::size_t kDownstreamWindow = 10;
inline constexpr std::size_t kDownstreamStride = 10;

// max(0, ⌊(n − W)/S⌋ + 1)
std::size_t window_count(std::size_t rows, std::size_t window, std::size_t stride);

/// Windows start at 0, S, 2S, …; incomplete tail windows are dropped. Pretrain
/// windows carry no label; downstream windows are labelled 1 iff any row is.
std::vector<WindowSample> make_windows(const UserRows& user, const FeatureSchema& schema, std::size_t window,
                                       std::size_t stride, WindowMode mode);

std::vector<WindowSample> make_dataset(const std::vector<UserRows>& users, const FeatureSchema& schema,
                                       std::size_t window, std::size_t stride, WindowMode mode);

// Flat little-endian cache: "TSBW1", fixed header, user-id table, then one
// fixed-size record per sample.
void save_windows(const std::filesystem::path& path, std::span<const WindowSample> samples);
std::vector<WindowSample> load_windows(const std::filesystem::path& path);

}  // namespace tabaconv
