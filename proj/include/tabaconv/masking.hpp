#pragma once

#include <cstdint>
#include <vector>

#include "tabaconv/rng.hpp"
#include "tabaconv/schema.hpp"
#include "tabaconv/windows.hpp"

namespace tabaconv {

struct MaskConfig {
  double p_field = 0.30;
  double p_row = 0.15;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Which cells of one window are hidden. Columns of field_mask are the
/// categorical fields followed by the continuous fields.
struct MaskPlan {
  std::size_t length = 0;
  std::size_t num_cat = 0;
  std::size_t num_cont = 0;
  std::vector<std::uint8_t> field_mask;  // T × (num_cat + num_cont)
  std::vector<std::uint8_t> row_mask;    // T
  // Originals at masked cells, row-major order. Filled by apply_mask.
  std::vector<std::int32_t> cat_targets;
  std::vector<float> cont_targets;

  std::size_t width() const { return num_cat + num_cont; }
  bool masked(std::size_t t, std::size_t c) const { return field_mask[t * width() + c] != 0; }
  bool cat_masked(std::size_t t, std::size_t f) const { return masked(t, f); }
  bool cont_masked(std::size_t t, std::size_t f) const { return masked(t, num_cat + f); }
  std::size_t num_masked() const;
  std::size_t num_cat_masked() const;
  std::size_t num_cont_masked() const;
  bool empty() const { return num_masked() == 0; }
};

// Rows first, Bernoulli(p_row) each; then every cell of an unmasked row is
// masked with probability p_field. Timestamps are never masked.
MaskPlan sample_mask_plan(std::size_t length, std::size_t num_cat, std::size_t num_cont, const MaskConfig& cfg,
                          Rng& rng);
MaskPlan sample_mask_plan(std::size_t length, const FeatureSchema& schema, const MaskConfig& cfg, Rng& rng);

/// Masked copy of sample: categorical cells become kMaskToken, continuous cells
/// the training mean (0 after z-scoring). Records the originals in plan.
WindowSample apply_mask(const WindowSample& sample, MaskPlan& plan);

// Stream for the mask of sample `index` in `epoch`, independent of batch order.
Rng mask_stream(std::uint64_t seed, std::uint64_t epoch, std::uint64_t index);

}  // namespace tabaconv
