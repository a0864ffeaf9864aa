#include "tabaconv/masking.hpp"

#include <algorithm>
#include <string>

#include "tabaconv/error.hpp"

namespace tabaconv {

void MaskConfig::validate() const {
  auto check = [](double p, const char* name) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(std::string(name) + " must lie in [0, 1], got " + std::to_string(p));
  };
  check(p_field, "p_field");
  check(p_row, "p_row");
}

std::size_t MaskPlan::num_masked() const {
  return static_cast<std::size_t>(std::count(field_mask.begin(), field_mask.end(), 1));
}

std::size_t MaskPlan::num_cat_masked() const {
  std::size_t n = 0;
  for (std::size_t t = 0; t < length; ++t)
    for (std::size_t f = 0; f < num_cat; ++f) n += cat_masked(t, f);
  return n;
}

std::size_t MaskPlan::num_cont_masked() const { return num_masked() - num_cat_masked(); }

MaskPlan sample_mask_plan(std::size_t length, std::size_t num_cat, std::size_t num_cont, const MaskConfig& cfg,
                          Rng& rng) {
  cfg.validate();
  MaskPlan plan;
  plan.length = length;
  plan.num_cat = num_cat;
  plan.num_cont = num_cont;
  plan.row_mask.resize(length);
  plan.field_mask.assign(length * plan.width(), 0);
  for (std::size_t t = 0; t < length; ++t) plan.row_mask[t] = rng.bernoulli(cfg.p_row);
  for (std::size_t t = 0; t < length; ++t) {
    for (std::size_t c = 0; c < plan.width(); ++c) {
      plan.field_mask[t * plan.width() + c] = plan.row_mask[t] ? 1 : rng.bernoulli(cfg.p_field);
    }
  }
  return plan;
}

MaskPlan sample_mask_plan(std::size_t length, const FeatureSchema& schema, const MaskConfig& cfg, Rng& rng) {
  return sample_mask_plan(length, schema.num_categorical(), schema.num_continuous(), cfg, rng);
}

WindowSample apply_mask(const WindowSample& sample, MaskPlan& plan) {
  if (plan.length != sample.length || plan.num_cat != sample.num_cat || plan.num_cont != sample.num_cont ||
      plan.field_mask.size() != plan.length * plan.width()) {
    throw ContractError("mask plan shape does not match the sample");
  }
  WindowSample out = sample;
  plan.cat_targets.clear();
  plan.cont_targets.clear();
  for (std::size_t t = 0; t < sample.length; ++t) {
    for (std::size_t f = 0; f < sample.num_cat; ++f) {
      if (!plan.cat_masked(t, f)) continue;
      plan.cat_targets.push_back(sample.cat(t, f));
      out.cat(t, f) = kMaskToken;
    }
    for (std::size_t f = 0; f < sample.num_cont; ++f) {
      if (!plan.cont_masked(t, f)) continue;
      plan.cont_targets.push_back(sample.cont(t, f));
      out.cont(t, f) = 0.0f;
    }
  }
  return out;
}

Rng mask_stream(std::uint64_t seed, std::uint64_t epoch, std::uint64_t index) {
  return Rng(seed, 0x6D61736BULL).split(epoch).split(index);
}

}  // namespace tabaconv
