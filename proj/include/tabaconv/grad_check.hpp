#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>

#include "tabaconv/tensor.hpp"

namespace tabaconv {

struct GradCheckOptions {
  double h = 1e-5;
  double tol = 1e-4;
  std::size_t max_coords = 64;  // per parameter, seeded subsample
  std::uint64_t seed = 0;
};

struct GradReport {
  std::map<std::string, double> max_rel_error;
  double tolerance = 0.0;
  bool pass = false;

  // Parameters ordered by descending error.
  std::vector<std::pair<std::string, double>> worst(std::size_t n) const;
};

/// Compares analytic gradients of build_loss with central differences
/// (f(p+h) − f(p−h)) / 2h. Parameters are perturbed in place and restored.
GradReport grad_check(const std::function<Tensor<double>()>& build_loss,
                      std::map<std::string, Tensor<double>>& params,
                      const GradCheckOptions& options = {});

}  // namespace tabaconv
