#include "tabaconv/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "tabaconv/rng.hpp"

namespace tabaconv {

std::vector<std::pair<std::string, double>> GradReport::worst(std::size_t n) const {
  std::vector<std::pair<std::string, double>> out(max_rel_error.begin(), max_rel_error.end());
  std::stable_sort(out.begin(), out.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  if (out.size() > n) out.resize(n);
  return out;
}

GradReport grad_check(const std::function<Tensor<double>()>& build_loss,
                      std::map<std::string, Tensor<double>>& params,
                      const GradCheckOptions& options) {
  for (auto& [name, p] : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  {
    Tensor<double> loss = build_loss();
    if (!std::isfinite(loss.item())) throw NumericError("grad_check: loss is not finite at the base point");
    loss.backward();
  }

  auto evaluate = [&](const std::string& name) {
    NoGradGuard no_grad;
    const double v = build_loss().item();
    if (!std::isfinite(v)) {
      throw NumericError("grad_check: non-finite loss while perturbing parameter '" + name + "'");
    }
    return v;
  };

  GradReport report;
  report.tolerance = options.tol;
  report.pass = true;
  Rng rng(options.seed, 0x67726164);
  for (auto& [name, p] : params) {
    const std::size_t n = p.numel();
    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (n > options.max_coords) {
      rng.shuffle(std::span<std::size_t>(coords));
      coords.resize(options.max_coords);
      std::sort(coords.begin(), coords.end());
    }
    const std::vector<double> analytic = p.has_grad() ? std::vector<double>(p.grad().begin(), p.grad().end())
                                                      : std::vector<double>(n, 0.0);
    double worst = 0.0;
    for (std::size_t c : coords) {
      double& slot = p.values()[c];
      const double orig = slot;
      slot = orig + options.h;
      const double up = evaluate(name);
      slot = orig - options.h;
      const double down = evaluate(name);
      slot = orig;
      const double numeric = (up - down) / (2.0 * options.h);
      const double denom = std::max({std::abs(analytic[c]), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(analytic[c] - numeric) / denom);
    }
    report.max_rel_error[name] = worst;
    if (!(worst < options.tol)) report.pass = false;
  }
  return report;
}

}  // namespace tabaconv
