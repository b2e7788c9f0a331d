#pragma once

#include <functional>
#include <string>
#include <vector>

#include "tsegcn/param_store.hpp"
#include "tsegcn/tensor.hpp"

namespace tsegcn {

struct GradCheckOptions {
  double eps = 1e-5;
  double tol = 1e-4;
  std::uint64_t seed = 0;
  /// Tensors larger than this get a seeded random subsample of coordinates.
  std::size_t coords_per_tensor = 32;
  /// Optional restriction to specific coordinates (name, flat index).
  std::function<bool(const std::string&, std::size_t)> coord_filter;
  /// Denominator floor for the relative error; below this scale the
  /// central-difference noise floor dominates and comparisons are absolute.
  double denom_floor = 1e-4;
};

struct CheckReport {
  bool passed = false;
  double max_rel_err = 0.0;
  std::string worst_param;
  std::size_t worst_coord = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coords_checked = 0;
};

/// Compare the analytic gradient of f against central finite differences.
///
/// f evaluates a deterministic scalar objective of the parameters and, as a
/// side effect, accumulates its gradient into the store. grad_check zeroes
/// the gradients, calls f once to capture the analytic gradient, then probes
/// sampled coordinates with (f(p+eps) - f(p-eps)) / (2 eps). Gradients
/// accumulated during the probe evaluations are discarded.
inline CheckReport grad_check(const std::function<double(ParamStore&)>& f, ParamStore& params,
                              const GradCheckOptions& opt = {}) {
  params.zero_grad();
  const double base = f(params);
  if (!std::isfinite(base)) throw EvalError("grad_check: objective is non-finite at the unperturbed point");

  std::vector<std::pair<std::string, Tensor>> analytic;
  for (const auto& [name, e] : params) analytic.emplace_back(name, e.grad);

  CheckReport report;
  report.passed = true;
  Rng rng(opt.seed);
  for (const auto& [name, grad] : analytic) {
    auto& entry = params.entry(name);
    const std::size_t n = entry.value.size();

    std::vector<std::size_t> coords;
    if (n <= opt.coords_per_tensor) {
      for (std::size_t i = 0; i < n; ++i) coords.push_back(i);
    } else {
      std::vector<std::size_t> all(n);
      for (std::size_t i = 0; i < n; ++i) all[i] = i;
      rng.shuffle(all);
      coords.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(opt.coords_per_tensor));
    }

    for (std::size_t idx : coords) {
      if (opt.coord_filter && !opt.coord_filter(name, idx)) continue;
      const double saved = entry.value[idx];
      entry.value[idx] = saved + opt.eps;
      const double f_plus = f(params);
      entry.value[idx] = saved - opt.eps;
      const double f_minus = f(params);
      entry.value[idx] = saved;
      if (!std::isfinite(f_plus) || !std::isfinite(f_minus))
        throw EvalError("grad_check: objective non-finite when perturbing " + name + "[" + std::to_string(idx) + "]");

      const double numeric = (f_plus - f_minus) / (2.0 * opt.eps);
      const double a = grad[idx];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), opt.denom_floor});
      ++report.coords_checked;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_param = name;
        report.worst_coord = idx;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  params.zero_grad();
  report.passed = report.max_rel_err <= opt.tol;
  return report;
}

}  // namespace tsegcn
