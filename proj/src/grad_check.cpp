// Copyright 2026 The P4O Authors
// SPDX-License-Identifier: Apache-2.0

#include "p4o/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace p4o {

GradCheckReport grad_check(const std::function<DiffArray<double>()>& loss_fn,
                           std::span<const NamedParameter<double>> params,
                           const GradCheckOptions& options) {
  std::vector<DiffArray<double>> arrays;
  for (const auto& p : params) arrays.push_back(p.array);
  for (auto& a : arrays) a.zero_grad();
  {
    const DiffArray<double> loss = loss_fn();
    if (!std::isfinite(loss.item())) throw NumericError("grad_check: loss is not finite at the base point");
    loss.backward();
  }
  std::vector<std::vector<double>> analytic;
  for (const auto& a : arrays) {
    analytic.emplace_back(a.has_grad() ? std::vector<double>(a.grad().begin(), a.grad().end())
                                       : std::vector<double>(a.size(), 0.0));
  }

  // (tensor, index) coordinates to probe.
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  std::size_t total = 0;
  for (const auto& a : arrays) total += a.size();
  if (total <= options.max_coordinates) {
    for (std::size_t t = 0; t < arrays.size(); ++t) {
      for (std::size_t i = 0; i < arrays[t].size(); ++i) coords.emplace_back(t, i);
    }
  } else {
    Rng rng(options.seed);
    const double rate = static_cast<double>(options.max_coordinates) / static_cast<double>(total);
    for (std::size_t t = 0; t < arrays.size(); ++t) {
      const std::size_t n = arrays[t].size();
      if (n == 0) continue;
      const std::size_t take =
          std::clamp<std::size_t>(static_cast<std::size_t>(std::ceil(rate * static_cast<double>(n))), 1, n);
      std::vector<std::size_t> idx(n);
      std::iota(idx.begin(), idx.end(), 0);
      for (std::size_t k = 0; k < take; ++k) {
        std::swap(idx[k], idx[k + rng.below(n - k)]);
        coords.emplace_back(t, idx[k]);
      }
    }
  }

  GradCheckReport report;
  NoGradGuard no_grad;
  for (const auto& [t, i] : coords) {
    auto values = arrays[t].mutable_values();
    const double original = values[i];
    values[i] = original + options.eps;
    const double plus = loss_fn().item();
    values[i] = original - options.eps;
    const double minus = loss_fn().item();
    values[i] = original;
    if (!std::isfinite(plus) || !std::isfinite(minus)) {
      throw NumericError("grad_check: loss is not finite after perturbing " + params[t].name + "[" +
                         std::to_string(i) + "] by " + (std::isfinite(plus) ? "-" : "+") + "eps");
    }
    const double numeric = (plus - minus) / (2.0 * options.eps);
    const double a = analytic[t][i];
    const double denom = std::max({std::abs(a), std::abs(numeric), options.denominator_floor});
    const double rel = std::abs(a - numeric) / denom;
    ++report.coordinates_checked;
    if (rel > report.max_rel_err || report.failing_param.empty()) {
      if (rel >= report.max_rel_err) {
        report.max_rel_err = rel;
        report.failing_param = params[t].name;
        report.failing_index = i;
        report.analytic = a;
        report.numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace p4o
