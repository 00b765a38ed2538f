// Copyright 2026 The P4O Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>

#include "p4o/diff_array.hpp"
#include "p4o/parameters.hpp"

namespace p4o {

struct GradCheckOptions {
  double eps = 1e-5;
  // Above this many scalars a random subset of coordinates is checked; every
  // tensor contributes at least one coordinate.
  std::size_t max_coordinates = 10000;
  std::uint64_t seed = 0;
  // Relative error is |a - n| / max(|a|, |n|, floor).
  double denominator_floor = 1e-6;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string failing_param;  // parameter holding the worst coordinate
  std::size_t failing_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coordinates_checked = 0;
};

// Compares the reverse-mode gradient of loss_fn with central differences
// (f(x+eps) - f(x-eps)) / 2eps. loss_fn must be deterministic.
GradCheckReport grad_check(const std::function<DiffArray<double>()>& loss_fn,
                           std::span<const NamedParameter<double>> params,
                           const GradCheckOptions& options = {});

}  // namespace p4o
