// Copyright 2026 The P4O Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "p4o/diff_array.hpp"
#include "p4o/rng.hpp"

namespace p4o {

template <typename T>
struct NamedParameter {
  std::string name;
  DiffArray<T> array;
};

// Ordered registry of trainable leaves. Order is registration order and is
// the canonical order for flattening, optimizer state and checkpoints.
template <typename T>
class ParameterSet {
 public:
  DiffArray<T> add(std::string name, Shape shape, std::vector<T> values);

  std::span<const NamedParameter<T>> entries() const { return entries_; }
  std::span<NamedParameter<T>> entries() { return entries_; }
  std::size_t tensor_count() const { return entries_.size(); }
  std::size_t scalar_count() const;
  const DiffArray<T>& get(const std::string& name) const;

  void zero_grad();
  std::vector<T> flatten() const;
  void assign(std::span<const T> flat);
  std::vector<T> flatten_grad() const;

 private:
  std::vector<NamedParameter<T>> entries_;
};

// Fan-in scaled uniform U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
std::vector<double> uniform_fan_in(std::size_t count, std::size_t fan_in, Rng& rng);

// rows x cols matrix with orthonormal rows (rows <= cols) or columns
// (rows > cols), from the QR factorization of a Gaussian matrix with the sign
// convention diag(R) > 0.
std::vector<double> orthogonal(std::size_t rows, std::size_t cols, Rng& rng);

template <typename T>
std::vector<T> cast_values(const std::vector<double>& v) {
  return std::vector<T>(v.begin(), v.end());
}

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-5;
};

template <typename T>
class Adam {
 public:
  Adam(ParameterSet<T>& params, AdamOptions options = {});

  // One update with the gradients currently stored on the parameters.
  void step(double learning_rate);

  std::size_t steps() const { return steps_; }
  const AdamOptions& options() const { return options_; }

  // Moments, flattened in parameter order; used by checkpoints.
  std::vector<double> first_moments() const;
  std::vector<double> second_moments() const;
  void restore(std::size_t steps, std::span<const double> m, std::span<const double> v);

 private:
  ParameterSet<T>* params_;
  AdamOptions options_;
  std::size_t steps_ = 0;
  std::vector<std::vector<T>> m_;
  std::vector<std::vector<T>> v_;
};

// Scales all gradients so their global L2 norm is at most max_norm. Returns
// the norm before clipping.
template <typename T>
double clip_grad_norm(ParameterSet<T>& params, double max_norm);

}  // namespace p4o
