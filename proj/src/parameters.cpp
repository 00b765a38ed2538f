// Copyright 2026 The P4O Authors
// SPDX-License-Identifier: Apache-2.0

#include "p4o/parameters.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>

namespace p4o {

template <typename T>
DiffArray<T> ParameterSet<T>::add(std::string name, Shape shape, std::vector<T> values) {
  for (const auto& e : entries_) {
    if (e.name == name) throw std::invalid_argument("ParameterSet: duplicate name " + name);
  }
  DiffArray<T> array(std::move(shape), std::move(values), true);
  entries_.push_back({std::move(name), array});
  return array;
}

template <typename T>
std::size_t ParameterSet<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.array.size();
  return n;
}

template <typename T>
const DiffArray<T>& ParameterSet<T>::get(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return e.array;
  }
  throw std::out_of_range("ParameterSet: no parameter named " + name);
}

template <typename T>
void ParameterSet<T>::zero_grad() {
  for (auto& e : entries_) e.array.zero_grad();
}

template <typename T>
std::vector<T> ParameterSet<T>::flatten() const {
  std::vector<T> flat;
  flat.reserve(scalar_count());
  for (const auto& e : entries_) flat.insert(flat.end(), e.array.values().begin(), e.array.values().end());
  return flat;
}

template <typename T>
std::vector<T> ParameterSet<T>::flatten_grad() const {
  std::vector<T> flat;
  flat.reserve(scalar_count());
  for (const auto& e : entries_) {
    if (e.array.has_grad()) {
      flat.insert(flat.end(), e.array.grad().begin(), e.array.grad().end());
    } else {
      flat.insert(flat.end(), e.array.size(), T{0});
    }
  }
  return flat;
}

template <typename T>
void ParameterSet<T>::assign(std::span<const T> flat) {
  if (flat.size() != scalar_count()) {
    throw DimensionError("ParameterSet::assign: expected " + std::to_string(scalar_count()) +
                         " values, got " + std::to_string(flat.size()));
  }
  std::size_t offset = 0;
  for (auto& e : entries_) {
    auto dst = e.array.mutable_values();
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(offset), dst.size(), dst.begin());
    offset += dst.size();
  }
}

std::vector<double> uniform_fan_in(std::size_t count, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<double> v(count);
  for (double& x : v) x = rng.uniform(-bound, bound);
  return v;
}

std::vector<double> orthogonal(std::size_t rows, std::size_t cols, Rng& rng) {
  const std::size_t big = std::max(rows, cols), small = std::min(rows, cols);
  Eigen::MatrixXd g(big, small);
  for (Eigen::Index j = 0; j < g.cols(); ++j) {
    for (Eigen::Index i = 0; i < g.rows(); ++i) g(i, j) = rng.normal();
  }
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(big, small);
  const Eigen::MatrixXd r = qr.matrixQR().topRows(small).triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < q.cols(); ++j) {
    if (r(j, j) < 0) q.col(j) *= -1.0;
  }
  std::vector<double> out(rows * cols);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      out[i * cols + j] = rows >= cols ? q(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j))
                                       : q(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i));
    }
  }
  return out;
}

template <typename T>
Adam<T>::Adam(ParameterSet<T>& params, AdamOptions options) : params_(&params), options_(options) {
  for (const auto& e : params.entries()) {
    m_.emplace_back(e.array.size(), T{0});
    v_.emplace_back(e.array.size(), T{0});
  }
}

template <typename T>
void Adam<T>::step(double learning_rate) {
  ++steps_;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  const T step_size = static_cast<T>(learning_rate / c1);
  const T sqrt_c2 = static_cast<T>(std::sqrt(c2));
  const T eps = static_cast<T>(options_.eps);
  auto entries = params_->entries();
  for (std::size_t k = 0; k < entries.size(); ++k) {
    auto& p = entries[k].array;
    if (!p.has_grad()) continue;
    auto g = p.grad();
    auto w = p.mutable_values();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = static_cast<T>(b1) * m[i] + static_cast<T>(1.0 - b1) * g[i];
      v[i] = static_cast<T>(b2) * v[i] + static_cast<T>(1.0 - b2) * g[i] * g[i];
      w[i] -= step_size * m[i] / (std::sqrt(v[i]) / sqrt_c2 + eps);
    }
  }
}

template <typename T>
std::vector<double> Adam<T>::first_moments() const {
  std::vector<double> out;
  for (const auto& m : m_) out.insert(out.end(), m.begin(), m.end());
  return out;
}

template <typename T>
std::vector<double> Adam<T>::second_moments() const {
  std::vector<double> out;
  for (const auto& v : v_) out.insert(out.end(), v.begin(), v.end());
  return out;
}

template <typename T>
void Adam<T>::restore(std::size_t steps, std::span<const double> m, std::span<const double> v) {
  std::size_t total = 0;
  for (const auto& x : m_) total += x.size();
  if (m.size() != total || v.size() != total) {
    throw DimensionError("Adam::restore: moment size mismatch");
  }
  steps_ = steps;
  std::size_t offset = 0;
  for (std::size_t k = 0; k < m_.size(); ++k) {
    for (std::size_t i = 0; i < m_[k].size(); ++i) {
      m_[k][i] = static_cast<T>(m[offset + i]);
      v_[k][i] = static_cast<T>(v[offset + i]);
    }
    offset += m_[k].size();
  }
}

template <typename T>
double clip_grad_norm(ParameterSet<T>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& e : params.entries()) {
    for (T g : e.array.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double factor = max_norm / norm;
    for (auto& e : params.entries()) {
      if (!e.array.has_grad()) continue;
      // Gradients are owned by the leaf node; rescale in place.
      auto& g = e.array.node().grad;
      for (T& x : g) x = static_cast<T>(static_cast<double>(x) * factor);
    }
  }
  return norm;
}

template class ParameterSet<float>;
template class ParameterSet<double>;
template class Adam<float>;
template class Adam<double>;
template double clip_grad_norm(ParameterSet<float>&, double);
template double clip_grad_norm(ParameterSet<double>&, double);

}  // namespace p4o
