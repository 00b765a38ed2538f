// Copyright 2026 The P4O Authors
// SPDX-License-Identifier: Apache-2.0

#include "p4o/world_model.hpp"

#include <cmath>
#include <stdexcept>

#include "p4o/errors.hpp"
#include "p4o/ops.hpp"

namespace p4o {

template <typename T>
RecurrentState<T> RecurrentState<T>::zeros(std::size_t batch, std::size_t belief, std::size_t prediction) {
  RecurrentState s;
  s.h = DiffArray<T>::zeros({batch, belief});
  s.c_h = DiffArray<T>::zeros({batch, belief});
  if (prediction > 0) {
    s.p = DiffArray<T>::zeros({batch, prediction});
    s.c_p = DiffArray<T>::zeros({batch, prediction});
  }
  return s;
}

template <typename T>
RecurrentState<T> RecurrentState<T>::detached() const {
  RecurrentState s{h.detach(), c_h.detach(), {}, {}};
  if (has_prediction()) {
    s.p = p.detach();
    s.c_p = c_p.detach();
  }
  return s;
}

template <typename T>
RecurrentState<T> RecurrentState<T>::masked(std::span<const T> keep) const {
  RecurrentState s{scale_rows(h, keep), scale_rows(c_h, keep), {}, {}};
  if (has_prediction()) {
    s.p = scale_rows(p, keep);
    s.c_p = scale_rows(c_p, keep);
  }
  return s;
}

template <typename T>
RecurrentState<T> RecurrentState<T>::rows(std::size_t begin, std::size_t count) const {
  RecurrentState s{slice_rows(h, begin, count), slice_rows(c_h, begin, count), {}, {}};
  if (has_prediction()) {
    s.p = slice_rows(p, begin, count);
    s.c_p = slice_rows(c_p, begin, count);
  }
  return s;
}

template <typename T>
RecurrentState<T> RecurrentState<T>::concat(std::span<const RecurrentState> parts) {
  auto gather = [&](auto member) {
    std::vector<DiffArray<T>> v;
    v.reserve(parts.size());
    for (const auto& s : parts) v.push_back(s.*member);
    return concat_rows(std::span<const DiffArray<T>>(v));
  };
  RecurrentState s{gather(&RecurrentState::h), gather(&RecurrentState::c_h), {}, {}};
  if (!parts.empty() && parts[0].has_prediction()) {
    s.p = gather(&RecurrentState::p);
    s.c_p = gather(&RecurrentState::c_p);
  }
  return s;
}

template <typename T>
bool RecurrentState<T>::all_finite() const {
  for (const auto* a : {&h, &c_h, &p, &c_p}) {
    if (!a->defined()) continue;
    for (T v : a->values()) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

template <typename T>
std::vector<T> RecurrentState<T>::flatten() const {
  std::vector<T> out;
  for (const auto* a : {&h, &c_h, &p, &c_p}) {
    if (a->defined()) out.insert(out.end(), a->values().begin(), a->values().end());
  }
  return out;
}

template <typename T>
RecurrentState<T> RecurrentState<T>::unflatten(std::span<const T> flat, std::size_t batch, std::size_t belief,
                                               std::size_t prediction) {
  const std::size_t need = 2 * batch * (belief + prediction);
  if (flat.size() != need) {
    throw DimensionError("RecurrentState::unflatten: expected " + std::to_string(need) + " values, got " +
                         std::to_string(flat.size()));
  }
  std::size_t offset = 0;
  auto take = [&](std::size_t cols) {
    std::vector<T> v(flat.begin() + static_cast<std::ptrdiff_t>(offset),
                     flat.begin() + static_cast<std::ptrdiff_t>(offset + batch * cols));
    offset += batch * cols;
    return DiffArray<T>({batch, cols}, std::move(v));
  };
  RecurrentState s;
  s.h = take(belief);
  s.c_h = take(belief);
  if (prediction > 0) {
    s.p = take(prediction);
    s.c_p = take(prediction);
  }
  return s;
}

std::size_t pc_lstm_parameter_count(std::size_t p, std::size_t q) {
  const std::size_t k = p + q;
  return 4 * (k * p + k * q + k);
}

std::size_t baseline_lstm_parameter_count(std::size_t k, std::size_t p) { return 4 * (k * k + k * p + k); }

std::size_t parameter_matched_units(std::size_t p, std::size_t q) {
  const double target = static_cast<double>(pc_lstm_parameter_count(p, q)) / 4.0;
  // k'^2 + (p+1) k' - target = 0
  const double b = static_cast<double>(p) + 1.0;
  const double root = (-b + std::sqrt(b * b + 4.0 * target)) / 2.0;
  const auto lo = static_cast<std::size_t>(std::floor(root));
  const auto gap = [&](std::size_t k) {
    return std::abs(static_cast<double>(baseline_lstm_parameter_count(k, p)) / 4.0 - target);
  };
  return gap(lo + 1) < gap(lo) ? lo + 1 : std::max<std::size_t>(lo, 1);
}

namespace {

template <typename T>
std::vector<T> gate_bias(std::size_t n) {
  std::vector<T> b(4 * n, T{0});
  for (std::size_t j = n; j < 2 * n; ++j) b[j] = T{1};  // forget gate
  return b;
}

// Orthogonal init applied per gate block so each [n, cols] block is orthogonal.
template <typename T>
std::vector<T> orthogonal_gates(std::size_t n, std::size_t cols, Rng& rng) {
  std::vector<T> out;
  out.reserve(4 * n * cols);
  for (int g = 0; g < 4; ++g) {
    auto block = orthogonal(n, cols, rng);
    out.insert(out.end(), block.begin(), block.end());
  }
  return out;
}

template <typename T>
void check_state(const RecurrentState<T>& s, const char* op, long timestep) {
  if (!s.all_finite()) {
    throw NumericError(std::string(op) + ": non-finite recurrent state at timestep " + std::to_string(timestep));
  }
}

template <typename T>
std::pair<DiffArray<T>, DiffArray<T>> split_cell(const DiffArray<T>& out, std::size_t n) {
  return {slice_cols(out, 0, n), slice_cols(out, n, n)};
}

}  // namespace

template <typename T>
PcLstm<T>::PcLstm(std::size_t p, std::size_t q, ParameterSet<T>& params, Rng& rng, const std::string& prefix)
    : p_(p), q_(q) {
  if (p == 0 || q == 0) throw ConfigError("pc-lstm: population sizes must be positive");
  if (pc_lstm_parameter_count(p, q) >= baseline_lstm_parameter_count(p + q, p)) {
    throw std::logic_error("pc-lstm: recurrent block is not smaller than the k = p + q baseline");
  }
  W_h_ = params.add(prefix + "belief/W", {4 * q, p}, cast_values<T>(uniform_fan_in(4 * q * p, p, rng)));
  U_h_ = params.add(prefix + "belief/U", {4 * q, q}, orthogonal_gates<T>(q, q, rng));
  b_h_ = params.add(prefix + "belief/b", {4 * q}, gate_bias<T>(q));
  W_p_ = params.add(prefix + "prediction/W", {4 * p, p}, cast_values<T>(uniform_fan_in(4 * p * p, p, rng)));
  U_p_ = params.add(prefix + "prediction/U", {4 * p, q}, orthogonal_gates<T>(p, q, rng));
  b_p_ = params.add(prefix + "prediction/b", {4 * p}, gate_bias<T>(p));
}

template <typename T>
RecurrentState<T> PcLstm<T>::advance(const DiffArray<T>& zh, const DiffArray<T>& zp,
                                     const RecurrentState<T>& prev, long timestep) const {
  RecurrentState<T> next;
  std::tie(next.h, next.c_h) = split_cell(lstm_cell(zh, prev.c_h), q_);
  std::tie(next.p, next.c_p) = split_cell(lstm_cell(zp, prev.c_p), p_);
  check_state(next, "pc_lstm_step", timestep);
  return next;
}

template <typename T>
StepOutput<T> PcLstm<T>::step(const DiffArray<T>& x, const RecurrentState<T>& prev, long timestep) const {
  if (!prev.has_prediction() || prev.p.dim(1) != p_ || prev.h.dim(1) != q_ || x.rank() != 2 ||
      x.dim(1) != p_ || x.dim(0) != prev.batch()) {
    throw DimensionError("pc_lstm_step: latent " + shape_string(x.shape()) + " and belief " +
                         shape_string(prev.h.shape()) + " do not match p=" + std::to_string(p_) +
                         ", q=" + std::to_string(q_));
  }
  StepOutput<T> out;
  out.error = sub(prev.p, x);
  // Both populations read the error and the previous belief state.
  const DiffArray<T> zh = add(linear(out.error, W_h_, b_h_), linear(prev.h, U_h_, DiffArray<T>()));
  const DiffArray<T> zp = add(linear(out.error, W_p_, b_p_), linear(prev.h, U_p_, DiffArray<T>()));
  out.state = advance(zh, zp, prev, timestep);
  out.combined = concat_cols(out.state.h, out.state.p);
  return out;
}

template <typename T>
std::vector<DiffArray<T>> PcLstm<T>::open_loop_rollout(const RecurrentState<T>& start, long H) const {
  if (H < 1) throw ConfigError("open_loop_rollout: horizon must be at least 1, got " + std::to_string(H));
  std::vector<DiffArray<T>> predictions;
  predictions.reserve(static_cast<std::size_t>(H));
  RecurrentState<T> state = start;
  for (long i = 0; i < H; ++i) {
    // Zero error input: the W terms vanish.
    const DiffArray<T> zh = linear(state.h, U_h_, b_h_);
    const DiffArray<T> zp = linear(state.h, U_p_, b_p_);
    state = advance(zh, zp, state, i);
    predictions.push_back(state.p);
  }
  return predictions;
}

template <typename T>
BaselineLstm<T>::BaselineLstm(std::size_t k, std::size_t p, ParameterSet<T>& params, Rng& rng,
                              const std::string& prefix)
    : k_(k), p_(p) {
  if (k == 0 || p == 0) throw ConfigError("baseline lstm: sizes must be positive");
  W_ = params.add(prefix + "W", {4 * k, p}, cast_values<T>(uniform_fan_in(4 * k * p, p, rng)));
  U_ = params.add(prefix + "U", {4 * k, k}, orthogonal_gates<T>(k, k, rng));
  b_ = params.add(prefix + "b", {4 * k}, gate_bias<T>(k));
}

template <typename T>
StepOutput<T> BaselineLstm<T>::step(const DiffArray<T>& x, const RecurrentState<T>& prev, long timestep) const {
  if (prev.h.dim(1) != k_ || x.rank() != 2 || x.dim(1) != p_ || x.dim(0) != prev.batch()) {
    throw DimensionError("baseline_lstm_step: latent " + shape_string(x.shape()) + " and state " +
                         shape_string(prev.h.shape()) + " do not match p=" + std::to_string(p_) +
                         ", k=" + std::to_string(k_));
  }
  StepOutput<T> out;
  out.error = DiffArray<T>::zeros(x.shape());
  const DiffArray<T> z = add(linear(x, W_, b_), linear(prev.h, U_, DiffArray<T>()));
  std::tie(out.state.h, out.state.c_h) = split_cell(lstm_cell(z, prev.c_h), k_);
  check_state(out.state, "baseline_lstm_step", timestep);
  out.combined = out.state.h;
  return out;
}

template <typename T>
std::vector<DiffArray<T>> BaselineLstm<T>::open_loop_rollout(const RecurrentState<T>&, long) const {
  throw std::logic_error("baseline lstm has no prediction population");
}

template <typename T>
DiffArray<T> prediction_loss(std::span<const DiffArray<T>> predictions, std::span<const DiffArray<T>> targets) {
  if (predictions.size() != targets.size() || predictions.empty()) {
    throw DimensionError("prediction_loss: " + std::to_string(predictions.size()) + " predictions vs " +
                         std::to_string(targets.size()) + " targets");
  }
  std::vector<DiffArray<T>> terms;
  for (std::size_t i = 0; i < predictions.size(); ++i) terms.push_back(mse(predictions[i], targets[i]));
  const std::vector<T> ones(terms.size(), T{1});
  return weighted_sum(std::span<const DiffArray<T>>(terms), std::span<const T>(ones));
}

template <typename T>
DiffArray<T> prediction_loss(std::span<const DiffArray<T>> predictions, std::span<const DiffArray<T>> targets,
                             const std::vector<std::vector<T>>& row_weights) {
  if (predictions.size() != targets.size() || predictions.size() != row_weights.size() || predictions.empty()) {
    throw DimensionError("prediction_loss: " + std::to_string(predictions.size()) + " predictions vs " +
                         std::to_string(targets.size()) + " targets and " +
                         std::to_string(row_weights.size()) + " weight rows");
  }
  std::vector<DiffArray<T>> terms;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    terms.push_back(row_weighted_mse(predictions[i], targets[i], std::span<const T>(row_weights[i])));
  }
  const std::vector<T> ones(terms.size(), T{1});
  return weighted_sum(std::span<const DiffArray<T>>(terms), std::span<const T>(ones));
}

#define P4O_INSTANTIATE_WORLD(T)                                                                  \
  template struct RecurrentState<T>;                                                              \
  template class PcLstm<T>;                                                                       \
  template class BaselineLstm<T>;                                                                 \
  template DiffArray<T> prediction_loss(std::span<const DiffArray<T>>, std::span<const DiffArray<T>>); \
  template DiffArray<T> prediction_loss(std::span<const DiffArray<T>>, std::span<const DiffArray<T>>,  \
                                        const std::vector<std::vector<T>>&);

P4O_INSTANTIATE_WORLD(float)
P4O_INSTANTIATE_WORLD(double)

#undef P4O_INSTANTIATE_WORLD

}  // namespace p4o
