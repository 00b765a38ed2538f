// Copyright 2026 The P4O Authors
// SPDX-License-Identifier: Apache-2.0
//
// Recurrent cores: the two-population predictive-coding LSTM and the
// single-population LSTM baseline.
//
// Gate blocks in every fused weight matrix are ordered input, forget, output,
// candidate, matching lstm_cell.

#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "p4o/diff_array.hpp"
#include "p4o/parameters.hpp"
#include "p4o/rng.hpp"

namespace p4o {

// Belief pair (h, c_h) and prediction pair (p, c_p). The baseline only uses
// the belief pair; its p and c_p stay undefined.
template <typename T>
struct RecurrentState {
  DiffArray<T> h, c_h, p, c_p;

  static RecurrentState zeros(std::size_t batch, std::size_t belief, std::size_t prediction);

  std::size_t batch() const { return h.dim(0); }
  bool has_prediction() const { return p.defined(); }
  RecurrentState detached() const;
  // Rows multiplied by keep[b] (0 resets an environment, 1 carries it).
  RecurrentState masked(std::span<const T> keep) const;
  RecurrentState rows(std::size_t begin, std::size_t count) const;
  static RecurrentState concat(std::span<const RecurrentState> parts);
  bool all_finite() const;
  // Flattened values in h, c_h, p, c_p order.
  std::vector<T> flatten() const;
  // Inverse of flatten for a state with the given sizes.
  static RecurrentState unflatten(std::span<const T> flat, std::size_t batch, std::size_t belief,
                                  std::size_t prediction);
};

template <typename T>
struct StepOutput {
  DiffArray<T> error;     // [B,p]; zeros for the baseline
  RecurrentState<T> state;
  DiffArray<T> combined;  // [B,k]
};

template <typename T>
class RecurrentCore {
 public:
  virtual ~RecurrentCore() = default;

  // `timestep` only labels the NumericError raised on a non-finite state.
  virtual StepOutput<T> step(const DiffArray<T>& x, const RecurrentState<T>& prev,
                             long timestep = -1) const = 0;
  virtual RecurrentState<T> initial_state(std::size_t batch) const = 0;
  virtual std::size_t latent_dim() const = 0;
  virtual std::size_t belief_dim() const = 0;
  virtual std::size_t prediction_dim() const = 0;
  virtual std::size_t combined_dim() const = 0;
  virtual std::size_t recurrent_parameter_count() const = 0;
  virtual bool predicts() const = 0;
  // H zero-error steps from `start`; returns the H prediction outputs.
  // Throws ConfigError when H < 1 and std::logic_error on the baseline.
  virtual std::vector<DiffArray<T>> open_loop_rollout(const RecurrentState<T>& start, long H) const = 0;
};

// 4(kp + kq + k) with k = p + q.
std::size_t pc_lstm_parameter_count(std::size_t p, std::size_t q);
// 4(k^2 + kp + k).
std::size_t baseline_lstm_parameter_count(std::size_t k, std::size_t p);
// Largest k' whose baseline block does not exceed the P4O block at (p, q),
// rounded to the nearer neighbour: 800 at p = q = 512.
std::size_t parameter_matched_units(std::size_t p, std::size_t q);

template <typename T>
class PcLstm final : public RecurrentCore<T> {
 public:
  PcLstm(std::size_t p, std::size_t q, ParameterSet<T>& params, Rng& rng,
         const std::string& prefix = "world/");

  StepOutput<T> step(const DiffArray<T>& x, const RecurrentState<T>& prev, long timestep = -1) const override;
  RecurrentState<T> initial_state(std::size_t batch) const override {
    return RecurrentState<T>::zeros(batch, q_, p_);
  }
  std::size_t latent_dim() const override { return p_; }
  std::size_t belief_dim() const override { return q_; }
  std::size_t prediction_dim() const override { return p_; }
  std::size_t combined_dim() const override { return p_ + q_; }
  std::size_t recurrent_parameter_count() const override { return pc_lstm_parameter_count(p_, q_); }
  bool predicts() const override { return true; }
  std::vector<DiffArray<T>> open_loop_rollout(const RecurrentState<T>& start, long H) const override;

  // Belief: W_h[4q,p], U_h[4q,q], b_h[4q]. Prediction: W_p[4p,p], U_p[4p,q], b_p[4p].
  const DiffArray<T>& W_h() const { return W_h_; }
  const DiffArray<T>& U_h() const { return U_h_; }
  const DiffArray<T>& b_h() const { return b_h_; }
  const DiffArray<T>& W_p() const { return W_p_; }
  const DiffArray<T>& U_p() const { return U_p_; }
  const DiffArray<T>& b_p() const { return b_p_; }

 private:
  RecurrentState<T> advance(const DiffArray<T>& zh, const DiffArray<T>& zp, const RecurrentState<T>& prev,
                            long timestep) const;

  std::size_t p_, q_;
  DiffArray<T> W_h_, U_h_, b_h_, W_p_, U_p_, b_p_;
};

template <typename T>
class BaselineLstm final : public RecurrentCore<T> {
 public:
  BaselineLstm(std::size_t k, std::size_t p, ParameterSet<T>& params, Rng& rng,
               const std::string& prefix = "lstm/");

  StepOutput<T> step(const DiffArray<T>& x, const RecurrentState<T>& prev, long timestep = -1) const override;
  RecurrentState<T> initial_state(std::size_t batch) const override {
    return RecurrentState<T>::zeros(batch, k_, 0);
  }
  std::size_t latent_dim() const override { return p_; }
  std::size_t belief_dim() const override { return k_; }
  std::size_t prediction_dim() const override { return 0; }
  std::size_t combined_dim() const override { return k_; }
  std::size_t recurrent_parameter_count() const override { return baseline_lstm_parameter_count(k_, p_); }
  bool predicts() const override { return false; }
  std::vector<DiffArray<T>> open_loop_rollout(const RecurrentState<T>& start, long H) const override;

  const DiffArray<T>& W() const { return W_; }
  const DiffArray<T>& U() const { return U_; }
  const DiffArray<T>& b() const { return b_; }

 private:
  std::size_t k_, p_;
  DiffArray<T> W_, U_, b_;
};

// Sum over horizons of the mean squared difference between predictions[i]
// and targets[i]. With `row_weights`, horizon i averages only over rows with
// nonzero weight (truncated horizons); a horizon with no valid row adds 0.
template <typename T>
DiffArray<T> prediction_loss(std::span<const DiffArray<T>> predictions, std::span<const DiffArray<T>> targets);
template <typename T>
DiffArray<T> prediction_loss(std::span<const DiffArray<T>> predictions, std::span<const DiffArray<T>> targets,
                             const std::vector<std::vector<T>>& row_weights);

}  // namespace p4o
