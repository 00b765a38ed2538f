// Copyright 2026 The P4O Authors
// SPDX-License-Identifier: Apache-2.0
//
// Loss terms, learning-rate schedules and the epoch/minibatch update loop.

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <json.hpp>

#include "p4o/agent.hpp"
#include "p4o/parameters.hpp"
#include "p4o/rollout.hpp"

namespace p4o {

// -mean(min(r A, clip(r, 1-eps, 1+eps) A)), r = exp(logp_new - logp_anchor).
// The gradient is exactly zero on samples where the clipped branch is
// strictly smaller. Throws NumericError on a non-finite ratio.
template <typename T>
DiffArray<T> actor_loss(const DiffArray<T>& logp_new, std::span<const T> logp_anchor, std::span<const T> advantages,
                        double epsilon);

// mean(max(|v - R|, |v_clip - R|)), v_clip = v_old + clamp(v - v_old, -eps, eps).
template <typename T>
DiffArray<T> critic_loss(const DiffArray<T>& v_new, std::span<const T> v_old, std::span<const T> returns,
                         double epsilon);

// -mean over rows of the softmax entropy of logits[B,A].
template <typename T>
DiffArray<T> entropy_bonus(const DiffArray<T>& logits);

template <typename T>
struct LossBreakdown {
  DiffArray<T> actor, critic, prediction, entropy, l1;  // prediction/l1 may be undefined
  DiffArray<T> total;
};

// c1 actor + c2 critic + c3 prediction + c4 entropy (+ c5 l1 when enabled).
// Undefined components contribute nothing.
template <typename T>
DiffArray<T> combined_loss(const LossBreakdown<T>& parts, const LossCoefficients& c);

// Zero mean, unit variance (population std, floored at 1e-8).
template <typename T>
std::vector<T> normalize_advantages(std::span<const T> advantages);

double lr_schedule(std::size_t batch_index, LrDecay decay, double lr0 = 2.5e-4);

struct MinibatchStats {
  double actor = 0, critic = 0, prediction = 0, entropy = 0, l1 = 0, total = 0;
  double mean_ratio = 0, clip_fraction = 0, grad_norm = 0;
};

struct MinibatchOptions {
  bool use_anchor = false;     // ratio against buffer.anchor_log_probs
  double entropy_coefficient = 0.02;
};

// Loss of one time segment: BPTT over its steps from the segment's stored
// start state, prediction loss over horizon H with truncation at terminals
// and at the end of the buffer.
template <typename T>
LossBreakdown<T> minibatch_loss(const Agent<T>& agent, const RolloutBuffer<T>& buffer, std::size_t segment,
                                const MinibatchOptions& options, MinibatchStats* stats = nullptr);

struct BatchMetrics {
  std::size_t optimizer_steps = 0;
  double learning_rate = 0;
  double entropy_coefficient = 0;
  bool anchored = false;
  MinibatchStats mean;                 // averaged over the batch's updates
  std::vector<MinibatchStats> updates;
};

template <typename T>
class Trainer {
 public:
  explicit Trainer(Agent<T>& agent);

  // Four epochs of five segment updates (at defaults), each followed by a
  // hidden-state refresh. Aborts with NumericError on a non-finite loss.
  BatchMetrics train_on_batch(RolloutBuffer<T>& buffer, std::size_t batch_index);

  // Fills buffer.anchor_log_probs from the stored second-to-last policy; a
  // no-op before the first batch.
  void attach_anchor(RolloutBuffer<T>& buffer);

  Adam<T>& optimizer() { return adam_; }
  std::size_t total_steps() const { return adam_.steps(); }
  const std::optional<std::vector<T>>& anchor_parameters() const { return anchor_params_; }
  void set_anchor_parameters(std::optional<std::vector<T>> p) { anchor_params_ = std::move(p); }

 private:
  Agent<T>* agent_;
  Adam<T> adam_;
  std::optional<std::vector<T>> anchor_params_;
};

}  // namespace p4o
