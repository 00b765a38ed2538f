// Copyright 2026 The P4O Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <string>

#include "p4o/networks.hpp"
#include "p4o/parameters.hpp"
#include "p4o/world_model.hpp"

namespace p4o {

enum class Variant { p4o, lstm_ppo_1024, lstm_ppo_800, p4o_no_pp };

std::string variant_name(Variant v);
// Throws ConfigError on an unknown name.
Variant parse_variant(const std::string& name);

enum class LrDecay { short_run, long_run };
enum class AdvantageRefresh { per_epoch, per_minibatch };

struct TrainSchedule {
  std::size_t epochs_per_batch = 4;
  std::size_t minibatches = 5;
  double lr0 = 2.5e-4;
  LrDecay decay = LrDecay::short_run;
  double clip_epsilon = 0.1;
};

struct LossCoefficients {
  double actor = 1.0;
  double critic = 0.5;
  double prediction = 1.0;
  double entropy = 0.02;
  double l1 = 0.1;
  bool l1_enabled = false;
};

struct AgentConfig {
  Variant variant = Variant::p4o;
  EncoderConfig encoder;       // encoder.latent_dim is p
  std::size_t belief_dim = 512;  // q
  std::size_t horizon = 3;
  std::size_t actions = 0;     // taken from the environment

  std::size_t num_envs = 16;
  std::size_t steps_per_batch = 125;
  double gamma = 0.99;
  double gae_lambda = 0.95;
  TrainSchedule schedule;
  LossCoefficients coefficients;
  double adam_epsilon = 1e-5;
  double max_grad_norm = 0.5;  // 0 disables clipping
  bool normalize_advantages = true;
  AdvantageRefresh advantage_refresh = AdvantageRefresh::per_epoch;
  bool detach_prediction_targets = false;
  bool anchor_first_update = true;
  // Multiplies the entropy coefficient once per batch; 1 keeps it constant.
  double entropy_decay = 1.0;

  // Toy scale: 16x16 frames, channels [4,8,8,8], p = q = 32.
  static AgentConfig toy();

  std::size_t latent_dim() const { return encoder.latent_dim; }
  bool uses_baseline() const { return variant == Variant::lstm_ppo_1024 || variant == Variant::lstm_ppo_800; }
  // Units of the baseline LSTM: p + q, or the parameter-matched count.
  std::size_t baseline_units() const;
  // Prediction coefficient actually applied (0 for p4o-no-pp).
  double prediction_weight() const;
  std::size_t segment_length() const { return steps_per_batch / schedule.minibatches; }
  // Throws ConfigError.
  void validate() const;
};

template <typename T>
struct AgentStep {
  StepOutput<T> core;
  PolicyOutput<T> policy;
};

template <typename T>
class Agent {
 public:
  Agent(const AgentConfig& config, std::uint64_t init_seed);
  Agent(const Agent&) = delete;
  Agent& operator=(const Agent&) = delete;

  const AgentConfig& config() const { return config_; }
  ParameterSet<T>& params() { return params_; }
  const ParameterSet<T>& params() const { return params_; }
  const Encoder<T>& encoder() const { return *encoder_; }
  const RecurrentCore<T>& core() const { return *core_; }
  const ActorCritic<T>& heads() const { return *heads_; }

  // Core step on encoded latents followed by the heads.
  AgentStep<T> step(const DiffArray<T>& latents, const RecurrentState<T>& prev, long timestep = -1) const;
  RecurrentState<T> initial_state(std::size_t batch) const { return core_->initial_state(batch); }

  // Incremented whenever parameter values change; lets callers cache replays.
  std::uint64_t version() const { return version_; }
  void mark_updated() { ++version_; }

 private:
  AgentConfig config_;
  ParameterSet<T> params_;
  std::unique_ptr<Encoder<T>> encoder_;
  std::unique_ptr<RecurrentCore<T>> core_;
  std::unique_ptr<ActorCritic<T>> heads_;
  std::uint64_t version_ = 0;
};

}  // namespace p4o
