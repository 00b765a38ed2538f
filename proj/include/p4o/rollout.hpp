// Copyright 2026 The P4O Authors
// SPDX-License-Identifier: Apache-2.0
//
// Batch collection, truncated GAE and the two staleness repairs.
//
// Per-step arrays are time-major: entry (t, n) lives at t * num_envs + n.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <utility>
#include <vector>

#include <json.hpp>

#include "p4o/agent.hpp"
#include "p4o/environments.hpp"
#include "p4o/rng.hpp"
#include "p4o/world_model.hpp"

namespace p4o {

template <typename T>
struct RolloutBuffer {
  std::size_t num_envs = 0, steps = 0, segments = 1;
  ObsShape obs_shape;
  std::size_t latent_dim = 0;

  // steps + 1 frames per env; frame `steps` is the input after the last step.
  std::vector<std::uint8_t> observations;
  std::vector<T> latents;  // acting-time encoder outputs
  std::vector<int> actions;
  std::vector<T> log_probs;  // acting policy
  std::vector<T> rewards;
  std::vector<std::uint8_t> dones;
  std::vector<T> values;  // acting-time values (v_old for value clipping)
  std::vector<T> advantages, returns;

  // Values and bootstrap values under the parameters of `values_version`.
  std::vector<T> current_values, bootstrap_values;
  std::uint64_t values_version = 0;

  // First-update anchor: log-probs of the buffer's actions under the
  // second-to-last policy of the previous batch.
  std::vector<T> anchor_log_probs;
  bool anchored = false;

  // Recurrent state before step 0, before each segment, and after the last
  // step (masked for terminals; the input state of the next batch).
  RecurrentState<T> start_state;
  std::vector<RecurrentState<T>> segment_states;
  RecurrentState<T> final_state;
  std::uint64_t acting_version = 0;

  std::size_t index(std::size_t t, std::size_t n) const { return t * num_envs + n; }
  std::size_t segment_length() const { return steps / segments; }
  std::size_t samples() const { return steps * num_envs; }
  std::span<const std::uint8_t> frames(std::size_t t_begin, std::size_t t_end) const;

  // Columnar dump: a JSON header line, then one little-endian column per
  // field in header order. Returns the path written.
  void dump(const std::filesystem::path& path) const;
};

template <typename T>
struct GaeResult {
  std::vector<T> advantages, returns;
};

// Single sequence. delta_t = r_t + gamma V_{t+1} (1 - done_t) - V_t with
// V_T = bootstrap; A_t = delta_t + gamma lambda (1 - done_t) A_{t+1}.
template <typename T>
GaeResult<T> compute_gae(std::span<const T> rewards, std::span<const T> values, std::span<const std::uint8_t> dones,
                         T bootstrap_value, double gamma, double lambda);

// All environments of a buffer; writes advantages and returns.
template <typename T>
void compute_buffer_gae(RolloutBuffer<T>& buffer, double gamma, double lambda);

template <typename T>
struct ReplayResult {
  std::vector<RecurrentState<T>> segment_states;
  RecurrentState<T> final_state;
  std::vector<T> values, log_probs, bootstrap_values, latents;
};

// Re-encodes every frame and re-runs the recurrent core from the buffer's
// start state with the agent's current parameters, without recording a graph.
template <typename T>
ReplayResult<T> replay(const Agent<T>& agent, const RolloutBuffer<T>& buffer);

// Replaces the segment and final states (and caches values) with a replay.
template <typename T>
void refresh_hidden_states(RolloutBuffer<T>& buffer, const Agent<T>& agent);

// Recomputes values under the current parameters when the cache is stale,
// then advantages and returns.
template <typename T>
void refresh_advantages(RolloutBuffer<T>& buffer, const Agent<T>& agent);

template <typename T>
class Collector {
 public:
  // Action sampling for env n uses rng.split(n).
  Collector(const Agent<T>& agent, VecEnv& envs, const Rng& rng);
  Collector(const Agent<T>& agent, VecEnv& envs, std::vector<Rng> per_env_rngs);

  RolloutBuffer<T> collect();

  const RecurrentState<T>& state() const { return state_; }
  void set_state(const RecurrentState<T>& state) { state_ = state.detached(); }
  // Episodes finished since the last call.
  std::vector<EpisodeRecord> take_finished();
  std::uint64_t frames() const { return frames_; }

  nlohmann::json save_state() const;
  void load_state(const nlohmann::json& state);

 private:
  const Agent<T>* agent_;
  VecEnv* envs_;
  std::vector<Rng> rngs_;
  RecurrentState<T> state_;
  std::vector<EpisodeRecord> finished_;
  std::uint64_t frames_ = 0;
  bool started_ = false;
};

}  // namespace p4o
