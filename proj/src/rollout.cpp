// Copyright 2026 The P4O Authors
// SPDX-License-Identifier: Apache-2.0

#include "p4o/rollout.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "p4o/errors.hpp"
#include "p4o/ops.hpp"

namespace p4o {

namespace {

// Encoder batches hold at most this many frames.
constexpr std::size_t kEncodeChunk = 256;

template <typename T>
T action_log_prob(std::span<const T> logits, int action) {
  return logits[static_cast<std::size_t>(action)] - log_sum_exp(logits);
}

template <typename T>
std::vector<T> keep_mask(std::span<const std::uint8_t> dones) {
  std::vector<T> keep(dones.size());
  for (std::size_t i = 0; i < dones.size(); ++i) keep[i] = dones[i] ? T{0} : T{1};
  return keep;
}

template <typename T>
void write_column(std::ofstream& out, const std::vector<T>& v) {
  for (T x : v) {
    const double d = static_cast<double>(x);
    out.write(reinterpret_cast<const char*>(&d), sizeof d);
  }
}

}  // namespace

template <typename T>
std::span<const std::uint8_t> RolloutBuffer<T>::frames(std::size_t t_begin, std::size_t t_end) const {
  const std::size_t row = num_envs * obs_shape.size();
  return std::span<const std::uint8_t>(observations).subspan(t_begin * row, (t_end - t_begin) * row);
}

template <typename T>
void RolloutBuffer<T>::dump(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write buffer dump " + path.string());
  const std::size_t n = samples();
  nlohmann::json header = {
      {"format", "p4o-buffer-dump"},
      {"num_envs", num_envs},
      {"steps", steps},
      {"layout", "time-major, entry (t, n) at t * num_envs + n"},
      {"obs_shape", {obs_shape.channels, obs_shape.height, obs_shape.width}},
      {"columns",
       {{{"name", "actions"}, {"dtype", "f64"}, {"count", n}},
        {{"name", "log_probs"}, {"dtype", "f64"}, {"count", n}},
        {{"name", "rewards"}, {"dtype", "f64"}, {"count", n}},
        {{"name", "dones"}, {"dtype", "f64"}, {"count", n}},
        {{"name", "values"}, {"dtype", "f64"}, {"count", n}},
        {{"name", "advantages"}, {"dtype", "f64"}, {"count", n}},
        {{"name", "returns"}, {"dtype", "f64"}, {"count", n}},
        {{"name", "latents"}, {"dtype", "f64"}, {"count", latents.size()}},
        {{"name", "observations"}, {"dtype", "u8"}, {"count", observations.size()}}}}};
  out << header.dump() << "\n";
  write_column(out, std::vector<double>(actions.begin(), actions.end()));
  write_column(out, log_probs);
  write_column(out, rewards);
  write_column(out, std::vector<double>(dones.begin(), dones.end()));
  write_column(out, values);
  write_column(out, advantages);
  write_column(out, returns);
  write_column(out, latents);
  out.write(reinterpret_cast<const char*>(observations.data()), static_cast<std::streamsize>(observations.size()));
}

template <typename T>
GaeResult<T> compute_gae(std::span<const T> rewards, std::span<const T> values, std::span<const std::uint8_t> dones,
                         T bootstrap_value, double gamma, double lambda) {
  const std::size_t n = rewards.size();
  if (values.size() != n || dones.size() != n) {
    throw DimensionError("compute_gae: sequence lengths differ");
  }
  GaeResult<T> out;
  out.advantages.resize(n);
  out.returns.resize(n);
  const T g = static_cast<T>(gamma), gl = static_cast<T>(gamma * lambda);
  T next_value = bootstrap_value, next_adv = T{0};
  for (std::size_t i = n; i-- > 0;) {
    const T live = dones[i] ? T{0} : T{1};
    const T delta = rewards[i] + g * next_value * live - values[i];
    next_adv = delta + gl * live * next_adv;
    out.advantages[i] = next_adv;
    out.returns[i] = next_adv + values[i];
    next_value = values[i];
  }
  return out;
}

template <typename T>
void compute_buffer_gae(RolloutBuffer<T>& b, double gamma, double lambda) {
  b.advantages.assign(b.samples(), T{0});
  b.returns.assign(b.samples(), T{0});
  std::vector<T> r(b.steps), v(b.steps);
  std::vector<std::uint8_t> d(b.steps);
  for (std::size_t n = 0; n < b.num_envs; ++n) {
    for (std::size_t t = 0; t < b.steps; ++t) {
      r[t] = b.rewards[b.index(t, n)];
      v[t] = b.current_values[b.index(t, n)];
      d[t] = b.dones[b.index(t, n)];
    }
    auto g = compute_gae<T>(r, v, d, b.bootstrap_values[n], gamma, lambda);
    for (std::size_t t = 0; t < b.steps; ++t) {
      b.advantages[b.index(t, n)] = g.advantages[t];
      b.returns[b.index(t, n)] = g.returns[t];
    }
  }
}

template <typename T>
ReplayResult<T> replay(const Agent<T>& agent, const RolloutBuffer<T>& b) {
  NoGradGuard no_grad;
  const std::size_t N = b.num_envs, L = b.segment_length(), A = agent.config().actions;
  const std::size_t p = agent.config().latent_dim();
  const std::size_t chunk = std::max<std::size_t>(1, kEncodeChunk / N);
  ReplayResult<T> out;
  out.values.resize(b.samples());
  out.log_probs.resize(b.samples());
  out.latents.resize(b.samples() * p);
  RecurrentState<T> state = b.start_state;
  DiffArray<T> encoded;
  std::size_t encoded_from = 0;
  for (std::size_t t = 0; t <= b.steps; ++t) {
    if (t % L == 0 && t < b.steps) out.segment_states.push_back(state);
    if (!encoded.defined() || t >= encoded_from + encoded.dim(0) / N) {
      const std::size_t end = std::min(b.steps + 1, t + chunk);
      encoded = agent.encoder().forward(frames_to_array<T>(b.frames(t, end), (end - t) * N, agent.config().encoder));
      encoded_from = t;
    }
    const DiffArray<T> x = slice_rows(encoded, (t - encoded_from) * N, N);
    const auto step = agent.step(x, state, static_cast<long>(t));
    if (t == b.steps) {
      out.final_state = state;
      out.bootstrap_values.assign(step.policy.value.values().begin(), step.policy.value.values().end());
      break;
    }
    for (std::size_t n = 0; n < N; ++n) {
      const std::size_t i = b.index(t, n);
      out.values[i] = step.policy.value.values()[n];
      out.log_probs[i] = action_log_prob(step.policy.logits.values().subspan(n * A, A), b.actions[i]);
      std::copy_n(x.data() + n * p, p, out.latents.begin() + static_cast<std::ptrdiff_t>(i * p));
    }
    state = step.core.state.masked(std::span<const T>(keep_mask<T>(std::span(b.dones).subspan(t * N, N))));
  }
  return out;
}

template <typename T>
void refresh_hidden_states(RolloutBuffer<T>& b, const Agent<T>& agent) {
  auto r = replay(agent, b);
  b.segment_states = std::move(r.segment_states);
  b.final_state = std::move(r.final_state);
  b.current_values = std::move(r.values);
  b.bootstrap_values = std::move(r.bootstrap_values);
  b.values_version = agent.version();
}

template <typename T>
void refresh_advantages(RolloutBuffer<T>& b, const Agent<T>& agent) {
  if (b.values_version != agent.version() || b.current_values.size() != b.samples()) {
    auto r = replay(agent, b);
    b.current_values = std::move(r.values);
    b.bootstrap_values = std::move(r.bootstrap_values);
    b.values_version = agent.version();
  }
  compute_buffer_gae(b, agent.config().gamma, agent.config().gae_lambda);
}

template <typename T>
Collector<T>::Collector(const Agent<T>& agent, VecEnv& envs, const Rng& rng) : agent_(&agent), envs_(&envs) {
  for (std::size_t n = 0; n < envs.size(); ++n) rngs_.push_back(rng.split(n));
  state_ = agent.initial_state(envs.size());
}

template <typename T>
Collector<T>::Collector(const Agent<T>& agent, VecEnv& envs, std::vector<Rng> per_env_rngs)
    : agent_(&agent), envs_(&envs), rngs_(std::move(per_env_rngs)) {
  if (rngs_.size() != envs.size()) throw ConfigError("Collector: one Rng per environment required");
  state_ = agent.initial_state(envs.size());
}

template <typename T>
RolloutBuffer<T> Collector<T>::collect() {
  NoGradGuard no_grad;
  const AgentConfig& cfg = agent_->config();
  const std::size_t N = envs_->size(), steps = cfg.steps_per_batch, A = cfg.actions, p = cfg.latent_dim();
  if (N != cfg.num_envs) {
    throw ConfigError("Collector: " + std::to_string(N) + " environments for num_envs=" + std::to_string(cfg.num_envs));
  }
  if (static_cast<std::size_t>(envs_->action_count()) != A) {
    throw ConfigError("Collector: environment has " + std::to_string(envs_->action_count()) +
                      " actions, agent was built for " + std::to_string(A));
  }
  if (!started_) {
    envs_->reset_all();
    started_ = true;
  }
  RolloutBuffer<T> b;
  b.num_envs = N;
  b.steps = steps;
  b.segments = cfg.schedule.minibatches;
  b.obs_shape = envs_->observation_shape();
  b.latent_dim = p;
  b.acting_version = agent_->version();
  const std::size_t frame = b.obs_shape.size();
  b.observations.resize((steps + 1) * N * frame);
  b.latents.resize(steps * N * p);
  b.actions.resize(steps * N);
  b.log_probs.resize(steps * N);
  b.rewards.resize(steps * N);
  b.dones.resize(steps * N);
  b.values.resize(steps * N);
  b.start_state = state_;

  for (std::size_t t = 0;; ++t) {
    const auto& obs = envs_->observations();
    std::copy(obs.begin(), obs.end(), b.observations.begin() + static_cast<std::ptrdiff_t>(t * N * frame));
    const DiffArray<T> x = agent_->encoder().forward(frames_to_array<T>(obs, N, cfg.encoder));
    const auto step = agent_->step(x, state_, static_cast<long>(t));
    if (t == steps) {
      b.bootstrap_values.assign(step.policy.value.values().begin(), step.policy.value.values().end());
      break;
    }
    if (t % b.segment_length() == 0) b.segment_states.push_back(state_);
    std::vector<int> actions(N);
    for (std::size_t n = 0; n < N; ++n) {
      const std::size_t i = b.index(t, n);
      const auto logits = step.policy.logits.values().subspan(n * A, A);
      actions[n] = categorical_sample(logits, rngs_[n]);
      b.actions[i] = actions[n];
      b.log_probs[i] = action_log_prob(logits, actions[n]);
      if (!std::isfinite(b.log_probs[i])) {
        throw NumericError("collect: non-finite log-probability for env " + std::to_string(n) + " at step " +
                           std::to_string(t));
      }
      b.values[i] = step.policy.value.values()[n];
      std::copy_n(x.data() + n * p, p, b.latents.begin() + static_cast<std::ptrdiff_t>(i * p));
    }
    VecStep result = envs_->step(actions);
    frames_ += N;
    for (std::size_t n = 0; n < N; ++n) {
      b.rewards[b.index(t, n)] = static_cast<T>(result.rewards[n]);
      b.dones[b.index(t, n)] = result.dones[n];
    }
    finished_.insert(finished_.end(), result.finished.begin(), result.finished.end());
    state_ = step.core.state.masked(std::span<const T>(keep_mask<T>(result.dones)));
  }
  b.final_state = state_;
  b.current_values = b.values;
  b.values_version = b.acting_version;
  compute_buffer_gae(b, cfg.gamma, cfg.gae_lambda);
  return b;
}

template <typename T>
std::vector<EpisodeRecord> Collector<T>::take_finished() {
  std::vector<EpisodeRecord> out;
  out.swap(finished_);
  return out;
}

template <typename T>
nlohmann::json Collector<T>::save_state() const {
  nlohmann::json rngs = nlohmann::json::array();
  for (const auto& r : rngs_) rngs.push_back(r.serialize());
  const auto flat = state_.flatten();
  return {{"rngs", rngs},
          {"state", std::vector<double>(flat.begin(), flat.end())},
          {"frames", frames_},
          {"started", started_}};
}

template <typename T>
void Collector<T>::load_state(const nlohmann::json& s) {
  const auto& rngs = s.at("rngs");
  if (rngs.size() != rngs_.size()) throw CheckpointError("collector: saved state has a different number of envs");
  for (std::size_t i = 0; i < rngs_.size(); ++i) rngs_[i] = Rng::deserialize(rngs.at(i).get<std::string>());
  const auto flat = s.at("state").get<std::vector<double>>();
  const std::vector<T> values(flat.begin(), flat.end());
  const auto& core = agent_->core();
  state_ = RecurrentState<T>::unflatten(values, envs_->size(), core.belief_dim(), core.prediction_dim());
  frames_ = s.at("frames").get<std::uint64_t>();
  started_ = s.at("started").get<bool>();
}

#define P4O_INSTANTIATE_ROLLOUT(T)                                                                     \
  template struct RolloutBuffer<T>;                                                                    \
  template GaeResult<T> compute_gae(std::span<const T>, std::span<const T>, std::span<const std::uint8_t>, \
                                    T, double, double);                                                \
  template void compute_buffer_gae(RolloutBuffer<T>&, double, double);                                 \
  template ReplayResult<T> replay(const Agent<T>&, const RolloutBuffer<T>&);                           \
  template void refresh_hidden_states(RolloutBuffer<T>&, const Agent<T>&);                             \
  template void refresh_advantages(RolloutBuffer<T>&, const Agent<T>&);                                \
  template class Collector<T>;

P4O_INSTANTIATE_ROLLOUT(float)
P4O_INSTANTIATE_ROLLOUT(double)

#undef P4O_INSTANTIATE_ROLLOUT

}  // namespace p4o
