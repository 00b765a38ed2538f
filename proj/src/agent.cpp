// Copyright 2026 The P4O Authors
// SPDX-License-Identifier: Apache-2.0

#include "p4o/agent.hpp"

#include "p4o/errors.hpp"

namespace p4o {

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::p4o: return "p4o";
    case Variant::lstm_ppo_1024: return "lstm-ppo-1024";
    case Variant::lstm_ppo_800: return "lstm-ppo-800";
    case Variant::p4o_no_pp: return "p4o-no-pp";
  }
  return "?";
}

Variant parse_variant(const std::string& name) {
  for (Variant v : {Variant::p4o, Variant::lstm_ppo_1024, Variant::lstm_ppo_800, Variant::p4o_no_pp}) {
    if (variant_name(v) == name) return v;
  }
  throw ConfigError("unknown variant '" + name + "' (expected p4o, lstm-ppo-1024, lstm-ppo-800, p4o-no-pp)");
}

AgentConfig AgentConfig::toy() {
  AgentConfig c;
  c.encoder = EncoderConfig::toy();
  c.belief_dim = 32;
  return c;
}

std::size_t AgentConfig::baseline_units() const {
  // The names refer to the full-size sizes; at other scales they keep their
  // meaning (k = p + q, or the parameter-matched k).
  if (variant == Variant::lstm_ppo_800) return parameter_matched_units(latent_dim(), belief_dim);
  return latent_dim() + belief_dim;
}

double AgentConfig::prediction_weight() const {
  if (variant == Variant::p4o_no_pp || uses_baseline()) return 0.0;
  return coefficients.prediction;
}

void AgentConfig::validate() const {
  encoder.validate();
  if (belief_dim == 0) throw ConfigError("belief_dim must be positive");
  if (horizon < 1) throw ConfigError("horizon must be at least 1");
  if (actions < 1) throw ConfigError("environment reports no actions");
  if (num_envs < 1) throw ConfigError("num_envs must be positive");
  if (schedule.minibatches < 1 || schedule.epochs_per_batch < 1) {
    throw ConfigError("minibatches and epochs_per_batch must be positive");
  }
  if (steps_per_batch < schedule.minibatches || steps_per_batch % schedule.minibatches != 0) {
    throw ConfigError("steps_per_batch (" + std::to_string(steps_per_batch) +
                      ") must split into equal time segments over " + std::to_string(schedule.minibatches) +
                      " minibatches");
  }
  if (!(gamma >= 0.0 && gamma <= 1.0) || !(gae_lambda >= 0.0 && gae_lambda <= 1.0)) {
    throw ConfigError("gamma and gae_lambda must lie in [0,1]");
  }
  if (!(schedule.clip_epsilon > 0.0)) throw ConfigError("clip_epsilon must be positive");
  if (!(schedule.lr0 >= 0.0)) throw ConfigError("learning rate must be nonnegative");
  if (!(adam_epsilon > 0.0)) throw ConfigError("adam_epsilon must be positive");
  if (!(max_grad_norm >= 0.0)) throw ConfigError("max_grad_norm must be nonnegative");
  if (!(entropy_decay > 0.0 && entropy_decay <= 1.0)) throw ConfigError("entropy_decay must lie in (0,1]");
}

template <typename T>
Agent<T>::Agent(const AgentConfig& config, std::uint64_t init_seed) : config_(config) {
  config_.validate();
  Rng root(init_seed);
  Rng enc_rng = root.split(1), core_rng = root.split(2), head_rng = root.split(3);
  encoder_ = std::make_unique<Encoder<T>>(config_.encoder, params_, enc_rng);
  if (config_.uses_baseline()) {
    core_ = std::make_unique<BaselineLstm<T>>(config_.baseline_units(), config_.latent_dim(), params_, core_rng);
  } else {
    core_ = std::make_unique<PcLstm<T>>(config_.latent_dim(), config_.belief_dim, params_, core_rng);
  }
  heads_ = std::make_unique<ActorCritic<T>>(core_->combined_dim(), config_.actions, params_, head_rng);
}

template <typename T>
AgentStep<T> Agent<T>::step(const DiffArray<T>& latents, const RecurrentState<T>& prev, long timestep) const {
  AgentStep<T> out;
  out.core = core_->step(latents, prev, timestep);
  out.policy = heads_->act_value(out.core.combined);
  return out;
}

template class Agent<float>;
template class Agent<double>;

}  // namespace p4o
