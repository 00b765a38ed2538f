// Copyright 2026 The P4O Authors
// SPDX-License-Identifier: Apache-2.0

#include "p4o/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "p4o/errors.hpp"
#include "p4o/ops.hpp"

namespace p4o {

template <typename T>
DiffArray<T> actor_loss(const DiffArray<T>& logp_new, std::span<const T> logp_anchor, std::span<const T> advantages,
                        double epsilon) {
  const std::size_t B = logp_new.size();
  if (logp_anchor.size() != B || advantages.size() != B || B == 0) {
    throw DimensionError("actor_loss: " + std::to_string(B) + " log-probs, " + std::to_string(logp_anchor.size()) +
                         " anchors, " + std::to_string(advantages.size()) + " advantages");
  }
  const T lo = static_cast<T>(1.0 - epsilon), hi = static_cast<T>(1.0 + epsilon);
  // Per-sample derivative of the summed surrogate w.r.t. logp_new.
  std::vector<T> slope(B);
  T total{0};
  for (std::size_t i = 0; i < B; ++i) {
    const T r = std::exp(logp_new.data()[i] - logp_anchor[i]);
    if (!std::isfinite(r)) {
      throw NumericError("actor_loss: non-finite probability ratio at sample " + std::to_string(i));
    }
    const T a = advantages[i];
    const T unclipped = r * a, clipped = std::clamp(r, lo, hi) * a;
    if (unclipped <= clipped) {
      total += unclipped;
      slope[i] = r * a;
    } else {
      total += clipped;
      slope[i] = T{0};
    }
  }
  const T scale = T{-1} / static_cast<T>(B);
  return DiffArray<T>::from_op({}, {total * scale}, {logp_new}, [slope = std::move(slope), scale](auto& n) {
    auto& p = n.parent(0);
    if (!p.requires_grad) return;
    T* g = p.grad_data();
    for (std::size_t i = 0; i < slope.size(); ++i) g[i] += n.grad[0] * scale * slope[i];
  });
}

template <typename T>
DiffArray<T> critic_loss(const DiffArray<T>& v_new, std::span<const T> v_old, std::span<const T> returns,
                         double epsilon) {
  const std::size_t B = v_new.size();
  if (v_old.size() != B || returns.size() != B || B == 0) {
    throw DimensionError("critic_loss: " + std::to_string(B) + " values, " + std::to_string(v_old.size()) +
                         " old values, " + std::to_string(returns.size()) + " returns");
  }
  const T eps = static_cast<T>(epsilon);
  std::vector<T> slope(B);
  T total{0};
  auto sign = [](T x) { return static_cast<T>((x > T{0}) - (x < T{0})); };
  for (std::size_t i = 0; i < B; ++i) {
    const T v = v_new.data()[i], delta = v - v_old[i];
    const T v_clip = v_old[i] + std::clamp(delta, -eps, eps);
    const T plain = std::abs(v - returns[i]), clipped = std::abs(v_clip - returns[i]);
    if (plain >= clipped) {
      total += plain;
      slope[i] = sign(v - returns[i]);
    } else {
      total += clipped;
      const bool inside = delta > -eps && delta < eps;
      slope[i] = inside ? sign(v_clip - returns[i]) : T{0};
    }
  }
  const T scale = T{1} / static_cast<T>(B);
  return DiffArray<T>::from_op({}, {total * scale}, {v_new}, [slope = std::move(slope), scale](auto& n) {
    auto& p = n.parent(0);
    if (!p.requires_grad) return;
    T* g = p.grad_data();
    for (std::size_t i = 0; i < slope.size(); ++i) g[i] += n.grad[0] * scale * slope[i];
  });
}

template <typename T>
DiffArray<T> entropy_bonus(const DiffArray<T>& logits) {
  return scale(mean(softmax_entropy(logits)), T{-1});
}

template <typename T>
DiffArray<T> combined_loss(const LossBreakdown<T>& parts, const LossCoefficients& c) {
  std::vector<DiffArray<T>> terms;
  std::vector<T> coeffs;
  auto push = [&](const DiffArray<T>& term, double coeff) {
    if (!term.defined()) return;
    terms.push_back(term);
    coeffs.push_back(static_cast<T>(coeff));
  };
  push(parts.actor, c.actor);
  push(parts.critic, c.critic);
  push(parts.prediction, c.prediction);
  push(parts.entropy, c.entropy);
  if (c.l1_enabled) push(parts.l1, c.l1);
  return weighted_sum(std::span<const DiffArray<T>>(terms), std::span<const T>(coeffs));
}

template <typename T>
std::vector<T> normalize_advantages(std::span<const T> a) {
  if (a.empty()) return {};
  double mean = 0.0;
  for (T x : a) mean += static_cast<double>(x);
  mean /= static_cast<double>(a.size());
  double var = 0.0;
  for (T x : a) var += (static_cast<double>(x) - mean) * (static_cast<double>(x) - mean);
  const double sd = std::max(std::sqrt(var / static_cast<double>(a.size())), 1e-8);
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = static_cast<T>((static_cast<double>(a[i]) - mean) / sd);
  return out;
}

double lr_schedule(std::size_t batch_index, LrDecay decay, double lr0) {
  const double b = static_cast<double>(batch_index);
  if (decay == LrDecay::short_run) return lr0 * std::max(1.0 - b * 1e-4, 1e-4);
  return std::max(lr0 * std::pow(0.995, std::floor(b / 100.0)), 5e-6);
}

namespace {

template <typename T>
std::vector<T> keep_rows(std::span<const std::uint8_t> dones) {
  std::vector<T> keep(dones.size());
  for (std::size_t i = 0; i < dones.size(); ++i) keep[i] = dones[i] ? T{0} : T{1};
  return keep;
}

}  // namespace

template <typename T>
LossBreakdown<T> minibatch_loss(const Agent<T>& agent, const RolloutBuffer<T>& b, std::size_t segment,
                                const MinibatchOptions& options, MinibatchStats* stats) {
  const AgentConfig& cfg = agent.config();
  const std::size_t N = b.num_envs, L = b.segment_length(), s0 = segment * L, H = cfg.horizon;
  const std::size_t p = cfg.latent_dim();
  if (segment >= b.segments || b.segment_states.size() != b.segments) {
    throw DimensionError("minibatch_loss: segment " + std::to_string(segment) + " of " + std::to_string(b.segments));
  }
  const bool predicts = agent.core().predicts();
  // Frames [s0, frames_end) are encoded; the tail beyond the segment only
  // serves as prediction targets.
  const std::size_t frames_end = predicts ? std::min(b.steps + 1, s0 + L + H) : s0 + L;
  const std::size_t encoded_steps = frames_end - s0;
  const DiffArray<T> latents =
      agent.encoder().forward(frames_to_array<T>(b.frames(s0, frames_end), encoded_steps * N, cfg.encoder));

  RecurrentState<T> state = b.segment_states[segment];
  std::vector<DiffArray<T>> combined;
  std::vector<RecurrentState<T>> after;
  combined.reserve(L);
  for (std::size_t i = 0; i < L; ++i) {
    const std::size_t t = s0 + i;
    auto out = agent.core().step(slice_rows(latents, i * N, N), state, static_cast<long>(t));
    combined.push_back(out.combined);
    const auto keep = keep_rows<T>(std::span(b.dones).subspan(t * N, N));
    state = out.state.masked(std::span<const T>(keep));
    if (predicts) after.push_back(std::move(out.state));
  }
  const DiffArray<T> all = concat_rows(std::span<const DiffArray<T>>(combined));
  const auto policy = agent.heads().act_value(all);

  const std::size_t first = s0 * N, count = L * N;
  const std::span<const int> actions = std::span(b.actions).subspan(first, count);
  const DiffArray<T> logp = gather_cols(log_softmax(policy.logits), actions);
  const std::span<const T> raw_adv = std::span(b.advantages).subspan(first, count);
  const std::vector<T> adv = cfg.normalize_advantages ? normalize_advantages(raw_adv)
                                                      : std::vector<T>(raw_adv.begin(), raw_adv.end());
  const std::span<const T> anchor =
      std::span(options.use_anchor ? b.anchor_log_probs : b.log_probs).subspan(first, count);

  LossBreakdown<T> parts;
  parts.actor = actor_loss(logp, anchor, std::span<const T>(adv), cfg.schedule.clip_epsilon);
  parts.critic = critic_loss(policy.value, std::span(b.values).subspan(first, count),
                             std::span(b.returns).subspan(first, count), cfg.schedule.clip_epsilon);
  parts.entropy = entropy_bonus(policy.logits);

  if (predicts) {
    const RecurrentState<T> starts = RecurrentState<T>::concat(std::span<const RecurrentState<T>>(after));
    std::vector<DiffArray<T>> predictions{starts.p};
    if (H > 1) {
      auto more = agent.core().open_loop_rollout(starts, static_cast<long>(H - 1));
      predictions.insert(predictions.end(), more.begin(), more.end());
    }
    const DiffArray<T> source = cfg.detach_prediction_targets ? latents.detach() : latents;
    std::vector<DiffArray<T>> targets;
    std::vector<std::vector<T>> weights(H, std::vector<T>(count, T{0}));
    for (std::size_t h = 1; h <= H; ++h) {
      // Target of row (i, n) is the latent of step s0 + i + h.
      const std::size_t avail = encoded_steps > h ? std::min(L, encoded_steps - h) : 0;
      std::vector<DiffArray<T>> pieces;
      if (avail > 0) pieces.push_back(slice_rows(source, h * N, avail * N));
      if (avail < L) pieces.push_back(DiffArray<T>::zeros({(L - avail) * N, p}));
      targets.push_back(pieces.size() == 1 ? pieces[0] : concat_rows(std::span<const DiffArray<T>>(pieces)));
      for (std::size_t i = 0; i < avail; ++i) {
        for (std::size_t n = 0; n < N; ++n) {
          bool valid = true;
          for (std::size_t k = 0; k < h && valid; ++k) valid = !b.dones[b.index(s0 + i + k, n)];
          weights[h - 1][i * N + n] = valid ? T{1} : T{0};
        }
      }
    }
    parts.prediction = prediction_loss(std::span<const DiffArray<T>>(predictions),
                                       std::span<const DiffArray<T>>(targets), weights);
  }
  if (cfg.coefficients.l1_enabled) parts.l1 = mean_abs(all);

  LossCoefficients c = cfg.coefficients;
  c.prediction = cfg.prediction_weight();
  c.entropy = options.entropy_coefficient;
  parts.total = combined_loss(parts, c);

  if (stats) {
    stats->actor = parts.actor.item();
    stats->critic = parts.critic.item();
    stats->prediction = parts.prediction.defined() ? parts.prediction.item() : std::numeric_limits<double>::quiet_NaN();
    stats->entropy = -parts.entropy.item();
    stats->l1 = parts.l1.defined() ? parts.l1.item() : 0.0;
    stats->total = parts.total.item();
    double ratio_sum = 0.0;
    std::size_t clipped = 0;
    for (std::size_t i = 0; i < count; ++i) {
      const double r = std::exp(static_cast<double>(logp.values()[i]) - static_cast<double>(anchor[i]));
      ratio_sum += r;
      if (std::abs(r - 1.0) > cfg.schedule.clip_epsilon) ++clipped;
    }
    stats->mean_ratio = ratio_sum / static_cast<double>(count);
    stats->clip_fraction = static_cast<double>(clipped) / static_cast<double>(count);
  }
  return parts;
}

template <typename T>
Trainer<T>::Trainer(Agent<T>& agent)
    : agent_(&agent), adam_(agent.params(), AdamOptions{0.9, 0.999, agent.config().adam_epsilon}) {}

template <typename T>
void Trainer<T>::attach_anchor(RolloutBuffer<T>& buffer) {
  buffer.anchored = false;
  if (!anchor_params_ || !agent_->config().anchor_first_update) return;
  auto& params = agent_->params();
  const std::vector<T> current = params.flatten();
  params.assign(*anchor_params_);
  try {
    buffer.anchor_log_probs = replay(*agent_, buffer).log_probs;
  } catch (...) {
    params.assign(current);
    throw;
  }
  params.assign(current);
  buffer.anchored = true;
}

template <typename T>
BatchMetrics Trainer<T>::train_on_batch(RolloutBuffer<T>& buffer, std::size_t batch_index) {
  const AgentConfig& cfg = agent_->config();
  auto& params = agent_->params();
  BatchMetrics m;
  m.learning_rate = lr_schedule(batch_index, cfg.schedule.decay, cfg.schedule.lr0);
  m.entropy_coefficient = cfg.coefficients.entropy * std::pow(cfg.entropy_decay, static_cast<double>(batch_index));
  m.anchored = buffer.anchored;
  const std::size_t E = cfg.schedule.epochs_per_batch, M = cfg.schedule.minibatches, total = E * M;
  const double max_norm = cfg.max_grad_norm > 0.0 ? cfg.max_grad_norm : std::numeric_limits<double>::infinity();
  std::optional<std::vector<T>> next_anchor;
  std::size_t update = 0;
  for (std::size_t e = 0; e < E; ++e) {
    if (cfg.advantage_refresh == AdvantageRefresh::per_epoch) refresh_advantages(buffer, *agent_);
    for (std::size_t s = 0; s < M; ++s, ++update) {
      if (cfg.advantage_refresh == AdvantageRefresh::per_minibatch) refresh_advantages(buffer, *agent_);
      // The policy before the final update is the next batch's anchor.
      if (update + 1 == total) next_anchor = params.flatten();
      MinibatchOptions opts;
      opts.use_anchor = update == 0 && buffer.anchored;
      opts.entropy_coefficient = m.entropy_coefficient;
      MinibatchStats st;
      params.zero_grad();
      const auto parts = minibatch_loss(*agent_, buffer, s, opts, &st);
      if (!std::isfinite(st.total)) {
        std::ostringstream msg;
        msg << "non-finite loss at batch " << batch_index << ", update " << update << ": actor=" << st.actor
            << " critic=" << st.critic << " prediction=" << st.prediction << " entropy=" << st.entropy;
        throw NumericError(msg.str());
      }
      parts.total.backward();
      st.grad_norm = clip_grad_norm(params, max_norm);
      if (!std::isfinite(st.grad_norm)) {
        throw NumericError("non-finite gradient norm at batch " + std::to_string(batch_index) + ", update " +
                           std::to_string(update));
      }
      adam_.step(m.learning_rate);
      agent_->mark_updated();
      refresh_hidden_states(buffer, *agent_);
      m.updates.push_back(st);
    }
  }
  anchor_params_ = std::move(next_anchor);
  m.optimizer_steps = m.updates.size();
  auto& a = m.mean;
  for (const auto& u : m.updates) {
    a.actor += u.actor;
    a.critic += u.critic;
    a.prediction += u.prediction;
    a.entropy += u.entropy;
    a.l1 += u.l1;
    a.total += u.total;
    a.mean_ratio += u.mean_ratio;
    a.clip_fraction += u.clip_fraction;
    a.grad_norm += u.grad_norm;
  }
  const double k = static_cast<double>(std::max<std::size_t>(1, m.updates.size()));
  for (double* f : {&a.actor, &a.critic, &a.prediction, &a.entropy, &a.l1, &a.total, &a.mean_ratio,
                    &a.clip_fraction, &a.grad_norm}) {
    *f /= k;
  }
  return m;
}

#define P4O_INSTANTIATE_TRAINER(T)                                                                      \
  template DiffArray<T> actor_loss(const DiffArray<T>&, std::span<const T>, std::span<const T>, double); \
  template DiffArray<T> critic_loss(const DiffArray<T>&, std::span<const T>, std::span<const T>, double); \
  template DiffArray<T> entropy_bonus(const DiffArray<T>&);                                             \
  template DiffArray<T> combined_loss(const LossBreakdown<T>&, const LossCoefficients&);                \
  template std::vector<T> normalize_advantages(std::span<const T>);                                     \
  template LossBreakdown<T> minibatch_loss(const Agent<T>&, const RolloutBuffer<T>&, std::size_t,       \
                                           const MinibatchOptions&, MinibatchStats*);                   \
  template class Trainer<T>;

P4O_INSTANTIATE_TRAINER(float)
P4O_INSTANTIATE_TRAINER(double)

#undef P4O_INSTANTIATE_TRAINER

}  // namespace p4o
