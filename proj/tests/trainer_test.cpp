// Copyright 2026 The P4O Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "p4o/errors.hpp"
#include "p4o/grad_check.hpp"
#include "p4o/ops.hpp"
#include "p4o/trainer.hpp"
#include "test_support.hpp"

using namespace p4o;
using D = DiffArray<double>;

namespace {

D column(const std::vector<double>& v, bool grad = true) { return D({v.size()}, v, grad); }

double actor_value(double r, double a, double eps = 0.1) {
  return actor_loss<double>(column({std::log(r)}), std::vector<double>{0.0}, std::vector<double>{a}, eps).item();
}

AgentConfig small_config(Variant variant = Variant::p4o) {
  AgentConfig cfg = AgentConfig::toy();
  cfg.variant = variant;
  cfg.num_envs = 2;
  cfg.steps_per_batch = 10;
  cfg.schedule.minibatches = 5;
  cfg.actions = 3;
  return cfg;
}

struct Setup {
  Agent<double> agent;
  VecEnv envs;
  Collector<double> collector;
  Trainer<double> trainer;

  static VecEnv make_envs(std::size_t n) {
    std::vector<std::unique_ptr<Env>> e;
    for (std::size_t i = 0; i < n; ++i) e.push_back(make_env(EnvSpec{}));
    return VecEnv(std::move(e), 13);
  }
  explicit Setup(const AgentConfig& cfg, std::uint64_t seed = 3)
      : agent(cfg, seed), envs(make_envs(cfg.num_envs)), collector(agent, envs, Rng(seed + 1)), trainer(agent) {}

  BatchMetrics batch(std::size_t index) {
    auto b = collector.collect();
    trainer.attach_anchor(b);
    auto m = trainer.train_on_batch(b, index);
    collector.set_state(b.final_state);
    return m;
  }
};

std::vector<double> grads(ParameterSet<double>& params) {
  std::vector<double> g;
  for (auto& e : params.entries()) {
    // Parameters the loss does not reach have no gradient buffer.
    const auto v = e.array.grad();
    if (v.empty()) g.insert(g.end(), e.array.size(), 0.0);
    else g.insert(g.end(), v.begin(), v.end());
  }
  return g;
}

}  // namespace

TEST_CASE("actor loss worked examples") {
  CHECK(actor_value(1.0, 1.0) == doctest::Approx(-1.0).epsilon(1e-15));
  CHECK(actor_value(1.5, 1.0) == doctest::Approx(-1.1).epsilon(1e-12));
  CHECK(actor_value(0.5, -1.0) == doctest::Approx(0.9).epsilon(1e-12));
  CHECK_THROWS_AS(actor_loss<double>(column({1.0, 2.0}), std::vector<double>{0.0}, std::vector<double>{1.0, 1.0}, 0.1),
                  DimensionError);
  CHECK_THROWS_AS(actor_loss<double>(column({1000.0}), std::vector<double>{0.0}, std::vector<double>{1.0}, 0.1), NumericError);
}

TEST_CASE("actor gradient vanishes exactly in the clipped region") {
  Rng rng(1);
  const std::size_t B = 10000;
  std::vector<double> logp(B), anchor(B), adv(B);
  for (std::size_t i = 0; i < B; ++i) {
    logp[i] = rng.uniform(-0.5, 0.5);
    anchor[i] = rng.uniform(-0.5, 0.5);
    adv[i] = rng.normal();
  }
  D x = column(logp);
  actor_loss<double>(x, anchor, adv, 0.1).backward();
  std::size_t clipped = 0;
  for (std::size_t i = 0; i < B; ++i) {
    const double r = std::exp(logp[i] - anchor[i]);
    const bool flat = (r > 1.1 && adv[i] > 0) || (r < 0.9 && adv[i] < 0);
    if (flat) {
      ++clipped;
      REQUIRE(x.grad()[i] == 0.0);
    } else {
      REQUIRE(x.grad()[i] == doctest::Approx(-r * adv[i] / static_cast<double>(B)).epsilon(1e-12));
    }
  }
  CHECK(clipped > 1000);
}

TEST_CASE("critic loss worked examples and max rule") {
  auto value = [](double v, double old, double ret) {
    return critic_loss<double>(column({v}), std::vector<double>{old}, std::vector<double>{ret}, 0.1).item();
  };
  CHECK(value(1.0, 1.0, 1.0) == 0.0);
  CHECK(value(1.2, 1.0, 2.0) == doctest::Approx(0.9).epsilon(1e-12));
  CHECK(value(1.05, 1.0, 2.0) == doctest::Approx(0.95).epsilon(1e-12));

  Rng rng(2);
  for (int i = 0; i < 10000; ++i) {
    const double v = rng.uniform(-2, 2), old = rng.uniform(-2, 2), ret = rng.uniform(-2, 2);
    const double clip = old + std::clamp(v - old, -0.1, 0.1);
    REQUIRE(value(v, old, ret) == std::max(std::abs(v - ret), std::abs(clip - ret)));
    // Central difference away from the kinks.
    D x = column({v});
    critic_loss<double>(x, std::vector<double>{old}, std::vector<double>{ret}, 0.1).backward();
    const double h = 1e-7;
    if (std::abs(v - ret) > 1e-3 && std::abs(std::abs(v - old) - 0.1) > 1e-3 &&
        std::abs(std::abs(v - ret) - std::abs(clip - ret)) > 1e-3 && std::abs(clip - ret) > 1e-3) {
      const double fd = (value(v + h, old, ret) - value(v - h, old, ret)) / (2 * h);
      REQUIRE(x.grad()[0] == doctest::Approx(fd).epsilon(1e-6));
    }
  }
}

TEST_CASE("entropy bonus values") {
  CHECK(entropy_bonus(D({1, 4}, {0, 0, 0, 0}, false)).item() == doctest::Approx(-std::log(4.0)).epsilon(1e-14));
  CHECK(std::abs(entropy_bonus(D({1, 3}, {0, -800, -800}, false)).item()) < 1e-12);
  const D p({1, 3}, {std::log(0.5), std::log(0.25), std::log(0.25)}, false);
  CHECK(-entropy_bonus(p).item() == doctest::Approx(1.5 * std::log(2.0)).epsilon(1e-14));
  CHECK(-entropy_bonus(p).item() == doctest::Approx(1.039721).epsilon(1e-6));
  // Mean over rows.
  const D two({2, 2}, {0, 0, 0, -800}, false);
  CHECK(-entropy_bonus(two).item() == doctest::Approx(std::log(2.0) / 2).epsilon(1e-14));
}

TEST_CASE("combined loss weights the components") {
  LossBreakdown<double> parts;
  parts.actor = column({1.0});
  parts.critic = column({1.0});
  parts.prediction = column({1.0});
  parts.entropy = column({1.0});
  parts.l1 = column({1.0});
  const LossCoefficients c;
  CHECK(combined_loss(parts, c).item() == doctest::Approx(2.52).epsilon(1e-15));
  LossCoefficients with_l1 = c;
  with_l1.l1_enabled = true;
  CHECK(combined_loss(parts, with_l1).item() == doctest::Approx(2.62).epsilon(1e-15));

  LossBreakdown<double> zero;
  for (D* d : {&zero.actor, &zero.critic, &zero.prediction, &zero.entropy}) *d = column({0.0});
  CHECK(combined_loss(zero, c).item() == 0.0);

  LossCoefficients ablation = c;
  ablation.prediction = 0.0;
  combined_loss(parts, ablation).backward();
  CHECK(parts.prediction.grad()[0] == 0.0);
  CHECK(parts.critic.grad()[0] == 0.5);

  LossBreakdown<double> no_prediction = parts;
  no_prediction.prediction = D();
  CHECK(combined_loss(no_prediction, c).item() == doctest::Approx(1.52).epsilon(1e-15));
}

TEST_CASE("advantage normalization") {
  Rng rng(4);
  std::vector<double> a(400);
  for (double& x : a) x = rng.normal() * 3 + 1;
  const auto n = normalize_advantages<double>(a);
  const double mean = std::accumulate(n.begin(), n.end(), 0.0) / 400.0;
  double var = 0;
  for (double x : n) var += (x - mean) * (x - mean);
  CHECK(std::abs(mean) < 1e-12);
  CHECK(var / 400.0 == doctest::Approx(1.0).epsilon(1e-12));
  std::vector<std::size_t> ia(400), in(400);
  std::iota(ia.begin(), ia.end(), 0);
  std::iota(in.begin(), in.end(), 0);
  std::stable_sort(ia.begin(), ia.end(), [&](auto i, auto j) { return a[i] < a[j]; });
  std::stable_sort(in.begin(), in.end(), [&](auto i, auto j) { return n[i] < n[j]; });
  CHECK(ia == in);
  const auto flat = normalize_advantages<double>(std::vector<double>(5, 2.0));
  for (double x : flat) CHECK(x == 0.0);
  CHECK(normalize_advantages<double>(std::vector<double>{}).empty());
}

TEST_CASE("learning-rate schedules") {
  CHECK(lr_schedule(0, LrDecay::short_run) == 2.5e-4);
  CHECK(lr_schedule(0, LrDecay::long_run) == 2.5e-4);
  CHECK(lr_schedule(5000, LrDecay::short_run) == 1.25e-4);
  CHECK(lr_schedule(200, LrDecay::long_run) == 2.4750625e-4);
  CHECK(lr_schedule(299, LrDecay::long_run) == 2.4750625e-4);
  CHECK(lr_schedule(20000, LrDecay::short_run) == doctest::Approx(2.5e-8).epsilon(1e-12));
  CHECK(lr_schedule(1000000, LrDecay::long_run) == 5e-6);
}

TEST_CASE("combined gradient is the weighted sum of component gradients") {
  AgentConfig cfg = small_config();
  cfg.coefficients.l1_enabled = true;
  Setup s(cfg);
  auto b = s.collector.collect();
  auto& params = s.agent.params();
  const MinibatchOptions opts;

  params.zero_grad();
  const auto all = minibatch_loss(s.agent, b, 1, opts);
  all.total.backward();
  const auto total = grads(params);

  std::vector<double> sum(total.size(), 0.0);
  const std::vector<std::pair<D LossBreakdown<double>::*, double>> parts{
      {&LossBreakdown<double>::actor, cfg.coefficients.actor},
      {&LossBreakdown<double>::critic, cfg.coefficients.critic},
      {&LossBreakdown<double>::prediction, cfg.coefficients.prediction},
      {&LossBreakdown<double>::entropy, opts.entropy_coefficient},
      {&LossBreakdown<double>::l1, cfg.coefficients.l1}};
  for (const auto& [member, coeff] : parts) {
    params.zero_grad();
    const auto fresh = minibatch_loss(s.agent, b, 1, opts);
    (fresh.*member).backward();
    const auto g = grads(params);
    for (std::size_t i = 0; i < g.size(); ++i) sum[i] += coeff * g[i];
  }
  double scale = 0.0;
  for (double g : total) scale = std::max(scale, std::abs(g));
  CHECK(test::max_abs_diff(total, sum) <= 1e-12 * std::max(1.0, scale));
}

TEST_CASE("full objective gradient check on a miniature batch") {
  AgentConfig cfg = small_config();
  cfg.steps_per_batch = 6;
  cfg.schedule.minibatches = 1;
  Setup s(cfg);
  // Blank frames and zero biases leave many ReLU inputs at exactly 0, where
  // central differences see a one-sided slope; move the biases off zero.
  Rng rng(77);
  for (auto& e : s.agent.params().entries()) {
    if (e.name.ends_with("bias")) {
      for (double& v : e.array.mutable_values()) v = rng.uniform(-0.1, 0.1);
    }
  }
  const auto b = s.collector.collect();
  // Ratios of exactly one keep the surrogate away from its kinks.
  MinibatchOptions opts;
  GradCheckOptions gc;
  gc.max_coordinates = 3000;
  const auto report = grad_check([&] { return minibatch_loss(s.agent, b, 0, opts).total; },
                                 s.agent.params().entries(), gc);
  INFO("worst: " << report.failing_param << "[" << report.failing_index << "]");
  CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("ablation and baseline objectives") {
  {
    Setup s(small_config(Variant::p4o_no_pp));
    const auto b = s.collector.collect();
    MinibatchStats st;
    const auto parts = minibatch_loss(s.agent, b, 0, MinibatchOptions{}, &st);
    CHECK(s.agent.config().prediction_weight() == 0.0);
    CHECK(std::isfinite(st.prediction));
    CHECK(parts.total.item() == doctest::Approx(parts.actor.item() + 0.5 * parts.critic.item() +
                                                0.02 * parts.entropy.item())
                                    .epsilon(1e-12));
  }
  {
    Setup s(small_config(Variant::lstm_ppo_1024));
    const auto b = s.collector.collect();
    MinibatchStats st;
    const auto parts = minibatch_loss(s.agent, b, 0, MinibatchOptions{}, &st);
    CHECK_FALSE(parts.prediction.defined());
    CHECK(std::isnan(st.prediction));
  }
}

TEST_CASE("a batch takes twenty optimizer steps and carries the anchor") {
  Setup s(small_config());
  const auto first = s.batch(0);
  CHECK(first.optimizer_steps == 20);
  CHECK(s.trainer.total_steps() == 20);
  CHECK_FALSE(first.anchored);
  CHECK(first.learning_rate == 2.5e-4);
  REQUIRE(s.trainer.anchor_parameters().has_value());
  CHECK(*s.trainer.anchor_parameters() != s.agent.params().flatten());

  // The anchor replays the buffer under the stored parameters.
  auto b = s.collector.collect();
  s.trainer.attach_anchor(b);
  CHECK(b.anchored);
  const auto current = s.agent.params().flatten();
  s.agent.params().assign(*s.trainer.anchor_parameters());
  const auto expected = replay(s.agent, b).log_probs;
  s.agent.params().assign(current);
  CHECK(b.anchor_log_probs == expected);
  CHECK(s.agent.params().flatten() == current);
  const auto second = s.trainer.train_on_batch(b, 1);
  CHECK(second.anchored);
  CHECK(second.updates.size() == 20);
  CHECK(s.trainer.total_steps() == 40);

  AgentConfig off = small_config();
  off.anchor_first_update = false;
  Setup t(off);
  t.batch(0);
  auto c = t.collector.collect();
  t.trainer.attach_anchor(c);
  CHECK_FALSE(c.anchored);
}

TEST_CASE("zero learning rate leaves parameters and states unchanged") {
  AgentConfig cfg = small_config();
  cfg.schedule.lr0 = 0.0;
  Setup s(cfg);
  const auto before = s.agent.params().flatten();
  auto b = s.collector.collect();
  const auto states = b.segment_states;
  const auto adv = b.advantages;
  const auto m = s.trainer.train_on_batch(b, 0);
  CHECK(m.optimizer_steps == 20);
  CHECK(std::isfinite(m.mean.total));
  CHECK(s.agent.params().flatten() == before);
  for (std::size_t i = 0; i < states.size(); ++i) {
    CHECK(test::max_abs_diff(b.segment_states[i].flatten(), states[i].flatten()) < 1e-12);
  }
  CHECK(test::max_abs_diff(b.advantages, adv) < 1e-12);
}

TEST_CASE("training is bit-reproducible in 64-bit mode") {
  auto run = [] {
    Setup s(small_config(), 21);
    std::vector<double> totals;
    for (std::size_t i = 0; i < 3; ++i) totals.push_back(s.batch(i).mean.total);
    auto p = s.agent.params().flatten();
    p.insert(p.end(), totals.begin(), totals.end());
    return p;
  };
  CHECK(run() == run());
}

TEST_CASE("a non-finite loss aborts with a numeric error") {
  Setup s(small_config());
  auto b = s.collector.collect();
  for (auto& e : s.agent.params().entries()) {
    if (e.name == "heads/critic/bias") e.array.mutable_values()[0] = std::nan("");
  }
  try {
    s.trainer.train_on_batch(b, 7);
    FAIL("expected a numeric error");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("batch 7") != std::string::npos);
  }
}

TEST_CASE("per-minibatch advantage refresh also runs twenty steps") {
  AgentConfig cfg = small_config();
  cfg.advantage_refresh = AdvantageRefresh::per_minibatch;
  Setup s(cfg);
  CHECK(s.batch(0).optimizer_steps == 20);
}
