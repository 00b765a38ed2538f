// Copyright 2026 The P4O Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "p4o/errors.hpp"
#include "p4o/harness.hpp"
#include "test_support.hpp"

using namespace p4o;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("p4o_harness_" + std::to_string(::getpid())) / name;
  fs::remove_all(p);
  fs::create_directories(p.parent_path());
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t line_count(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  std::string line;
  while (std::getline(in, line)) n += !line.empty();
  return n;
}

// Toy agent on a 2 x 10 batch so a training batch takes well under a second.
RunConfig small(const std::string& env, const fs::path& out, int precision = 64) {
  RunConfig c = RunConfig::from_json({{"preset", "toy"}, {"env", env}, {"num_envs", 2}, {"steps_per_batch", 10},
                                      {"batches", 2}, {"precision", precision}, {"out", out.string()}});
  return c;
}

std::string stub_command(const std::string& mode) { return std::string(P4O_STUB_ENV) + " " + mode + " 3 1 16 16"; }

int run_cli(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + " " + std::string(P4O_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("config: defaults round-trip and every key is listed") {
  const RunConfig d;
  const json j = d.to_json();
  CHECK(j.size() == RunConfig::keys().size());
  CHECK(RunConfig::from_json(j).to_json() == j);
  CHECK(j.at("gamma") == 0.99);
  CHECK(j.at("gae_lambda") == 0.95);
  CHECK(j.at("num_envs") == 16);
  CHECK(j.at("steps_per_batch") == 125);
  CHECK(j.at("minibatches") == 5);
  CHECK(j.at("epochs_per_batch") == 4);
  CHECK(j.at("learning_rate") == 2.5e-4);
  CHECK(j.at("clip_epsilon") == 0.1);
  CHECK(j.at("horizon") == 3);
  CHECK(j.at("latent_dim") == 512);
  CHECK(j.at("belief_dim") == 512);
  CHECK(j.at("checkpoint_every") == 50);
  CHECK(j.at("entropy_coef") == 0.02);
}

TEST_CASE("config: toy preset and explicit keys on top of it") {
  const RunConfig t = RunConfig::from_json({{"preset", "toy"}, {"belief_dim", 48}});
  CHECK(t.agent.encoder.latent_dim == 32);
  CHECK(t.agent.belief_dim == 48);
  CHECK(t.agent.encoder.channels == std::array<std::size_t, 4>{4, 8, 8, 8});
  CHECK(RunConfig::from_json(t.to_json()).to_json() == t.to_json());
}

TEST_CASE("config: unknown keys and mistyped values are rejected") {
  CHECK_THROWS_WITH_AS(RunConfig::from_json({{"gama", 0.9}}), doctest::Contains("unknown config key 'gama'"),
                       ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json({{"num_envs", -1}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json({{"num_envs", 2.5}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json({{"gamma", "high"}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json({{"variant", "ppo"}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json({{"precision", 16}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json({{"lr_decay", "linear"}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json({{"channels", {1, 2, 3}}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json(json::array()), ConfigError);
}

TEST_CASE("config: flags over environment over file over defaults") {
  const fs::path file = scratch("precedence.json");
  std::ofstream(file) << R"({"seed": 1, "num_envs": 4, "gamma": 0.9, "out": "from-file"})";
  const std::map<std::string, std::string> env{{"P4O_NUM_ENVS", "8"}, {"P4O_OUT", "from-env"}, {"HOME", "/x"}};
  const RunConfig c = resolve_config(file, env, {{"out", "from-flag"}});
  CHECK(c.seed == 1);              // file
  CHECK(c.agent.gamma == 0.9);     // file
  CHECK(c.agent.num_envs == 8);    // environment beats file
  CHECK(c.out == "from-flag");     // flag beats environment
  CHECK(resolve_config(std::nullopt, {}, json::object()).to_json() == RunConfig{}.to_json());

  CHECK_THROWS_AS(environment_overrides({{"P4O_NOPE", "1"}}), ConfigError);
  CHECK(environment_overrides({{"P4O_ISA", "scalar"}}).empty());
  CHECK_THROWS_AS(environment_overrides({{"P4O_GAMMA", "not-a-number"}}), ConfigError);
  CHECK(environment_overrides({{"P4O_VARIANT", "p4o-no-pp"}}).at("variant") == "p4o-no-pp");
  CHECK(environment_overrides({{"P4O_OUT", "123"}}).at("out") == "123");
}

TEST_CASE("metrics: records round-trip losslessly") {
  MetricsRecord r;
  r.batch = 7;
  r.frames = 16000;
  r.episode_scores = {1.0, -0.1, 1.0 / 3.0};
  r.episodes_total = 12;
  r.rolling_mean = 0.1 + 0.2;
  r.actor = -1e-300;
  r.prediction = 0.012345678901234567;
  r.learning_rate = 2.5e-4 * (1 - 7e-4);
  r.optimizer_steps = 20;
  const json j = json::parse(r.to_json().dump());
  const MetricsRecord back = MetricsRecord::from_json(j);
  CHECK(back.to_json() == r.to_json());
  CHECK(back.rolling_mean == r.rolling_mean);
  CHECK(!back.rolling_stderr);
  CHECK(back.prediction == r.prediction);
  CHECK_FALSE(j.contains("wall_seconds"));
}

TEST_CASE("rolling score: last 100 episodes") {
  RollingScore s;
  CHECK(!s.mean());
  for (int i = 0; i < 150; ++i) s.add(i);
  CHECK(s.count() == 100);
  CHECK(*s.mean() == doctest::Approx(99.5));
  RollingScore one;
  one.add(2.0);
  CHECK(*one.mean() == 2.0);
  CHECK(!one.stderr_of_mean());
}

TEST_CASE("train: 2-batch smoke run on the toy PixelCatch preset") {
  const fs::path out = scratch("smoke");
  RunConfig c = RunConfig::from_json({{"preset", "toy"}, {"env", "pixel-catch"}, {"batches", 2}, {"out", out.string()}});
  const auto records = cmd_train(c);
  REQUIRE(records.size() == 2);
  CHECK(line_count(out / "metrics.jsonl") == 2);
  CHECK(line_count(out / "timing.jsonl") == 2);
  CHECK(line_count(out / "curve.csv") == 3);
  CHECK(fs::exists(out / "checkpoint.p4o"));
  CHECK(records[1].frames == 2 * 2000);
  CHECK(records[0].optimizer_steps == 20);
  const auto back = read_metrics(out / "metrics.jsonl");
  CHECK(back[1].to_json() == records[1].to_json());
  // A second run into the same directory must not clobber it.
  CHECK_THROWS_AS(cmd_train(c), ConfigError);
}

TEST_CASE("train: identical config and seed give byte-identical metrics in 64-bit mode") {
  const fs::path a = scratch("det-a"), b = scratch("det-b");
  RunConfig ca = small("tmaze", a), cb = small("tmaze", b);
  ca.batches = cb.batches = 4;
  cmd_train(ca);
  cmd_train(cb);
  CHECK(slurp(a / "metrics.jsonl") == slurp(b / "metrics.jsonl"));
  CHECK(slurp(a / "curve.csv") == slurp(b / "curve.csv"));
  CHECK(!slurp(a / "metrics.jsonl").empty());
  RunConfig cc = small("tmaze", scratch("det-c"));
  cc.batches = 4;
  cc.seed = 1;
  cmd_train(cc);
  CHECK(slurp(a / "metrics.jsonl") != slurp(cc.out / "metrics.jsonl"));
}

TEST_CASE("train: resume reproduces the uninterrupted run bit for bit") {
  const fs::path full = scratch("resume-full"), split = scratch("resume-split");
  RunConfig cf = small("pixel-catch", full);
  cf.batches = 4;
  cmd_train(cf);

  RunConfig cs = small("pixel-catch", split);
  cs.batches = 2;
  cmd_train(cs);
  const fs::path saved = split.parent_path() / "resume-saved.p4o";
  fs::copy_file(split / "checkpoint.p4o", saved, fs::copy_options::overwrite_existing);
  // Run one more batch, then lose its checkpoint as if the process died.
  cs.batches = 3;
  cmd_train(cs, {.resume = true});
  CHECK(line_count(split / "metrics.jsonl") == 3);
  fs::copy_file(saved, split / "checkpoint.p4o", fs::copy_options::overwrite_existing);
  cs.batches = 4;
  const auto tail = cmd_train(cs, {.resume = true});
  CHECK(tail.size() == 2);
  CHECK(slurp(full / "metrics.jsonl") == slurp(split / "metrics.jsonl"));
  CHECK(slurp(full / "curve.csv") == slurp(split / "curve.csv"));

  RunConfig other = cs;
  other.agent.gamma = 0.5;
  CHECK_THROWS_AS(cmd_train(other, {.resume = true}), ConfigError);
}

TEST_CASE("train: logged rolling means equal an offline recomputation exactly") {
  const fs::path out = scratch("rolling");
  RunConfig c = small("tmaze", out);
  c.batches = 6;
  cmd_train(c);
  RollingScore offline;
  std::size_t checked = 0;
  for (const auto& r : read_metrics(out / "metrics.jsonl")) {
    for (double s : r.episode_scores) offline.add(s);
    REQUIRE(offline.mean().has_value() == r.rolling_mean.has_value());
    if (r.rolling_mean) {
      CHECK(*offline.mean() == *r.rolling_mean);
      ++checked;
    }
    CHECK(r.episodes_total >= offline.count());
  }
  CHECK(checked > 0);
}

TEST_CASE("train: p4o-no-pp logs the prediction loss with weight zero") {
  const fs::path out = scratch("nopp");
  RunConfig c = small("pixel-catch", out);
  c.agent.variant = Variant::p4o_no_pp;
  c.batches = 1;
  const auto r = cmd_train(c);
  CHECK(r[0].prediction_weight == 0.0);
  CHECK(r[0].prediction > 0.0);
  RunConfig p = small("pixel-catch", scratch("pp"));
  p.batches = 1;
  CHECK(cmd_train(p)[0].prediction_weight == 1.0);
}

TEST_CASE("train: numeric failure leaves a diagnostic dump") {
  const fs::path out = scratch("nan");
  RunConfig c = small("pixel-catch", out);
  c.agent.schedule.lr0 = 1e30;
  c.agent.max_grad_norm = 0.0;
  c.batches = 3;
  CHECK_THROWS_AS(cmd_train(c), NumericError);
  CHECK(fs::exists(out / "failure.json"));
}

TEST_CASE("eval: deterministic mode on a deterministic environment repeats its score") {
  const fs::path out = scratch("eval-const");
  RunConfig c = small("external", out);
  c.env.command = stub_command("const");
  c.env.resize = 0;
  Session<double> s(c);
  fs::create_directories(out);
  write_checkpoint(out / "ck.p4o", s.checkpoint());
  const auto r = cmd_eval(out / "ck.p4o", true, 5, 3);
  REQUIRE(r.scores.size() == 5);
  for (double x : r.scores) CHECK(x == 10.0);
  CHECK(r.min == r.max);
  CHECK(r.stddev == 0.0);
}

TEST_CASE("eval: argmax episodes replay exactly and a uniform policy sits at chance on TMaze") {
  const fs::path out = scratch("eval-tmaze");
  RunConfig c = small("tmaze", out);
  c.env.sticky_actions = 0.0;
  Session<double> s(c);
  auto& params = s.agent().params();
  const auto& w = params.get("heads/actor/weight");
  test::set_param(params, "heads/actor/weight", std::vector<double>(w.size(), 0.0));
  test::set_param(params, "heads/actor/bias", std::vector<double>(c.env.name == "tmaze" ? 2 : 3, 0.0));
  fs::create_directories(out);
  write_checkpoint(out / "ck.p4o", s.checkpoint());

  const auto sto = cmd_eval(out / "ck.p4o", false, 400, 11);
  // Rewards are +-1, so the standard error of the mean is at most 1/sqrt(400).
  CHECK(std::abs(sto.mean) < 3.0 / std::sqrt(400.0));
  const auto d1 = cmd_eval(out / "ck.p4o", true, 20, 5);
  const auto d2 = cmd_eval(out / "ck.p4o", true, 20, 5);
  CHECK(d1.scores == d2.scores);
  MESSAGE("uniform policy on TMaze: stochastic mean " << sto.mean << ", deterministic mean " << d1.mean);
}

TEST_CASE("eval: checkpoint and config must describe the same network") {
  const fs::path out = scratch("eval-mismatch");
  RunConfig c = small("tmaze", out);
  Session<double> s(c);
  fs::create_directories(out);
  write_checkpoint(out / "ck.p4o", s.checkpoint());
  RunConfig other = c;
  other.agent.variant = Variant::lstm_ppo_1024;
  CHECK_THROWS_WITH_AS(cmd_eval(out / "ck.p4o", true, 1, 0, other), doctest::Contains("mismatch"), CheckpointError);
  other = c;
  other.agent.belief_dim = 16;
  CHECK_THROWS_WITH_AS(cmd_eval(out / "ck.p4o", true, 1, 0, other), doctest::Contains("mismatch"), CheckpointError);
  CHECK_THROWS_AS(cmd_eval(out / "ck.p4o", true, 0, 0), ConfigError);
  CHECK_THROWS_AS(cmd_eval(out / "missing.p4o", true, 1, 0), CheckpointError);
}

TEST_CASE("diagnose: R^2 analytic cases") {
  Rng rng(4);
  const std::size_t n = 200, d = 5;
  std::vector<double> x(n * d);
  for (auto& v : x) v = rng.uniform(-1, 1);
  CHECK(*r_squared(x, x, d) == doctest::Approx(1.0).epsilon(1e-12));
  std::vector<double> mean(d, 0.0), pred(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < d; ++k) mean[k] += x[i * d + k] / static_cast<double>(n);
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < d; ++k) pred[i * d + k] = mean[k];
  }
  CHECK(std::abs(*r_squared(pred, x, d)) < 1e-12);
  std::vector<double> flat(n * d, 0.25);
  CHECK(!r_squared(x, flat, d).has_value());
  CHECK_THROWS_AS(r_squared(std::vector<double>(3), std::vector<double>(4), 1), DimensionError);
}

TEST_CASE("diagnose: histogram bins sum to the sample count") {
  Rng rng(2);
  std::vector<double> v(1001);
  for (auto& x : v) x = rng.uniform(-1.5, 1.5);
  v.push_back(-1.0);
  v.push_back(1.0);
  const Histogram h = histogram(v, 20);
  CHECK(h.total() == v.size());
  CHECK(h.counts.size() == 20);
  const Histogram e = histogram(std::vector<double>{-1.0, -0.85, 0.0, 0.999, 1.0}, 20);
  CHECK(e.counts[0] == 1);
  CHECK(e.counts[1] == 1);
  CHECK(e.counts[10] == 1);
  CHECK(e.counts[19] == 2);
  CHECK_THROWS_AS(histogram(std::vector<double>{NAN}), NumericError);
}

TEST_CASE("diagnose: report on a fresh checkpoint") {
  const fs::path out = scratch("diag");
  RunConfig c = small("pixel-catch", out);
  Session<double> s(c);
  fs::create_directories(out);
  write_checkpoint(out / "ck.p4o", s.checkpoint());
  const auto r = cmd_diagnose(out / "ck.p4o", 30, 1);
  // Two environments, the first step has no prediction, episodes outlast 30 steps.
  CHECK(r.samples == 2 * 29);
  CHECK(r.latents.total() == r.samples * 32);
  CHECK(r.errors.total() == r.samples * 32);
  CHECK(r.to_json().at("reference_r2") == 0.89);

  RunConfig b = c;
  b.agent.variant = Variant::lstm_ppo_1024;
  Session<double> sb(b);
  write_checkpoint(out / "base.p4o", sb.checkpoint());
  CHECK_THROWS_AS(cmd_diagnose(out / "base.p4o", 10, 1), ConfigError);
}

// Student t survival functions with closed forms: with s = t / sqrt(nu + t^2),
// nu = 2 gives 1/2 - s/2 and nu = 4 gives 1/2 - (3s - s^3)/4.
double t_sf_2(double t) { return 0.5 - t / (2.0 * std::sqrt(2.0 + t * t)); }

TEST_CASE("compare: Welch test against closed-form t distributions") {
  // Equal sizes and variances make the Welch df exactly 2(n - 1).
  const std::vector<double> a2{3.0, 5.0}, b2{1.0, 3.0};
  const WelchResult r2 = welch_one_tailed(a2, b2);
  CHECK(r2.difference == 2.0);
  CHECK(r2.df == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(r2.t == doctest::Approx(2.0 / std::sqrt(2.0)).epsilon(1e-12));
  CHECK(r2.p_one_tailed == doctest::Approx(t_sf_2(r2.t)).epsilon(1e-10));

  const std::vector<double> a3{1.0, 2.0, 4.5}, b3{0.5, 1.5, 4.0};  // b = a - 0.5
  const WelchResult r3 = welch_one_tailed(a3, b3);
  CHECK(r3.df == doctest::Approx(4.0).epsilon(1e-12));
  const double s = r3.t / std::sqrt(4.0 + r3.t * r3.t);
  const double sf4 = 0.5 - (3.0 * s - s * s * s) / 4.0;
  CHECK(r3.p_one_tailed == doctest::Approx(sf4).epsilon(1e-10));

  const std::vector<double> same{1.0, 1.0, 1.0};
  const WelchResult z = welch_one_tailed(same, same);
  CHECK(z.t == 0.0);
  CHECK(z.p_one_tailed == 0.5);
  CHECK_THROWS_AS(welch_one_tailed(std::vector<double>{1.0}, same), ConfigError);
}

TEST_CASE("compare: injected curves with a known gap") {
  // Seed k of arm a ends at 1 + k/10, arm b 0.6 below; curves aligned by frames.
  std::vector<double> fa, fb;
  const std::vector<std::uint64_t> grid{100, 200, 300};
  for (int k = 0; k < 4; ++k) {
    std::vector<MetricsRecord> ra(3), rb(2);
    for (int i = 0; i < 3; ++i) {
      ra[i].frames = 100 * (i + 1);
      ra[i].rolling_mean = (1.0 + k / 10.0) * (i + 1) / 3.0;
    }
    rb[0].frames = 150;
    rb[0].rolling_mean = 0.1;
    rb[1].frames = 300;
    rb[1].rolling_mean = 0.4 + k / 10.0;
    const auto ca = align_curve(ra, grid), cb = align_curve(rb, grid);
    CHECK(!cb[0].rolling_mean);
    CHECK(*cb[1].rolling_mean == 0.1);
    fa.push_back(*ca.back().rolling_mean);
    fb.push_back(*cb.back().rolling_mean);
  }
  const WelchResult r = welch_one_tailed(fa, fb);
  CHECK(r.difference == doctest::Approx(0.6).epsilon(1e-12));
  // Identical spreads: t = gap / sqrt(2 var / n), df = 2(n - 1) = 6.
  double m = 0, ss = 0;
  for (double x : fa) m += x / 4.0;
  for (double x : fa) ss += (x - m) * (x - m);
  const double t = 0.6 / std::sqrt(2.0 * (ss / 3.0) / 4.0);
  CHECK(r.t == doctest::Approx(t).epsilon(1e-9));
  CHECK(r.df == doctest::Approx(6.0).epsilon(1e-9));
}

TEST_CASE("compare: identical configs and seeds give zero difference") {
  const fs::path out = scratch("cmp");
  RunConfig c = small("tmaze", out);
  c.batches = 2;
  const auto rep = cmd_compare(c, c, 2, out);
  CHECK(rep.final_a == rep.final_b);
  CHECK(rep.test.difference == 0.0);
  CHECK(rep.test.p_one_tailed == 0.5);
  CHECK(rep.curves_a.size() == 2);
  CHECK(fs::exists(out / "compare.json"));
  CHECK_THROWS_AS(cmd_compare(c, c, 1, scratch("cmp1")), ConfigError);
}

TEST_CASE("cli: exit codes and a 2-batch run") {
  const fs::path dir = scratch("cli");
  fs::create_directories(dir);
  const fs::path cfg = dir / "run.json";
  std::ofstream(cfg) << json{{"preset", "toy"}, {"num_envs", 2}, {"steps_per_batch", 10}}.dump();
  CHECK(run_cli("train --config " + cfg.string() + " --batches 2 --out " + (dir / "ok").string()) == 0);
  CHECK(line_count(dir / "ok" / "metrics.jsonl") == 2);
  CHECK(run_cli("eval --checkpoint " + (dir / "ok" / "checkpoint.p4o").string() + " --episodes 1") == 0);
  CHECK(run_cli("diagnose --checkpoint " + (dir / "ok" / "checkpoint.p4o").string() + " --steps 5") == 0);

  const fs::path badcfg = dir / "bad.json";
  std::ofstream(badcfg) << R"({"no_such_key": 1})";
  CHECK(run_cli("train --config " + badcfg.string() + " --out " + (dir / "bad").string()) == 2);
  CHECK(run_cli("train --precision 16") == 2);
  CHECK(run_cli("frobnicate") == 2);
  CHECK(run_cli("train --out " + (dir / "env").string(), "P4O_NOPE=1") == 2);

  const fs::path nan = dir / "nan.json";
  std::ofstream(nan) << json{{"preset", "toy"}, {"num_envs", 2}, {"steps_per_batch", 10}, {"learning_rate", 1e30},
                             {"max_grad_norm", 0}}
                            .dump();
  CHECK(run_cli("train --config " + nan.string() + " --batches 3 --out " + (dir / "nan").string()) == 3);
}
