// Copyright 2026 The P4O Authors
// SPDX-License-Identifier: Apache-2.0
//
// Run configuration, per-batch metrics, checkpointed training sessions and
// the train / eval / diagnose / compare commands behind tools/p4o.
//
// Output directory of a training run:
//   config.json     resolved configuration
//   metrics.jsonl   one MetricsRecord per batch (deterministic content)
//   timing.jsonl    {"batch", "wall_seconds"} per batch
//   curve.csv       batch,frames,rolling_mean,stderr
//   checkpoint.p4o  every checkpoint_every batches and at exit

#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "p4o/agent.hpp"
#include "p4o/checkpoint.hpp"
#include "p4o/environments.hpp"
#include "p4o/rollout.hpp"
#include "p4o/trainer.hpp"

namespace p4o {

struct RunConfig {
  // Sizes and encoder follow the full-scale defaults; "preset": "toy" switches
  // to the 16x16 / [4,8,8,8] / p = q = 32 agent. Encoder input dimensions are
  // always taken from the environment.
  std::string preset = "full";
  AgentConfig agent;
  EnvSpec env;
  std::uint64_t seed = 0;
  std::size_t batches = 100;
  std::filesystem::path out = "run";
  int precision = 32;
  std::size_t checkpoint_every = 50;

  // Flat JSON object holding every key.
  nlohmann::json to_json() const;
  // Starts from the defaults (or the preset named in `j`) and applies every
  // key of `j`. Unknown keys and mistyped values throw ConfigError.
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& path);
  // Every recognised key.
  static std::vector<std::string> keys();
};

// P4O_<KEY> overrides, KEY being a config key upper-cased ("P4O_NUM_ENVS").
// String-typed keys take the raw text, the rest are parsed as JSON. Variables
// with the prefix that name no key throw ConfigError, except P4O_ISA, which
// the kernel dispatcher reads.
inline constexpr const char* kEnvPrefix = "P4O_";
inline constexpr const char* kIsaVariable = "P4O_ISA";
nlohmann::json environment_overrides(const std::map<std::string, std::string>& environment);
std::map<std::string, std::string> process_environment();

// defaults < file < environment < flags.
RunConfig resolve_config(const std::optional<std::filesystem::path>& file,
                         const std::map<std::string, std::string>& environment, const nlohmann::json& flags);

struct MetricsRecord {
  std::size_t batch = 0;
  std::uint64_t frames = 0;
  std::vector<double> episode_scores;  // episodes finished during this batch
  std::size_t episodes_total = 0;
  std::optional<double> rolling_mean;  // over the last 100 episodes
  std::optional<double> rolling_stderr;
  double actor = 0, critic = 0, prediction = 0, entropy = 0, l1 = 0, total = 0;
  double prediction_weight = 0;  // 0: prediction loss monitored only
  double learning_rate = 0, entropy_coefficient = 0;
  double clip_fraction = 0, grad_norm = 0;
  std::size_t optimizer_steps = 0;
  double wall_seconds = 0;  // written to timing.jsonl, not metrics.jsonl

  nlohmann::json to_json() const;
  static MetricsRecord from_json(const nlohmann::json& j);
};

std::vector<MetricsRecord> read_metrics(const std::filesystem::path& path);

// Last-100-episode window.
class RollingScore {
 public:
  explicit RollingScore(std::size_t window = 100) : window_(window) {}
  void add(double score);
  std::size_t count() const { return scores_.size(); }
  std::optional<double> mean() const;
  // Sample standard deviation over sqrt(n); undefined below two episodes.
  std::optional<double> stderr_of_mean() const;
  const std::deque<double>& scores() const { return scores_; }
  void assign(const std::vector<double>& scores);

 private:
  std::size_t window_;
  std::deque<double> scores_;
};

// One training run: environments, agent, collector and trainer, advanced one
// batch at a time.
template <typename T>
class Session {
 public:
  explicit Session(RunConfig config);
  ~Session();
  Session(const Session&) = delete;
  Session& operator=(const Session&) = delete;

  // Collect, anchor, train, carry the recurrent state. On NumericError the
  // batch's rollout buffer is dumped to `failure_dump` (when set) and the
  // error propagates.
  MetricsRecord train_batch(const std::optional<std::filesystem::path>& failure_dump = std::nullopt);

  std::size_t batch() const { return batch_; }
  const RunConfig& config() const { return config_; }
  Agent<T>& agent() { return *agent_; }
  const RollingScore& scores() const { return scores_; }

  Checkpoint checkpoint() const;
  // Throws CheckpointError when parameter names or shapes differ.
  void restore(const Checkpoint& checkpoint);

 private:
  RunConfig config_;
  std::unique_ptr<VecEnv> envs_;
  std::unique_ptr<Agent<T>> agent_;
  std::unique_ptr<Collector<T>> collector_;
  std::unique_ptr<Trainer<T>> trainer_;
  std::size_t batch_ = 0;
  std::size_t episodes_ = 0;
  RollingScore scores_;
};

// Environment and agent shapes filled in from the environment (actions,
// encoder input); the returned config is what a Session actually runs.
RunConfig bind_environment(RunConfig config, const Env& probe);

template <typename T>
void save_agent(const Agent<T>& agent, Checkpoint& checkpoint);
template <typename T>
void load_agent(Agent<T>& agent, const Checkpoint& checkpoint);

// --- commands -------------------------------------------------------------

struct TrainOptions {
  bool resume = false;     // continue from out/checkpoint.p4o
  bool progress = false;   // one line per batch on stderr
};

// Returns the records written by this invocation.
std::vector<MetricsRecord> cmd_train(const RunConfig& config, const TrainOptions& options = {});

struct EvalSummary {
  std::vector<double> scores;
  double mean = 0, min = 0, max = 0, stddev = 0;
  nlohmann::json to_json() const;
};

// Episodes use seeds split off `seed`. Deterministic mode takes the argmax of
// the action probabilities. `config` (when given) must describe the same
// network as the checkpoint; the environment may differ in wrappers only.
EvalSummary cmd_eval(const std::filesystem::path& checkpoint, bool deterministic, std::size_t episodes,
                     std::uint64_t seed, const std::optional<RunConfig>& config = std::nullopt);

struct Histogram {
  double lo = -1.0, hi = 1.0;
  std::vector<std::size_t> counts;
  std::size_t total() const;
  nlohmann::json to_json() const;
};

// Fixed equal-width bins over [lo, hi]; values outside land in the edge bins.
// NaNs throw NumericError.
Histogram histogram(std::span<const double> values, std::size_t bins = 20, double lo = -1.0, double hi = 1.0);

// 1 - SS_res / SS_tot over a [samples, dims] layout, SS_tot taken about the
// per-dimension means and pooled. Undefined when SS_tot is zero.
std::optional<double> r_squared(std::span<const double> prediction, std::span<const double> target,
                                std::size_t dims);

inline constexpr double kReferenceR2 = 0.89;

struct DiagnoseReport {
  std::size_t samples = 0;  // (step, env) pairs with a defined prediction
  Histogram latents, predictions, errors;
  std::optional<double> r2;
  std::vector<std::string> warnings;
  nlohmann::json to_json() const;
};

// Runs the stochastic policy for `steps` steps on the checkpoint's
// environment set and scores p_{t-1} against x_t. The first step of each
// episode has no prediction (the state was reset) and is skipped.
DiagnoseReport cmd_diagnose(const std::filesystem::path& checkpoint, std::size_t steps, std::uint64_t seed);

struct WelchResult {
  double mean_a = 0, mean_b = 0, se_a = 0, se_b = 0;
  double difference = 0;  // mean_a - mean_b
  double t = 0, df = 0;
  double p_one_tailed = 0;  // H1: mean_a > mean_b
};

// Unequal-variance two-sample t test. Needs two values per side; throws
// ConfigError otherwise. Zero pooled variance gives t = 0, p = 0.5 when the
// means agree and t = +-inf otherwise.
WelchResult welch_one_tailed(std::span<const double> a, std::span<const double> b);

struct CurvePoint {
  std::uint64_t frames = 0;
  std::optional<double> rolling_mean;
};

// Rolling mean of `records` at each frame count of `grid`: the last record
// at or before the frame count.
std::vector<CurvePoint> align_curve(const std::vector<MetricsRecord>& records, std::span<const std::uint64_t> grid);

struct CompareReport {
  std::vector<std::uint64_t> seeds;
  std::vector<double> final_a, final_b;  // final rolling means per seed
  WelchResult test;
  std::vector<std::uint64_t> frames;     // common grid
  std::vector<std::vector<CurvePoint>> curves_a, curves_b;
  nlohmann::json to_json() const;
};

// Trains both configurations for every seed (seed, seed+1, ...) under
// out/a-<seed> and out/b-<seed>, then tests final rolling means. Needs at
// least two seeds.
CompareReport cmd_compare(const RunConfig& a, const RunConfig& b, std::size_t seeds, const std::filesystem::path& out,
                          bool progress = false);

}  // namespace p4o
