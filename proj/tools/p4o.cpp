// Copyright 2026 The P4O Authors
// SPDX-License-Identifier: Apache-2.0
//
// p4o train | eval | diagnose | compare
//
// Configuration precedence: flags > P4O_* environment variables > --config
// file > defaults. Exit codes: 0 ok, 1 other failure, 2 configuration error,
// 3 numeric failure.

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "p4o/errors.hpp"
#include "p4o/harness.hpp"

namespace {

using nlohmann::json;

struct CommonFlags {
  std::optional<std::string> config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> variant, env, out;
  std::optional<std::size_t> batches;
  std::optional<int> precision;

  void attach(CLI::App* app) {
    app->add_option("--config", config, "flat JSON config file");
    app->add_option("--seed", seed, "run seed");
    app->add_option("--variant", variant, "p4o | lstm-ppo-1024 | lstm-ppo-800 | p4o-no-pp");
    app->add_option("--env", env, "pixel-catch | tmaze | external");
    app->add_option("--batches", batches, "number of training batches");
    app->add_option("--out", out, "output directory");
    app->add_option("--precision", precision, "32 | 64")->check(CLI::IsMember({32, 64}));
  }

  json as_json() const {
    json j = json::object();
    if (seed) j["seed"] = *seed;
    if (variant) j["variant"] = *variant;
    if (env) j["env"] = *env;
    if (batches) j["batches"] = *batches;
    if (out) j["out"] = *out;
    if (precision) j["precision"] = *precision;
    return j;
  }

  p4o::RunConfig resolve() const {
    std::optional<std::filesystem::path> file;
    if (config) file = *config;
    return p4o::resolve_config(file, p4o::process_environment(), as_json());
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"P4O: recurrent PPO with a predictive-coding world model"};
  app.require_subcommand(1);

  CommonFlags train_flags;
  bool resume = false, quiet = false;
  auto* train = app.add_subcommand("train", "train an agent; writes metrics and checkpoints under --out");
  train_flags.attach(train);
  train->add_flag("--resume", resume, "continue from <out>/checkpoint.p4o");
  train->add_flag("--quiet", quiet, "no per-batch progress on stderr");

  CommonFlags eval_flags;
  std::string eval_ckpt;
  std::size_t episodes = 10;
  bool deterministic = false;
  auto* eval = app.add_subcommand("eval", "score a checkpoint");
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  eval->add_option("--episodes", episodes, "episodes to run");
  eval->add_flag("--deterministic", deterministic, "argmax actions instead of sampling");
  eval_flags.attach(eval);

  std::string diag_ckpt;
  std::size_t diag_steps = 500;
  std::uint64_t diag_seed = 0;
  auto* diagnose = app.add_subcommand("diagnose", "latent, prediction and error histograms plus prediction R^2");
  diagnose->add_option("--checkpoint", diag_ckpt, "checkpoint file")->required();
  diagnose->add_option("--steps", diag_steps, "environment steps to sample");
  diagnose->add_option("--seed", diag_seed, "seed for environments and actions");

  CommonFlags cmp_flags;
  std::optional<std::string> config_b, variant_b;
  std::size_t seeds = 5;
  auto* compare = app.add_subcommand("compare", "train two configurations over several seeds and t-test them");
  cmp_flags.attach(compare);
  compare->add_option("--config-b", config_b, "config file of the second arm (default: same as --config)");
  compare->add_option("--variant-b", variant_b, "variant of the second arm");
  compare->add_option("--seeds", seeds, "seeds per arm (at least 2)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*train) {
      p4o::cmd_train(train_flags.resolve(), {resume, !quiet});
    } else if (*eval) {
      std::optional<p4o::RunConfig> cfg;
      if (!eval_flags.as_json().empty() || eval_flags.config) cfg = eval_flags.resolve();
      const auto s = p4o::cmd_eval(eval_ckpt, deterministic, episodes, eval_flags.seed.value_or(0), cfg);
      std::cout << s.to_json().dump(2) << '\n';
    } else if (*diagnose) {
      const auto r = p4o::cmd_diagnose(diag_ckpt, diag_steps, diag_seed);
      for (const auto& w : r.warnings) std::cerr << "warning: " << w << '\n';
      std::cout << r.to_json().dump(2) << '\n';
    } else if (*compare) {
      const p4o::RunConfig a = cmp_flags.resolve();
      CommonFlags b_flags = cmp_flags;
      if (config_b) b_flags.config = *config_b;
      if (variant_b) b_flags.variant = *variant_b;
      const p4o::RunConfig b = b_flags.resolve();
      const auto rep = p4o::cmd_compare(a, b, seeds, a.out, true);
      std::cout << "a: " << rep.test.mean_a << " +- " << rep.test.se_a << "\n"
                << "b: " << rep.test.mean_b << " +- " << rep.test.se_b << "\n"
                << "difference " << rep.test.difference << ", Welch t " << rep.test.t << " (df " << rep.test.df
                << "), one-tailed p " << rep.test.p_one_tailed << '\n';
    }
  } catch (const p4o::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const p4o::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
