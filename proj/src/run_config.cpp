// Copyright 2026 The P4O Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <functional>

#include "p4o/errors.hpp"
#include "p4o/harness.hpp"

extern char** environ;

namespace p4o {

namespace {

using nlohmann::json;

struct Key {
  std::string name;
  std::function<json(const RunConfig&)> get;
  std::function<void(RunConfig&, const json&)> set;
};

[[noreturn]] void bad_value(const std::string& key, const json& v, const std::string& expected) {
  throw ConfigError("config key '" + key + "': expected " + expected + ", got " + v.dump());
}

bool nonnegative_integer(const json& v) {
  return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
}

// Accessors take a mutable config; the getter works on a copy.
template <typename F>
Key unsigned_key(std::string name, F ref) {
  return {name, [ref](const RunConfig& c) { RunConfig copy = c; return json(ref(copy)); },
          [ref, name](RunConfig& c, const json& v) {
            if (!nonnegative_integer(v)) bad_value(name, v, "a nonnegative integer");
            ref(c) = v.get<std::remove_reference_t<decltype(ref(c))>>();
          }};
}

template <typename F>
Key real_key(std::string name, F ref) {
  return {name, [ref](const RunConfig& c) { RunConfig copy = c; return json(ref(copy)); },
          [ref, name](RunConfig& c, const json& v) {
            if (!v.is_number()) bad_value(name, v, "a number");
            ref(c) = v.get<double>();
          }};
}

template <typename F>
Key bool_key(std::string name, F ref) {
  return {name, [ref](const RunConfig& c) { RunConfig copy = c; return json(ref(copy)); },
          [ref, name](RunConfig& c, const json& v) {
            if (!v.is_boolean()) bad_value(name, v, "true or false");
            ref(c) = v.get<bool>();
          }};
}

template <typename F>
Key string_key(std::string name, F ref) {
  return {name, [ref](const RunConfig& c) { RunConfig copy = c; return json(ref(copy)); },
          [ref, name](RunConfig& c, const json& v) {
            if (!v.is_string()) bad_value(name, v, "a string");
            ref(c) = v.get<std::string>();
          }};
}

template <typename E>
Key enum_key(std::string name, std::function<E&(RunConfig&)> ref, std::vector<std::pair<std::string, E>> names) {
  return {name,
          [ref, names](const RunConfig& c) {
            RunConfig copy = c;
            for (const auto& [s, e] : names) {
              if (e == ref(copy)) return json(s);
            }
            return json(nullptr);
          },
          [ref, names, name](RunConfig& c, const json& v) {
            std::string allowed;
            for (const auto& [s, e] : names) {
              if (v.is_string() && v.get<std::string>() == s) {
                ref(c) = e;
                return;
              }
              allowed += (allowed.empty() ? "" : " | ") + s;
            }
            bad_value(name, v, allowed);
          }};
}

const std::vector<Key>& key_table() {
  static const std::vector<Key> table = [] {
    std::vector<Key> k;
    k.push_back({"preset", [](const RunConfig& c) { return json(c.preset); },
                 [](RunConfig& c, const json& v) {
                   if (!v.is_string() || (v != "toy" && v != "full")) bad_value("preset", v, "toy | full");
                   c.preset = v.get<std::string>();
                 }});
    k.push_back({"variant", [](const RunConfig& c) { return json(variant_name(c.agent.variant)); },
                 [](RunConfig& c, const json& v) {
                   if (!v.is_string()) bad_value("variant", v, "a variant name");
                   c.agent.variant = parse_variant(v.get<std::string>());
                 }});
    // Environment.
    k.push_back({"env", [](const RunConfig& c) { return json(c.env.name); },
                 [](RunConfig& c, const json& v) {
                   if (!v.is_string() || (v != "pixel-catch" && v != "tmaze" && v != "external")) {
                     bad_value("env", v, "pixel-catch | tmaze | external");
                   }
                   c.env.name = v.get<std::string>();
                 }});
    k.push_back(unsigned_key("grid", [](RunConfig& c) -> std::size_t& { return c.env.grid; }));
    k.push_back(unsigned_key("tmaze_length", [](RunConfig& c) -> std::size_t& { return c.env.tmaze_length; }));
    k.push_back(unsigned_key("frame_stack", [](RunConfig& c) -> std::size_t& { return c.env.frame_stack; }));
    k.push_back(real_key("sticky_actions", [](RunConfig& c) -> double& { return c.env.sticky_actions; }));
    k.push_back(bool_key("clip_rewards", [](RunConfig& c) -> bool& { return c.env.clip_rewards; }));
    k.push_back(string_key("env_command", [](RunConfig& c) -> std::string& { return c.env.command; }));
    k.push_back(unsigned_key("resize", [](RunConfig& c) -> std::size_t& { return c.env.resize; }));
    k.push_back({"env_timeout_ms", [](const RunConfig& c) { return json(c.env.timeout_ms); },
                 [](RunConfig& c, const json& v) {
                   if (!nonnegative_integer(v) || v.get<std::uint64_t>() < 1 || v.get<std::uint64_t>() > 3600000) {
                     bad_value("env_timeout_ms", v, "an integer in [1, 3600000]");
                   }
                   c.env.timeout_ms = v.get<int>();
                 }});
    // Network sizes.
    k.push_back({"channels", [](const RunConfig& c) { return json(c.agent.encoder.channels); },
                 [](RunConfig& c, const json& v) {
                   if (!v.is_array() || v.size() != 4 ||
                       !std::all_of(v.begin(), v.end(), [](const json& x) { return nonnegative_integer(x); })) {
                     bad_value("channels", v, "an array of 4 nonnegative integers");
                   }
                   for (std::size_t i = 0; i < 4; ++i) c.agent.encoder.channels[i] = v[i].get<std::size_t>();
                 }});
    k.push_back(unsigned_key("latent_dim", [](RunConfig& c) -> std::size_t& { return c.agent.encoder.latent_dim; }));
    k.push_back(unsigned_key("belief_dim", [](RunConfig& c) -> std::size_t& { return c.agent.belief_dim; }));
    k.push_back(unsigned_key("horizon", [](RunConfig& c) -> std::size_t& { return c.agent.horizon; }));
    // Batch geometry and optimisation.
    k.push_back(unsigned_key("num_envs", [](RunConfig& c) -> std::size_t& { return c.agent.num_envs; }));
    k.push_back(unsigned_key("steps_per_batch", [](RunConfig& c) -> std::size_t& { return c.agent.steps_per_batch; }));
    k.push_back(real_key("gamma", [](RunConfig& c) -> double& { return c.agent.gamma; }));
    k.push_back(real_key("gae_lambda", [](RunConfig& c) -> double& { return c.agent.gae_lambda; }));
    k.push_back(unsigned_key("epochs_per_batch",
                             [](RunConfig& c) -> std::size_t& { return c.agent.schedule.epochs_per_batch; }));
    k.push_back(unsigned_key("minibatches", [](RunConfig& c) -> std::size_t& { return c.agent.schedule.minibatches; }));
    k.push_back(real_key("learning_rate", [](RunConfig& c) -> double& { return c.agent.schedule.lr0; }));
    k.push_back(enum_key<LrDecay>(
        "lr_decay", [](RunConfig& c) -> LrDecay& { return c.agent.schedule.decay; },
        {{"short", LrDecay::short_run}, {"long", LrDecay::long_run}}));
    k.push_back(real_key("clip_epsilon", [](RunConfig& c) -> double& { return c.agent.schedule.clip_epsilon; }));
    k.push_back(real_key("actor_coef", [](RunConfig& c) -> double& { return c.agent.coefficients.actor; }));
    k.push_back(real_key("critic_coef", [](RunConfig& c) -> double& { return c.agent.coefficients.critic; }));
    k.push_back(real_key("prediction_coef", [](RunConfig& c) -> double& { return c.agent.coefficients.prediction; }));
    k.push_back(real_key("entropy_coef", [](RunConfig& c) -> double& { return c.agent.coefficients.entropy; }));
    k.push_back(real_key("l1_coef", [](RunConfig& c) -> double& { return c.agent.coefficients.l1; }));
    k.push_back(bool_key("l1_enabled", [](RunConfig& c) -> bool& { return c.agent.coefficients.l1_enabled; }));
    k.push_back(real_key("entropy_decay", [](RunConfig& c) -> double& { return c.agent.entropy_decay; }));
    k.push_back(real_key("adam_epsilon", [](RunConfig& c) -> double& { return c.agent.adam_epsilon; }));
    k.push_back(real_key("max_grad_norm", [](RunConfig& c) -> double& { return c.agent.max_grad_norm; }));
    k.push_back(bool_key("normalize_advantages",
                         [](RunConfig& c) -> bool& { return c.agent.normalize_advantages; }));
    k.push_back(enum_key<AdvantageRefresh>(
        "advantage_refresh", [](RunConfig& c) -> AdvantageRefresh& { return c.agent.advantage_refresh; },
        {{"per-epoch", AdvantageRefresh::per_epoch}, {"per-minibatch", AdvantageRefresh::per_minibatch}}));
    k.push_back(bool_key("detach_prediction_targets",
                         [](RunConfig& c) -> bool& { return c.agent.detach_prediction_targets; }));
    k.push_back(bool_key("anchor_first_update", [](RunConfig& c) -> bool& { return c.agent.anchor_first_update; }));
    // Run.
    k.push_back(unsigned_key("seed", [](RunConfig& c) -> std::uint64_t& { return c.seed; }));
    k.push_back(unsigned_key("batches", [](RunConfig& c) -> std::size_t& { return c.batches; }));
    k.push_back({"out", [](const RunConfig& c) { return json(c.out.string()); },
                 [](RunConfig& c, const json& v) {
                   if (!v.is_string() || v.get<std::string>().empty()) bad_value("out", v, "a directory path");
                   c.out = v.get<std::string>();
                 }});
    k.push_back({"precision", [](const RunConfig& c) { return json(c.precision); },
                 [](RunConfig& c, const json& v) {
                   if (!nonnegative_integer(v) || (v != 32 && v != 64)) bad_value("precision", v, "32 | 64");
                   c.precision = v.get<int>();
                 }});
    k.push_back({"checkpoint_every", [](const RunConfig& c) { return json(c.checkpoint_every); },
                 [](RunConfig& c, const json& v) {
                   if (!nonnegative_integer(v) || v.get<std::uint64_t>() < 1) {
                     bad_value("checkpoint_every", v, "a positive integer");
                   }
                   c.checkpoint_every = v.get<std::size_t>();
                 }});
    return k;
  }();
  return table;
}

RunConfig preset_config(const std::string& name) {
  RunConfig c;
  c.preset = name;
  if (name == "toy") {
    c.agent = AgentConfig::toy();
    c.env.grid = 16;
  }
  return c;
}

}  // namespace

std::vector<std::string> RunConfig::keys() {
  std::vector<std::string> out;
  for (const auto& k : key_table()) out.push_back(k.name);
  return out;
}

nlohmann::json RunConfig::to_json() const {
  json j = json::object();
  for (const auto& k : key_table()) j[k.name] = k.get(*this);
  return j;
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object of key/value pairs");
  const auto& table = key_table();
  for (const auto& [name, value] : j.items()) {
    (void)value;
    if (std::none_of(table.begin(), table.end(), [&](const Key& k) { return k.name == name; })) {
      throw ConfigError("unknown config key '" + name + "'");
    }
  }
  std::string preset = "full";
  if (j.contains("preset")) {
    const json& v = j.at("preset");
    if (!v.is_string() || (v != "toy" && v != "full")) bad_value("preset", v, "toy | full");
    preset = v.get<std::string>();
  }
  RunConfig c = preset_config(preset);
  for (const auto& k : table) {
    if (k.name != "preset" && j.contains(k.name)) k.set(c, j.at(k.name));
  }
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  json j;
  try {
    j = json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

nlohmann::json environment_overrides(const std::map<std::string, std::string>& environment) {
  const std::string prefix = kEnvPrefix;
  const json defaults = RunConfig{}.to_json();
  json out = json::object();
  for (const auto& [var, text] : environment) {
    if (var.rfind(prefix, 0) != 0 || var == kIsaVariable) continue;
    std::string key = var.substr(prefix.size());
    for (char& ch : key) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    if (!defaults.contains(key)) throw ConfigError("environment variable " + var + " names no config key");
    if (defaults.at(key).is_string()) {
      out[key] = text;
      continue;
    }
    try {
      out[key] = json::parse(text);
    } catch (const json::parse_error&) {
      throw ConfigError("environment variable " + var + ": cannot parse '" + text + "'");
    }
  }
  return out;
}

std::map<std::string, std::string> process_environment() {
  std::map<std::string, std::string> out;
  for (char** e = environ; e && *e; ++e) {
    const std::string entry = *e;
    const auto eq = entry.find('=');
    if (eq != std::string::npos) out[entry.substr(0, eq)] = entry.substr(eq + 1);
  }
  return out;
}

RunConfig resolve_config(const std::optional<std::filesystem::path>& file,
                         const std::map<std::string, std::string>& environment, const nlohmann::json& flags) {
  json merged = json::object();
  if (file) merged = RunConfig::load(*file).to_json();
  merged.update(environment_overrides(environment));
  if (!flags.is_null()) merged.update(flags);
  return RunConfig::from_json(merged);
}

// --- metrics ----------------------------------------------------------------

nlohmann::json MetricsRecord::to_json() const {
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  return {{"batch", batch},
          {"frames", frames},
          {"episode_scores", episode_scores},
          {"episodes_total", episodes_total},
          {"rolling_mean", opt(rolling_mean)},
          {"rolling_stderr", opt(rolling_stderr)},
          {"loss_actor", actor},
          {"loss_critic", critic},
          {"loss_prediction", prediction},
          {"loss_l1", l1},
          {"loss_total", total},
          {"entropy", entropy},
          {"prediction_weight", prediction_weight},
          {"learning_rate", learning_rate},
          {"entropy_coefficient", entropy_coefficient},
          {"clip_fraction", clip_fraction},
          {"grad_norm", grad_norm},
          {"optimizer_steps", optimizer_steps}};
}

MetricsRecord MetricsRecord::from_json(const nlohmann::json& j) {
  auto opt = [&](const char* k) -> std::optional<double> {
    return j.at(k).is_null() ? std::nullopt : std::optional<double>(j.at(k).get<double>());
  };
  MetricsRecord r;
  r.batch = j.at("batch").get<std::size_t>();
  r.frames = j.at("frames").get<std::uint64_t>();
  r.episode_scores = j.at("episode_scores").get<std::vector<double>>();
  r.episodes_total = j.at("episodes_total").get<std::size_t>();
  r.rolling_mean = opt("rolling_mean");
  r.rolling_stderr = opt("rolling_stderr");
  r.actor = j.at("loss_actor").get<double>();
  r.critic = j.at("loss_critic").get<double>();
  r.prediction = j.at("loss_prediction").get<double>();
  r.l1 = j.at("loss_l1").get<double>();
  r.total = j.at("loss_total").get<double>();
  r.entropy = j.at("entropy").get<double>();
  r.prediction_weight = j.at("prediction_weight").get<double>();
  r.learning_rate = j.at("learning_rate").get<double>();
  r.entropy_coefficient = j.at("entropy_coefficient").get<double>();
  r.clip_fraction = j.at("clip_fraction").get<double>();
  r.grad_norm = j.at("grad_norm").get<double>();
  r.optimizer_steps = j.at("optimizer_steps").get<std::size_t>();
  return r;
}

std::vector<MetricsRecord> read_metrics(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read metrics file " + path.string());
  std::vector<MetricsRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(MetricsRecord::from_json(json::parse(line)));
  }
  return out;
}

void RollingScore::add(double score) {
  scores_.push_back(score);
  if (scores_.size() > window_) scores_.pop_front();
}

// Plain left-to-right sums, so an offline recomputation agrees bit for bit.
std::optional<double> RollingScore::mean() const {
  if (scores_.empty()) return std::nullopt;
  double s = 0.0;
  for (double x : scores_) s += x;
  return s / static_cast<double>(scores_.size());
}

std::optional<double> RollingScore::stderr_of_mean() const {
  if (scores_.size() < 2) return std::nullopt;
  const double m = *mean();
  double ss = 0.0;
  for (double x : scores_) ss += (x - m) * (x - m);
  const double n = static_cast<double>(scores_.size());
  return std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
}

void RollingScore::assign(const std::vector<double>& scores) {
  scores_.clear();
  for (double s : scores) add(s);
}

}  // namespace p4o
