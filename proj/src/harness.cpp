// Copyright 2026 The P4O Authors
// SPDX-License-Identifier: Apache-2.0

#include "p4o/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <limits>
#include <set>

#include <boost/math/distributions/students_t.hpp>

#include "p4o/errors.hpp"
#include "p4o/ops.hpp"

namespace p4o {

namespace fs = std::filesystem;
using nlohmann::json;

RunConfig bind_environment(RunConfig config, const Env& probe) {
  const ObsShape s = probe.observation_shape();
  config.agent.actions = static_cast<std::size_t>(probe.action_count());
  config.agent.encoder.in_channels = s.channels;
  config.agent.encoder.in_height = s.height;
  config.agent.encoder.in_width = s.width;
  config.agent.validate();
  return config;
}

template <typename T>
void save_agent(const Agent<T>& agent, Checkpoint& checkpoint) {
  for (const auto& p : agent.params().entries()) {
    const auto v = p.array.values();
    checkpoint.add("param/" + p.name, p.array.shape(), std::vector<double>(v.begin(), v.end()));
  }
}

template <typename T>
void load_agent(Agent<T>& agent, const Checkpoint& checkpoint) {
  const std::size_t stored = static_cast<std::size_t>(std::count_if(
      checkpoint.entries.begin(), checkpoint.entries.end(),
      [](const CheckpointEntry& e) { return e.name.rfind("param/", 0) == 0; }));
  if (stored != agent.params().tensor_count()) {
    throw CheckpointError("checkpoint/config mismatch: checkpoint holds " + std::to_string(stored) +
                          " parameter tensors, the configured agent has " +
                          std::to_string(agent.params().tensor_count()));
  }
  std::vector<T> flat;
  flat.reserve(agent.params().scalar_count());
  for (const auto& p : agent.params().entries()) {
    const std::string key = "param/" + p.name;
    if (!checkpoint.contains(key)) throw CheckpointError("checkpoint/config mismatch: no parameter " + p.name);
    const auto& e = checkpoint.at(key);
    if (e.shape != p.array.shape()) {
      throw CheckpointError("checkpoint/config mismatch: " + p.name + " is " + shape_string(e.shape) +
                            " in the checkpoint, " + shape_string(p.array.shape()) + " in the agent");
    }
    for (double x : e.values) flat.push_back(static_cast<T>(x));
  }
  agent.params().assign(flat);
  agent.mark_updated();
}

// --- Session ----------------------------------------------------------------

template <typename T>
Session<T>::Session(RunConfig config) : config_(std::move(config)) {
  const Rng root(config_.seed);
  std::vector<std::unique_ptr<Env>> envs;
  for (std::size_t i = 0; i < config_.agent.num_envs; ++i) envs.push_back(make_env(config_.env));
  if (envs.empty()) throw ConfigError("num_envs must be positive");
  config_ = bind_environment(config_, *envs.front());
  envs_ = std::make_unique<VecEnv>(std::move(envs), root.split(2).split(0).next_u64());
  agent_ = std::make_unique<Agent<T>>(config_.agent, root.split(1).split(0).next_u64());
  collector_ = std::make_unique<Collector<T>>(*agent_, *envs_, root.split(3));
  trainer_ = std::make_unique<Trainer<T>>(*agent_);
}

template <typename T>
Session<T>::~Session() = default;

template <typename T>
MetricsRecord Session<T>::train_batch(const std::optional<fs::path>& failure_dump) {
  const auto t0 = std::chrono::steady_clock::now();
  RolloutBuffer<T> buffer = collector_->collect();
  trainer_->attach_anchor(buffer);
  BatchMetrics m;
  try {
    m = trainer_->train_on_batch(buffer, batch_);
  } catch (const NumericError&) {
    if (failure_dump) buffer.dump(*failure_dump);
    throw;
  }
  collector_->set_state(buffer.final_state);

  MetricsRecord r;
  r.batch = batch_;
  r.frames = collector_->frames();
  for (const auto& e : collector_->take_finished()) {
    r.episode_scores.push_back(e.score);
    scores_.add(e.score);
    ++episodes_;
  }
  r.episodes_total = episodes_;
  r.rolling_mean = scores_.mean();
  r.rolling_stderr = scores_.stderr_of_mean();
  r.actor = m.mean.actor;
  r.critic = m.mean.critic;
  r.prediction = m.mean.prediction;
  r.entropy = m.mean.entropy;
  r.l1 = m.mean.l1;
  r.total = m.mean.total;
  r.prediction_weight = config_.agent.prediction_weight();
  r.learning_rate = m.learning_rate;
  r.entropy_coefficient = m.entropy_coefficient;
  r.clip_fraction = m.mean.clip_fraction;
  r.grad_norm = m.mean.grad_norm;
  r.optimizer_steps = m.optimizer_steps;
  r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  ++batch_;
  return r;
}

template <typename T>
Checkpoint Session<T>::checkpoint() const {
  Checkpoint ck;
  ck.metadata["config"] = config_.to_json();
  ck.metadata["precision"] = config_.precision;
  ck.metadata["batch"] = batch_;
  ck.metadata["episodes"] = episodes_;
  ck.metadata["scores"] = std::vector<double>(scores_.scores().begin(), scores_.scores().end());
  ck.metadata["collector"] = collector_->save_state();
  try {
    ck.metadata["envs"] = envs_->save_state();
  } catch (const EnvError&) {
    ck.metadata["envs"] = nullptr;  // external environments cannot be snapshotted
  }
  save_agent(*agent_, ck);
  const auto& adam = trainer_->optimizer();
  ck.metadata["adam_steps"] = adam.steps();
  auto m = adam.first_moments(), v = adam.second_moments();
  const std::size_t n = m.size();
  ck.add("adam/m", {n}, std::move(m));
  ck.add("adam/v", {n}, std::move(v));
  if (const auto& anchor = trainer_->anchor_parameters()) {
    ck.add("anchor", {anchor->size()}, std::vector<double>(anchor->begin(), anchor->end()));
  }
  return ck;
}

template <typename T>
void Session<T>::restore(const Checkpoint& ck) {
  if (ck.metadata.at("envs").is_null()) {
    throw CheckpointError("checkpoint has no environment state; runs on external environments cannot resume");
  }
  load_agent(*agent_, ck);
  const auto& m = ck.at("adam/m").values;
  const auto& v = ck.at("adam/v").values;
  trainer_->optimizer().restore(ck.metadata.at("adam_steps").get<std::size_t>(), m, v);
  if (ck.contains("anchor")) {
    const auto& a = ck.at("anchor").values;
    trainer_->set_anchor_parameters(std::vector<T>(a.begin(), a.end()));
  } else {
    trainer_->set_anchor_parameters(std::nullopt);
  }
  envs_->load_state(ck.metadata.at("envs"));
  collector_->load_state(ck.metadata.at("collector"));
  batch_ = ck.metadata.at("batch").get<std::size_t>();
  episodes_ = ck.metadata.at("episodes").get<std::size_t>();
  scores_.assign(ck.metadata.at("scores").get<std::vector<double>>());
}

// --- train ------------------------------------------------------------------

namespace {

const fs::path kCheckpointName = "checkpoint.p4o";

void append_line(const fs::path& path, const std::string& line) {
  std::ofstream out(path, std::ios::app);
  out << line << '\n';
  if (!out) throw std::runtime_error("cannot append to " + path.string());
}

// Keeps the lines for which keep(line) holds; used to drop rows logged after
// the checkpoint a run resumes from.
template <typename Pred>
void filter_lines(const fs::path& path, Pred keep) {
  if (!fs::exists(path)) return;
  std::vector<std::string> lines;
  {
    std::ifstream in(path);
    std::string line;
    while (std::getline(in, line)) {
      if (keep(line)) lines.push_back(line);
    }
  }
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : lines) out << l << '\n';
}

std::string fmt_opt(const std::optional<double>& v) {
  if (!v) return "";
  json j = *v;
  return j.dump();
}

// Everything but the run length and location must agree to resume.
json resumable_part(json config) {
  config.erase("batches");
  config.erase("out");
  config.erase("checkpoint_every");
  return config;
}

template <typename T>
std::vector<MetricsRecord> train_impl(const RunConfig& config, const TrainOptions& options) {
  const fs::path out = config.out;
  fs::create_directories(out);
  const fs::path metrics = out / "metrics.jsonl", timing = out / "timing.jsonl", curve = out / "curve.csv";
  Session<T> session(config);

  if (options.resume) {
    const Checkpoint ck = read_checkpoint(out / kCheckpointName);
    if (resumable_part(ck.metadata.at("config")) != resumable_part(config.to_json())) {
      throw ConfigError("cannot resume: configuration differs from the checkpoint in " + out.string());
    }
    session.restore(ck);
    const std::size_t next = session.batch();
    auto before = [next](const std::string& line) {
      return !line.empty() && json::parse(line).at("batch").get<std::size_t>() < next;
    };
    filter_lines(metrics, before);
    filter_lines(timing, before);
    filter_lines(curve, [next](const std::string& line) {
      if (line.rfind("batch,", 0) == 0) return true;
      return std::stoull(line.substr(0, line.find(','))) < next;
    });
  } else {
    if (fs::exists(metrics) && fs::file_size(metrics) > 0) {
      throw ConfigError(out.string() + " already holds a run; pass --resume or choose another --out");
    }
    for (const auto& p : {metrics, timing, curve}) fs::remove(p);
    append_line(curve, "batch,frames,rolling_mean,stderr");
  }
  {
    std::ofstream cfg(out / "config.json");
    cfg << config.to_json().dump(2) << '\n';
  }

  std::vector<MetricsRecord> written;
  auto save = [&] { write_checkpoint(out / kCheckpointName, session.checkpoint()); };
  while (session.batch() < config.batches) {
    MetricsRecord r;
    try {
      r = session.train_batch(out / "failure_buffer.bin");
    } catch (const NumericError& e) {
      std::ofstream f(out / "failure.json");
      f << json{{"batch", session.batch()}, {"error", e.what()}}.dump(2) << '\n';
      throw;
    }
    append_line(metrics, r.to_json().dump());
    append_line(timing, json{{"batch", r.batch}, {"wall_seconds", r.wall_seconds}}.dump());
    append_line(curve, std::to_string(r.batch) + "," + std::to_string(r.frames) + "," + fmt_opt(r.rolling_mean) +
                           "," + fmt_opt(r.rolling_stderr));
    if (options.progress) {
      std::cerr << "batch " << r.batch << "  frames " << r.frames << "  rolling "
                << (r.rolling_mean ? std::to_string(*r.rolling_mean) : "-") << "  prediction " << r.prediction
                << "  entropy " << r.entropy << "  " << r.wall_seconds << " s\n";
    }
    written.push_back(std::move(r));
    if (session.batch() % config.checkpoint_every == 0) save();
  }
  save();
  return written;
}

}  // namespace

std::vector<MetricsRecord> cmd_train(const RunConfig& config, const TrainOptions& options) {
  return config.precision == 64 ? train_impl<double>(config, options) : train_impl<float>(config, options);
}

// --- eval -------------------------------------------------------------------

namespace {

struct Loaded {
  Checkpoint checkpoint;
  RunConfig config;  // bound to the environment
};

Loaded load_for_inference(const fs::path& path, const std::optional<RunConfig>& override_config, const Env& probe) {
  Loaded l{read_checkpoint(path), {}};
  const RunConfig saved = RunConfig::from_json(l.checkpoint.metadata.at("config"));
  l.config = bind_environment(override_config ? *override_config : saved, probe);
  if (l.config.agent.variant != saved.agent.variant) {
    throw CheckpointError("checkpoint/config mismatch: checkpoint is " + variant_name(saved.agent.variant) +
                          ", config asks for " + variant_name(l.config.agent.variant));
  }
  return l;
}

int argmax(std::span<const double> probs) {
  return static_cast<int>(std::max_element(probs.begin(), probs.end()) - probs.begin());
}

template <typename T>
EvalSummary eval_impl(const Loaded& l, Env& env, bool deterministic, std::size_t episodes, std::uint64_t seed) {
  Agent<T> agent(l.config.agent, 0);
  load_agent(agent, l.checkpoint);
  NoGradGuard no_grad;
  const Rng root(seed);
  EvalSummary s;
  for (std::size_t k = 0; k < episodes; ++k) {
    Rng rng = root.split(k);
    std::vector<std::uint8_t> obs = env.reset(rng.next_u64());
    RecurrentState<T> state = agent.initial_state(1);
    double score = 0.0;
    for (;;) {
      const DiffArray<T> x = agent.encoder().forward(frames_to_array<T>(obs, 1, l.config.agent.encoder));
      const auto out = agent.step(x, state);
      int action;
      if (deterministic) {
        std::vector<double> p(out.policy.probs.begin(), out.policy.probs.end());
        action = argmax(p);
      } else {
        action = categorical_sample(out.policy.logits, rng);
      }
      EnvStep st = env.step(action);
      score += st.reward;
      if (st.terminal) break;
      obs = std::move(st.observation);
      state = out.core.state;
    }
    s.scores.push_back(score);
  }
  const double n = static_cast<double>(episodes);
  double sum = 0.0;
  for (double x : s.scores) sum += x;
  s.mean = sum / n;
  s.min = *std::min_element(s.scores.begin(), s.scores.end());
  s.max = *std::max_element(s.scores.begin(), s.scores.end());
  double ss = 0.0;
  for (double x : s.scores) ss += (x - s.mean) * (x - s.mean);
  s.stddev = episodes > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
  return s;
}

}  // namespace

nlohmann::json EvalSummary::to_json() const {
  return {{"episodes", scores.size()}, {"mean", mean}, {"min", min}, {"max", max}, {"stddev", stddev},
          {"scores", scores}};
}

EvalSummary cmd_eval(const fs::path& checkpoint, bool deterministic, std::size_t episodes, std::uint64_t seed,
                     const std::optional<RunConfig>& config) {
  if (episodes < 1) throw ConfigError("eval needs at least one episode");
  const Checkpoint header = read_checkpoint(checkpoint);
  const RunConfig base = config ? *config : RunConfig::from_json(header.metadata.at("config"));
  auto env = make_env(base.env);
  const Loaded l = load_for_inference(checkpoint, config, *env);
  return l.config.precision == 64 ? eval_impl<double>(l, *env, deterministic, episodes, seed)
                                  : eval_impl<float>(l, *env, deterministic, episodes, seed);
}

// --- diagnose ---------------------------------------------------------------

std::size_t Histogram::total() const {
  std::size_t t = 0;
  for (auto c : counts) t += c;
  return t;
}

nlohmann::json Histogram::to_json() const { return {{"lo", lo}, {"hi", hi}, {"counts", counts}}; }

Histogram histogram(std::span<const double> values, std::size_t bins, double lo, double hi) {
  if (bins < 1 || !(hi > lo)) throw ConfigError("histogram needs at least one bin and hi > lo");
  Histogram h{lo, hi, std::vector<std::size_t>(bins, 0)};
  const double width = (hi - lo) / static_cast<double>(bins);
  for (double v : values) {
    if (std::isnan(v)) throw NumericError("histogram: NaN value");
    const double pos = std::floor((v - lo) / width);
    const auto b = static_cast<std::size_t>(std::clamp(pos, 0.0, static_cast<double>(bins - 1)));
    ++h.counts[b];
  }
  return h;
}

std::optional<double> r_squared(std::span<const double> prediction, std::span<const double> target,
                                std::size_t dims) {
  if (prediction.size() != target.size() || dims == 0 || target.size() % dims != 0) {
    throw DimensionError("r_squared: prediction and target must both be [samples, dims]");
  }
  const std::size_t n = target.size() / dims;
  if (n == 0) return std::nullopt;
  std::vector<double> mean(dims, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t d = 0; d < dims; ++d) mean[d] += target[i * dims + d];
  }
  for (double& m : mean) m /= static_cast<double>(n);
  double ss_res = 0.0, ss_tot = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t d = 0; d < dims; ++d) {
      const double x = target[i * dims + d];
      ss_res += (prediction[i * dims + d] - x) * (prediction[i * dims + d] - x);
      ss_tot += (x - mean[d]) * (x - mean[d]);
    }
  }
  if (ss_tot == 0.0) return std::nullopt;
  return 1.0 - ss_res / ss_tot;
}

nlohmann::json DiagnoseReport::to_json() const {
  return {{"samples", samples},
          {"latents", latents.to_json()},
          {"predictions", predictions.to_json()},
          {"errors", errors.to_json()},
          {"r2", r2 ? json(*r2) : json(nullptr)},
          {"reference_r2", kReferenceR2},
          {"reference_note", "full-scale agents trained on Atari; not a target for small runs"},
          {"warnings", warnings}};
}

namespace {

template <typename T>
DiagnoseReport diagnose_impl(const Loaded& l, VecEnv& envs, std::size_t steps, std::uint64_t seed) {
  Agent<T> agent(l.config.agent, 0);
  load_agent(agent, l.checkpoint);
  if (!agent.core().predicts()) {
    throw ConfigError("diagnose needs a predicting variant, not " + variant_name(l.config.agent.variant));
  }
  NoGradGuard no_grad;
  const std::size_t N = envs.size(), p = agent.core().latent_dim(), A = l.config.agent.actions;
  Rng rng(seed);
  std::vector<Rng> rngs;
  for (std::size_t n = 0; n < N; ++n) rngs.push_back(rng.split(n));
  envs.reset_all();
  RecurrentState<T> state = agent.initial_state(N);
  std::vector<std::uint8_t> fresh(N, 1);
  std::vector<double> xs, ps, es;
  for (std::size_t t = 0; t < steps; ++t) {
    const DiffArray<T> x = agent.encoder().forward(frames_to_array<T>(envs.observations(), N, l.config.agent.encoder));
    const auto out = agent.step(x, state, static_cast<long>(t));
    for (std::size_t n = 0; n < N; ++n) {
      if (fresh[n]) continue;
      for (std::size_t d = 0; d < p; ++d) {
        xs.push_back(x.values()[n * p + d]);
        ps.push_back(state.p.values()[n * p + d]);
        es.push_back(out.core.error.values()[n * p + d]);
      }
    }
    std::vector<int> actions(N);
    for (std::size_t n = 0; n < N; ++n) {
      actions[n] = categorical_sample(out.policy.logits.values().subspan(n * A, A), rngs[n]);
    }
    const VecStep r = envs.step(actions);
    std::vector<T> keep(N);
    for (std::size_t n = 0; n < N; ++n) {
      fresh[n] = r.dones[n];
      keep[n] = r.dones[n] ? T{0} : T{1};
    }
    state = out.core.state.masked(keep);
  }
  DiagnoseReport rep;
  rep.samples = xs.size() / p;
  rep.latents = histogram(xs);
  rep.predictions = histogram(ps);
  rep.errors = histogram(es);
  rep.r2 = r_squared(ps, xs, p);
  if (!rep.r2) rep.warnings.push_back("latents have zero variance over the sampled steps; R^2 is undefined");
  return rep;
}

}  // namespace

DiagnoseReport cmd_diagnose(const fs::path& checkpoint, std::size_t steps, std::uint64_t seed) {
  if (steps < 2) throw ConfigError("diagnose needs at least two steps");
  const RunConfig saved = RunConfig::from_json(read_checkpoint(checkpoint).metadata.at("config"));
  std::vector<std::unique_ptr<Env>> envs;
  for (std::size_t i = 0; i < saved.agent.num_envs; ++i) envs.push_back(make_env(saved.env));
  const Loaded l = load_for_inference(checkpoint, std::nullopt, *envs.front());
  VecEnv vec(std::move(envs), seed);
  return l.config.precision == 64 ? diagnose_impl<double>(l, vec, steps, seed)
                                  : diagnose_impl<float>(l, vec, steps, seed);
}

// --- compare ----------------------------------------------------------------

WelchResult welch_one_tailed(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2) throw ConfigError("a t-test needs at least two values per side");
  auto moments = [](std::span<const double> v) {
    double m = 0.0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    return std::pair{m, ss / static_cast<double>(v.size() - 1)};
  };
  const auto [ma, va] = moments(a);
  const auto [mb, vb] = moments(b);
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  WelchResult r;
  r.mean_a = ma;
  r.mean_b = mb;
  r.se_a = std::sqrt(va / na);
  r.se_b = std::sqrt(vb / nb);
  r.difference = ma - mb;
  const double s2 = va / na + vb / nb;
  if (s2 == 0.0) {
    r.df = na + nb - 2.0;
    if (r.difference == 0.0) {
      r.t = 0.0;
      r.p_one_tailed = 0.5;
    } else {
      r.t = r.difference > 0 ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
      r.p_one_tailed = r.difference > 0 ? 0.0 : 1.0;
    }
    return r;
  }
  r.t = r.difference / std::sqrt(s2);
  r.df = s2 * s2 / ((va / na) * (va / na) / (na - 1.0) + (vb / nb) * (vb / nb) / (nb - 1.0));
  const boost::math::students_t dist(r.df);
  r.p_one_tailed = boost::math::cdf(boost::math::complement(dist, r.t));
  return r;
}

std::vector<CurvePoint> align_curve(const std::vector<MetricsRecord>& records, std::span<const std::uint64_t> grid) {
  std::vector<CurvePoint> out;
  std::size_t i = 0;
  std::optional<double> last;
  for (std::uint64_t f : grid) {
    while (i < records.size() && records[i].frames <= f) last = records[i++].rolling_mean;
    out.push_back({f, last});
  }
  return out;
}

nlohmann::json CompareReport::to_json() const {
  auto curves = [](const std::vector<std::vector<CurvePoint>>& c) {
    json all = json::array();
    for (const auto& run : c) {
      json pts = json::array();
      for (const auto& p : run) pts.push_back(p.rolling_mean ? json(*p.rolling_mean) : json(nullptr));
      all.push_back(pts);
    }
    return all;
  };
  return {{"seeds", seeds},
          {"final_a", final_a},
          {"final_b", final_b},
          {"mean_a", test.mean_a},
          {"mean_b", test.mean_b},
          {"stderr_a", test.se_a},
          {"stderr_b", test.se_b},
          {"difference", test.difference},
          {"t", test.t},
          {"df", test.df},
          {"p_one_tailed", test.p_one_tailed},
          {"test", "Welch two-sample t, one-tailed (a > b)"},
          {"frames", frames},
          {"curves_a", curves(curves_a)},
          {"curves_b", curves(curves_b)}};
}

CompareReport cmd_compare(const RunConfig& a, const RunConfig& b, std::size_t seeds, const fs::path& out,
                          bool progress) {
  if (seeds < 2) throw ConfigError("compare needs at least two seeds per configuration");
  CompareReport rep;
  std::vector<std::vector<MetricsRecord>> runs_a, runs_b;
  std::set<std::uint64_t> grid;
  auto final_mean = [](const std::vector<MetricsRecord>& r, const std::string& what) {
    if (r.empty() || !r.back().rolling_mean) throw NumericError(what + ": no episode finished");
    return *r.back().rolling_mean;
  };
  for (std::size_t s = 0; s < seeds; ++s) {
    const std::uint64_t seed = a.seed + s;
    rep.seeds.push_back(seed);
    RunConfig ca = a, cb = b;
    ca.seed = cb.seed = seed;
    ca.out = out / ("a-" + std::to_string(seed));
    cb.out = out / ("b-" + std::to_string(seed));
    if (progress) std::cerr << "compare: seed " << seed << " config a\n";
    runs_a.push_back(cmd_train(ca, {false, progress}));
    if (progress) std::cerr << "compare: seed " << seed << " config b\n";
    runs_b.push_back(cmd_train(cb, {false, progress}));
    rep.final_a.push_back(final_mean(runs_a.back(), ca.out.string()));
    rep.final_b.push_back(final_mean(runs_b.back(), cb.out.string()));
    for (const auto* runs : {&runs_a.back(), &runs_b.back()}) {
      for (const auto& r : *runs) grid.insert(r.frames);
    }
  }
  rep.frames.assign(grid.begin(), grid.end());
  for (const auto& r : runs_a) rep.curves_a.push_back(align_curve(r, rep.frames));
  for (const auto& r : runs_b) rep.curves_b.push_back(align_curve(r, rep.frames));
  rep.test = welch_one_tailed(rep.final_a, rep.final_b);
  fs::create_directories(out);
  std::ofstream f(out / "compare.json");
  f << rep.to_json().dump(2) << '\n';
  return rep;
}

template class Session<float>;
template class Session<double>;
template void save_agent(const Agent<float>&, Checkpoint&);
template void save_agent(const Agent<double>&, Checkpoint&);
template void load_agent(Agent<float>&, const Checkpoint&);
template void load_agent(Agent<double>&, const Checkpoint&);

}  // namespace p4o
