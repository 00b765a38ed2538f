// Copyright 2026 The P4O Authors
// SPDX-License-Identifier: Apache-2.0

#include "p4o/environments.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <set>

#include "p4o/errors.hpp"

namespace p4o {

std::string to_string(const ObsShape& s) {
  return "[" + std::to_string(s.channels) + "," + std::to_string(s.height) + "," + std::to_string(s.width) + "]";
}

nlohmann::json Env::save_state() const { throw EnvError(kind() + ": state cannot be saved"); }
void Env::load_state(const nlohmann::json&) { throw EnvError(kind() + ": state cannot be restored"); }

std::vector<std::string> Env::chain() const {
  std::vector<std::string> out;
  for (const Env* e = this; e != nullptr; e = e->inner()) out.push_back(e->kind());
  return out;
}

void Env::check_action(int action) const {
  if (action < 0 || action >= action_count()) {
    throw EnvError(kind() + ": action " + std::to_string(action) + " outside [0," +
                   std::to_string(action_count()) + ")");
  }
}

// ---------------------------------------------------------------- PixelCatch

PixelCatch::PixelCatch(PixelCatchOptions options) : opt_(options) {
  if (opt_.grid < 4) throw ConfigError("pixel-catch: grid must be at least 4");
  if (opt_.paddle_width % 2 == 0 || opt_.paddle_width >= opt_.grid) {
    throw ConfigError("pixel-catch: paddle width must be odd and smaller than the grid");
  }
  if (opt_.pellets_per_episode < 1) throw ConfigError("pixel-catch: need at least one pellet");
  if (opt_.spawn_min < 1 || opt_.spawn_max < opt_.spawn_min) {
    throw ConfigError("pixel-catch: invalid spawn interval");
  }
}

void PixelCatch::spawn() {
  Pellet p;
  p.x = static_cast<int>(rng_.below(opt_.grid));
  p.y = 0;
  p.vx = static_cast<int>(rng_.below(3)) - 1;
  pellets_.push_back(p);
  ++spawned_;
  timer_ = opt_.spawn_min + rng_.below(opt_.spawn_max - opt_.spawn_min + 1);
}

std::vector<std::uint8_t> PixelCatch::reset(std::uint64_t seed) {
  rng_ = Rng(seed);
  paddle_ = static_cast<int>(opt_.grid / 2);
  pellets_.clear();
  spawned_ = landed_ = 0;
  done_ = false;
  spawn();
  return render();
}

EnvStep PixelCatch::step(int action) {
  check_action(action);
  if (done_) throw EnvError("pixel-catch: step after terminal; reset first");
  const int G = static_cast<int>(opt_.grid), half = static_cast<int>(opt_.paddle_width / 2);
  paddle_ = std::clamp(paddle_ + action - 1, half, G - 1 - half);

  EnvStep out;
  std::vector<Pellet> alive;
  for (Pellet p : pellets_) {
    p.y += 1;
    int nx = p.x + p.vx;
    if (nx < 0 || nx >= G) {
      p.vx = -p.vx;
      nx = p.x + p.vx;
    }
    p.x = nx;
    if (p.y == G - 1) {
      out.reward += std::abs(p.x - paddle_) <= half ? 1.0 : -1.0;
      ++landed_;
    } else {
      alive.push_back(p);
    }
  }
  pellets_ = std::move(alive);
  if (spawned_ < opt_.pellets_per_episode && --timer_ == 0) spawn();
  done_ = landed_ == opt_.pellets_per_episode;
  out.terminal = done_;
  out.observation = render();
  return out;
}

std::vector<std::uint8_t> PixelCatch::render() const {
  const std::size_t G = opt_.grid;
  std::vector<std::uint8_t> img(G * G, 0);
  const int half = static_cast<int>(opt_.paddle_width / 2);
  for (int x = paddle_ - half; x <= paddle_ + half; ++x) img[(G - 1) * G + static_cast<std::size_t>(x)] = 128;
  for (const auto& p : pellets_) img[static_cast<std::size_t>(p.y) * G + static_cast<std::size_t>(p.x)] = 255;
  return img;
}

nlohmann::json PixelCatch::save_state() const {
  nlohmann::json pellets = nlohmann::json::array();
  for (const auto& p : pellets_) pellets.push_back({p.x, p.y, p.vx});
  return {{"rng", rng_.serialize()}, {"paddle", paddle_},   {"pellets", pellets},
          {"spawned", spawned_},     {"landed", landed_},   {"timer", timer_},
          {"done", done_}};
}

void PixelCatch::load_state(const nlohmann::json& s) {
  rng_ = Rng::deserialize(s.at("rng").get<std::string>());
  paddle_ = s.at("paddle").get<int>();
  pellets_.clear();
  for (const auto& p : s.at("pellets")) pellets_.push_back({p.at(0).get<int>(), p.at(1).get<int>(), p.at(2).get<int>()});
  spawned_ = s.at("spawned").get<std::size_t>();
  landed_ = s.at("landed").get<std::size_t>();
  timer_ = s.at("timer").get<std::size_t>();
  done_ = s.at("done").get<bool>();
}

double PixelCatch::optimal_return(const PixelCatchOptions& options, std::uint64_t seed) {
  // Record where pellets land at each step; the paddle does not influence it.
  PixelCatch env(options);
  env.reset(seed);
  const int G = static_cast<int>(options.grid), half = static_cast<int>(options.paddle_width / 2);
  std::vector<std::vector<int>> landings;
  while (!env.done()) {
    std::vector<int> xs;
    for (const auto& p : env.pellets()) {
      if (p.y + 1 != G - 1) continue;
      int nx = p.x + p.vx;
      if (nx < 0 || nx >= G) nx = p.x - p.vx;
      xs.push_back(nx);
    }
    landings.push_back(std::move(xs));
    env.step(1);
  }
  const double lowest = -std::numeric_limits<double>::infinity();
  std::vector<double> best(static_cast<std::size_t>(G), lowest);
  best[static_cast<std::size_t>(G / 2)] = 0.0;
  for (const auto& xs : landings) {
    std::vector<double> next(static_cast<std::size_t>(G), lowest);
    for (int pos = half; pos <= G - 1 - half; ++pos) {
      if (best[static_cast<std::size_t>(pos)] == lowest) continue;
      for (int a = -1; a <= 1; ++a) {
        const int np = std::clamp(pos + a, half, G - 1 - half);
        double r = 0.0;
        for (int x : xs) r += std::abs(x - np) <= half ? 1.0 : -1.0;
        next[static_cast<std::size_t>(np)] = std::max(next[static_cast<std::size_t>(np)], best[static_cast<std::size_t>(pos)] + r);
      }
    }
    best = std::move(next);
  }
  return *std::max_element(best.begin(), best.end());
}

// --------------------------------------------------------------------- TMaze

TMaze::TMaze(TMazeOptions options) : opt_(options) {
  if (opt_.length < 1) throw ConfigError("tmaze: corridor length must be at least 1");
  if (opt_.size < 8 || opt_.length + 4 > opt_.size) {
    throw ConfigError("tmaze: corridor of length " + std::to_string(opt_.length) + " does not fit a " +
                      std::to_string(opt_.size) + "-pixel frame");
  }
}

std::vector<std::uint8_t> TMaze::reset(std::uint64_t seed) {
  Rng rng(seed);
  return reset_with_cue(static_cast<int>(rng.below(2)));
}

std::vector<std::uint8_t> TMaze::reset_with_cue(int cue) {
  cue_ = cue;
  position_ = 0;
  t_ = 0;
  done_ = false;
  return render();
}

EnvStep TMaze::step(int action) {
  check_action(action);
  if (done_) throw EnvError("tmaze: step after terminal; reset first");
  EnvStep out;
  ++t_;
  if (position_ < opt_.length) {
    ++position_;
  } else {
    out.reward = action == cue_ ? 1.0 : -1.0;
    out.terminal = done_ = true;
    out.info["correct"] = action == cue_ ? 1.0 : 0.0;
  }
  out.observation = render();
  return out;
}

std::vector<std::uint8_t> TMaze::render() const {
  const std::size_t S = opt_.size, mid = S / 2, junction = 2 + opt_.length;
  std::vector<std::uint8_t> img(S * S, 0);
  for (std::size_t x = 2; x < junction; ++x) img[mid * S + x] = 64;
  for (std::size_t y = 3; y + 3 < S; ++y) img[y * S + junction] = 64;
  img[mid * S + 2 + position_] = 255;
  if (t_ == 0) {
    const std::size_t top = cue_ == 0 ? 0 : S - 2;
    for (std::size_t y = top; y < top + 2; ++y)
      for (std::size_t x = 0; x < 2; ++x) img[y * S + x] = 255;
  }
  return img;
}

nlohmann::json TMaze::save_state() const {
  return {{"cue", cue_}, {"position", position_}, {"t", t_}, {"done", done_}};
}

void TMaze::load_state(const nlohmann::json& s) {
  cue_ = s.at("cue").get<int>();
  position_ = s.at("position").get<std::size_t>();
  t_ = s.at("t").get<std::size_t>();
  done_ = s.at("done").get<bool>();
}

double tmaze_memoryless_optimum(const TMazeOptions& options, std::size_t frame_stack) {
  // The trajectory is fixed by the cue; only the junction action matters, but
  // a memoryless policy must map equal observations to equal actions.
  struct Visit {
    std::vector<std::uint8_t> obs;
    int cue;
    bool junction;
  };
  std::vector<Visit> visits;
  for (int cue = 0; cue < 2; ++cue) {
    TMaze maze(options);
    const std::vector<std::uint8_t> first = maze.reset_with_cue(cue);
    std::vector<std::vector<std::uint8_t>> window(frame_stack, first);
    for (;;) {
      std::vector<std::uint8_t> obs;
      for (const auto& f : window) obs.insert(obs.end(), f.begin(), f.end());
      const bool junction = maze.position() == options.length;
      visits.push_back({std::move(obs), cue, junction});
      if (junction) break;
      window.erase(window.begin());
      window.push_back(maze.step(0).observation);
    }
  }
  std::vector<std::vector<std::uint8_t>> distinct;
  for (const auto& v : visits) {
    if (std::find(distinct.begin(), distinct.end(), v.obs) == distinct.end()) distinct.push_back(v.obs);
  }
  if (distinct.size() > 24) throw ConfigError("tmaze_memoryless_optimum: too many observations to enumerate");
  double best = -std::numeric_limits<double>::infinity();
  for (std::uint64_t policy = 0; policy < (std::uint64_t{1} << distinct.size()); ++policy) {
    double total = 0.0;
    for (const auto& v : visits) {
      if (!v.junction) continue;
      const auto idx = std::find(distinct.begin(), distinct.end(), v.obs) - distinct.begin();
      const int action = static_cast<int>((policy >> idx) & 1U);
      total += action == v.cue ? 1.0 : -1.0;
    }
    best = std::max(best, total / 2.0);
  }
  return best;
}

// ---------------------------------------------------------------- FrameStack

FrameStack::FrameStack(std::unique_ptr<Env> inner, std::size_t n) : inner_(std::move(inner)), n_(n) {
  if (n_ < 1) throw ConfigError("frame-stack: n must be at least 1");
}

ObsShape FrameStack::observation_shape() const {
  ObsShape s = inner_->observation_shape();
  s.channels *= n_;
  return s;
}

std::vector<std::uint8_t> FrameStack::stacked() const {
  std::vector<std::uint8_t> out;
  out.reserve(observation_shape().size());
  for (const auto& f : frames_) out.insert(out.end(), f.begin(), f.end());
  return out;
}

std::vector<std::uint8_t> FrameStack::reset(std::uint64_t seed) {
  frames_.assign(n_, inner_->reset(seed));
  return stacked();
}

EnvStep FrameStack::step(int action) {
  if (frames_.empty()) throw EnvError("frame-stack: step before reset");
  EnvStep s = inner_->step(action);
  frames_.erase(frames_.begin());
  frames_.push_back(std::move(s.observation));
  s.observation = stacked();
  return s;
}

nlohmann::json FrameStack::save_state() const {
  return {{"frames", frames_}, {"inner", inner_->save_state()}};
}

void FrameStack::load_state(const nlohmann::json& s) {
  frames_ = s.at("frames").get<std::vector<std::vector<std::uint8_t>>>();
  inner_->load_state(s.at("inner"));
}

// ------------------------------------------------------------- StickyActions

StickyActions::StickyActions(std::unique_ptr<Env> inner, double p_repeat) : inner_(std::move(inner)), p_(p_repeat) {
  if (!(p_ >= 0.0 && p_ < 1.0)) throw ConfigError("sticky-actions: repeat probability must lie in [0,1)");
  for (const auto& k : inner_->chain()) {
    if (k == "frame-stack") {
      throw ConfigError("sticky-actions must wrap the environment inside frame-stack, not outside it");
    }
  }
}

std::vector<std::uint8_t> StickyActions::reset(std::uint64_t seed) {
  rng_ = Rng(seed).split(0x571C);
  previous_ = -1;
  return inner_->reset(seed);
}

EnvStep StickyActions::step(int action) {
  check_action(action);
  bool repeated = false;
  if (previous_ >= 0 && p_ > 0.0 && rng_.bernoulli(p_)) {
    action = previous_;
    repeated = true;
  }
  EnvStep s = inner_->step(action);
  previous_ = action;
  s.info["repeated"] = repeated ? 1.0 : 0.0;
  s.info["executed_action"] = action;
  return s;
}

nlohmann::json StickyActions::save_state() const {
  return {{"rng", rng_.serialize()}, {"previous", previous_}, {"inner", inner_->save_state()}};
}

void StickyActions::load_state(const nlohmann::json& s) {
  rng_ = Rng::deserialize(s.at("rng").get<std::string>());
  previous_ = s.at("previous").get<int>();
  inner_->load_state(s.at("inner"));
}

// ---------------------------------------------------------------- GrayResize

GrayResize::GrayResize(std::unique_ptr<Env> inner, std::size_t height, std::size_t width)
    : inner_(std::move(inner)), height_(height), width_(width) {
  const auto in = inner_->observation_shape();
  if (in.channels != 1 && in.channels != 3) {
    throw ConfigError("gray-resize: expected 1 or 3 input channels, got " + std::to_string(in.channels));
  }
  if (height_ == 0 || width_ == 0) throw ConfigError("gray-resize: target size must be positive");
}

std::vector<std::uint8_t> GrayResize::convert(std::span<const std::uint8_t> frame, const ObsShape& in,
                                              std::size_t height, std::size_t width) {
  const std::size_t H = in.height, W = in.width, plane = H * W;
  std::vector<double> gray(plane);
  for (std::size_t i = 0; i < plane; ++i) {
    gray[i] = in.channels == 3 ? 0.299 * frame[i] + 0.587 * frame[plane + i] + 0.114 * frame[2 * plane + i]
                               : static_cast<double>(frame[i]);
  }
  // Area averaging: each output pixel integrates the input over its footprint.
  auto weights = [](std::size_t in_n, std::size_t out_n, std::size_t o) {
    std::vector<std::pair<std::size_t, double>> w;
    const double scale = static_cast<double>(in_n) / static_cast<double>(out_n);
    const double lo = static_cast<double>(o) * scale, hi = lo + scale;
    for (auto i = static_cast<std::size_t>(std::floor(lo)); i < in_n && static_cast<double>(i) < hi; ++i) {
      const double overlap = std::min(hi, static_cast<double>(i + 1)) - std::max(lo, static_cast<double>(i));
      if (overlap > 0.0) w.emplace_back(i, overlap / scale);
    }
    return w;
  };
  std::vector<std::uint8_t> out(height * width);
  for (std::size_t oy = 0; oy < height; ++oy) {
    const auto wy = weights(H, height, oy);
    for (std::size_t ox = 0; ox < width; ++ox) {
      const auto wx = weights(W, width, ox);
      double v = 0.0;
      for (const auto& [y, a] : wy)
        for (const auto& [x, b] : wx) v += a * b * gray[y * W + x];
      out[oy * width + ox] = static_cast<std::uint8_t>(std::clamp(std::floor(v + 0.5), 0.0, 255.0));
    }
  }
  return out;
}

std::vector<std::uint8_t> GrayResize::reset(std::uint64_t seed) {
  return convert(inner_->reset(seed), inner_->observation_shape(), height_, width_);
}

EnvStep GrayResize::step(int action) {
  EnvStep s = inner_->step(action);
  s.observation = convert(s.observation, inner_->observation_shape(), height_, width_);
  return s;
}

EnvStep ClipReward::step(int action) {
  EnvStep s = inner_->step(action);
  s.info["raw_reward"] = s.reward;
  s.reward = static_cast<double>((s.reward > 0.0) - (s.reward < 0.0));
  return s;
}

// ------------------------------------------------------------------ factory

std::unique_ptr<Env> make_env(const EnvSpec& spec) {
  std::unique_ptr<Env> env;
  if (spec.name == "pixel-catch") {
    PixelCatchOptions o;
    o.grid = spec.grid;
    env = std::make_unique<PixelCatch>(o);
  } else if (spec.name == "tmaze") {
    env = std::make_unique<TMaze>(TMazeOptions{spec.tmaze_length, spec.grid});
  } else if (spec.name == "external") {
    if (spec.command.empty()) throw ConfigError("external environment needs env_command");
    env = std::make_unique<ExternalEnv>(spec.command, spec.timeout_ms);
    if (spec.resize > 0) env = std::make_unique<GrayResize>(std::move(env), spec.resize, spec.resize);
  } else {
    throw ConfigError("unknown environment '" + spec.name + "' (expected pixel-catch, tmaze, external)");
  }
  if (spec.clip_rewards) env = std::make_unique<ClipReward>(std::move(env));
  if (spec.sticky_actions > 0.0) env = std::make_unique<StickyActions>(std::move(env), spec.sticky_actions);
  if (spec.frame_stack > 1) env = std::make_unique<FrameStack>(std::move(env), spec.frame_stack);
  return env;
}

// -------------------------------------------------------------------- VecEnv

VecEnv::VecEnv(std::vector<std::unique_ptr<Env>> envs, std::uint64_t seed) : envs_(std::move(envs)) {
  if (envs_.empty()) throw ConfigError("VecEnv: no environments");
  shape_ = envs_[0]->observation_shape();
  actions_ = envs_[0]->action_count();
  Rng root(seed);
  for (std::size_t i = 0; i < envs_.size(); ++i) {
    if (!(envs_[i]->observation_shape() == shape_) || envs_[i]->action_count() != actions_) {
      throw ConfigError("VecEnv: environment " + std::to_string(i) + " differs in shape or action count");
    }
    seeds_.push_back(root.split(i));
  }
  returns_.assign(envs_.size(), 0.0);
  lengths_.assign(envs_.size(), 0);
  obs_.assign(envs_.size() * shape_.size(), 0);
}

void VecEnv::reset_all() {
  for (std::size_t i = 0; i < envs_.size(); ++i) {
    auto o = envs_[i]->reset(seeds_[i].next_u64());
    std::copy(o.begin(), o.end(), obs_.begin() + static_cast<std::ptrdiff_t>(i * shape_.size()));
    returns_[i] = 0.0;
    lengths_[i] = 0;
  }
}

VecStep VecEnv::step(std::span<const int> actions) {
  if (actions.size() != envs_.size()) {
    throw EnvError("VecEnv: " + std::to_string(actions.size()) + " actions for " + std::to_string(envs_.size()) +
                   " environments");
  }
  VecStep out;
  out.rewards.resize(envs_.size());
  out.dones.resize(envs_.size());
  for (std::size_t i = 0; i < envs_.size(); ++i) {
    EnvStep s;
    try {
      s = envs_[i]->step(actions[i]);
      if (s.observation.size() != shape_.size()) {
        throw EnvError("observation of " + std::to_string(s.observation.size()) + " bytes, expected " +
                       std::to_string(shape_.size()));
      }
      if (!std::isfinite(s.reward)) throw EnvError("non-finite reward");
    } catch (const std::exception& e) {
      throw EnvError("environment " + std::to_string(i) + " at step " + std::to_string(steps_) + ": " + e.what());
    }
    out.rewards[i] = s.reward;
    out.dones[i] = s.terminal ? 1 : 0;
    returns_[i] += s.reward;
    ++lengths_[i];
    if (s.terminal) {
      out.finished.push_back({i, returns_[i], lengths_[i]});
      returns_[i] = 0.0;
      lengths_[i] = 0;
      s.observation = envs_[i]->reset(seeds_[i].next_u64());
    }
    std::copy(s.observation.begin(), s.observation.end(),
              obs_.begin() + static_cast<std::ptrdiff_t>(i * shape_.size()));
  }
  ++steps_;
  return out;
}

nlohmann::json VecEnv::save_state() const {
  nlohmann::json envs = nlohmann::json::array(), seeds = nlohmann::json::array();
  for (std::size_t i = 0; i < envs_.size(); ++i) {
    envs.push_back(envs_[i]->save_state());
    seeds.push_back(seeds_[i].serialize());
  }
  return {{"envs", envs}, {"seeds", seeds}, {"returns", returns_}, {"lengths", lengths_},
          {"obs", base64_encode(obs_)}, {"steps", steps_}};
}

void VecEnv::load_state(const nlohmann::json& s) {
  const auto& envs = s.at("envs");
  if (envs.size() != envs_.size()) throw EnvError("VecEnv: saved state has a different number of environments");
  for (std::size_t i = 0; i < envs_.size(); ++i) {
    envs_[i]->load_state(envs.at(i));
    seeds_[i] = Rng::deserialize(s.at("seeds").at(i).get<std::string>());
  }
  returns_ = s.at("returns").get<std::vector<double>>();
  lengths_ = s.at("lengths").get<std::vector<std::size_t>>();
  obs_ = base64_decode(s.at("obs").get<std::string>());
  steps_ = s.at("steps").get<std::size_t>();
}

}  // namespace p4o
