// Copyright 2026 The P4O Authors
// SPDX-License-Identifier: Apache-2.0
//
// Pixel environments, wrappers and the vectorized set.

#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "p4o/rng.hpp"

namespace p4o {

struct ObsShape {
  std::size_t channels = 1, height = 1, width = 1;
  std::size_t size() const { return channels * height * width; }
  friend bool operator==(const ObsShape&, const ObsShape&) = default;
};

std::string to_string(const ObsShape& s);

struct EnvStep {
  std::vector<std::uint8_t> observation;  // C*H*W, row-major
  double reward = 0.0;
  bool terminal = false;
  std::map<std::string, double> info;
};

class Env {
 public:
  virtual ~Env() = default;

  virtual std::string kind() const = 0;
  virtual ObsShape observation_shape() const = 0;
  virtual int action_count() const = 0;
  virtual std::vector<std::uint8_t> reset(std::uint64_t seed) = 0;
  // Throws EnvError on an out-of-range action or a step after a terminal.
  virtual EnvStep step(int action) = 0;

  // Wrapped environment, if this is a wrapper.
  virtual const Env* inner() const { return nullptr; }
  // Full state for checkpoints. Environments that cannot serialize throw EnvError.
  virtual nlohmann::json save_state() const;
  virtual void load_state(const nlohmann::json& state);

  // kind() of every layer, outermost first.
  std::vector<std::string> chain() const;

 protected:
  void check_action(int action) const;
};

struct PixelCatchOptions {
  std::size_t grid = 16;
  std::size_t paddle_width = 3;
  std::size_t pellets_per_episode = 10;
  std::size_t spawn_min = 5;  // steps between spawns, inclusive range
  std::size_t spawn_max = 6;
};

// Pellets fall one row per step, drift sideways and bounce off the walls. The
// paddle on the bottom row moves left/stay/right; each pellet reaching the
// bottom row scores +1 if the paddle covers it, -1 otherwise. The episode
// ends once every pellet has landed.
class PixelCatch final : public Env {
 public:
  explicit PixelCatch(PixelCatchOptions options = {});

  std::string kind() const override { return "pixel-catch"; }
  ObsShape observation_shape() const override { return {1, opt_.grid, opt_.grid}; }
  int action_count() const override { return 3; }
  std::vector<std::uint8_t> reset(std::uint64_t seed) override;
  EnvStep step(int action) override;
  nlohmann::json save_state() const override;
  void load_state(const nlohmann::json& state) override;

  struct Pellet {
    int x, y, vx;
  };
  int paddle() const { return paddle_; }
  const std::vector<Pellet>& pellets() const { return pellets_; }
  bool done() const { return done_; }

  // Best achievable return of the episode started by reset(seed). Pellet
  // motion does not depend on actions, so a dynamic program over paddle
  // positions is exact.
  static double optimal_return(const PixelCatchOptions& options, std::uint64_t seed);

 private:
  void spawn();
  std::vector<std::uint8_t> render() const;

  PixelCatchOptions opt_;
  Rng rng_;
  int paddle_ = 0;
  std::vector<Pellet> pellets_;
  std::size_t spawned_ = 0, landed_ = 0, timer_ = 0;
  bool done_ = true;
};

struct TMazeOptions {
  std::size_t length = 5;  // corridor steps before the junction
  std::size_t size = 16;
};

// A cue in the top-left or bottom-left corner is shown in the first frame
// only. Every action advances along the corridor; at the junction the action
// picks the arm: 0 upper, 1 lower. Matching the cue scores +1, else -1.
class TMaze final : public Env {
 public:
  explicit TMaze(TMazeOptions options = {});

  std::string kind() const override { return "tmaze"; }
  ObsShape observation_shape() const override { return {1, opt_.size, opt_.size}; }
  int action_count() const override { return 2; }
  std::vector<std::uint8_t> reset(std::uint64_t seed) override;
  EnvStep step(int action) override;
  nlohmann::json save_state() const override;
  void load_state(const nlohmann::json& state) override;

  int cue() const { return cue_; }
  std::size_t position() const { return position_; }
  // Resets with the cue forced, for exhaustive evaluation.
  std::vector<std::uint8_t> reset_with_cue(int cue);

 private:
  std::vector<std::uint8_t> render() const;

  TMazeOptions opt_;
  int cue_ = 0;
  std::size_t position_ = 0, t_ = 0;
  bool done_ = true;
};

// Best expected junction reward of any deterministic policy that sees only
// the current (stacked) observation, found by enumerating every such policy.
double tmaze_memoryless_optimum(const TMazeOptions& options, std::size_t frame_stack);

// Channels become the n most recent frames, oldest first.
class FrameStack final : public Env {
 public:
  FrameStack(std::unique_ptr<Env> inner, std::size_t n);
  std::string kind() const override { return "frame-stack"; }
  ObsShape observation_shape() const override;
  int action_count() const override { return inner_->action_count(); }
  std::vector<std::uint8_t> reset(std::uint64_t seed) override;
  EnvStep step(int action) override;
  const Env* inner() const override { return inner_.get(); }
  nlohmann::json save_state() const override;
  void load_state(const nlohmann::json& state) override;

 private:
  std::vector<std::uint8_t> stacked() const;
  std::unique_ptr<Env> inner_;
  std::size_t n_;
  std::vector<std::vector<std::uint8_t>> frames_;
};

// With probability p the previous executed action replaces the requested one.
// The canonical order is FrameStack(StickyActions(env)); constructing it the
// other way round throws ConfigError.
class StickyActions final : public Env {
 public:
  StickyActions(std::unique_ptr<Env> inner, double p_repeat);
  std::string kind() const override { return "sticky-actions"; }
  ObsShape observation_shape() const override { return inner_->observation_shape(); }
  int action_count() const override { return inner_->action_count(); }
  std::vector<std::uint8_t> reset(std::uint64_t seed) override;
  EnvStep step(int action) override;
  const Env* inner() const override { return inner_.get(); }
  nlohmann::json save_state() const override;
  void load_state(const nlohmann::json& state) override;

 private:
  std::unique_ptr<Env> inner_;
  double p_;
  Rng rng_;
  int previous_ = -1;
};

// RGB -> luma (0.299, 0.587, 0.114) when the input has 3 channels, then area
// averaging to height x width. Single-channel inputs are only resized.
class GrayResize final : public Env {
 public:
  GrayResize(std::unique_ptr<Env> inner, std::size_t height, std::size_t width);
  std::string kind() const override { return "gray-resize"; }
  ObsShape observation_shape() const override { return {1, height_, width_}; }
  int action_count() const override { return inner_->action_count(); }
  std::vector<std::uint8_t> reset(std::uint64_t seed) override;
  EnvStep step(int action) override;
  const Env* inner() const override { return inner_.get(); }
  nlohmann::json save_state() const override { return inner_->save_state(); }
  void load_state(const nlohmann::json& state) override { inner_->load_state(state); }

  static std::vector<std::uint8_t> convert(std::span<const std::uint8_t> frame, const ObsShape& in,
                                           std::size_t height, std::size_t width);

 private:
  std::unique_ptr<Env> inner_;
  std::size_t height_, width_;
};

// Rewards replaced by their sign.
class ClipReward final : public Env {
 public:
  explicit ClipReward(std::unique_ptr<Env> inner) : inner_(std::move(inner)) {}
  std::string kind() const override { return "clip-reward"; }
  ObsShape observation_shape() const override { return inner_->observation_shape(); }
  int action_count() const override { return inner_->action_count(); }
  std::vector<std::uint8_t> reset(std::uint64_t seed) override { return inner_->reset(seed); }
  EnvStep step(int action) override;
  const Env* inner() const override { return inner_.get(); }
  nlohmann::json save_state() const override { return inner_->save_state(); }
  void load_state(const nlohmann::json& state) override { inner_->load_state(state); }

 private:
  std::unique_ptr<Env> inner_;
};

// Child process speaking newline-delimited JSON over stdin/stdout:
//   child -> {"actions":A,"shape":[C,H,W]}                      once, at start
//   parent -> {"cmd":"reset","seed":S} | {"cmd":"step","action":a}
//   child -> {"obs":"<base64 of C*H*W bytes>","shape":[C,H,W],"reward":r,"done":b}
class ExternalEnv final : public Env {
 public:
  explicit ExternalEnv(const std::string& command, int timeout_ms = 10000);
  ~ExternalEnv() override;
  ExternalEnv(const ExternalEnv&) = delete;
  ExternalEnv& operator=(const ExternalEnv&) = delete;

  std::string kind() const override { return "external"; }
  ObsShape observation_shape() const override { return shape_; }
  int action_count() const override { return actions_; }
  std::vector<std::uint8_t> reset(std::uint64_t seed) override;
  EnvStep step(int action) override;

 private:
  void send(const nlohmann::json& message);
  nlohmann::json receive();
  EnvStep parse_frame(const nlohmann::json& message);
  [[noreturn]] void fail(const std::string& what);
  std::string drain_stderr();

  std::string command_;
  int timeout_ms_;
  int pid_ = -1;
  int to_child_ = -1, from_child_ = -1, child_err_ = -1;
  std::string pending_;
  ObsShape shape_;
  int actions_ = 0;
  bool done_ = true;
};

std::string base64_encode(std::span<const std::uint8_t> bytes);
// Throws EnvError on malformed input.
std::vector<std::uint8_t> base64_decode(const std::string& text);

struct EnvSpec {
  std::string name = "pixel-catch";  // pixel-catch | tmaze | external
  std::size_t grid = 16;             // pixel-catch grid and tmaze frame size
  std::size_t tmaze_length = 5;
  std::size_t frame_stack = 4;
  double sticky_actions = 0.25;
  bool clip_rewards = false;
  std::string command;               // external only
  std::size_t resize = 84;           // external only: gray-resize target, 0 keeps frames
  int timeout_ms = 10000;
};

// Builds FrameStack(StickyActions(ClipReward(GrayResize(base)))), omitting
// layers that are disabled.
std::unique_ptr<Env> make_env(const EnvSpec& spec);

struct EpisodeRecord {
  std::size_t env = 0;
  double score = 0.0;
  std::size_t length = 0;
};

struct VecStep {
  std::vector<double> rewards;
  std::vector<std::uint8_t> dones;
  std::vector<EpisodeRecord> finished;
};

// Steps every environment in index order and resets finished ones
// immediately, so observations() always holds the next input of each env.
// Episode seeds come from per-environment streams split off `seed`.
class VecEnv {
 public:
  VecEnv(std::vector<std::unique_ptr<Env>> envs, std::uint64_t seed);

  std::size_t size() const { return envs_.size(); }
  ObsShape observation_shape() const { return shape_; }
  int action_count() const { return actions_; }
  Env& env(std::size_t i) { return *envs_[i]; }

  void reset_all();
  // [N][C*H*W], row-major per env.
  const std::vector<std::uint8_t>& observations() const { return obs_; }
  VecStep step(std::span<const int> actions);

  nlohmann::json save_state() const;
  void load_state(const nlohmann::json& state);

 private:
  std::vector<std::unique_ptr<Env>> envs_;
  std::vector<Rng> seeds_;
  std::vector<double> returns_;
  std::vector<std::size_t> lengths_;
  std::vector<std::uint8_t> obs_;
  ObsShape shape_;
  int actions_ = 0;
  std::size_t steps_ = 0;
};

}  // namespace p4o
