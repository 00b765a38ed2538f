// Copyright 2026 The P4O Authors
// SPDX-License-Identifier: Apache-2.0
//
// Residual convolutional encoder and the actor-critic heads.

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "p4o/diff_array.hpp"
#include "p4o/parameters.hpp"
#include "p4o/rng.hpp"

namespace p4o {

struct EncoderConfig {
  std::array<std::size_t, 4> channels{24, 32, 64, 128};
  std::size_t latent_dim = 512;
  std::size_t in_channels = 4;
  std::size_t in_height = 84;
  std::size_t in_width = 84;

  // 16x16 frames, channels [4,8,8,8], 32-dim latent.
  static EncoderConfig toy();

  // Throws ConfigError.
  void validate() const;
  // Spatial size after each group, starting with the input: 5 entries.
  std::vector<std::array<std::size_t, 2>> spatial_path() const;
  // Weights and biases of all 20 conv layers and the projection.
  std::size_t parameter_count() const;
  std::size_t flat_features() const;
};

// x + conv2(relu(conv1(relu(x)))).
template <typename T>
DiffArray<T> residual_block(const DiffArray<T>& x, const DiffArray<T>& k1, const DiffArray<T>& b1,
                            const DiffArray<T>& k2, const DiffArray<T>& b2);

template <typename T>
class Encoder {
 public:
  // Registers parameters named "<prefix>..." into `params`.
  Encoder(const EncoderConfig& config, ParameterSet<T>& params, Rng& rng,
          const std::string& prefix = "encoder/");

  // frames[B,C,H,W] scaled to [0,1] -> latents[B,p] in (-1,1).
  DiffArray<T> forward(const DiffArray<T>& frames) const;

  const EncoderConfig& config() const { return config_; }

 private:
  struct Conv {
    DiffArray<T> kernel, bias;
  };
  struct Group {
    Conv entry;
    std::array<std::array<Conv, 2>, 2> blocks;
  };
  EncoderConfig config_;
  std::array<Group, 4> groups_;
  DiffArray<T> fc_weight_, fc_bias_;
};

// Converts raw 8-bit frames [B, C*H*W] to [B,C,H,W] scaled into [0,1].
template <typename T>
DiffArray<T> frames_to_array(std::span<const std::uint8_t> pixels, std::size_t batch,
                             const EncoderConfig& config);

template <typename T>
struct PolicyOutput {
  DiffArray<T> logits;   // [B,A]
  std::vector<T> probs;  // B*A, row-major
  DiffArray<T> value;    // [B]
};

template <typename T>
class ActorCritic {
 public:
  ActorCritic(std::size_t state_dim, std::size_t actions, ParameterSet<T>& params, Rng& rng,
              const std::string& prefix = "heads/");

  // state[B,k] -> logits, probabilities and values. Throws DimensionError
  // unless k equals the configured state size.
  PolicyOutput<T> act_value(const DiffArray<T>& state) const;

  std::size_t state_dim() const { return state_dim_; }
  std::size_t actions() const { return actions_; }
  const DiffArray<T>& actor_weight() const { return actor_weight_; }
  const DiffArray<T>& critic_weight() const { return critic_weight_; }

 private:
  std::size_t state_dim_, actions_;
  DiffArray<T> actor_weight_, actor_bias_, critic_weight_, critic_bias_;
};

}  // namespace p4o
