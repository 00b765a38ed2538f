// Copyright 2026 The P4O Authors
// SPDX-License-Identifier: Apache-2.0

#include "p4o/networks.hpp"

#include "p4o/errors.hpp"
#include "p4o/ops.hpp"

namespace p4o {

EncoderConfig EncoderConfig::toy() {
  EncoderConfig c;
  c.channels = {4, 8, 8, 8};
  c.latent_dim = 32;
  c.in_channels = 4;
  c.in_height = 16;
  c.in_width = 16;
  return c;
}

void EncoderConfig::validate() const {
  for (std::size_t i = 0; i < channels.size(); ++i) {
    if (channels[i] == 0) throw ConfigError("encoder: channel count of group " + std::to_string(i) + " is 0");
  }
  if (latent_dim == 0) throw ConfigError("encoder: latent_dim must be positive");
  if (in_channels == 0) throw ConfigError("encoder: input needs at least one channel");
  if (in_height < 16 || in_width < 16) {
    throw ConfigError("encoder: input " + std::to_string(in_height) + "x" + std::to_string(in_width) +
                      " is smaller than the 16x16 minimum");
  }
}

std::vector<std::array<std::size_t, 2>> EncoderConfig::spatial_path() const {
  std::vector<std::array<std::size_t, 2>> path{{in_height, in_width}};
  for (int g = 0; g < 4; ++g) {
    const auto [h, w] = path.back();
    path.push_back({(h + 1) / 2, (w + 1) / 2});
  }
  return path;
}

std::size_t EncoderConfig::flat_features() const {
  const auto last = spatial_path().back();
  return channels[3] * last[0] * last[1];
}

std::size_t EncoderConfig::parameter_count() const {
  std::size_t n = 0, in = in_channels;
  for (std::size_t c : channels) {
    n += c * in * 9 + c;
    n += 4 * (c * c * 9 + c);
    in = c;
  }
  return n + latent_dim * flat_features() + latent_dim;
}

template <typename T>
DiffArray<T> residual_block(const DiffArray<T>& x, const DiffArray<T>& k1, const DiffArray<T>& b1,
                            const DiffArray<T>& k2, const DiffArray<T>& b2) {
  auto y = conv2d(relu(x), k1, b1);
  y = conv2d(relu(y), k2, b2);
  return add(x, y);
}

template <typename T>
Encoder<T>::Encoder(const EncoderConfig& config, ParameterSet<T>& params, Rng& rng,
                    const std::string& prefix)
    : config_(config) {
  config_.validate();
  auto conv = [&](const std::string& name, std::size_t out, std::size_t in) {
    Conv c;
    c.kernel = params.add(name + "/kernel", {out, in, 3, 3},
                          cast_values<T>(uniform_fan_in(out * in * 9, in * 9, rng)));
    c.bias = params.add(name + "/bias", {out}, std::vector<T>(out, T{0}));
    return c;
  };
  std::size_t in = config_.in_channels;
  for (std::size_t g = 0; g < 4; ++g) {
    const std::size_t c = config_.channels[g];
    const std::string base = prefix + "group" + std::to_string(g);
    groups_[g].entry = conv(base + "/conv", c, in);
    for (std::size_t r = 0; r < 2; ++r) {
      for (std::size_t l = 0; l < 2; ++l) {
        groups_[g].blocks[r][l] =
            conv(base + "/res" + std::to_string(r) + "/conv" + std::to_string(l), c, c);
      }
    }
    in = c;
  }
  const std::size_t flat = config_.flat_features();
  fc_weight_ = params.add(prefix + "fc/weight", {config_.latent_dim, flat},
                          cast_values<T>(uniform_fan_in(config_.latent_dim * flat, flat, rng)));
  fc_bias_ = params.add(prefix + "fc/bias", {config_.latent_dim}, std::vector<T>(config_.latent_dim, T{0}));
}

template <typename T>
DiffArray<T> Encoder<T>::forward(const DiffArray<T>& frames) const {
  const Shape expect{frames.rank() == 4 ? frames.dim(0) : 0, config_.in_channels, config_.in_height,
                     config_.in_width};
  if (frames.shape() != expect) {
    throw DimensionError("encoder: expected frames " + shape_string(expect) + ", got " +
                         shape_string(frames.shape()));
  }
  DiffArray<T> x = frames;
  for (const auto& g : groups_) {
    x = maxpool2(conv2d(x, g.entry.kernel, g.entry.bias));
    for (const auto& b : g.blocks) x = residual_block(x, b[0].kernel, b[0].bias, b[1].kernel, b[1].bias);
  }
  x = reshape(x, {x.dim(0), x.size() / x.dim(0)});
  return tanh(linear(x, fc_weight_, fc_bias_));
}

template <typename T>
DiffArray<T> frames_to_array(std::span<const std::uint8_t> pixels, std::size_t batch,
                             const EncoderConfig& config) {
  const Shape shape{batch, config.in_channels, config.in_height, config.in_width};
  if (pixels.size() != shape_size(shape)) {
    throw DimensionError("frames_to_array: " + std::to_string(pixels.size()) + " bytes for shape " +
                         shape_string(shape));
  }
  std::vector<T> v(pixels.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(pixels[i]) / T{255};
  return DiffArray<T>(shape, std::move(v));
}

template <typename T>
ActorCritic<T>::ActorCritic(std::size_t state_dim, std::size_t actions, ParameterSet<T>& params, Rng& rng,
                            const std::string& prefix)
    : state_dim_(state_dim), actions_(actions) {
  if (state_dim == 0 || actions == 0) throw ConfigError("actor-critic: state and action sizes must be positive");
  actor_weight_ = params.add(prefix + "actor/weight", {actions, state_dim},
                             cast_values<T>(uniform_fan_in(actions * state_dim, state_dim, rng)));
  actor_bias_ = params.add(prefix + "actor/bias", {actions}, std::vector<T>(actions, T{0}));
  critic_weight_ = params.add(prefix + "critic/weight", {1, state_dim},
                              cast_values<T>(uniform_fan_in(state_dim, state_dim, rng)));
  critic_bias_ = params.add(prefix + "critic/bias", {1}, std::vector<T>{T{0}});
}

template <typename T>
PolicyOutput<T> ActorCritic<T>::act_value(const DiffArray<T>& state) const {
  if (state.rank() != 2 || state.dim(1) != state_dim_) {
    throw DimensionError("act_value: expected state [B," + std::to_string(state_dim_) + "], got " +
                         shape_string(state.shape()));
  }
  PolicyOutput<T> out;
  out.logits = linear(state, actor_weight_, actor_bias_);
  out.value = reshape(linear(state, critic_weight_, critic_bias_), {state.dim(0)});
  out.probs.reserve(out.logits.size());
  for (std::size_t b = 0; b < state.dim(0); ++b) {
    auto p = softmax(out.logits.values().subspan(b * actions_, actions_));
    out.probs.insert(out.probs.end(), p.begin(), p.end());
  }
  return out;
}

#define P4O_INSTANTIATE_NETWORKS(T)                                                              \
  template DiffArray<T> residual_block(const DiffArray<T>&, const DiffArray<T>&,                 \
                                       const DiffArray<T>&, const DiffArray<T>&,                 \
                                       const DiffArray<T>&);                                     \
  template class Encoder<T>;                                                                     \
  template DiffArray<T> frames_to_array(std::span<const std::uint8_t>, std::size_t,              \
                                        const EncoderConfig&);                                   \
  template class ActorCritic<T>;

P4O_INSTANTIATE_NETWORKS(float)
P4O_INSTANTIATE_NETWORKS(double)

#undef P4O_INSTANTIATE_NETWORKS

}  // namespace p4o
