// Copyright 2026 The P4O Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>

#include "p4o/grad_check.hpp"
#include "p4o/networks.hpp"
#include "p4o/ops.hpp"
#include "test_support.hpp"

using namespace p4o;
using D = DiffArray<double>;
using test::random_array;
using test::set_param;

namespace {

std::vector<double> conv_reference(std::span<const double> x, std::span<const double> k, std::span<const double> b,
                                   std::size_t B, std::size_t C, std::size_t O, std::size_t H, std::size_t W) {
  std::vector<double> out(B * O * H * W);
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t xx = 0; xx < W; ++xx) {
          double s = b[o];
          for (std::size_t c = 0; c < C; ++c)
            for (int ky = -1; ky <= 1; ++ky)
              for (int kx = -1; kx <= 1; ++kx) {
                const long sy = static_cast<long>(y) + ky, sx = static_cast<long>(xx) + kx;
                if (sy < 0 || sx < 0 || sy >= static_cast<long>(H) || sx >= static_cast<long>(W)) continue;
                s += x[((n * C + c) * H + sy) * W + sx] * k[((o * C + c) * 3 + ky + 1) * 3 + kx + 1];
              }
          out[((n * O + o) * H + y) * W + xx] = s;
        }
  return out;
}

std::vector<double> relu_reference(std::vector<double> v) {
  for (auto& x : v) x = std::max(x, 0.0);
  return v;
}

}  // namespace

TEST_CASE("default encoder geometry and parameter count") {
  EncoderConfig cfg;
  const auto path = cfg.spatial_path();
  REQUIRE(path.size() == 5);
  const std::size_t expect[] = {84, 42, 21, 11, 6};
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(path[i][0] == expect[i]);
    CHECK(path[i][1] == expect[i]);
  }
  CHECK(cfg.parameter_count() == 3255864);
  CHECK(std::abs(static_cast<double>(cfg.parameter_count()) - 3.3e6) <= 0.02 * 3.3e6);

  ParameterSet<float> params;
  Rng rng(1);
  Encoder<float> enc(cfg, params, rng);
  CHECK(params.scalar_count() == cfg.parameter_count());
  std::size_t kernels = 0;
  for (const auto& e : params.entries()) {
    if (e.array.rank() == 4) ++kernels;
  }
  CHECK(kernels == 20);

  const auto z = enc.forward(DiffArray<float>::zeros({2, 4, 84, 84}));
  CHECK(z.shape() == Shape{2, 512});
}

TEST_CASE("toy encoder geometry") {
  const auto cfg = EncoderConfig::toy();
  const auto path = cfg.spatial_path();
  CHECK(path.back()[0] == 1);
  CHECK(path.back()[1] == 1);
  ParameterSet<double> params;
  Rng rng(2);
  Encoder<double> enc(cfg, params, rng);
  CHECK(enc.forward(D::zeros({1, 4, 16, 16})).shape() == Shape{1, 32});
}

TEST_CASE("inputs below 16 pixels are rejected at construction") {
  auto cfg = EncoderConfig::toy();
  cfg.in_height = 15;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  ParameterSet<double> params;
  Rng rng(3);
  CHECK_THROWS_AS(Encoder<double>(cfg, params, rng), ConfigError);
}

TEST_CASE("encoder rejects frames of the wrong shape") {
  ParameterSet<double> params;
  Rng rng(3);
  Encoder<double> enc(EncoderConfig::toy(), params, rng);
  CHECK_THROWS_AS(enc.forward(D::zeros({1, 3, 16, 16})), DimensionError);
}

TEST_CASE("zero weights and zero input give a zero latent") {
  ParameterSet<double> params;
  Rng rng(4);
  Encoder<double> enc(EncoderConfig::toy(), params, rng);
  test::fill_params(params, 0.0);
  const auto z = enc.forward(D::zeros({3, 4, 16, 16}));
  for (double v : z.values()) CHECK(v == 0.0);
}

TEST_CASE("latents stay strictly inside (-1, 1)") {
  ParameterSet<double> params;
  Rng rng(5);
  Encoder<double> enc(EncoderConfig::toy(), params, rng);
  // Inflate the projection so the tanh operates near saturation.
  for (auto& e : params.entries()) {
    if (e.name.find("fc/weight") == std::string::npos) continue;
    for (auto& v : e.array.mutable_values()) v *= 50.0;
  }
  std::vector<std::uint8_t> frames(8 * 4 * 16 * 16);
  for (auto& f : frames) f = static_cast<std::uint8_t>(rng.below(256));
  const auto z = enc.forward(frames_to_array<double>(frames, 8, EncoderConfig::toy()));
  for (double v : z.values()) {
    CHECK(v > -1.0);
    CHECK(v < 1.0);
  }
}

TEST_CASE("encoding is permutation-equivariant over the batch") {
  ParameterSet<double> params;
  Rng rng(6);
  const auto cfg = EncoderConfig::toy();
  Encoder<double> enc(cfg, params, rng);
  const std::size_t B = 7, frame = 4 * 16 * 16;
  std::vector<std::uint8_t> frames(B * frame);
  for (auto& f : frames) f = static_cast<std::uint8_t>(rng.below(256));
  const std::vector<std::size_t> perm{3, 0, 6, 1, 5, 2, 4};
  std::vector<std::uint8_t> shuffled(frames.size());
  for (std::size_t i = 0; i < B; ++i) {
    std::copy_n(frames.begin() + perm[i] * frame, frame, shuffled.begin() + i * frame);
  }
  const auto z = enc.forward(frames_to_array<double>(frames, B, cfg));
  const auto zs = enc.forward(frames_to_array<double>(shuffled, B, cfg));
  for (std::size_t i = 0; i < B; ++i) {
    for (std::size_t j = 0; j < 32; ++j) CHECK(zs.values()[i * 32 + j] == doctest::Approx(z.values()[perm[i] * 32 + j]).epsilon(1e-12));
  }
}

TEST_CASE("frames are scaled into [0, 1]") {
  auto cfg = EncoderConfig::toy();
  std::vector<std::uint8_t> px(4 * 16 * 16, 0);
  px[0] = 255;
  px[1] = 51;
  const auto a = frames_to_array<double>(px, 1, cfg);
  CHECK(a.shape() == Shape{1, 4, 16, 16});
  CHECK(a.values()[0] == 1.0);
  CHECK(a.values()[1] == doctest::Approx(0.2).epsilon(1e-15));
  CHECK_THROWS_AS(frames_to_array<double>(px, 2, cfg), DimensionError);
}

TEST_CASE("residual block") {
  Rng rng(7);
  SUBCASE("zero conv weights pass the input through") {
    const auto x = random_array(rng, {2, 3, 5, 4});
    const auto k = D::zeros({3, 3, 3, 3});
    const auto b = D::zeros({3});
    const auto y = residual_block(x, k, b, k, b);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(y.values()[i] == x.values()[i]);
  }
  SUBCASE("zero input and zero bias give zero output") {
    const auto x = D::zeros({1, 8, 5, 5});
    const auto k1 = random_array(rng, {8, 8, 3, 3});
    const auto k2 = random_array(rng, {8, 8, 3, 3});
    const auto b = D::zeros({8});
    const auto y = residual_block(x, k1, b, k2, b);
    for (double v : y.values()) CHECK(v == 0.0);
  }
  SUBCASE("random 8-channel 5x5 instance against composed loops") {
    const auto x = random_array(rng, {2, 8, 5, 5});
    const auto k1 = random_array(rng, {8, 8, 3, 3});
    const auto b1 = random_array(rng, {8});
    const auto k2 = random_array(rng, {8, 8, 3, 3});
    const auto b2 = random_array(rng, {8});
    const std::vector<double> xv(x.values().begin(), x.values().end());
    auto mid = conv_reference(relu_reference(xv), k1.values(), b1.values(), 2, 8, 8, 5, 5);
    auto out = conv_reference(relu_reference(mid), k2.values(), b2.values(), 2, 8, 8, 5, 5);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += xv[i];
    CHECK(test::max_abs_diff(residual_block(x, k1, b1, k2, b2).values(), out) < 1e-12);
  }
}

TEST_CASE("gradient reaches every encoder parameter") {
  ParameterSet<double> params;
  Rng rng(8);
  const auto cfg = EncoderConfig::toy();
  Encoder<double> enc(cfg, params, rng);
  std::vector<std::uint8_t> frames(3 * 4 * 16 * 16);
  for (auto& f : frames) f = static_cast<std::uint8_t>(rng.below(256));
  sum(enc.forward(frames_to_array<double>(frames, 3, cfg))).backward();
  for (const auto& e : params.entries()) {
    const auto g = e.array.grad();
    const bool nonzero = std::any_of(g.begin(), g.end(), [](double v) { return v != 0.0; });
    CHECK_MESSAGE(nonzero, e.name);
  }
}

TEST_CASE("toy encoder and heads pass a gradient check") {
  ParameterSet<double> params;
  Rng rng(9);
  const auto cfg = EncoderConfig::toy();
  Encoder<double> enc(cfg, params, rng);
  ActorCritic<double> heads(32, 3, params, rng);
  // Nonzero biases so no ReLU sits exactly at its kink.
  for (auto& e : params.entries()) {
    if (e.name.find("bias") == std::string::npos) continue;
    for (auto& v : e.array.mutable_values()) v = rng.uniform(-0.1, 0.1);
  }
  std::vector<std::uint8_t> frames(2 * 4 * 16 * 16);
  for (auto& f : frames) f = static_cast<std::uint8_t>(rng.below(256));
  const auto input = frames_to_array<double>(frames, 2, cfg);
  const auto wl = random_array(rng, {2, 3}, false);
  const auto wv = random_array(rng, {2}, false);
  auto loss = [&] {
    const auto out = heads.act_value(enc.forward(input));
    return add(sum(mul(out.logits, wl)), sum(mul(out.value, wv)));
  };
  GradCheckOptions opt;
  opt.max_coordinates = 4000;
  const auto report = grad_check(loss, params.entries(), opt);
  INFO(report.failing_param, "[", report.failing_index, "]");
  CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("actor-critic heads") {
  SUBCASE("zero state and zero weights give a uniform policy and zero value") {
    ParameterSet<double> params;
    Rng rng(10);
    ActorCritic<double> heads(6, 4, params, rng);
    test::fill_params(params, 0.0);
    const auto out = heads.act_value(D::zeros({2, 6}));
    for (double p : out.probs) CHECK(p == doctest::Approx(0.25).epsilon(1e-15));
    for (double v : out.value.values()) CHECK(v == 0.0);
  }
  SUBCASE("default width reads the combined 1024-dim state") {
    ParameterSet<float> params;
    Rng rng(11);
    ActorCritic<float> heads(1024, 18, params, rng);
    CHECK(heads.actor_weight().shape() == Shape{18, 1024});
    CHECK(heads.critic_weight().shape() == Shape{1, 1024});
  }
  SUBCASE("hand-set two-action head on a three-dim state") {
    ParameterSet<double> params;
    Rng rng(12);
    ActorCritic<double> heads(3, 2, params, rng);
    set_param(params, "heads/actor/weight", {0.5, -1.0, 2.0, 0.25, 0.0, -0.75});
    set_param(params, "heads/actor/bias", {0.1, -0.2});
    set_param(params, "heads/critic/weight", {1.5, 0.5, -0.5});
    set_param(params, "heads/critic/bias", {0.3});
    const D s({1, 3}, {0.2, -0.4, 0.6});
    const auto out = heads.act_value(s);
    const double l0 = 0.5 * 0.2 + -1.0 * -0.4 + 2.0 * 0.6 + 0.1;
    const double l1 = 0.25 * 0.2 + 0.0 * -0.4 + -0.75 * 0.6 - 0.2;
    const double p0 = std::exp(l0) / (std::exp(l0) + std::exp(l1));
    CHECK(out.logits.values()[0] == doctest::Approx(l0).epsilon(1e-14));
    CHECK(out.logits.values()[1] == doctest::Approx(l1).epsilon(1e-14));
    CHECK(std::abs(out.probs[0] - p0) < 1e-12);
    CHECK(std::abs(out.probs[1] - (1.0 - p0)) < 1e-12);
    CHECK(out.value.values()[0] == doctest::Approx(1.5 * 0.2 + 0.5 * -0.4 - 0.5 * 0.6 + 0.3).epsilon(1e-14));
  }
  SUBCASE("probabilities are a distribution") {
    ParameterSet<double> params;
    Rng rng(13);
    ActorCritic<double> heads(16, 5, params, rng);
    const auto out = heads.act_value(random_array(rng, {9, 16}, false, -3.0, 3.0));
    for (std::size_t b = 0; b < 9; ++b) {
      double s = 0.0;
      for (std::size_t a = 0; a < 5; ++a) {
        CHECK(out.probs[b * 5 + a] >= 0.0);
        s += out.probs[b * 5 + a];
      }
      CHECK(std::abs(s - 1.0) < 1e-9);
    }
  }
  SUBCASE("state width mismatch is rejected") {
    ParameterSet<double> params;
    Rng rng(14);
    ActorCritic<double> heads(8, 2, params, rng);
    CHECK_THROWS_AS(heads.act_value(D::zeros({1, 7})), DimensionError);
  }
}
