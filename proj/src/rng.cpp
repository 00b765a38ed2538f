// Copyright 2026 The P4O Authors
// SPDX-License-Identifier: Apache-2.0

#include "p4o/rng.hpp"

#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace p4o {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

Rng::Rng(std::uint64_t seed) : Rng(seed, 0, splitmix64(seed)) {}

Rng::Rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t engine_seed)
    : seed_(seed), stream_(stream), engine_(engine_seed) {}

double Rng::uniform() {
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) throw std::invalid_argument("Rng::below: n must be positive");
  const std::uint64_t limit = (~std::uint64_t{0}) - ((~std::uint64_t{0}) % n);
  std::uint64_t v;
  do {
    v = engine_();
  } while (v >= limit);
  return v % n;
}

double Rng::normal() {
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

Rng Rng::split(std::uint64_t stream_id) const {
  const std::uint64_t path = stream_ * 0x9E3779B97F4A7C15ULL + stream_id + 1;
  const std::uint64_t child_stream = splitmix64(path);
  return Rng(seed_, child_stream, splitmix64(splitmix64(seed_) ^ child_stream));
}

std::string Rng::serialize() const {
  std::ostringstream os;
  os << seed_ << ' ' << stream_ << ' ' << engine_;
  return os.str();
}

Rng Rng::deserialize(const std::string& text) {
  std::istringstream is(text);
  Rng r(0);
  is >> r.seed_ >> r.stream_ >> r.engine_;
  if (!is) throw std::invalid_argument("Rng::deserialize: malformed state");
  return r;
}

}  // namespace p4o
