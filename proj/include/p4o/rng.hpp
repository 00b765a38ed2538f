// Copyright 2026 The P4O Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace p4o {

// 64-bit Mersenne Twister (std::mt19937_64, whose output sequence is fixed by
// the C++ standard) with portable conversions to real and integer variates.
//
// Stream splitting: split(k) seeds a fresh engine with
//   splitmix64(splitmix64(seed) ^ splitmix64(stream_path * 2^64/phi + k)),
// so child streams depend only on (root seed, path of stream ids) and never on
// how many numbers the parent has already drawn.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }

  std::uint64_t next_u64() { return engine_(); }
  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  // Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [0, n); n > 0. Rejection sampling, no modulo bias.
  std::uint64_t below(std::uint64_t n);
  // Standard normal via Box-Muller (no cached second variate).
  double normal();
  bool bernoulli(double p) { return uniform() < p; }

  Rng split(std::uint64_t stream_id) const;

  // Engine state as the standard text representation, plus seed and stream.
  std::string serialize() const;
  static Rng deserialize(const std::string& text);

  friend bool operator==(const Rng& a, const Rng& b) {
    return a.seed_ == b.seed_ && a.stream_ == b.stream_ && a.engine_ == b.engine_;
  }

 private:
  Rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t engine_seed);

  std::uint64_t seed_;
  std::uint64_t stream_;
  std::mt19937_64 engine_;
};

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace p4o
