// Copyright 2026 The P4O Authors
// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint file layout (version 1):
//
//   P4O-CHECKPOINT 1\n
//   <manifest byte count, decimal>\n
//   <manifest: JSON text>\n
//   <payload: little-endian IEEE-754 binary64 values>
//
// The manifest lists every entry as {"name", "shape", "dtype": "f64",
// "offset", "count"}; offset and count are in values from the start of the
// payload. "metadata" carries free-form JSON (run config, counters, RNG
// states).

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "p4o/diff_array.hpp"

namespace p4o {

inline constexpr int kCheckpointVersion = 1;

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<CheckpointEntry> entries;

  void add(std::string name, Shape shape, std::vector<double> values);
  bool contains(const std::string& name) const;
  const CheckpointEntry& at(const std::string& name) const;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace p4o
