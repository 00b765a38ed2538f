// Copyright 2026 The P4O Authors
// SPDX-License-Identifier: Apache-2.0

#include "p4o/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "p4o/errors.hpp"

namespace p4o {
namespace {

constexpr const char* kMagic = "P4O-CHECKPOINT";

void put_le(std::string& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xFF));
}

double get_le(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int b = 7; b >= 0; --b) bits = (bits << 8) | p[b];
  return std::bit_cast<double>(bits);
}

}  // namespace

void Checkpoint::add(std::string name, Shape shape, std::vector<double> values) {
  if (shape_size(shape) != values.size()) {
    throw DimensionError("Checkpoint::add: " + name + " shape " + shape_string(shape) +
                         " does not match " + std::to_string(values.size()) + " values");
  }
  if (contains(name)) throw CheckpointError("Checkpoint::add: duplicate entry " + name);
  entries.push_back({std::move(name), std::move(shape), std::move(values)});
}

bool Checkpoint::contains(const std::string& name) const {
  for (const auto& e : entries) {
    if (e.name == name) return true;
  }
  return false;
}

const CheckpointEntry& Checkpoint::at(const std::string& name) const {
  for (const auto& e : entries) {
    if (e.name == name) return e;
  }
  throw CheckpointError("checkpoint has no entry " + name);
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  nlohmann::json manifest;
  manifest["version"] = kCheckpointVersion;
  manifest["byte_order"] = "little";
  manifest["entries"] = nlohmann::json::array();
  std::size_t offset = 0;
  std::string payload;
  for (const auto& e : checkpoint.entries) {
    manifest["entries"].push_back(
        {{"name", e.name}, {"shape", e.shape}, {"dtype", "f64"}, {"offset", offset}, {"count", e.values.size()}});
    for (double v : e.values) put_le(payload, v);
    offset += e.values.size();
  }
  manifest["metadata"] = checkpoint.metadata;
  const std::string text = manifest.dump(1);

  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot open " + tmp.string() + " for writing");
    out << kMagic << ' ' << kCheckpointVersion << '\n' << text.size() << '\n' << text << '\n';
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!out) throw CheckpointError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::string magic;
  int version = 0;
  std::size_t header_bytes = 0;
  in >> magic >> version >> header_bytes;
  if (!in || magic != kMagic) throw CheckpointError(path.string() + " is not a checkpoint file");
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  in.get();  // newline after the byte count
  std::string text(header_bytes, '\0');
  in.read(text.data(), static_cast<std::streamsize>(header_bytes));
  if (in.get() != '\n' || !in) throw CheckpointError("truncated checkpoint manifest in " + path.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("malformed checkpoint manifest: " + std::string(e.what()));
  }
  std::string payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  Checkpoint ckpt;
  ckpt.metadata = manifest.value("metadata", nlohmann::json::object());
  for (const auto& e : manifest.at("entries")) {
    const auto offset = e.at("offset").get<std::size_t>();
    const auto count = e.at("count").get<std::size_t>();
    if (e.at("dtype").get<std::string>() != "f64") throw CheckpointError("unsupported dtype in checkpoint");
    if ((offset + count) * 8 > payload.size()) {
      throw CheckpointError("checkpoint entry " + e.at("name").get<std::string>() + " exceeds payload");
    }
    std::vector<double> values(count);
    const auto* base = reinterpret_cast<const unsigned char*>(payload.data()) + offset * 8;
    for (std::size_t i = 0; i < count; ++i) values[i] = get_le(base + 8 * i);
    ckpt.add(e.at("name").get<std::string>(), e.at("shape").get<Shape>(), std::move(values));
  }
  return ckpt;
}

}  // namespace p4o
