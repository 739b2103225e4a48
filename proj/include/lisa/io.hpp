// Copyright 2026 The lisa-lab Authors
// SPDX-License-Identifier: Apache-2.0

// File formats.
//
// A checkpoint is a JSON manifest plus a sibling binary blob. The manifest
// records the model config, the sharing map, a directory of named tensors
// (shape, dtype, byte offset and length into the blob) and training
// provenance; LiSA tensors sit in a per-layer "lisa" block. The blob holds
// the raw little-endian values back to back, row-major, with no header.
//
// Sharing configs are JSON with either an explicit per-layer list
// (0-based) or comma-separated layer strings such as "5,6,17", read as
// 1-based unless "indexing" says otherwise.

#ifndef LISA_IO_HPP
#define LISA_IO_HPP

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "lisa/model.hpp"

namespace lisa {

using Json = nlohmann::json;

struct Provenance {
  std::uint64_t seed = 0;
  Index steps = 0;
  std::string corpus_hash;
  std::string command;

  friend bool operator==(const Provenance&, const Provenance&) = default;
};

enum class DType { f64, f32 };

/// Blob path for a manifest: "x.json" -> "x.bin", anything else gets ".bin" appended.
std::string blob_path(const std::string& manifest_path);

Json checkpoint_manifest(const Model& model, const Provenance& provenance, DType dtype = DType::f64);
void save_checkpoint(const Model& model, const std::string& manifest_path, const Provenance& provenance = {},
                     DType dtype = DType::f64);

struct Checkpoint {
  Model model;
  Provenance provenance;
};

/// Throws InputError for missing files, overlapping or out-of-range
/// tensor entries, or a blob whose length differs from the directory.
Checkpoint load_checkpoint(const std::string& manifest_path);

Json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const Json& j);

Json to_json(const LisaLayerConfig& config);
LisaLayerConfig lisa_config_from_json(const Json& j, const LisaLayerConfig& defaults = {});

Json to_json(const SharingConfig& sharing);
SharingConfig sharing_from_json(const Json& j, Index n_layers);
SharingConfig load_sharing_config(const std::string& path, Index n_layers);

/// Hex FNV-1a of the canonical JSON of the config pair.
std::string config_hash(const ModelConfig& model, const SharingConfig& sharing);
std::string hex64(std::uint64_t value);

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& contents);

/// CSV with '#'-prefixed key=value header lines (config hash, seed, ...)
/// followed by an RFC-4180 table with LF line ends.
struct CsvTable {
  std::vector<std::pair<std::string, std::string>> meta;
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;

  std::string str() const;
};

std::string csv_escape(const std::string& field);
/// Shortest round-tripping decimal form ("nan" for NaN).
std::string format_double(double value);

}  // namespace lisa

#endif  // LISA_IO_HPP
