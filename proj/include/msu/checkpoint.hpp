// Copyright (c) 2026 The msumamba Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "msu/network.hpp"

namespace msu {

// File layout: "MSUM" | u64 LE header length | UTF-8 JSON header | payloads.
// Header: {format_version, config, tensors: [{name, group, dtype, shape,
// offset, nbytes}], training_state}. Offsets are relative to the first
// payload byte; payloads are raw little-endian row-major.
inline constexpr int kCheckpointVersion = 1;

struct CheckpointTensor {
  std::string name;
  std::string group;  // "param", "buffer" or "state"
  Tensor tensor;
};

struct CheckpointFile {
  int format_version = kCheckpointVersion;
  nlohmann::json config;
  nlohmann::json training_state;  // null when absent
  std::vector<CheckpointTensor> tensors;
};

void write_checkpoint_file(const std::filesystem::path& path, const CheckpointFile& file);
/// Throws CheckpointError on any structural defect.
CheckpointFile read_checkpoint_file(const std::filesystem::path& path);

/// Optimizer moments and run bookkeeping stored alongside the model.
struct TrainingState {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<NamedTensor> tensors;
};

void save_checkpoint(const MSUMamba& model, const std::filesystem::path& path,
                     const TrainingState* state = nullptr);

struct LoadedCheckpoint {
  std::unique_ptr<MSUMamba> model;
  std::optional<TrainingState> state;
};

/// Rebuilds the model from the embedded config and restores every parameter
/// and buffer. Missing, duplicate, extra or mis-shaped tensors are errors.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace msu
