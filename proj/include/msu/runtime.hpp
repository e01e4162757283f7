// Copyright (c) 2026 The msumamba Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "msu/checkpoint.hpp"
#include "msu/data.hpp"
#include "msu/metrics.hpp"
#include "msu/optim.hpp"

namespace msu {

struct RunConfig {
  ModelConfig model{};
  LossConfig loss{};
  AugmentConfig augment{};
  OptimizerConfig optimizer{};
  SplitRatios split{};
  std::int64_t epochs = 10;
  /// When positive, training stops after this many steps regardless of epochs.
  std::int64_t max_steps = 0;
  std::int64_t batch_size = 8;
  std::uint64_t seed = 0;
  std::string dataset_root;
  std::string output_dir;
  /// 0 uses MSU_THREADS or 1.
  std::int64_t device_threads = 0;
  /// Validation every this many epochs; 0 disables it.
  std::int64_t val_every = 1;
  /// A resumable checkpoint every this many steps; 0 writes only at epoch ends.
  std::int64_t checkpoint_every = 0;

  void validate() const;
  nlohmann::json to_json() const;
  /// Strict: unknown keys anywhere are rejected.
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& path);
};

/// Worker count from MSU_THREADS (>= 1), else `fallback`.
int thread_budget(int fallback = 1);

/// Build, platform and library identification written into run directories.
nlohmann::json environment_fingerprint();

/// Append-only JSON-lines log.
class RunLog {
 public:
  explicit RunLog(const std::filesystem::path& path);
  void append(const nlohmann::json& record);

 private:
  std::ofstream os_;
};

struct StepRecord {
  std::int64_t step = 0;  // 1-based
  std::int64_t epoch = 0;
  double loss = 0, focal = 0, dice = 0, lr = 0, wall_time = 0;
};

struct TrainResult {
  std::vector<StepRecord> steps;
  std::optional<MetricReport> last_val;
  double best_val_dice = -1;
  bool finished = false;  // reached the configured end
};

/// Raised when training hits a non-finite loss; a diagnostic has been written.
class TrainingAborted : public Error {
 public:
  using Error::Error;
};

class Trainer {
 public:
  /// Validates the config and dataset before any compute. With `resume`, the
  /// model, optimizer, rng and loop position come from that checkpoint.
  Trainer(RunConfig cfg, std::optional<std::filesystem::path> resume = std::nullopt);

  /// Runs until the configured end or until `stop_after` more steps have been
  /// taken (for interruption tests).
  TrainResult run(std::int64_t stop_after = -1);

  MSUMamba& model() { return *model_; }
  std::int64_t total_steps() const { return total_steps_; }
  std::int64_t steps_done() const { return step_; }
  const DatasetSplit& data() const { return data_; }

 private:
  void new_epoch_order();
  std::vector<const Sample*> next_batch(Rng& rng, std::vector<Sample>& storage);
  TrainingState training_state() const;
  void save(const std::filesystem::path& path) const;

  RunConfig cfg_;
  DatasetSplit data_;
  std::unique_ptr<MSUMamba> model_;
  std::unique_ptr<Adam> opt_;
  Rng rng_;
  std::int64_t step_ = 0;
  std::int64_t epoch_ = 0;
  std::int64_t cursor_ = 0;  // position in order_
  std::vector<std::int64_t> order_;
  std::int64_t steps_per_epoch_ = 1;
  std::int64_t total_steps_ = 0;
  double best_val_dice_ = -1;
  std::filesystem::path out_;
  std::unique_ptr<RunLog> log_;
};

/// Eval-mode confusion counts over `samples`, parallel over images with
/// `threads` workers whose shards are merged.
ConfusionCounts evaluate_counts(MSUMamba& model, const std::vector<Sample>& samples, int threads = 1);

MetricReport evaluate(MSUMamba& model, const std::vector<Sample>& samples, int threads = 1);

/// Argmax mask for one image. With pad_to_32 the image is padded at the
/// bottom/right with gray and the result cropped back.
Mask predict_mask(MSUMamba& model, const Image& img, bool pad_to_32);

/// Palette colors blended over the image where the mask is foreground.
Image render_overlay(const Image& img, const Mask& mask, double alpha = 0.5);

}  // namespace msu
