// Copyright (c) 2026 The msumamba Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <vector>

#include <json.hpp>

#include "msu/ops.hpp"

namespace msu {

/// Integer label maps [B,H,W], row-major.
struct LabelBatch {
  std::int64_t batch = 0;
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<std::int32_t> values;

  LabelBatch() = default;
  LabelBatch(std::int64_t b, std::int64_t h, std::int64_t w, std::int32_t fill = 0)
      : batch(b), height(h), width(w), values(static_cast<std::size_t>(b * h * w), fill) {}

  std::int64_t size() const { return batch * height * width; }
  std::int32_t& at(std::int64_t b, std::int64_t y, std::int64_t x) {
    return values[static_cast<std::size_t>((b * height + y) * width + x)];
  }
  std::int32_t at(std::int64_t b, std::int64_t y, std::int64_t x) const {
    return values[static_cast<std::size_t>((b * height + y) * width + x)];
  }
};

/// Throws DataError naming the first pixel outside [0, num_classes).
void check_labels(const LabelBatch& labels, std::int64_t num_classes);

/// [B,H,W] labels -> [B,K,H,W] one-hot in the given dtype.
Tensor one_hot(const LabelBatch& labels, std::int64_t num_classes, DType dtype);

enum class FocalForm {
  standard,  // negative term modulated by p^gamma
  printed,   // negative term modulated by p^y
};

struct LossConfig {
  double alpha = 0.25;
  double gamma = 2.0;
  double focal_weight = 1.0;
  double dice_weight = 1.0;
  double dice_smooth = 1.0;
  FocalForm focal_form = FocalForm::standard;

  /// Throws ConfigError naming the offending field.
  void validate() const;
  nlohmann::json to_json() const;
  static LossConfig from_json(const nlohmann::json& j);
};

/// Probabilities are clamped to [eps, 1-eps] before the logarithms.
inline constexpr double kProbEps = 1e-7;

/// Mean over all B·K·H·W entries of the per-entry focal term.
Tensor focal_loss(const Tensor& probs, const Tensor& target_onehot, const LossConfig& cfg);

/// 1 - (2Σp·y + s)/(Σp + Σy + s) per (sample, foreground class), averaged
/// over foreground classes and then over the batch.
Tensor dice_loss(const Tensor& probs, const Tensor& target_onehot, const LossConfig& cfg);

struct LossTerms {
  Tensor total;
  Tensor focal;
  Tensor dice;
};

/// softmax(logits) -> one-hot(target) -> weighted focal + dice.
LossTerms combined_loss(const Tensor& logits, const LabelBatch& target, const LossConfig& cfg);

}  // namespace msu
