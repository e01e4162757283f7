// Copyright (c) 2026 The msumamba Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "msu/loss.hpp"

namespace msu {

/// One-vs-rest pixel tallies per class.
struct ConfusionCounts {
  struct Entry {
    std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;
  };
  std::vector<Entry> classes;

  explicit ConfusionCounts(std::int64_t num_classes = 0)
      : classes(static_cast<std::size_t>(num_classes)) {}

  std::int64_t num_classes() const { return static_cast<std::int64_t>(classes.size()); }
  std::int64_t total() const;
  /// Sum of two shards over the same class set.
  void merge(const ConfusionCounts& other);
};

/// Adds pred vs gt tallies into counts. Shapes must agree and values must lie
/// in [0, K).
void confusion_accumulate(const LabelBatch& pred, const LabelBatch& gt, ConfusionCounts& counts);

struct ClassMetrics {
  // nullopt where the denominator is zero.
  std::optional<double> iou, dice, sensitivity, specificity, precision;
};

struct MacroMetrics {
  std::optional<double> iou, dice, sensitivity, specificity, precision;
};

struct MetricReport {
  std::vector<ClassMetrics> per_class;
  std::vector<bool> present;  // class occurs in prediction or ground truth
  MacroMetrics macro;
  std::vector<std::string> class_names;

  /// Percentages with two decimals; undefined values become null.
  nlohmann::json to_json() const;
  std::string to_table() const;
};

ClassMetrics class_metrics(const ConfusionCounts::Entry& e);

/// Unweighted means over present foreground classes (index > 0). Each metric
/// averages the classes where it is defined. Throws EvaluationError when no
/// foreground class is present.
MacroMetrics macro_average(const std::vector<ClassMetrics>& per_class, const std::vector<bool>& present);

MetricReport compute_metrics(const ConfusionCounts& counts, std::vector<std::string> class_names = {});

/// Per-pixel argmax over the class axis of logits [B,K,H,W].
LabelBatch argmax_labels(const Tensor& logits);

}  // namespace msu
