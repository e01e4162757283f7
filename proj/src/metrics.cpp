// Copyright (c) 2026 The msumamba Authors
// SPDX-License-Identifier: Apache-2.0

#include "msu/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

namespace msu {

std::int64_t ConfusionCounts::total() const {
  if (classes.empty()) return 0;
  const auto& e = classes.front();
  return e.tp + e.fp + e.fn + e.tn;
}

void ConfusionCounts::merge(const ConfusionCounts& other) {
  if (other.classes.size() != classes.size()) {
    throw ContractViolation("ConfusionCounts::merge: class counts differ");
  }
  for (std::size_t k = 0; k < classes.size(); ++k) {
    classes[k].tp += other.classes[k].tp;
    classes[k].fp += other.classes[k].fp;
    classes[k].fn += other.classes[k].fn;
    classes[k].tn += other.classes[k].tn;
  }
}

void confusion_accumulate(const LabelBatch& pred, const LabelBatch& gt, ConfusionCounts& counts) {
  if (pred.batch != gt.batch || pred.height != gt.height || pred.width != gt.width) {
    throw ContractViolation("confusion_accumulate: prediction and ground truth shapes differ");
  }
  const std::int64_t k = counts.num_classes();
  check_labels(pred, k);
  check_labels(gt, k);
  // Joint histogram, then one-vs-rest per class.
  std::vector<std::int64_t> joint(static_cast<std::size_t>(k * k), 0);
  for (std::size_t i = 0; i < pred.values.size(); ++i) {
    ++joint[static_cast<std::size_t>(gt.values[i] * k + pred.values[i])];
  }
  const auto n = static_cast<std::int64_t>(pred.values.size());
  for (std::int64_t c = 0; c < k; ++c) {
    std::int64_t row = 0, col = 0;
    for (std::int64_t j = 0; j < k; ++j) {
      row += joint[static_cast<std::size_t>(c * k + j)];
      col += joint[static_cast<std::size_t>(j * k + c)];
    }
    const std::int64_t tp = joint[static_cast<std::size_t>(c * k + c)];
    auto& e = counts.classes[static_cast<std::size_t>(c)];
    e.tp += tp;
    e.fn += row - tp;
    e.fp += col - tp;
    e.tn += n - row - col + tp;
  }
}

namespace {

std::optional<double> ratio(std::int64_t num, std::int64_t den) {
  if (den == 0) return std::nullopt;
  return static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

ClassMetrics class_metrics(const ConfusionCounts::Entry& e) {
  ClassMetrics m;
  m.dice = ratio(2 * e.tp, 2 * e.tp + e.fp + e.fn);
  m.iou = ratio(e.tp, e.tp + e.fp + e.fn);
  m.precision = ratio(e.tp, e.tp + e.fp);
  m.sensitivity = ratio(e.tp, e.tp + e.fn);
  m.specificity = ratio(e.tn, e.tn + e.fp);
  return m;
}

MacroMetrics macro_average(const std::vector<ClassMetrics>& per_class, const std::vector<bool>& present) {
  if (per_class.size() != present.size()) throw ContractViolation("macro_average: size mismatch");
  bool any = false;
  for (std::size_t k = 1; k < present.size(); ++k) any = any || present[k];
  if (!any) throw EvaluationError("macro_average: no foreground class present");
  auto avg = [&](std::optional<double> ClassMetrics::*field) -> std::optional<double> {
    double s = 0;
    int n = 0;
    for (std::size_t k = 1; k < per_class.size(); ++k) {
      if (present[k] && (per_class[k].*field)) {
        s += *(per_class[k].*field);
        ++n;
      }
    }
    if (n == 0) return std::nullopt;
    return s / n;
  };
  MacroMetrics m;
  m.iou = avg(&ClassMetrics::iou);
  m.dice = avg(&ClassMetrics::dice);
  m.sensitivity = avg(&ClassMetrics::sensitivity);
  m.specificity = avg(&ClassMetrics::specificity);
  m.precision = avg(&ClassMetrics::precision);
  return m;
}

MetricReport compute_metrics(const ConfusionCounts& counts, std::vector<std::string> names) {
  MetricReport r;
  const auto k = static_cast<std::size_t>(counts.num_classes());
  if (names.empty()) {
    for (std::size_t i = 0; i < k; ++i) names.push_back("class" + std::to_string(i));
  }
  if (names.size() != k) throw ContractViolation("compute_metrics: class name count does not match");
  r.class_names = std::move(names);
  for (const auto& e : counts.classes) {
    r.per_class.push_back(class_metrics(e));
    r.present.push_back(e.tp + e.fp + e.fn > 0);
  }
  r.macro = macro_average(r.per_class, r.present);
  return r;
}

namespace {

std::string pct(const std::optional<double>& v) {
  if (!v) return "-";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", *v * 100.0);
  return buf;
}

nlohmann::json pct_json(const std::optional<double>& v) {
  if (!v) return nullptr;
  // Round-trip through the text rendering so JSON and table agree digit for digit.
  return std::stod(pct(v));
}

}  // namespace

nlohmann::json MetricReport::to_json() const {
  nlohmann::json classes = nlohmann::json::array();
  for (std::size_t k = 0; k < per_class.size(); ++k) {
    const auto& m = per_class[k];
    classes.push_back({{"index", k},
                       {"name", class_names[k]},
                       {"present", static_cast<bool>(present[k])},
                       {"IoU", pct_json(m.iou)},
                       {"DC", pct_json(m.dice)},
                       {"SE", pct_json(m.sensitivity)},
                       {"SP", pct_json(m.specificity)},
                       {"PRE", pct_json(m.precision)}});
  }
  return {{"classes", classes},
          {"macro",
           {{"mIoU", pct_json(macro.iou)},
            {"mDC", pct_json(macro.dice)},
            {"mSE", pct_json(macro.sensitivity)},
            {"mSP", pct_json(macro.specificity)},
            {"mPRE", pct_json(macro.precision)}}},
          {"units", "percent"}};
}

std::string MetricReport::to_table() const {
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof line, "%-8s %8s %8s %8s %8s %8s\n", "Item", "IoU", "DC", "SE", "SP", "PRE");
  os << line;
  for (std::size_t k = 1; k < per_class.size(); ++k) {
    if (!present[k]) continue;
    const auto& m = per_class[k];
    std::snprintf(line, sizeof line, "%-8s %8s %8s %8s %8s %8s\n", class_names[k].c_str(), pct(m.iou).c_str(),
                  pct(m.dice).c_str(), pct(m.sensitivity).c_str(), pct(m.specificity).c_str(),
                  pct(m.precision).c_str());
    os << line;
  }
  std::snprintf(line, sizeof line, "%-8s %8s %8s %8s %8s %8s\n", "mean", pct(macro.iou).c_str(),
                pct(macro.dice).c_str(), pct(macro.sensitivity).c_str(), pct(macro.specificity).c_str(),
                pct(macro.precision).c_str());
  os << line;
  return os.str();
}

LabelBatch argmax_labels(const Tensor& logits) {
  if (logits.ndim() != 4) throw ContractViolation("argmax_labels: expects [B,K,H,W]");
  const std::int64_t nb = logits.dim(0), k = logits.dim(1), h = logits.dim(2), w = logits.dim(3);
  LabelBatch out(nb, h, w);
  const std::int64_t plane = h * w;
  dispatch(logits.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto p = logits.data<T>();
    for (std::int64_t b = 0; b < nb; ++b) {
      for (std::int64_t i = 0; i < plane; ++i) {
        std::int32_t best = 0;
        T bv = p[static_cast<std::size_t>(b * k * plane + i)];
        for (std::int64_t c = 1; c < k; ++c) {
          const T v = p[static_cast<std::size_t>((b * k + c) * plane + i)];
          if (v > bv) {
            bv = v;
            best = static_cast<std::int32_t>(c);
          }
        }
        out.values[static_cast<std::size_t>(b * plane + i)] = best;
      }
    }
  });
  return out;
}

}  // namespace msu
