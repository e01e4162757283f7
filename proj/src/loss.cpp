// Copyright (c) 2026 The msumamba Authors
// SPDX-License-Identifier: Apache-2.0

#include "msu/loss.hpp"

#include "msu/json_util.hpp"

namespace msu {

void check_labels(const LabelBatch& labels, std::int64_t num_classes) {
  if (static_cast<std::int64_t>(labels.values.size()) != labels.size()) {
    throw ContractViolation("labels: storage does not match [B,H,W]");
  }
  for (std::int64_t b = 0; b < labels.batch; ++b) {
    for (std::int64_t y = 0; y < labels.height; ++y) {
      for (std::int64_t x = 0; x < labels.width; ++x) {
        const auto v = labels.at(b, y, x);
        if (v < 0 || v >= num_classes) {
          throw DataError("label " + std::to_string(v) + " at (sample " + std::to_string(b) + ", row " +
                          std::to_string(y) + ", col " + std::to_string(x) + ") outside [0, " +
                          std::to_string(num_classes) + ")");
        }
      }
    }
  }
}

Tensor one_hot(const LabelBatch& labels, std::int64_t num_classes, DType dtype) {
  check_labels(labels, num_classes);
  const std::int64_t plane = labels.height * labels.width;
  Tensor out = Tensor::zeros({labels.batch, num_classes, labels.height, labels.width}, dtype);
  dispatch(dtype, [&](auto tag) {
    using T = decltype(tag);
    auto p = out.mutable_data<T>();
    for (std::int64_t b = 0; b < labels.batch; ++b) {
      for (std::int64_t i = 0; i < plane; ++i) {
        const auto k = labels.values[static_cast<std::size_t>(b * plane + i)];
        p[static_cast<std::size_t>((b * num_classes + k) * plane + i)] = T(1);
      }
    }
  });
  return out;
}

void LossConfig::validate() const {
  if (!(alpha > 0 && alpha < 1)) throw ConfigError("loss.alpha: must lie in (0, 1)");
  if (!(gamma >= 0)) throw ConfigError("loss.gamma: must be >= 0");
  if (!(focal_weight >= 0)) throw ConfigError("loss.focal_weight: must be >= 0");
  if (!(dice_weight >= 0)) throw ConfigError("loss.dice_weight: must be >= 0");
  if (!(focal_weight + dice_weight > 0)) {
    throw ConfigError("loss.focal_weight + loss.dice_weight: must be > 0 (both weights are zero)");
  }
  if (!(dice_smooth >= 0)) throw ConfigError("loss.dice_smooth: must be >= 0");
}

nlohmann::json LossConfig::to_json() const {
  return {{"alpha", alpha},
          {"gamma", gamma},
          {"focal_weight", focal_weight},
          {"dice_weight", dice_weight},
          {"dice_smooth", dice_smooth},
          {"focal_form", focal_form == FocalForm::standard ? "standard" : "printed"}};
}

LossConfig LossConfig::from_json(const nlohmann::json& j) {
  LossConfig c;
  JsonReader r(j, "loss");
  r.get("alpha", c.alpha);
  r.get("gamma", c.gamma);
  r.get("focal_weight", c.focal_weight);
  r.get("dice_weight", c.dice_weight);
  r.get("dice_smooth", c.dice_smooth);
  if (const auto* f = r.raw("focal_form")) {
    const std::string s = f->is_string() ? f->get<std::string>() : "";
    if (s == "standard") {
      c.focal_form = FocalForm::standard;
    } else if (s == "printed") {
      c.focal_form = FocalForm::printed;
    } else {
      throw ConfigError("loss.focal_form: expected 'standard' or 'printed'");
    }
  }
  r.finish();
  c.validate();
  return c;
}

namespace {

void check_probs(const Tensor& probs, const Tensor& target, const char* who) {
  if (probs.ndim() != 4) throw ContractViolation(std::string(who) + ": probs must be [B,K,H,W]");
  if (probs.shape() != target.shape()) {
    throw ContractViolation(std::string(who) + ": probs " + to_string(probs.shape()) + " vs target " +
                            to_string(target.shape()));
  }
  dispatch(probs.dtype(), [&](auto tag) {
    using T = decltype(tag);
    for (T v : probs.data<T>()) {
      if (!(v >= T(-1e-6) && v <= T(1 + 1e-6))) {
        throw ContractViolation(std::string(who) + ": probability " + std::to_string(static_cast<double>(v)) +
                                " outside [0, 1]");
      }
    }
  });
}

}  // namespace

Tensor focal_loss(const Tensor& probs, const Tensor& y, const LossConfig& cfg) {
  check_probs(probs, y, "focal_loss");
  Tensor p = clamp(probs, kProbEps, 1 - kProbEps);
  Tensor q = 1.0 - p;
  Tensor pos = pow_scalar(q, cfg.gamma) * y * log(p) * cfg.alpha;
  Tensor neg_mod = cfg.focal_form == FocalForm::standard ? pow_scalar(p, cfg.gamma) : exp(y * log(p));
  Tensor negative = neg_mod * (1.0 - y) * log(q) * (1 - cfg.alpha);
  return -mean(pos + negative);
}

Tensor dice_loss(const Tensor& probs, const Tensor& y, const LossConfig& cfg) {
  check_probs(probs, y, "dice_loss");
  const std::int64_t k = probs.dim(1);
  if (k < 2) throw ContractViolation("dice_loss: needs a background and at least one foreground class");
  Tensor p = slice(probs, 1, 1, k - 1);
  Tensor t = slice(y, 1, 1, k - 1);
  Tensor inter = sum(p * t, {2, 3});
  Tensor denom = sum(p, {2, 3}) + sum(t, {2, 3});
  Tensor ratio = (inter * 2.0 + cfg.dice_smooth) / (denom + cfg.dice_smooth);
  return mean(1.0 - ratio);
}

LossTerms combined_loss(const Tensor& logits, const LabelBatch& target, const LossConfig& cfg) {
  if (logits.ndim() != 4 || logits.dim(0) != target.batch || logits.dim(2) != target.height ||
      logits.dim(3) != target.width) {
    throw ContractViolation("combined_loss: logits " + to_string(logits.shape()) + " do not match labels [" +
                            std::to_string(target.batch) + "," + std::to_string(target.height) + "," +
                            std::to_string(target.width) + "]");
  }
  Tensor y = one_hot(target, logits.dim(1), logits.dtype());
  Tensor probs = softmax(logits, 1);
  LossTerms out;
  out.focal = focal_loss(probs, y, cfg);
  out.dice = dice_loss(probs, y, cfg);
  out.total = out.focal * cfg.focal_weight + out.dice * cfg.dice_weight;
  return out;
}

}  // namespace msu
