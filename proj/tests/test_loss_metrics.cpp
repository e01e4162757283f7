// Copyright (c) 2026 The msumamba Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <cstdio>

#include "helpers.hpp"
#include "msu/loss.hpp"
#include "msu/metrics.hpp"
#include "msu/ops.hpp"
#include "msu/verify.hpp"

using namespace msu;
using msu::test::f64;

namespace {

// Two-class single-pixel tensors [1,2,1,1] with foreground probability p.
std::pair<Tensor, Tensor> binary_pixel(double p, int y) {
  return {f64({1, 2, 1, 1}, {1 - p, p}), f64({1, 2, 1, 1}, {y == 0 ? 1.0 : 0.0, y == 1 ? 1.0 : 0.0})};
}

LabelBatch labels(std::int64_t h, std::int64_t w, std::vector<std::int32_t> v) {
  LabelBatch b(1, h, w);
  b.values = std::move(v);
  return b;
}

}  // namespace

TEST_SUITE("focal loss") {
  TEST_CASE("standard form spot value") {
    // Only the foreground class carries the positive term; mean over K entries.
    LossConfig cfg;
    Tensor p = f64({1, 1, 1, 1}, {0.9}), y = f64({1, 1, 1, 1}, {1});
    CHECK(std::abs(focal_loss(p, y, cfg).item() - 0.25 * 0.01 * -std::log(0.9)) < 1e-12);
    CHECK(std::abs(focal_loss(p, y, cfg).item() - 2.6341e-4) < 1e-8);
  }

  TEST_CASE("printed form negative term") {
    LossConfig cfg;
    cfg.focal_form = FocalForm::printed;
    Tensor p = f64({1, 1, 1, 1}, {0.5}), y = f64({1, 1, 1, 1}, {0});
    CHECK(focal_loss(p, y, cfg).item() == doctest::Approx(0.519860).epsilon(1e-6));
  }

  TEST_CASE("near-perfect prediction is near zero") {
    LossConfig cfg;
    auto [p, y] = binary_pixel(1 - 1e-7, 1);
    CHECK(focal_loss(p, y, cfg).item() < 1e-12);
  }
}

TEST_SUITE("dice loss") {
  TEST_CASE("half overlap") {
    LossConfig cfg;
    cfg.dice_smooth = 0;
    // Background channel is empty in the target so only the foreground term matters.
    Tensor p = f64({1, 2, 1, 2}, {0, 0, 0.5, 0.5}), y = f64({1, 2, 1, 2}, {0, 0, 1, 0});
    CHECK(std::abs(dice_loss(p, y, cfg).item() - 0.5) < 1e-9);
  }

  TEST_CASE("perfect overlap tends to zero") {
    LossConfig cfg;
    cfg.dice_smooth = 1e-9;
    Tensor y = f64({1, 2, 2, 2}, {1, 0, 1, 0, 0, 1, 0, 1});
    CHECK(dice_loss(y, y, cfg).item() < 1e-9);
  }

  TEST_CASE("empty class with smoothing scores zero") {
    LossConfig cfg;
    Tensor z = f64({1, 2, 1, 2}, {1, 1, 0, 0});
    CHECK(dice_loss(z, z, cfg).item() == 0.0);
  }
}

TEST_SUITE("combined loss") {
  Tensor logits_for(const LabelBatch& y, std::int64_t k, double mag) {
    std::vector<double> v(static_cast<std::size_t>(k * y.size()), -mag);
    for (std::int64_t i = 0; i < y.size(); ++i) v[static_cast<std::size_t>(y.values[static_cast<std::size_t>(i)] * y.size() + i)] = mag;
    return f64({1, k, y.height, y.width}, v);
  }

  TEST_CASE("weights select the terms") {
    Rng rng(1);
    LabelBatch y = labels(3, 3, {0, 1, 2, 2, 1, 0, 0, 0, 1});
    Tensor logits = test::random({1, 3, 3, 3}, rng, -2, 2);
    LossConfig both;
    auto t = combined_loss(logits, y, both);
    LossConfig focal_only = both, dice_only = both;
    focal_only.dice_weight = 0;
    dice_only.focal_weight = 0;
    CHECK(combined_loss(logits, y, focal_only).total.item() == doctest::Approx(t.focal.item()).epsilon(1e-14));
    CHECK(combined_loss(logits, y, dice_only).total.item() == doctest::Approx(t.dice.item()).epsilon(1e-14));
    CHECK(t.total.item() == doctest::Approx(t.focal.item() + t.dice.item()).epsilon(1e-14));
  }

  TEST_CASE("confident correct logits") {
    LabelBatch y = labels(2, 3, {0, 1, 2, 3, 4, 5});
    CHECK(combined_loss(logits_for(y, 7, 20), y, LossConfig{}).total.item() < 1e-3);
  }

  TEST_CASE("both weights zero is rejected") {
    LossConfig cfg;
    cfg.focal_weight = 0;
    cfg.dice_weight = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
  }

  TEST_CASE("out-of-range labels are rejected") {
    LabelBatch y = labels(1, 2, {0, 9});
    CHECK_THROWS(combined_loss(Tensor::zeros({1, 3, 1, 2}, DType::f64), y, LossConfig{}));
  }
}

TEST_SUITE("metrics") {
  TEST_CASE("hand-counted pixels") {
    ConfusionCounts c(2);
    confusion_accumulate(labels(2, 2, {1, 0, 1, 0}), labels(2, 2, {1, 1, 0, 0}), c);
    CHECK(c.classes[1].tp == 1);
    CHECK(c.classes[1].fp == 1);
    CHECK(c.classes[1].fn == 1);
    CHECK(c.classes[1].tn == 1);
    ConfusionCounts d(2);
    confusion_accumulate(labels(2, 2, {1, 1, 1, 1}), labels(2, 2, {1, 1, 1, 1}), d);
    CHECK(d.classes[1].tp == 4);
    CHECK(d.classes[1].tn == 0);
  }

  TEST_CASE("ratios from counts") {
    auto m = class_metrics({2, 1, 1, 8});
    CHECK(*m.dice == doctest::Approx(4.0 / 6));
    CHECK(*m.iou == 0.5);
    CHECK(*m.precision == doctest::Approx(2.0 / 3));
    CHECK(*m.sensitivity == doctest::Approx(2.0 / 3));
    CHECK(*m.specificity == doctest::Approx(8.0 / 9));
    auto p = class_metrics({5, 0, 0, 3});
    CHECK(*p.dice == 1);
    CHECK(*p.iou == 1);
    CHECK(*p.sensitivity == 1);
    CHECK(*p.specificity == 1);
    CHECK(*p.precision == 1);
  }

  TEST_CASE("accumulation is additive") {
    Rng rng(2);
    auto rnd = [&] {
      LabelBatch b(1, 4, 4);
      for (auto& v : b.values) v = static_cast<std::int32_t>(rng() % 3);
      return b;
    };
    LabelBatch p1 = rnd(), g1 = rnd(), p2 = rnd(), g2 = rnd();
    ConfusionCounts a(3), b(3), both(3);
    confusion_accumulate(p1, g1, a);
    confusion_accumulate(p2, g2, b);
    a.merge(b);
    LabelBatch pc(2, 4, 4), gc(2, 4, 4);
    std::copy(p1.values.begin(), p1.values.end(), pc.values.begin());
    std::copy(p2.values.begin(), p2.values.end(), pc.values.begin() + 16);
    std::copy(g1.values.begin(), g1.values.end(), gc.values.begin());
    std::copy(g2.values.begin(), g2.values.end(), gc.values.begin() + 16);
    confusion_accumulate(pc, gc, both);
    for (int k = 0; k < 3; ++k) {
      CHECK(a.classes[static_cast<std::size_t>(k)].tp == both.classes[static_cast<std::size_t>(k)].tp);
      CHECK(a.classes[static_cast<std::size_t>(k)].fp == both.classes[static_cast<std::size_t>(k)].fp);
      CHECK(a.classes[static_cast<std::size_t>(k)].fn == both.classes[static_cast<std::size_t>(k)].fn);
      CHECK(a.classes[static_cast<std::size_t>(k)].tn == both.classes[static_cast<std::size_t>(k)].tn);
    }
  }

  TEST_CASE("brute force agreement and dice-iou duality") {
    Rng rng(3);
    for (int trial = 0; trial < 100; ++trial) {
      const std::int64_t k = 2 + static_cast<std::int64_t>(rng() % 6);
      LabelBatch p(1, 7, 9), g(1, 7, 9);
      for (auto& v : p.values) v = static_cast<std::int32_t>(rng() % static_cast<std::uint64_t>(k));
      for (auto& v : g.values) v = static_cast<std::int32_t>(rng() % static_cast<std::uint64_t>(k));
      ConfusionCounts c(k);
      confusion_accumulate(p, g, c);
      auto want = oracle::confusion(p.values, g.values, k);
      auto rep = compute_metrics(c);
      for (std::int64_t i = 0; i < k; ++i) {
        const auto& e = c.classes[static_cast<std::size_t>(i)];
        const auto& o = want[static_cast<std::size_t>(i)];
        REQUIRE(e.tp == o.tp);
        REQUIRE(e.fp == o.fp);
        REQUIRE(e.fn == o.fn);
        REQUIRE(e.tn == o.tn);
        const auto& m = rep.per_class[static_cast<std::size_t>(i)];
        if (m.iou && m.dice) CHECK(std::abs(*m.dice - 2 * *m.iou / (1 + *m.iou)) < 1e-12);
      }
    }
  }

  TEST_CASE("macro excludes background and absent classes") {
    ConfusionCounts c(4);
    c.classes[0] = {10, 0, 0, 10};
    c.classes[1] = {2, 3, 0, 15};  // IoU 0.4
    c.classes[2] = {3, 2, 0, 15};  // IoU 0.6
    c.classes[3] = {0, 0, 0, 20};  // absent
    auto rep = compute_metrics(c);
    CHECK_FALSE(rep.present[3]);
    CHECK(*rep.macro.iou == doctest::Approx(0.5));
    MacroMetrics same = macro_average({ClassMetrics{0.3, 0.3, 0.3, 0.3, 0.3}, ClassMetrics{0.3, 0.3, 0.3, 0.3, 0.3}},
                                      {true, true});
    CHECK(*same.iou == doctest::Approx(0.3));
  }

  TEST_CASE("all-background predictor") {
    LabelBatch g = labels(2, 3, {0, 1, 2, 2, 1, 0});
    LabelBatch p(1, 2, 3, 0);
    ConfusionCounts c(3);
    confusion_accumulate(p, g, c);
    auto rep = compute_metrics(c);
    for (int k = 1; k < 3; ++k) {
      CHECK(*rep.per_class[static_cast<std::size_t>(k)].sensitivity == 0);
      CHECK(*rep.per_class[static_cast<std::size_t>(k)].specificity == 1);
    }
  }

  TEST_CASE("json and table agree at two decimals") {
    ConfusionCounts c(3);
    c.classes[0] = {50, 3, 4, 43};
    c.classes[1] = {7, 2, 3, 88};
    c.classes[2] = {11, 5, 1, 83};
    auto rep = compute_metrics(c, {"background", "A", "B"});
    auto j = rep.to_json();
    const std::string table = rep.to_table();
    for (std::size_t k = 1; k < 3; ++k) {
      for (const char* key : {"IoU", "DC", "SE", "SP", "PRE"}) {
        char cell[32];
        std::snprintf(cell, sizeof cell, "%.2f", j["classes"][k][key].get<double>());
        CHECK_MESSAGE(table.find(cell) != std::string::npos, key << " " << cell);
      }
    }
    char m[32];
    std::snprintf(m, sizeof m, "%.2f", j["macro"]["mDC"].get<double>());
    CHECK(table.find(m) != std::string::npos);
  }

  TEST_CASE("argmax labels") {
    Tensor logits = f64({1, 3, 1, 2}, {0, 5, 1, 0, 2, 1});
    CHECK(argmax_labels(logits).values == std::vector<std::int32_t>{2, 0});
  }
}
