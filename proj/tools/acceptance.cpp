// Copyright (c) 2026 The msumamba Authors
// SPDX-License-Identifier: Apache-2.0

// Acceptance gate: one PASS/FAIL line per criterion.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <set>
#include <string>
#include <vector>

#include <unistd.h>

#include "msu/checkpoint.hpp"
#include "msu/data.hpp"
#include "msu/runtime.hpp"
#include "msu/verify.hpp"

namespace fs = std::filesystem;
using namespace msu;
using Clock = std::chrono::steady_clock;

namespace {

// Pinned bounds.
constexpr double kOverfitDice = 0.90;
constexpr std::int64_t kOverfitMinSteps = 300;
constexpr std::int64_t kOverfitMaxSteps = 1000;
constexpr std::int64_t kOverfitEvalEvery = 50;
constexpr std::int64_t kLossWindow = 20;
constexpr double kOverfitMinutes = 30;
constexpr double kGradcheckMinutes = 10;
constexpr double kFirstStepTol = 1e-6;

struct Verdict {
  bool passed = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

class Scratch {
 public:
  Scratch() : root_(fs::temp_directory_path() / ("msu_accept_" + std::to_string(::getpid()))) {
    fs::remove_all(root_);
    fs::create_directories(root_);
  }
  ~Scratch() {
    std::error_code ec;
    fs::remove_all(root_, ec);
  }
  const fs::path& root() const { return root_; }

  /// The eight seeded 64x64 phantoms shared by the training criteria.
  fs::path phantoms() {
    const fs::path p = root_ / "phantoms";
    if (!fs::exists(p)) synthesize_dataset(p, 8, 7, PhantomSpec{});
    return p;
  }

 private:
  fs::path root_;
};

Verdict from_checks(const std::vector<CheckResult>& rs) {
  Verdict v{true, ""};
  for (const auto& r : rs) {
    v.passed = v.passed && r.passed;
    if (!v.detail.empty()) v.detail += "; ";
    v.detail += r.name + (r.passed ? " ok" : " FAILED") + " (" + r.detail + ")";
  }
  return v;
}

Verdict oracles(const std::vector<std::string>& names, std::uint64_t seed) {
  VerifyOptions o;
  o.seed = seed;
  return from_checks(run_oracles(names, o));
}

// --------------------------------------------------------------------------

Verdict shape_fidelity(std::uint64_t seed) {
  ModelConfig cfg;
  cfg.seed = seed;
  MSUMamba m(cfg);
  Tensor emb;
  NetworkHooks hooks;
  hooks.embed_out = &emb;
  NoGradGuard ng;
  const Tensor y = m.forward(Tensor::zeros({1, 3, 224, 224}), Context{}, &hooks);
  Verdict laws = oracles({"shape_laws"}, seed);
  const bool ok = y.shape() == Shape{1, 7, 224, 224} && emb.shape() == Shape{1, 96, 56, 56};
  return {ok && laws.passed, "224 input -> logits " + to_string(y.shape()) + ", embed " + to_string(emb.shape()) +
                                 "; " + laws.detail};
}

Verdict gradient_certification(std::uint64_t seed) {
  VerifyOptions o;
  o.seed = seed;
  o.trials = 20;
  const auto t0 = Clock::now();
  const auto rs = run_gradcheck_suite(o);
  const double minutes = seconds_since(t0) / 60;
  std::size_t failed = 0;
  double worst_block = 0, worst_model = 0;
  std::string fails;
  for (const auto& r : rs) {
    if (!r.passed) {
      ++failed;
      fails += " " + r.name;
    }
    if (r.name == "full_model") {
      worst_model = r.measured;
    } else {
      worst_block = std::max(worst_block, r.measured);
    }
  }
  const bool ok = failed == 0 && minutes <= kGradcheckMinutes && !rs.empty();
  return {ok, std::to_string(rs.size()) + " checks x 20 trials, worst op/block rel err " + fmt("%.2e", worst_block) +
                  " (<= 1e-4), full model " + fmt("%.2e", worst_model) + " (<= 1e-3), " + fmt("%.1f", minutes) +
                  " min" + (fails.empty() ? "" : ", failed:" + fails)};
}

/// Every 20-step window mean is no larger than the window mean 20 steps earlier.
std::pair<bool, std::int64_t> monotone_windows(const std::vector<double>& loss) {
  const auto n = static_cast<std::int64_t>(loss.size());
  std::vector<double> ma;
  double acc = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    acc += loss[static_cast<std::size_t>(i)];
    if (i >= kLossWindow) acc -= loss[static_cast<std::size_t>(i - kLossWindow)];
    if (i >= kLossWindow - 1) ma.push_back(acc / kLossWindow);
  }
  std::int64_t violations = 0;
  for (std::size_t i = static_cast<std::size_t>(kLossWindow); i < ma.size(); ++i) violations += ma[i] > ma[i - kLossWindow];
  return {violations == 0, violations};
}

Verdict overfit(Scratch& s, const fs::path& config) {
  RunConfig cfg = RunConfig::load(config);
  cfg.dataset_root = s.phantoms().string();
  cfg.output_dir = (s.root() / "overfit").string();
  cfg.val_every = 0;
  const bool shape_ok = cfg.model.base_dim == 16 && cfg.model.encoder_depths == std::vector<std::int64_t>{1, 1, 1, 1} &&
                        cfg.model.decoder_depths == std::vector<std::int64_t>{1, 1, 1, 1};

  const auto t0 = Clock::now();
  Trainer t(cfg);
  const auto train = load_dataset(cfg.dataset_root);
  const std::int64_t budget = std::min(kOverfitMaxSteps, t.total_steps());
  std::vector<double> losses;
  double best = 0, last = 0;
  std::int64_t reached = -1;
  while (t.steps_done() < budget) {
    const auto chunk = std::min(kOverfitEvalEvery, budget - t.steps_done());
    for (const auto& r : t.run(chunk).steps) losses.push_back(r.loss);
    if (t.steps_done() < kOverfitMinSteps) continue;
    last = evaluate(t.model(), train, thread_budget(1)).macro.dice.value_or(0.0);
    std::fprintf(stderr, "overfit: step %lld train mDice %.4f\n", static_cast<long long>(t.steps_done()), last);
    best = std::max(best, last);
    if (last >= kOverfitDice) {
      reached = t.steps_done();
      break;
    }
  }
  const double minutes = seconds_since(t0) / 60;
  const auto [monotone, violations] = monotone_windows(losses);
  const bool ok = shape_ok && reached > 0 && minutes <= kOverfitMinutes && monotone;
  std::string d = "train mDice " + fmt("%.4f", last) + " (best " + fmt("%.4f", best) + ", need >= 0.90) after " +
                  std::to_string(losses.size()) + " steps";
  d += reached > 0 ? ", reached at step " + std::to_string(reached) : ", not reached within " + std::to_string(budget);
  d += "; loss " + fmt("%.4f", losses.empty() ? 0 : losses.front()) + " -> " + fmt("%.4f", losses.empty() ? 0 : losses.back());
  d += "; 20-step average " + (monotone ? std::string("monotone") : std::to_string(violations) + " rises");
  d += "; " + fmt("%.1f", minutes) + " min";
  if (!shape_ok) d += "; config is not the tiny preset";
  return {ok, d};
}

std::set<std::string> param_names(const Module& m) {
  std::set<std::string> out;
  for (const auto& [n, p] : m.named_parameters()) out.insert(n);
  return out;
}

Verdict ablation(Scratch& s) {
  const std::vector<AblationVariant> variants{AblationVariant::med_only, AblationVariant::mcat, AblationVariant::dff,
                                              AblationVariant::adff};
  // Name fragments that may appear in the difference between consecutive variants.
  const std::vector<std::vector<std::string>> toggled{
      {".attn."}, {"fusion.spatial_enc.", "fusion.spatial_dec.", "fusion.norm."}, {"fusion.channel_mlp."}};
  std::vector<std::set<std::string>> sets;
  std::string d;
  bool ok = true;
  for (auto v : variants) {
    RunConfig cfg;
    cfg.model = apply_ablation(ModelConfig::tiny(16), v);
    cfg.model.seed = 1;
    cfg.dataset_root = s.phantoms().string();
    cfg.output_dir = (s.root() / ("ablation_" + to_string(v))).string();
    cfg.split = {1.0, 0.0, 0.0};
    cfg.augment.enabled = false;
    cfg.max_steps = 1;
    cfg.val_every = 0;
    Trainer t(cfg);
    const auto before = t.model().parameters().front().clone();
    const auto r = t.run();
    const bool stepped = r.steps.size() == 1 && std::isfinite(r.steps[0].loss) &&
                         before.to_vector() != t.model().parameters().front().to_vector();
    ok = ok && stepped;
    sets.push_back(param_names(t.model()));
    d += to_string(v) + (stepped ? " trained" : " FAILED to train") + ", ";
  }
  for (std::size_t i = 0; i + 1 < sets.size(); ++i) {
    std::vector<std::string> diff;
    std::set_symmetric_difference(sets[i].begin(), sets[i].end(), sets[i + 1].begin(), sets[i + 1].end(),
                                  std::back_inserter(diff));
    const bool exact = !diff.empty() && std::all_of(diff.begin(), diff.end(), [&](const std::string& n) {
      return std::any_of(toggled[i].begin(), toggled[i].end(),
                         [&](const std::string& f) { return n.find(f) != std::string::npos; });
    });
    ok = ok && exact;
    d += to_string(variants[i]) + "->" + to_string(variants[i + 1]) + " differs in " + std::to_string(diff.size()) +
         " names" + (exact ? "" : " (outside the toggled component)") + (i + 2 < sets.size() ? ", " : "");
  }
  return {ok, d};
}

Verdict reproducibility(Scratch& s, std::uint64_t seed) {
  auto first_loss = [&](const std::string& tag) {
    RunConfig cfg;
    cfg.model = ModelConfig::tiny(16);
    cfg.model.seed = seed;
    cfg.seed = seed;
    cfg.dataset_root = s.phantoms().string();
    cfg.output_dir = (s.root() / ("repro_" + tag)).string();
    cfg.batch_size = 4;
    cfg.device_threads = 1;
    cfg.val_every = 0;
    Trainer t(cfg);
    return t.run(1).steps.at(0).loss;
  };
  const double a = first_loss("a"), b = first_loss("b");
  const Verdict ck = oracles({"checkpoint_roundtrip"}, seed);
  const bool ok = std::abs(a - b) <= kFirstStepTol && ck.passed;
  return {ok, "first-step loss " + fmt("%.9f", a) + " vs " + fmt("%.9f", b) + " (|diff| " + fmt("%.1e", std::abs(a - b)) +
                  " <= 1e-6); " + ck.detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app("Acceptance criteria");
  std::vector<int> only;
  std::string config = std::string(MSU_SOURCE_DIR) + "/configs/tiny.json";
  std::uint64_t seed = 2024;
  app.add_option("--only", only, "Criterion numbers to run (default: all)")->check(CLI::Range(1, 11));
  app.add_option("--config", config, "Run config for the overfit criterion");
  app.add_option("--seed", seed, "Seed for the randomized checks");
  CLI11_PARSE(app, argc, argv);

  Scratch scratch;
  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
      {"shape fidelity", [&] { return shape_fidelity(seed); }},
      {"gradient certification", [&] { return gradient_certification(seed); }},
      {"scan oracle", [&] { return oracles({"scan_recurrence", "cross_scan_merge_identity"}, seed); }},
      {"wiring oracle", [&] { return oracles({"wiring_dual_branch", "wiring_vss_identity"}, seed); }},
      {"metric oracle", [&] { return oracles({"metric_brute_force"}, seed); }},
      {"loss spot values", [&] { return oracles({"loss_spot_values"}, seed); }},
      {"overfit trainability", [&] { return overfit(scratch, config); }},
      {"ablation mechanics", [&] { return ablation(scratch); }},
      {"monte carlo attention unbiasedness", [&] { return oracles({"mc_attention_unbiased"}, seed); }},
      {"augmentation statistics", [&] { return oracles({"augment_flip_frequency", "augment_alignment"}, seed); }},
      {"reproducibility", [&] { return reproducibility(scratch, seed); }},
  };

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int number = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), number) == only.end()) continue;
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("threw: ") + e.what()};
    }
    failed += !v.passed;
    std::printf("[%s] %2d %s: %s\n", v.passed ? "PASS" : "FAIL", number, criteria[i].first.c_str(), v.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
