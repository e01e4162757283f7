// Copyright (c) 2026 The msumamba Authors
// SPDX-License-Identifier: Apache-2.0

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <regex>
#include <string>
#include <vector>

#include "msu/checkpoint.hpp"
#include "msu/data.hpp"
#include "msu/debug.hpp"
#include "msu/runtime.hpp"
#include "msu/verify.hpp"

namespace fs = std::filesystem;
using namespace msu;

namespace {

enum Exit { kOk = 0, kValidation = 1, kRuntime = 2, kVerifyFailed = 3 };

std::pair<std::int64_t, std::int64_t> parse_size(const std::string& s) {
  std::smatch m;
  static const std::regex re(R"((\d+)[xX](\d+))");
  if (!std::regex_match(s, m, re)) throw ConfigError("--size: expected HxW, got '" + s + "'");
  return {std::stoll(m[1]), std::stoll(m[2])};
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot write '" + path.string() + "'");
  os << text;
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string out;
  std::int64_t count = 100;
  std::string size = "64x64";
  std::uint64_t seed = 0;
  std::string spec;
  bool force = false;
};

int cmd_synth(const SynthArgs& a) {
  const fs::path root(a.out);
  if (fs::exists(root) && !fs::is_directory(root)) throw ConfigError(a.out + ": exists and is not a directory");
  if (fs::exists(root) && !fs::is_empty(root)) {
    if (!a.force) throw ConfigError(a.out + ": directory is not empty (use --force to overwrite)");
    fs::remove_all(root / "images");
    fs::remove_all(root / "masks");
  }
  PhantomSpec spec;
  if (!a.spec.empty()) {
    std::ifstream is(a.spec);
    if (!is) throw ConfigError("cannot read phantom spec '" + a.spec + "'");
    spec = PhantomSpec::from_json(nlohmann::json::parse(is));
  }
  std::tie(spec.height, spec.width) = parse_size(a.size);
  synthesize_dataset(root, a.count, a.seed, spec);
  std::fprintf(stderr, "wrote %lld phantoms (%lldx%lld) to %s\n", static_cast<long long>(a.count),
               static_cast<long long>(spec.height), static_cast<long long>(spec.width), a.out.c_str());
  return kOk;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::string resume;
  std::optional<std::uint64_t> seed;
  std::string output_dir;
  std::int64_t stop_after = -1;
};

int cmd_train(const TrainArgs& a) {
  RunConfig cfg = RunConfig::load(a.config);
  if (a.seed) cfg.seed = *a.seed;
  if (!a.output_dir.empty()) cfg.output_dir = a.output_dir;
  std::optional<fs::path> resume;
  if (!a.resume.empty()) resume = a.resume;
  Trainer trainer(cfg, resume);
  const TrainResult r = trainer.run(a.stop_after);
  if (!r.steps.empty()) {
    std::fprintf(stderr, "trained %zu steps; final loss %.5f; outputs in %s\n", r.steps.size(), r.steps.back().loss,
                 cfg.output_dir.c_str());
  }
  return kOk;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string ckpt;
  std::string data;
  std::string split = "test";
  std::string out;
  std::optional<std::uint64_t> seed;
};

int cmd_evaluate(const EvalArgs& a) {
  LoadedCheckpoint ck = load_checkpoint(a.ckpt);
  const std::int64_t k = ck.model->config().num_classes;
  const fs::path root(a.data);
  if (fs::exists(root / "classmap.json")) {
    std::ifstream is(root / "classmap.json");
    const ClassMap cm = ClassMap::from_json(nlohmann::json::parse(is));
    if (cm.size() != k) {
      throw DataError(a.data + ": dataset has " + std::to_string(cm.size()) + " classes but the checkpoint predicts " +
                      std::to_string(k));
    }
  }
  std::vector<Sample> samples = load_dataset(root, k);
  std::vector<Sample> chosen;
  if (a.split == "all") {
    chosen = std::move(samples);
  } else {
    SplitRatios ratios;
    std::uint64_t seed = 0;
    if (ck.state && ck.state->meta.contains("run_config")) {
      const RunConfig rc = RunConfig::from_json(ck.state->meta["run_config"]);
      ratios = rc.split;
      seed = rc.seed;
    }
    if (a.seed) seed = *a.seed;
    DatasetSplit sp = split_dataset(std::move(samples), ratios, seed);
    chosen = a.split == "train" ? std::move(sp.train) : a.split == "val" ? std::move(sp.val) : std::move(sp.test);
  }
  if (chosen.empty()) throw DataError(a.data + ": split '" + a.split + "' is empty");
  ClassMap names;
  if (static_cast<std::int64_t>(names.names.size()) != k) {
    names.names.clear();
    for (std::int64_t i = 0; i < k; ++i) names.names.push_back("class" + std::to_string(i));
  }
  ConfusionCounts counts = evaluate_counts(*ck.model, chosen, thread_budget(1));
  MetricReport rep = compute_metrics(counts, names.names);
  std::cout << rep.to_table();
  if (!a.out.empty()) {
    nlohmann::json j = rep.to_json();
    j["checkpoint"] = a.ckpt;
    j["split"] = a.split;
    j["images"] = chosen.size();
    write_text(a.out, j.dump(2) + "\n");
  }
  return kOk;
}

// ---------------------------------------------------------------------------

struct PredictArgs {
  std::string ckpt;
  std::vector<std::string> inputs;
  std::string out;
  bool overlay = false;
  bool pad_to_32 = false;
};

int cmd_predict(const PredictArgs& a) {
  LoadedCheckpoint ck = load_checkpoint(a.ckpt);
  fs::create_directories(a.out);
  int failures = 0;
  for (const auto& in : a.inputs) {
    try {
      const Image img = read_image_png(in);
      const Mask m = predict_mask(*ck.model, img, a.pad_to_32);
      const std::string stem = fs::path(in).stem().string();
      write_mask_png(fs::path(a.out) / (stem + ".png"), m);
      if (a.overlay) write_image_png(fs::path(a.out) / (stem + "_overlay.png"), render_overlay(img, m));
    } catch (const Error& e) {
      ++failures;
      std::fprintf(stderr, "error: %s: %s\n", in.c_str(), e.what());
    }
  }
  if (failures) {
    std::fprintf(stderr, "%d of %zu inputs failed\n", failures, a.inputs.size());
    return kRuntime;
  }
  return kOk;
}

// ---------------------------------------------------------------------------

struct VerifyArgs {
  std::string suite = "all";
  std::string json;
  std::vector<std::string> only;
  int trials = 20;
  std::uint64_t seed = 2024;
  std::string inject_fault;
};

int cmd_verify(const VerifyArgs& a) {
  if (!a.inject_fault.empty()) debug::inject_gradient_fault(a.inject_fault);
  VerifyOptions opts;
  opts.trials = a.trials;
  opts.seed = a.seed;
  opts.on_result = [](const CheckResult& r) {
    std::printf("[%s] %-10s %-28s %7.2fs  %s\n", r.passed ? "PASS" : "FAIL", r.suite.c_str(), r.name.c_str(),
                r.seconds, r.detail.c_str());
    std::fflush(stdout);
  };
  auto pick = [&](const std::vector<std::string>& all) {
    if (a.only.empty()) return all;
    std::vector<std::string> keep;
    for (const auto& n : all) {
      if (std::find(a.only.begin(), a.only.end(), n) != a.only.end()) keep.push_back(n);
    }
    return keep;
  };
  std::vector<CheckResult> results;
  if (a.suite == "gradcheck" || a.suite == "all") {
    auto r = run_gradcheck(pick(gradcheck_names()), opts);
    results.insert(results.end(), r.begin(), r.end());
  }
  if (a.suite == "oracles" || a.suite == "all") {
    auto r = run_oracles(pick(oracle_names()), opts);
    results.insert(results.end(), r.begin(), r.end());
  }
  const nlohmann::json summary = verify_summary(results);
  if (!a.json.empty()) write_text(a.json, summary.dump(2) + "\n");
  std::printf("%zu checks, %zu failed\n", results.size(), summary["failed"].get<std::size_t>());
  for (const auto& r : results) {
    if (!r.passed) std::printf("failed: %s/%s\n", r.suite.c_str(), r.name.c_str());
  }
  return summary["passed"].get<bool>() ? kOk : kVerifyFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-scale dual-branch state-space segmentation: data synthesis, training and evaluation"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(MSU_VERSION));

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Write a seeded phantom dataset");
  synth->add_option("--out", sa.out, "Output dataset directory")->required();
  synth->add_option("--count", sa.count, "Number of samples")->capture_default_str();
  synth->add_option("--size", sa.size, "Image size HxW")->capture_default_str();
  synth->add_option("--seed", sa.seed, "Generator seed")->capture_default_str();
  synth->add_option("--spec", sa.spec, "Phantom spec JSON (optional)");
  synth->add_flag("--force", sa.force, "Overwrite a non-empty output directory");

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train a model from a run config");
  train->add_option("--config", ta.config, "Run config JSON")->required();
  train->add_option("--resume", ta.resume, "Checkpoint to resume from");
  train->add_option("--seed", ta.seed, "Override the config seed");
  train->add_option("--output-dir", ta.output_dir, "Override the config output directory");
  train->add_option("--stop-after", ta.stop_after, "Stop after this many steps")->group("");

  EvalArgs ea;
  auto* eval = app.add_subcommand("evaluate", "Compute segmentation metrics for a checkpoint");
  eval->add_option("--ckpt", ea.ckpt, "Checkpoint file")->required();
  eval->add_option("--data", ea.data, "Dataset directory")->required();
  eval->add_option("--split", ea.split, "train, val, test or all")
      ->check(CLI::IsMember({"train", "val", "test", "all"}))
      ->capture_default_str();
  eval->add_option("--out", ea.out, "Write the JSON report here");
  eval->add_option("--seed", ea.seed, "Split seed (defaults to the checkpoint's run seed)");

  PredictArgs pa;
  auto* predict = app.add_subcommand("predict", "Write argmax masks for images");
  predict->add_option("--ckpt", pa.ckpt, "Checkpoint file")->required();
  predict->add_option("--input", pa.inputs, "Input PNG images")->required();
  predict->add_option("--out", pa.out, "Output directory")->required();
  predict->add_flag("--overlay", pa.overlay, "Also write color overlays");
  predict->add_flag("--pad-to-32", pa.pad_to_32, "Pad inputs to a multiple of 32 and crop the result");

  VerifyArgs va;
  auto* verify = app.add_subcommand("verify", "Run the gradient and oracle verification suites");
  verify->add_option("--suite", va.suite, "gradcheck, oracles or all")
      ->check(CLI::IsMember({"gradcheck", "oracles", "all"}))
      ->capture_default_str();
  verify->add_option("--json", va.json, "Write a machine-readable summary here");
  verify->add_option("--only", va.only, "Run only the named checks");
  verify->add_option("--trials", va.trials, "Random trials per gradient check")->capture_default_str();
  verify->add_option("--seed", va.seed, "Suite seed")->capture_default_str();
  verify->add_option("--inject-fault", va.inject_fault, "Corrupt the backward pass of an op (self-test)")->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kValidation;
  }

  try {
    if (*synth) return cmd_synth(sa);
    if (*train) return cmd_train(ta);
    if (*eval) return cmd_evaluate(ea);
    if (*predict) return cmd_predict(pa);
    if (*verify) return cmd_verify(va);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kValidation;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kValidation;
  } catch (const InputError& e) {
    std::fprintf(stderr, "input error: %s\n", e.what());
    return kValidation;
  } catch (const CheckpointError& e) {
    std::fprintf(stderr, "checkpoint error: %s\n", e.what());
    return kValidation;
  } catch (const nlohmann::json::exception& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kValidation;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kRuntime;
  }
  return kOk;
}
