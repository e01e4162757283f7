// Copyright (c) 2026 The msumamba Authors
// SPDX-License-Identifier: Apache-2.0

#include <fstream>

#include "helpers.hpp"
#include "msu/checkpoint.hpp"
#include "msu/runtime.hpp"

using namespace msu;
namespace fs = std::filesystem;

namespace {

RunConfig small_run(const fs::path& data, const fs::path& out) {
  RunConfig cfg;
  cfg.model = ModelConfig::tiny(8);
  cfg.model.seed = 11;
  cfg.seed = 5;
  cfg.batch_size = 2;
  cfg.epochs = 2;
  cfg.val_every = 0;
  cfg.split = {1.0, 0.0, 0.0};
  cfg.dataset_root = data.string();
  cfg.output_dir = out.string();
  return cfg;
}

std::vector<char> bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

struct Fixture {
  test::TempDir dir{"runtime"};
  fs::path data = dir.path() / "data";
  Fixture() {
    PhantomSpec spec;
    spec.height = 32;
    spec.width = 32;
    synthesize_dataset(data, 4, 3, spec);
  }
};

}  // namespace

TEST_CASE("run config is strict") {
  test::TempDir dir("cfg");
  RunConfig cfg = small_run("d", "o");
  auto j = cfg.to_json();
  CHECK(RunConfig::from_json(j).to_json() == j);
  j["optimizer"]["lr_typo"] = 1;
  CHECK_THROWS_AS(RunConfig::from_json(j), ConfigError);
  auto z = cfg.to_json();
  z["loss"]["focal_weight"] = 0.0;
  z["loss"]["dice_weight"] = 0.0;
  try {
    RunConfig::from_json(z).validate();
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("weight") != std::string::npos);
  }
  CHECK_THROWS_AS(RunConfig::load(dir.path() / "missing.json"), ConfigError);
}

TEST_CASE_FIXTURE(Fixture, "first-step loss is reproducible") {
  Trainer a(small_run(data, dir.path() / "a"));
  Trainer b(small_run(data, dir.path() / "b"));
  const double la = a.run(1).steps.at(0).loss, lb = b.run(1).steps.at(0).loss;
  CHECK(std::abs(la - lb) <= 1e-6);
}

TEST_CASE_FIXTURE(Fixture, "resume continues the uninterrupted run") {
  Trainer full(small_run(data, dir.path() / "full"));
  auto ref = full.run();
  REQUIRE(ref.steps.size() == 4);

  RunConfig cfg = small_run(data, dir.path() / "part");
  cfg.checkpoint_every = 1;
  Trainer part(cfg);
  part.run(1);
  Trainer resumed(cfg, dir.path() / "part" / "last.ckpt");
  auto rest = resumed.run();
  REQUIRE(rest.steps.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(rest.steps[i].loss - ref.steps[i + 1].loss) <= 1e-6);
}

TEST_CASE_FIXTURE(Fixture, "checkpoint round trip") {
  Trainer t(small_run(data, dir.path() / "ck"));
  t.run(2);
  const fs::path p1 = dir.path() / "ck" / "last.ckpt", p2 = dir.path() / "again.ckpt";
  auto loaded = load_checkpoint(p1);
  REQUIRE(loaded.state.has_value());
  save_checkpoint(*loaded.model, p2, &*loaded.state);
  CHECK(bytes(p1) == bytes(p2));

  Rng rng(1);
  Tensor x = test::random({1, 3, 32, 32}, rng, -1, 1, DType::f32);
  NoGradGuard ng;
  CHECK(test::bit_equal(t.model().forward(x, Context{}), loaded.model->forward(x, Context{})));

  auto raw = bytes(p1);
  raw.resize(raw.size() / 2);
  const fs::path cut = dir.path() / "cut.ckpt";
  std::ofstream(cut, std::ios::binary).write(raw.data(), static_cast<std::streamsize>(raw.size()));
  CHECK_THROWS_AS(load_checkpoint(cut), CheckpointError);
}

TEST_CASE_FIXTURE(Fixture, "evaluation and prediction") {
  Trainer t(small_run(data, dir.path() / "ev"));
  t.run(1);
  auto samples = load_dataset(data);
  auto rep1 = evaluate(t.model(), samples, 1);
  auto rep2 = evaluate(t.model(), samples, 2);
  CHECK(rep1.to_json() == rep2.to_json());

  Image img(50, 50, 40);
  Mask m = predict_mask(t.model(), img, true);
  CHECK(m.height == 50);
  CHECK(m.width == 50);
  validate_mask(m, 7, "prediction");
  CHECK(predict_mask(t.model(), img, true) == m);
  CHECK_THROWS(predict_mask(t.model(), img, false));
}

TEST_CASE_FIXTURE(Fixture, "missing dataset fails before compute") {
  RunConfig cfg = small_run(dir.path() / "nowhere", dir.path() / "x");
  CHECK_THROWS(Trainer(cfg));
}

TEST_CASE("thread budget reads the environment") {
  ::setenv("MSU_THREADS", "3", 1);
  CHECK(thread_budget(1) == 3);
  ::setenv("MSU_THREADS", "0", 1);
  CHECK(thread_budget(2) == 2);
  ::unsetenv("MSU_THREADS");
  CHECK(thread_budget(1) == 1);
}
