// Copyright (c) 2026 The msumamba Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <numeric>
#include <set>

#include "helpers.hpp"
#include "msu/loss.hpp"
#include "msu/network.hpp"
#include "msu/ops.hpp"

using namespace msu;

namespace {

std::set<std::string> names(const Module& m) {
  std::set<std::string> out;
  for (auto& [n, t] : m.named_parameters()) out.insert(n);
  return out;
}

std::vector<std::string> sym_diff(const std::set<std::string>& a, const std::set<std::string>& b) {
  std::vector<std::string> out;
  std::set_symmetric_difference(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
  return out;
}

bool all_contain(const std::vector<std::string>& v, const std::vector<std::string>& needles) {
  return std::all_of(v.begin(), v.end(), [&](const std::string& s) {
    return std::any_of(needles.begin(), needles.end(), [&](const std::string& n) { return s.find(n) != std::string::npos; });
  });
}

}  // namespace

TEST_CASE("full-size model maps 224 to per-pixel logits") {
  ModelConfig cfg;
  cfg.encoder_depths = {1, 1, 1, 1};
  cfg.decoder_depths = {1, 1, 1, 1};
  MSUMamba m(cfg);
  Tensor emb;
  NetworkHooks hooks;
  hooks.embed_out = &emb;
  NoGradGuard ng;
  Tensor y = m.forward(Tensor::zeros({1, 3, 224, 224}), Context{}, &hooks);
  CHECK(y.shape() == Shape{1, 7, 224, 224});
  CHECK(emb.shape() == Shape{1, 96, 56, 56});
}

TEST_CASE("tiny model stage shapes") {
  MSUMamba m(ModelConfig::tiny());
  std::vector<Tensor> enc, dec;
  NetworkHooks hooks;
  hooks.encoder_outputs = &enc;
  hooks.decoder_outputs = &dec;
  NoGradGuard ng;
  Tensor y = m.forward(Tensor::zeros({2, 3, 64, 64}), Context{}, &hooks);
  CHECK(y.shape() == Shape{2, 7, 64, 64});
  REQUIRE(enc.size() == 4);
  for (int i = 0; i < 4; ++i) CHECK(enc[static_cast<std::size_t>(i)].shape() == Shape{2, 16 << i, 16 >> i, 16 >> i});
  CHECK(dec.size() == 4);
}

TEST_CASE("inputs not divisible by 32 are rejected") {
  MSUMamba m(ModelConfig::tiny());
  NoGradGuard ng;
  CHECK_THROWS(m.forward(Tensor::zeros({1, 3, 48, 64}), Context{}));
}

TEST_CASE("seeded builds are identical and eval is deterministic") {
  ModelConfig cfg = ModelConfig::tiny();
  cfg.seed = 42;
  MSUMamba a(cfg), b(cfg);
  auto pa = a.named_parameters(), pb = b.named_parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].first == pb[i].first);
    CHECK(test::bit_equal(pa[i].second, pb[i].second));
  }
  Rng rng(1);
  Tensor x = test::random({1, 3, 64, 64}, rng, -1, 1, DType::f32);
  NoGradGuard ng;
  CHECK(test::bit_equal(a.forward(x, Context{}), a.forward(x, Context{})));
}

TEST_CASE("parameter accounting") {
  MSUMamba m(ModelConfig::tiny());
  const auto total = count_parameters(m);
  CHECK(total < 5'000'000);
  const auto parts = parameter_breakdown(m);
  CHECK(std::accumulate(parts.begin(), parts.end(), std::int64_t{0}, [](auto s, const auto& kv) { return s + kv.second; }) ==
        total);
  Rng rng(2);
  Linear lin(10, 10, true, InitOptions{}, rng);
  CHECK(count_parameters(lin) == 110);

  ModelConfig deeper = ModelConfig::tiny();
  deeper.conv_branch_depth = 2;
  CHECK(count_parameters(MSUMamba(deeper)) > total);
}

TEST_CASE("vss-only baseline wiring") {
  ModelConfig cfg = ModelConfig::tiny();
  cfg.encoder_block = EncoderBlockKind::vss_only;
  cfg.fusion = FusionKind::none;
  MSUMamba m(cfg);
  for (auto& stage : m.encoder)
    for (auto& blk : stage) {
      CHECK(blk->vss != nullptr);
      CHECK(blk->dual == nullptr);
    }
  const auto n = names(m);
  CHECK(std::none_of(n.begin(), n.end(), [](const std::string& s) { return s.find("attn") != std::string::npos; }));
  NoGradGuard ng;
  CHECK(m.forward(Tensor::zeros({1, 3, 64, 64}), Context{}).shape() == Shape{1, 7, 64, 64});
}

TEST_CASE("ablation variants differ only at the toggled components") {
  const ModelConfig base = ModelConfig::tiny(8);
  std::vector<std::set<std::string>> sets;
  for (auto v : {AblationVariant::med_only, AblationVariant::mcat, AblationVariant::dff, AblationVariant::adff}) {
    sets.push_back(names(MSUMamba(apply_ablation(base, v))));
  }
  auto d01 = sym_diff(sets[0], sets[1]);
  auto d12 = sym_diff(sets[1], sets[2]);
  auto d23 = sym_diff(sets[2], sets[3]);
  CHECK_FALSE(d01.empty());
  CHECK_FALSE(d12.empty());
  CHECK_FALSE(d23.empty());
  CHECK(all_contain(d01, {".attn."}));
  CHECK(all_contain(d12, {"fusion.spatial_enc", "fusion.spatial_dec", "fusion.norm"}));
  CHECK(all_contain(d23, {"fusion.channel_mlp"}));
}

TEST_CASE("config json round trip and strictness") {
  ModelConfig c = ModelConfig::tiny(32);
  c.fusion = FusionKind::dff;
  c.seed = 9;
  CHECK(ModelConfig::from_json(c.to_json()).to_json() == c.to_json());
  auto j = c.to_json();
  j["bogus"] = 1;
  CHECK_THROWS_AS(ModelConfig::from_json(j), ConfigError);
  ModelConfig bad = c;
  bad.stage_dims = {16, 32, 64};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("one training step moves every parameter group") {
  ModelConfig cfg = ModelConfig::tiny(8);
  cfg.seed = 3;
  MSUMamba m(cfg);
  Rng rng(4);
  Tensor x = test::random({2, 3, 32, 32}, rng, -1, 1, DType::f32);
  LabelBatch y(2, 32, 32);
  for (auto& v : y.values) v = static_cast<std::int32_t>(rng() % 7);
  Context ctx;
  ctx.mode = Mode::train;
  ctx.rng = &rng;
  auto terms = combined_loss(m.forward(x, ctx), y, LossConfig{});
  auto grads = gradients(terms.total, m.parameters());
  double total = 0;
  for (auto& g : grads) total += std::abs(sum(g).item());
  CHECK(std::isfinite(total));
  CHECK(total > 0);
}
