// Copyright (c) 2026 The msumamba Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <array>

#include "helpers.hpp"
#include "msu/blocks.hpp"
#include "msu/gradcheck.hpp"
#include "msu/ops.hpp"

using namespace msu;

namespace {

void zero_module(const Module& m) {
  for (auto& [name, p] : m.named_parameters()) {
    Tensor t = p;
    t.fill_(0.0);
  }
}

DualBranchOptions dual_options(std::int64_t c) {
  DualBranchOptions o;
  o.channels = c;
  o.bottleneck.channels = c / 2;
  o.vss.channels = c / 2;
  o.vss.state_dim = 4;
  return o;
}

}  // namespace

TEST_SUITE("monte carlo attention") {
  TEST_CASE("zeroed conv halves the input") {
    Rng rng(1);
    MCAttnConfig cfg;
    cfg.pool_sizes = {1};
    cfg.probs = {1.0};
    MonteCarloAttention m(4, cfg, InitOptions{}, rng);
    zero_module(m);
    Tensor x = test::random({2, 4, 5, 5}, rng, -1, 1, DType::f32);
    NoGradGuard ng;
    CHECK(test::max_abs_diff(m.forward(x, Context{}), mul_scalar(x, 0.5)) == 0.0);
  }

  TEST_CASE("equal maps give the same expectation") {
    Rng rng(2);
    MCAttnConfig cfg;
    cfg.pool_sizes = {1, 2};
    cfg.probs = {0.5, 0.5};
    MonteCarloAttention m(3, cfg, InitOptions{}, rng);
    Tensor x = Tensor::full({1, 3, 4, 4}, 0.7);
    NoGradGuard ng;
    Tensor a1 = mc_attention_map(x, 1, m.conv->weight, m.conv->bias);
    CHECK(test::max_abs_diff(m.forward(x, Context{}), mul(a1, x)) < 1e-6);
  }

  TEST_CASE("selection frequencies follow the probabilities") {
    MCAttnConfig cfg;
    cfg.probs = {0.2, 0.3, 0.5};
    Rng rng(3);
    std::array<int, 3> hits{};
    for (int i = 0; i < 10000; ++i) ++hits[sample_pool_index(cfg, rng)];
    for (int k = 0; k < 3; ++k) CHECK(std::abs(hits[static_cast<std::size_t>(k)] / 10000.0 - cfg.probs[static_cast<std::size_t>(k)]) <= 0.02);
  }

  TEST_CASE("train mode needs an rng") {
    Rng rng(4);
    MonteCarloAttention m(2, MCAttnConfig{}, InitOptions{}, rng);
    Context ctx;
    ctx.mode = Mode::train;
    CHECK_THROWS(m.forward(Tensor::zeros({1, 2, 4, 4}), ctx));
  }

  TEST_CASE("config validation and restriction") {
    MCAttnConfig bad;
    bad.probs = {0.5, 0.5, 0.5};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = MCAttnConfig{};
    bad.pool_sizes = {1, 1, 2};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    MCAttnConfig r = MCAttnConfig{}.restricted_to(2, 5);
    CHECK(r.pool_sizes == std::vector<std::int64_t>{1, 2});
    CHECK(r.probs[0] == doctest::Approx(0.5));
    CHECK(r.probs[1] == doctest::Approx(0.5));
  }
}

TEST_SUITE("bottleneck") {
  TEST_CASE("zeroed expand conv is the identity") {
    Rng rng(5);
    BottleneckOptions o;
    o.channels = 8;
    McatBottleneck b(o, rng);
    b.expand->weight.fill_(0.0);
    b.expand->bias.fill_(0.0);
    Tensor x = test::random({2, 8, 6, 6}, rng, -1, 1, DType::f32);
    NoGradGuard ng;
    CHECK(test::bit_equal(b.forward(x, Context{}), x));
  }

  TEST_CASE("shape preservation") {
    Rng rng(6);
    BottleneckOptions o;
    o.channels = 48;
    McatBottleneck b(o, rng);
    NoGradGuard ng;
    CHECK(b.forward(Tensor::zeros({2, 48, 56, 56}), Context{}).shape() == Shape{2, 48, 56, 56});
  }

  TEST_CASE("plain variant has no attention") {
    Rng rng(7);
    BottleneckOptions o;
    o.channels = 8;
    o.attention = false;
    McatBottleneck b(o, rng);
    CHECK(b.attn == nullptr);
  }

  TEST_CASE("gradient check in eval mode") {
    Rng rng(8);
    DTypeScope ds(DType::f64);
    BottleneckOptions o;
    o.channels = 8;
    auto b = std::make_shared<McatBottleneck>(o, rng);
    std::vector<Tensor> in{test::random({1, 8, 6, 6}, rng)};
    for (auto& p : b->parameters()) in.push_back(p);
    GradCheckOptions go;
    go.step = 1e-5;
    go.max_coords_per_input = 40;
    auto r = finite_difference_check("bottleneck", [&](const std::vector<Tensor>& t) { return b->forward(t[0], Context{}); },
                                     in, go);
    CHECK_MESSAGE(r.passed, "max rel error " << r.max_rel_error);
  }
}

TEST_SUITE("dual branch block") {
  TEST_CASE("identity branches leave only the shuffle") {
    Rng rng(9);
    SSMcatSSMBlock blk(dual_options(16), rng);
    for (auto& b : blk.conv_branch) {
      b->expand->weight.fill_(0.0);
      b->expand->bias.fill_(0.0);
    }
    for (auto& v : blk.mamba_branch) v->out_proj->weight.fill_(0.0);
    Tensor x = test::random({2, 16, 4, 4}, rng, -1, 1, DType::f32);
    NoGradGuard ng;
    Tensor y = blk.forward(x, Context{});
    CHECK(test::bit_equal(y, channel_shuffle(x, 2)));
    auto a = x.to_vector(), b = y.to_vector();
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    CHECK(a == b);
  }

  TEST_CASE("odd channel count is a config error") {
    Rng rng(10);
    CHECK_THROWS_AS(SSMcatSSMBlock(dual_options(15), rng), ConfigError);
  }

  TEST_CASE("shape preservation") {
    Rng rng(11);
    SSMcatSSMBlock blk(dual_options(32), rng);
    NoGradGuard ng;
    CHECK(blk.forward(Tensor::zeros({1, 32, 14, 14}), Context{}).shape() == Shape{1, 32, 14, 14});
  }
}

TEST_SUITE("fusion") {
  FusionOptions fusion(FusionKind kind, std::int64_t c) {
    FusionOptions o;
    o.kind = kind;
    o.channels = c;
    return o;
  }

  TEST_CASE("zeroed attention weights give half gates") {
    Rng rng(12);
    FusionBlock f(fusion(FusionKind::adff, 8), rng);
    for (auto* m : {f.spatial_enc.get(), f.spatial_dec.get()}) zero_module(*m);
    zero_module(*f.mlp_fc2);
    Tensor e = test::random({2, 8, 5, 5}, rng, -1, 1, DType::f32), d = test::random({2, 8, 5, 5}, rng, -1, 1, DType::f32);
    ADFFTrace tr;
    NoGradGuard ng;
    Tensor y = f.forward(e, d, Context{}, FusionHooks{&tr, {}});
    for (double v : tr.w_sp.to_vector()) CHECK(v == 0.5);
    for (double v : tr.w_ch.to_vector()) CHECK(v == 0.5);
    Tensor want = mul_scalar(f.proj->forward(mul_scalar(tr.f_l, 0.5)), 0.5);
    CHECK(test::max_abs_diff(y, want) < 1e-6);
  }

  TEST_CASE("gates stay strictly inside the unit interval") {
    Rng rng(13);
    FusionBlock f(fusion(FusionKind::adff, 6), rng);
    NoGradGuard ng;
    for (int i = 0; i < 100; ++i) {
      ADFFTrace tr;
      f.forward(test::random({1, 6, 4, 4}, rng, -3, 3, DType::f32), test::random({1, 6, 4, 4}, rng, -3, 3, DType::f32),
                Context{}, FusionHooks{&tr, {}});
      for (double v : tr.w_sp.to_vector()) REQUIRE((v > 0 && v < 1));
      for (double v : tr.w_ch.to_vector()) REQUIRE((v > 0 && v < 1));
    }
  }

  TEST_CASE("every kind restores the channel count") {
    for (auto k : {FusionKind::adff, FusionKind::dff, FusionKind::none}) {
      Rng rng(14);
      FusionBlock f(fusion(k, 48), rng);
      NoGradGuard ng;
      CHECK(f.forward(Tensor::zeros({2, 48, 28, 28}), Tensor::zeros({2, 48, 28, 28}), Context{}).shape() ==
            Shape{2, 48, 28, 28});
    }
  }

  TEST_CASE("mismatched maps are rejected") {
    Rng rng(15);
    FusionBlock f(fusion(FusionKind::adff, 4), rng);
    CHECK_THROWS_AS(f.forward(Tensor::zeros({1, 4, 4, 4}), Tensor::zeros({1, 4, 2, 2}), Context{}), ContractViolation);
  }
}

TEST_SUITE("patch ops") {
  TEST_CASE("embed") {
    Rng rng(16);
    PatchEmbed e(3, 96, 4, InitOptions{}, rng);
    NoGradGuard ng;
    CHECK(e.forward(Tensor::zeros({1, 3, 224, 224})).shape() == Shape{1, 96, 56, 56});
    CHECK(e.forward(Tensor::zeros({1, 3, 64, 64})).shape() == Shape{1, 96, 16, 16});
    CHECK_THROWS(e.forward(Tensor::zeros({1, 3, 225, 224})));
  }

  TEST_CASE("merge halves space and doubles channels") {
    Rng rng(17);
    NoGradGuard ng;
    PatchMerge m(96, InitOptions{}, rng);
    Tensor x = Tensor::zeros({1, 96, 56, 56});
    Tensor y = m.forward(x);
    CHECK(y.shape() == Shape{1, 192, 28, 28});
    CHECK(2 * y.numel() == x.numel());
    PatchMerge s(16, InitOptions{}, rng);
    CHECK(s.forward(Tensor::zeros({1, 16, 2, 2})).shape() == Shape{1, 32, 1, 1});
  }

  TEST_CASE("expand doubles space and halves channels") {
    Rng rng(18);
    NoGradGuard ng;
    PatchExpand e2(192, 2, InitOptions{}, rng);
    Tensor x = Tensor::zeros({1, 192, 28, 28});
    Tensor y = e2.forward(x);
    CHECK(y.shape() == Shape{1, 96, 56, 56});
    CHECK(y.numel() == 2 * x.numel());
    PatchExpand e4(96, 4, InitOptions{}, rng);
    Tensor z = e4.forward(y);
    CHECK(z.shape() == Shape{1, 24, 224, 224});
    CHECK(z.numel() == 4 * y.numel());
  }

  TEST_CASE("indivisible channels are rejected") {
    Rng rng(19);
    CHECK_THROWS_AS(PatchExpand(6, 4, InitOptions{}, rng), ConfigError);
  }
}
