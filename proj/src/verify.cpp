// Copyright (c) 2026 The msumamba Authors
// SPDX-License-Identifier: Apache-2.0

#include "msu/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "msu/checkpoint.hpp"
#include "msu/data.hpp"
#include "msu/gradcheck.hpp"
#include "msu/metrics.hpp"
#include "msu/network.hpp"

namespace msu {

namespace oracle {

std::vector<double> selective_scan(const std::vector<double>& u, const std::vector<double>& delta,
                                   const std::vector<double>& A, const std::vector<double>& Bm,
                                   const std::vector<double>& Cm, const std::vector<double>& D, std::int64_t b,
                                   std::int64_t c, std::int64_t l, std::int64_t n) {
  std::vector<double> y(static_cast<std::size_t>(b * c * l));
  std::vector<double> h(static_cast<std::size_t>(n));
  for (std::int64_t bi = 0; bi < b; ++bi) {
    for (std::int64_t ci = 0; ci < c; ++ci) {
      std::fill(h.begin(), h.end(), 0.0);
      for (std::int64_t t = 0; t < l; ++t) {
        const double dt = delta[static_cast<std::size_t>((bi * c + ci) * l + t)];
        const double x = u[static_cast<std::size_t>((bi * c + ci) * l + t)];
        double acc = 0;
        for (std::int64_t s = 0; s < n; ++s) {
          const double abar = std::exp(dt * A[static_cast<std::size_t>(ci * n + s)]);
          const double bbar = dt * Bm[static_cast<std::size_t>((bi * n + s) * l + t)];
          h[static_cast<std::size_t>(s)] = abar * h[static_cast<std::size_t>(s)] + bbar * x;
          acc += Cm[static_cast<std::size_t>((bi * n + s) * l + t)] * h[static_cast<std::size_t>(s)];
        }
        y[static_cast<std::size_t>((bi * c + ci) * l + t)] = acc + D[static_cast<std::size_t>(ci)] * x;
      }
    }
  }
  return y;
}

std::vector<Counts> confusion(const std::vector<std::int32_t>& pred, const std::vector<std::int32_t>& gt,
                              std::int64_t k) {
  std::vector<Counts> out(static_cast<std::size_t>(k));
  for (std::int64_t c = 0; c < k; ++c) {
    auto& e = out[static_cast<std::size_t>(c)];
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const bool p = pred[i] == c, g = gt[i] == c;
      if (p && g) ++e.tp;
      else if (p) ++e.fp;
      else if (g) ++e.fn;
      else ++e.tn;
    }
  }
  return out;
}

}  // namespace oracle

namespace {

using Clock = std::chrono::steady_clock;

double uni(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

std::int64_t irand(Rng& rng, std::int64_t lo, std::int64_t hi) {
  return lo + static_cast<std::int64_t>(uniform01(rng) * static_cast<double>(hi - lo + 1));
}

Tensor rand_tensor(const Shape& s, Rng& rng, double lo = -1, double hi = 1, DType dt = DType::f64) {
  std::vector<double> v(static_cast<std::size_t>(numel(s)));
  for (auto& x : v) x = uni(rng, lo, hi);
  return Tensor::from_vector(s, v, dt);
}

// Values with |v| in [lo, hi] and random sign; keeps inputs off kinks at 0.
Tensor rand_away_from_zero(const Shape& s, Rng& rng, double lo, double hi) {
  std::vector<double> v(static_cast<std::size_t>(numel(s)));
  for (auto& x : v) x = (uniform01(rng) < 0.5 ? -1 : 1) * uni(rng, lo, hi);
  return Tensor::from_vector(s, v, DType::f64);
}

// Redraws every parameter at a random, well-scaled point: weights uniform in
// ±gain/sqrt(fan_in), vectors uniform in ±1. At initialisation scale several
// gradients (e.g. of the S6 time-step bias) sit below the finite-difference
// noise floor.
void redraw(const Module& m, Rng& rng, double gain = 1.5) {
  for (auto& [name, p] : m.named_parameters()) {
    const double bound = p.ndim() >= 2 ? gain / std::sqrt(static_cast<double>(p.numel() / p.dim(0))) : 1.0;
    auto d = const_cast<Tensor&>(p).mutable_data<double>();
    for (auto& v : d) v = uni(rng, -bound, bound);
  }
}

std::vector<Tensor> with_params(Tensor x, const Module& m) {
  std::vector<Tensor> in{std::move(x)};
  for (auto& p : m.parameters()) in.push_back(p);
  return in;
}

// ---------------------------------------------------------------------------
// Gradient checks

constexpr double kStep = 1e-5;
constexpr double kBlockTol = 1e-4;
constexpr double kModelTol = 1e-3;
// Gradients across the whole network span ~9 orders of magnitude; only those
// within this ratio of the largest are resolvable by central differences.
constexpr double kModelGradRatio = 1e-6;

using TrialFn = std::function<GradReport(Rng& rng, const GradCheckOptions& base)>;

struct GradSpec {
  std::string name;
  TrialFn trial;
  double tol = kBlockTol;
  double step = kStep;
};

GradReport check(const std::string& name, const std::function<Tensor(const std::vector<Tensor>&)>& fn,
                 std::vector<Tensor> inputs, GradCheckOptions o) {
  return finite_difference_check(name, fn, std::move(inputs), o);
}

std::vector<GradSpec> grad_specs() {
  std::vector<GradSpec> specs;

  specs.push_back({"conv2d", [](Rng& rng, const GradCheckOptions& o) {
                     const std::int64_t groups = irand(rng, 1, 2);
                     const std::int64_t cin = groups * irand(rng, 1, 3), cout = groups * irand(rng, 1, 3);
                     const int k = static_cast<int>(irand(rng, 1, 3));
                     Conv2dOptions co{static_cast<int>(irand(rng, 1, 2)), static_cast<int>(irand(rng, 0, 1)),
                                      static_cast<int>(groups)};
                     const std::int64_t h = irand(rng, k, 6), w = irand(rng, k, 6);
                     Tensor x = rand_tensor({irand(rng, 1, 2), cin, h, w}, rng);
                     Tensor wt = rand_tensor({cout, cin / groups, k, k}, rng);
                     Tensor b = rand_tensor({cout}, rng);
                     return check("conv2d", [co](const std::vector<Tensor>& in) { return conv2d(in[0], in[1], in[2], co); },
                                  {x, wt, b}, o);
                   }});

  specs.push_back({"linear", [](Rng& rng, const GradCheckOptions& o) {
                     const std::int64_t din = irand(rng, 1, 6), dout = irand(rng, 1, 6);
                     Tensor x = rand_tensor({irand(rng, 1, 3), irand(rng, 1, 3), din}, rng);
                     Tensor w = rand_tensor({dout, din}, rng), b = rand_tensor({dout}, rng);
                     return check("linear", [](const std::vector<Tensor>& in) { return linear(in[0], in[1], in[2]); },
                                  {x, w, b}, o);
                   }});

  specs.push_back({"layer_norm", [](Rng& rng, const GradCheckOptions& o) {
                     const std::int64_t c = irand(rng, 3, 6);
                     Tensor x = rand_tensor({2, c, irand(rng, 1, 3), irand(rng, 1, 3)}, rng, -2, 2);
                     Tensor g = rand_tensor({c}, rng, 0.5, 1.5), b = rand_tensor({c}, rng);
                     return check("layer_norm",
                                  [](const std::vector<Tensor>& in) { return layer_norm(in[0], in[1], in[2], 1); },
                                  {x, g, b}, o);
                   }});

  auto bn = [](bool training) {
    return [training](Rng& rng, const GradCheckOptions& o) {
      const std::int64_t c = irand(rng, 1, 4);
      Tensor x = rand_tensor({2, c, irand(rng, 2, 3), irand(rng, 2, 3)}, rng, -2, 2);
      Tensor g = rand_tensor({c}, rng, 0.5, 1.5), b = rand_tensor({c}, rng);
      Tensor rm = rand_tensor({c}, rng, -0.5, 0.5), rv = rand_tensor({c}, rng, 0.5, 2.0);
      return check(training ? "batch_norm_train" : "batch_norm_eval",
                   [=](const std::vector<Tensor>& in) mutable {
                     Tensor m = rm.clone(), v = rv.clone();
                     return batch_norm(in[0], in[1], in[2], m, v, training);
                   },
                   {x, g, b}, o);
    };
  };
  specs.push_back({"batch_norm_eval", bn(false)});
  specs.push_back({"batch_norm_train", bn(true)});

  specs.push_back({"activations", [](Rng& rng, const GradCheckOptions& o) {
                     Tensor x = rand_away_from_zero({2, 3, 4}, rng, 0.05, 2.0);
                     return check("activations",
                                  [](const std::vector<Tensor>& in) {
                                    return concat({sigmoid(in[0]), silu(in[0]), relu(in[0]), softplus(in[0])}, 0);
                                  },
                                  {x}, o);
                   }});

  specs.push_back({"elementwise", [](Rng& rng, const GradCheckOptions& o) {
                     Tensor a = rand_tensor({2, 3}, rng, 0.5, 2.0), b = rand_tensor({1, 3}, rng, 0.5, 2.0);
                     return check("elementwise",
                                  [](const std::vector<Tensor>& in) {
                                    Tensor s = add(mul(in[0], in[1]), div(in[0], in[1]));
                                    return add(sub(exp(mul_scalar(s, 0.3)), log(in[0])), pow_scalar(in[1], 1.5));
                                  },
                                  {a, b}, o);
                   }});

  specs.push_back({"softmax", [](Rng& rng, const GradCheckOptions& o) {
                     Tensor x = rand_tensor({2, irand(rng, 2, 5), 2, 2}, rng, -3, 3);
                     return check("softmax", [](const std::vector<Tensor>& in) { return softmax(in[0], 1); }, {x}, o);
                   }});

  specs.push_back({"reductions_layout", [](Rng& rng, const GradCheckOptions& o) {
                     Tensor x = rand_tensor({2, 4, 4, 4}, rng);
                     return check("reductions_layout",
                                  [](const std::vector<Tensor>& in) {
                                    const Tensor& t = in[0];
                                    Tensor a = channel_shuffle(t, 2);
                                    Tensor b = depth_to_space(space_to_depth(permute(a, {0, 1, 3, 2}), 2), 2);
                                    auto [l, r] = channel_split(b, 1);
                                    Tensor c = channel_concat({r, mul_scalar(l, 2.0)});
                                    Tensor s = sum(c, {2}, true);
                                    Tensor m = mean(slice(c, 3, 1, 2), {1, 3}, true);
                                    return add(mul(c, c), add(s, m));
                                  },
                                  {x}, o);
                   }});

  auto pool_check = [](PoolKind kind, const char* name) {
    return [kind, name](Rng& rng, const GradCheckOptions& o) {
      const std::int64_t h = irand(rng, 2, 7), w = irand(rng, 2, 7);
      Tensor x = rand_tensor({2, 2, h, w}, rng);
      const std::int64_t oh = irand(rng, 1, h), ow = irand(rng, 1, w);
      return check(name, [=](const std::vector<Tensor>& in) { return pool(in[0], kind, oh, ow); }, {x}, o);
    };
  };
  specs.push_back({"pool_avg", pool_check(PoolKind::avg, "pool_avg")});
  specs.push_back({"pool_max", pool_check(PoolKind::max, "pool_max")});

  specs.push_back({"bilinear_resize", [](Rng& rng, const GradCheckOptions& o) {
                     Tensor x = rand_tensor({1, 2, irand(rng, 1, 4), irand(rng, 1, 4)}, rng);
                     const std::int64_t oh = irand(rng, 1, 7), ow = irand(rng, 1, 7);
                     return check("bilinear_resize",
                                  [=](const std::vector<Tensor>& in) { return bilinear_resize(in[0], oh, ow); }, {x}, o);
                   }});

  specs.push_back({"selective_scan", [](Rng& rng, const GradCheckOptions& o) {
                     const std::int64_t b = irand(rng, 1, 2), c = irand(rng, 1, 3), l = irand(rng, 1, 6),
                                        n = irand(rng, 1, 3);
                     Tensor u = rand_tensor({b, c, l}, rng), dt = rand_tensor({b, c, l}, rng, 0.1, 1.0);
                     Tensor a = rand_tensor({c, n}, rng, -2.0, -0.2);
                     Tensor bm = rand_tensor({b, n, l}, rng), cm = rand_tensor({b, n, l}, rng), d = rand_tensor({c}, rng);
                     return check("selective_scan",
                                  [](const std::vector<Tensor>& in) {
                                    return selective_scan(in[0], in[1], in[2], in[3], in[4], in[5]);
                                  },
                                  {u, dt, a, bm, cm, d}, o);
                   }});

  specs.push_back({"ss2d", [](Rng& rng, const GradCheckOptions& o) {
                     DTypeScope f64(DType::f64);
                     auto m = std::make_shared<SS2D>(S6Options{4, 2, 1}, rng);
                     redraw(*m, rng);
                     Tensor x = rand_tensor({1, 4, 3, 3}, rng);
                     return check("ss2d", [m](const std::vector<Tensor>& in) { return m->forward(in[0]); },
                                  with_params(x, *m), o);
                   }});

  specs.push_back({"vss_block", [](Rng& rng, const GradCheckOptions& o) {
                     DTypeScope f64(DType::f64);
                     VSSOptions vo;
                     vo.channels = 4;
                     vo.state_dim = 2;
                     auto m = std::make_shared<VSSBlock>(vo, rng);
                     redraw(*m, rng);
                     Tensor x = rand_tensor({1, 4, 3, 3}, rng);
                     return check("vss_block", [m](const std::vector<Tensor>& in) { return m->forward(in[0]); },
                                  with_params(x, *m), o);
                   }});

  specs.push_back({"monte_carlo_attention", [](Rng& rng, const GradCheckOptions& o) {
                     DTypeScope f64(DType::f64);
                     MCAttnConfig cfg;
                     auto m = std::make_shared<MonteCarloAttention>(4, cfg, InitOptions{}, rng);
                     redraw(*m, rng);
                     Tensor x = rand_tensor({2, 4, irand(rng, 3, 6), irand(rng, 3, 6)}, rng);
                     return check("monte_carlo_attention",
                                  [m](const std::vector<Tensor>& in) { return m->forward(in[0], Context{}); },
                                  with_params(x, *m), o);
                   }});

  specs.push_back({"mcat_bottleneck", [](Rng& rng, const GradCheckOptions& o) {
                     DTypeScope f64(DType::f64);
                     BottleneckOptions bo;
                     bo.channels = 8;
                     auto m = std::make_shared<McatBottleneck>(bo, rng);
                     redraw(*m, rng);
                     Tensor x = rand_tensor({1, 8, 6, 6}, rng);
                     return check("mcat_bottleneck",
                                  [m](const std::vector<Tensor>& in) { return m->forward(in[0], Context{}); },
                                  with_params(x, *m), o);
                   }});

  specs.push_back({"ss_mcat_ssm_block", [](Rng& rng, const GradCheckOptions& o) {
                     DTypeScope f64(DType::f64);
                     DualBranchOptions d;
                     d.channels = 8;
                     d.bottleneck.channels = 4;
                     d.vss.channels = 4;
                     d.vss.state_dim = 2;
                     auto m = std::make_shared<SSMcatSSMBlock>(d, rng);
                     redraw(*m, rng);
                     Tensor x = rand_tensor({1, 8, 4, 4}, rng);
                     return check("ss_mcat_ssm_block",
                                  [m](const std::vector<Tensor>& in) { return m->forward(in[0], Context{}); },
                                  with_params(x, *m), o);
                   }});

  auto fusion = [](FusionKind kind, ChannelAttentionForm form, bool training, const std::string& name) {
    return [=](Rng& rng, const GradCheckOptions& o) {
      DTypeScope f64(DType::f64);
      FusionOptions fo;
      fo.kind = kind;
      fo.channel_form = form;
      fo.channels = 4;
      auto m = std::make_shared<FusionBlock>(fo, rng);
      redraw(*m, rng);
      Tensor e = rand_tensor({2, 4, 3, 3}, rng), d = rand_tensor({2, 4, 3, 3}, rng);
      std::vector<Tensor> in{e, d};
      for (auto& p : m->parameters()) in.push_back(p);
      const Context ctx{training ? Mode::train : Mode::eval, nullptr};
      return check(name, [m, ctx](const std::vector<Tensor>& t) { return m->forward(t[0], t[1], ctx); }, in, o);
    };
  };
  specs.push_back({"adff_fuse", fusion(FusionKind::adff, ChannelAttentionForm::mlp, false, "adff_fuse")});
  specs.push_back({"adff_fuse_train", fusion(FusionKind::adff, ChannelAttentionForm::mlp, true, "adff_fuse_train")});
  specs.push_back(
      {"adff_fuse_printed", fusion(FusionKind::adff, ChannelAttentionForm::printed, false, "adff_fuse_printed")});
  specs.push_back({"dff_fuse", fusion(FusionKind::dff, ChannelAttentionForm::mlp, false, "dff_fuse")});
  specs.push_back({"plain_fuse", fusion(FusionKind::none, ChannelAttentionForm::mlp, false, "plain_fuse")});

  specs.push_back({"patch_embed", [](Rng& rng, const GradCheckOptions& o) {
                     DTypeScope f64(DType::f64);
                     auto m = std::make_shared<PatchEmbed>(3, 4, 4, InitOptions{}, rng);
                     redraw(*m, rng);
                     Tensor x = rand_tensor({1, 3, 8, 8}, rng);
                     return check("patch_embed", [m](const std::vector<Tensor>& in) { return m->forward(in[0]); },
                                  with_params(x, *m), o);
                   }});
  specs.push_back({"patch_merge", [](Rng& rng, const GradCheckOptions& o) {
                     DTypeScope f64(DType::f64);
                     auto m = std::make_shared<PatchMerge>(2, InitOptions{}, rng);
                     redraw(*m, rng);
                     Tensor x = rand_tensor({1, 2, 4, 4}, rng);
                     return check("patch_merge", [m](const std::vector<Tensor>& in) { return m->forward(in[0]); },
                                  with_params(x, *m), o);
                   }});
  specs.push_back({"patch_expand", [](Rng& rng, const GradCheckOptions& o) {
                     DTypeScope f64(DType::f64);
                     const int f = uniform01(rng) < 0.5 ? 2 : 4;
                     auto m = std::make_shared<PatchExpand>(16, f, InitOptions{}, rng);
                     redraw(*m, rng);
                     Tensor x = rand_tensor({1, 16, 2, 2}, rng);
                     return check("patch_expand", [m](const std::vector<Tensor>& in) { return m->forward(in[0]); },
                                  with_params(x, *m), o);
                   }});

  specs.push_back({"combined_loss", [](Rng& rng, const GradCheckOptions& o) {
                     const std::int64_t k = irand(rng, 2, 4);
                     Tensor logits = rand_tensor({2, k, 3, 3}, rng, -2, 2);
                     LabelBatch y(2, 3, 3);
                     for (auto& v : y.values) v = static_cast<std::int32_t>(irand(rng, 0, k - 1));
                     LossConfig cfg;
                     if (uniform01(rng) < 0.5) cfg.focal_form = FocalForm::printed;
                     return check("combined_loss",
                                  [y, cfg](const std::vector<Tensor>& in) { return combined_loss(in[0], y, cfg).total; },
                                  {logits}, o);
                   }});

  specs.push_back({"full_model",
                   [](Rng& rng, const GradCheckOptions& o) {
                     ModelConfig mc = ModelConfig::tiny(8);
                     mc.dtype = DType::f64;
                     mc.seed = rng();
                     auto m = std::make_shared<MSUMamba>(mc);
                     redraw(*m, rng);
                     Tensor x = rand_tensor({1, 3, 64, 64}, rng);
                     GradCheckOptions oo = o;
                     oo.max_coords_total = 50;
                     oo.min_grad_ratio = kModelGradRatio;
                     return check("full_model",
                                  [m](const std::vector<Tensor>& in) { return m->forward(in[0], Context{}); },
                                  with_params(x, *m), oo);
                   },
                   kModelTol});
  return specs;
}

void emit(std::vector<CheckResult>& out, CheckResult r, const VerifyOptions& opts) {
  if (opts.on_result) opts.on_result(r);
  out.push_back(std::move(r));
}

std::string fmt(const char* f, double a, double b = 0) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a, b);
  return buf;
}

// Per-check stream so adding or reordering checks leaves the others unchanged.
std::uint64_t name_seed(std::uint64_t seed, const std::string& name) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : name) h = (h ^ ch) * 1099511628211ULL;
  return derive_seed(seed, h);
}

}  // namespace

std::vector<std::string> gradcheck_names() {
  std::vector<std::string> names;
  for (auto& s : grad_specs()) names.push_back(s.name);
  return names;
}

std::vector<CheckResult> run_gradcheck(const std::vector<std::string>& names, const VerifyOptions& opts) {
  std::vector<CheckResult> out;
  const std::set<std::string> want(names.begin(), names.end());
  for (const auto& spec : grad_specs()) {
    if (!want.count(spec.name)) continue;
    const auto t0 = Clock::now();
    CheckResult r{"gradcheck", spec.name, true, 0.0, spec.tol, "", 0.0};
    Rng rng(name_seed(opts.seed, spec.name));
    int worst_trial = -1, worst_input = -1;
    std::int64_t checked = 0, eligible = 0;
    for (int t = 0; t < opts.trials; ++t) {
      GradCheckOptions o;
      o.tol = spec.tol;
      o.step = spec.step;
      o.seed = rng();
      GradReport rep;
      try {
        rep = spec.trial(rng, o);
      } catch (const std::exception& e) {
        r.passed = false;
        r.detail = "trial " + std::to_string(t) + " threw: " + e.what();
        break;
      }
      if (!rep.note.empty()) {
        r.passed = false;
        r.detail = "trial " + std::to_string(t) + ": " + rep.note;
        break;
      }
      if (rep.max_rel_error > r.measured || worst_trial < 0) {
        r.measured = std::max(r.measured, rep.max_rel_error);
        worst_trial = t;
        worst_input = static_cast<int>(std::max_element(rep.per_input_errors.begin(), rep.per_input_errors.end()) -
                                       rep.per_input_errors.begin());
      }
      if (!rep.passed) r.passed = false;
      checked += rep.coords_checked;
      eligible += rep.coords_eligible;
    }
    if (r.detail.empty()) {
      r.detail = std::to_string(opts.trials) + " trials, max relative error " + fmt("%.3e", r.measured) +
                 " (trial " + std::to_string(worst_trial) +
                 ", input " + std::to_string(worst_input) + "), tolerance " + fmt("%.0e", spec.tol) + ", " +
                 std::to_string(checked) + " of " + std::to_string(eligible) + " coordinates";
    }
    r.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    emit(out, std::move(r), opts);
  }
  return out;
}

std::vector<CheckResult> run_gradcheck_suite(const VerifyOptions& opts) {
  return run_gradcheck(gradcheck_names(), opts);
}

// ---------------------------------------------------------------------------
// Oracle checks

namespace {

struct Outcome {
  bool passed = false;
  double measured = 0;
  double bound = 0;
  std::string detail;
};

using OracleFn = std::function<Outcome(Rng&)>;

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

Outcome scan_recurrence(Rng& rng) {
  double worst = 0;
  for (int inst = 0; inst < 50; ++inst) {
    const std::int64_t b = irand(rng, 1, 3), c = irand(rng, 1, 4), l = irand(rng, 1, 40), n = irand(rng, 1, 8);
    Tensor u = rand_tensor({b, c, l}, rng), dt = rand_tensor({b, c, l}, rng, 1e-3, 1.0);
    Tensor a = rand_tensor({c, n}, rng, -3.0, -0.01);
    Tensor bm = rand_tensor({b, n, l}, rng), cm = rand_tensor({b, n, l}, rng), d = rand_tensor({c}, rng);
    const auto got = selective_scan(u, dt, a, bm, cm, d).to_vector();
    const auto want = oracle::selective_scan(u.to_vector(), dt.to_vector(), a.to_vector(), bm.to_vector(),
                                             cm.to_vector(), d.to_vector(), b, c, l, n);
    for (std::size_t i = 0; i < got.size(); ++i) worst = std::max(worst, relative_error(got[i], want[i]));
  }
  return {worst <= 1e-6, worst, 1e-6, "50 instances, max relative error " + fmt("%.3e", worst)};
}

Outcome cross_identity(Rng& rng) {
  double worst = 0;
  for (int inst = 0; inst < 20; ++inst) {
    const std::int64_t h = irand(rng, 1, 9), w = irand(rng, 1, 9);
    Tensor x = rand_tensor({irand(rng, 1, 2), irand(rng, 1, 3), h, w}, rng);
    const auto got = cross_merge(cross_scan(x), h, w).to_vector();
    const auto xv = x.to_vector();
    for (std::size_t i = 0; i < got.size(); ++i) worst = std::max(worst, std::abs(got[i] - 4.0 * xv[i]));
  }
  return {worst == 0.0, worst, 0.0, "20 shapes, max |merge(scan(x)) - 4x| = " + fmt("%g", worst)};
}

// With A = 0, Δ = B = C = 1 and D = 0 each path is a running sum.
Outcome ss2d_prefix_sum(Rng& rng) {
  double worst = 0;
  for (int inst = 0; inst < 10; ++inst) {
    const std::int64_t h = irand(rng, 1, 6), w = irand(rng, 1, 6), l = h * w;
    Tensor x = rand_tensor({1, 1, h, w}, rng);
    Tensor ones = Tensor::ones({4, 1, l}, DType::f64);
    Tensor got = ss2d_scan_merge(x, ones, Tensor::zeros({1, 1}, DType::f64), ones, ones,
                                 Tensor::zeros({1}, DType::f64));
    const auto xv = x.to_vector();
    const auto gv = got.to_vector();
    for (std::int64_t r = 0; r < h; ++r) {
      for (std::int64_t c = 0; c < w; ++c) {
        double want = 0;
        for (std::int64_t r2 = 0; r2 < h; ++r2) {
          for (std::int64_t c2 = 0; c2 < w; ++c2) {
            const double v = xv[static_cast<std::size_t>(r2 * w + c2)];
            const bool row_before = r2 < r || (r2 == r && c2 <= c);
            const bool row_after = r2 > r || (r2 == r && c2 >= c);
            const bool col_before = c2 < c || (c2 == c && r2 <= r);
            const bool col_after = c2 > c || (c2 == c && r2 >= r);
            want += v * (row_before + row_after + col_before + col_after);
          }
        }
        worst = std::max(worst, std::abs(gv[static_cast<std::size_t>(r * w + c)] - want));
      }
    }
  }
  return {worst <= 1e-12, worst, 1e-12, "directional prefix sums, max abs error " + fmt("%.3e", worst)};
}

Outcome shuffle_permutation(Rng& rng) {
  bool ok = true;
  for (int inst = 0; inst < 20 && ok; ++inst) {
    const int g = static_cast<int>(irand(rng, 1, 4));
    const std::int64_t c = g * irand(rng, 1, 4);
    Tensor x = rand_tensor({1, c, 2, 2}, rng);
    const auto got = channel_shuffle(x, g).to_vector();
    const auto xv = x.to_vector();
    for (std::int64_t o = 0; o < c && ok; ++o) {
      const std::int64_t src = (o % g) * (c / g) + o / g;
      for (int p = 0; p < 4; ++p) ok = ok && got[static_cast<std::size_t>(o * 4 + p)] == xv[static_cast<std::size_t>(src * 4 + p)];
    }
    ok = ok && channel_shuffle(channel_shuffle(x, g), static_cast<int>(c / g)).to_vector() == xv;
  }
  return {ok, ok ? 0.0 : 1.0, 0.0, "group transpose and inverse on 20 shapes"};
}

void zero_params(const Module& m) {
  for (auto& p : m.parameters()) const_cast<Tensor&>(p).fill_(0.0);
}

Outcome wiring_dual(Rng& rng) {
  bool ok = true;
  for (int inst = 0; inst < 10 && ok; ++inst) {
    DTypeScope f32(inst % 2 ? DType::f64 : DType::f32);
    const std::int64_t c = 2 * irand(rng, 2, 8);
    DualBranchOptions d;
    d.channels = c;
    d.bottleneck.channels = c / 2;
    d.bottleneck.reduction = 2;
    d.vss.channels = c / 2;
    d.vss.state_dim = 4;
    d.conv_branch_depth = irand(rng, 1, 2);
    d.mamba_branch_depth = irand(rng, 1, 2);
    SSMcatSSMBlock blk(d, rng);
    for (auto& b : blk.conv_branch) zero_params(*b->expand);
    for (auto& v : blk.mamba_branch) zero_params(*v->out_proj);
    Tensor x = rand_tensor({2, c, 6, 6}, rng, -1, 1, default_dtype());
    Rng r2(rng());
    const Context ctx{inst % 3 == 0 ? Mode::train : Mode::eval, &r2};
    ok = blk.forward(x, ctx).to_vector() == channel_shuffle(x, 2).to_vector();
  }
  return {ok, ok ? 0.0 : 1.0, 0.0, "zeroed branch outputs give channel_shuffle(x, 2) bit-exactly (10 blocks)"};
}

Outcome wiring_vss(Rng& rng) {
  bool ok = true;
  for (int inst = 0; inst < 10 && ok; ++inst) {
    VSSOptions vo;
    vo.channels = irand(rng, 1, 8);
    vo.state_dim = 4;
    VSSBlock blk(vo, rng);
    zero_params(*blk.out_proj);
    Tensor x = rand_tensor({1, vo.channels, 5, 4}, rng, -1, 1, DType::f32);
    ok = blk.forward(x).to_vector() == x.to_vector();
  }
  return {ok, ok ? 0.0 : 1.0, 0.0, "zeroed out_proj gives identity bit-exactly (10 blocks)"};
}

Outcome metric_brute_force(Rng& rng) {
  double worst_ratio = 0, worst_dual = 0;
  bool counts_ok = true, present_ok = true;
  for (int inst = 0; inst < 100; ++inst) {
    const std::int64_t k = irand(rng, 2, 7), b = irand(rng, 1, 2), h = irand(rng, 1, 24), w = irand(rng, 1, 24);
    LabelBatch pred(b, h, w), gt(b, h, w);
    // Skewed draws so some classes are absent.
    const std::int64_t used = irand(rng, 1, k);
    for (std::size_t i = 0; i < pred.values.size(); ++i) {
      pred.values[i] = static_cast<std::int32_t>(irand(rng, 0, used - 1));
      gt.values[i] = uniform01(rng) < 0.6 ? pred.values[i] : static_cast<std::int32_t>(irand(rng, 0, used - 1));
    }
    ConfusionCounts cc(k);
    confusion_accumulate(pred, gt, cc);
    const auto ref = oracle::confusion(pred.values, gt.values, k);
    MetricReport rep = [&] {
      try {
        return compute_metrics(cc);
      } catch (const EvaluationError&) {
        MetricReport r;
        for (const auto& e : cc.classes) r.per_class.push_back(class_metrics(e));
        return r;
      }
    }();
    for (std::int64_t c = 0; c < k; ++c) {
      const auto& e = cc.classes[static_cast<std::size_t>(c)];
      const auto& o = ref[static_cast<std::size_t>(c)];
      counts_ok = counts_ok && e.tp == o.tp && e.fp == o.fp && e.fn == o.fn && e.tn == o.tn;
      const double tp = static_cast<double>(o.tp), fp = static_cast<double>(o.fp), fn = static_cast<double>(o.fn),
                   tn = static_cast<double>(o.tn);
      const auto& m = rep.per_class[static_cast<std::size_t>(c)];
      auto cmp = [&](const std::optional<double>& got, double num, double den) {
        if (den == 0) {
          if (got) worst_ratio = 1;
          return;
        }
        if (!got) {
          worst_ratio = 1;
          return;
        }
        worst_ratio = std::max(worst_ratio, std::abs(*got - num / den));
      };
      cmp(m.iou, tp, tp + fp + fn);
      cmp(m.dice, 2 * tp, 2 * tp + fp + fn);
      cmp(m.sensitivity, tp, tp + fn);
      cmp(m.specificity, tn, tn + fp);
      cmp(m.precision, tp, tp + fp);
      if (m.iou && m.dice) worst_dual = std::max(worst_dual, std::abs(*m.dice - 2 * *m.iou / (1 + *m.iou)));
      if (!rep.present.empty()) present_ok = present_ok && rep.present[static_cast<std::size_t>(c)] == (o.tp + o.fp + o.fn > 0);
    }
  }
  const bool ok = counts_ok && present_ok && worst_ratio <= 1e-12 && worst_dual <= 1e-12;
  return {ok, std::max(worst_ratio, worst_dual), 1e-12,
          std::string("100 mask pairs, counts ") + (counts_ok ? "exact" : "MISMATCH") + ", max ratio error " +
              fmt("%.2e", worst_ratio) + ", max duality error " + fmt("%.2e", worst_dual)};
}

Outcome loss_spot_values(Rng&) {
  LossConfig cfg;
  Tensor p = Tensor::full({1, 1, 1, 1}, 0.9, DType::f64), y = Tensor::ones({1, 1, 1, 1}, DType::f64);
  const double focal = focal_loss(p, y, cfg).item();
  const double focal_err = std::abs(focal - 2.6341e-4);
  LossConfig dc;
  dc.dice_smooth = 0;
  Tensor pd = Tensor::full({1, 2, 1, 2}, 0.5, DType::f64);
  Tensor yd = Tensor::from_vector({1, 2, 1, 2}, {0, 1, 1, 0}, DType::f64);
  const double dice = dice_loss(pd, yd, dc).item();
  const double dice_err = std::abs(dice - 0.5);
  const bool ok = focal_err <= 1e-8 && dice_err <= 1e-9;
  return {ok, std::max(focal_err / 1e-8, dice_err / 1e-9), 1.0,
          "focal " + fmt("%.8e", focal) + " (|err| " + fmt("%.1e", focal_err) + " <= 1e-8), dice " +
              fmt("%.12f", dice) + " (|err| " + fmt("%.1e", dice_err) + " <= 1e-9)"};
}

Outcome mc_unbiased(Rng& rng) {
  DTypeScope f64(DType::f64);
  MCAttnConfig cfg;
  MonteCarloAttention m(4, cfg, InitOptions{InitScheme::trunc_normal, 0.5}, rng);
  Tensor x = rand_tensor({2, 4, 6, 6}, rng);
  const auto expect = m.forward(x, Context{}).to_vector();
  std::vector<double> acc(expect.size(), 0.0);
  Rng draws(rng());
  const Context train{Mode::train, &draws};
  constexpr int kDraws = 10000;
  NoGradGuard ng;
  for (int i = 0; i < kDraws; ++i) {
    const auto y = m.forward(x, train).to_vector();
    for (std::size_t j = 0; j < y.size(); ++j) acc[j] += y[j];
  }
  double worst = 0;
  for (std::size_t j = 0; j < acc.size(); ++j) {
    worst = std::max(worst, std::abs(acc[j] / kDraws - expect[j]) / std::max(std::abs(expect[j]), 1e-12));
  }
  return {worst <= 0.01, worst, 0.01, "10000 train-mode draws, max elementwise relative deviation " + fmt("%.3e", worst)};
}

Outcome mc_expectation(Rng& rng) {
  DTypeScope f64(DType::f64);
  double worst = 0;
  for (int inst = 0; inst < 10; ++inst) {
    MCAttnConfig cfg;
    cfg.probs = {0.5, 0.3, 0.2};
    if (inst % 2) cfg.form = MCAttnForm::printed;
    MonteCarloAttention m(3, cfg, InitOptions{InitScheme::trunc_normal, 0.5}, rng);
    Tensor x = rand_tensor({1, 3, 5, 7}, rng);
    const auto got = m.forward(x, Context{}).to_vector();
    std::vector<double> want(got.size(), 0.0);
    const auto xv = x.to_vector();
    for (std::size_t i = 0; i < cfg.pool_sizes.size(); ++i) {
      const auto map = mc_attention_map(x, cfg.pool_sizes[i], m.conv->weight, m.conv->bias).to_vector();
      for (std::size_t j = 0; j < want.size(); ++j) {
        want[j] += cfg.probs[i] * map[j] * (cfg.form == MCAttnForm::multiplicative ? xv[j] : 1.0);
      }
    }
    worst = std::max(worst, max_abs_diff(got, want));
  }
  return {worst <= 1e-6, worst, 1e-6, "eval output vs weighted per-size maps, max abs error " + fmt("%.2e", worst)};
}

Outcome augment_flip_frequency(Rng& rng) {
  AugmentConfig cfg;
  Rng r(rng());
  int flips = 0;
  for (int i = 0; i < 10000; ++i) flips += sample_augment(cfg, r).flip;
  const double f = flips / 10000.0;
  return {f >= 0.48 && f <= 0.52, f, 0.52, "hflip frequency " + fmt("%.4f", f) + " over 10000 draws"};
}

// The image carries its own pixel coordinates (R = column, G = row), so the
// bilinearly resampled image names the source pixel of every output pixel.
Outcome augment_alignment(Rng& rng) {
  AugmentConfig cfg;
  cfg.brightness = cfg.contrast = cfg.saturation = 0.0;
  PhantomSpec spec;
  Rng r(rng());
  std::int64_t bad = 0, draws = 10000;
  Sample s;
  for (std::int64_t i = 0; i < draws; ++i) {
    if (i % 500 == 0) {
      s = generate_phantom(r(), spec);
      for (std::int64_t y = 0; y < s.image.height; ++y) {
        for (std::int64_t x = 0; x < s.image.width; ++x) {
          s.image.at(y, x, 0) = static_cast<std::uint8_t>(x);
          s.image.at(y, x, 1) = static_cast<std::uint8_t>(y);
          s.image.at(y, x, 2) = 255;
        }
      }
    }
    const AugmentParams p = sample_augment(cfg, r);
    const Sample a = augment_with(s, p, cfg);
    for (std::int64_t y = 0; y < a.mask.height; ++y) {
      for (std::int64_t x = 0; x < a.mask.width; ++x) {
        const bool outside = a.image.at(y, x, 2) == cfg.pad_value;
        const std::uint8_t want = outside ? 0 : s.mask.at(a.image.at(y, x, 1), a.image.at(y, x, 0));
        if (a.mask.at(y, x) != want) ++bad;
      }
    }
  }
  return {bad == 0, static_cast<double>(bad), 0.0,
          std::to_string(draws) + " draws, " + std::to_string(bad) + " misaligned mask pixels"};
}

Outcome augment_involution(Rng& rng) {
  const Sample s = generate_phantom(rng(), PhantomSpec{});
  AugmentParams p;
  p.flip = true;
  const bool ok = apply_geometry(apply_geometry(s.mask, p), p) == s.mask &&
                  apply_geometry(apply_geometry(s.image, p, 128), p, 128) == s.image;
  return {ok, ok ? 0.0 : 1.0, 0.0, "double horizontal flip restores image and mask"};
}

std::vector<std::int64_t> component_count_and_enclosure(const Mask& m) {
  const std::int64_t h = m.height, w = m.width;
  // 8-connected components of the wall.
  std::vector<int> seen(static_cast<std::size_t>(h * w), 0);
  std::int64_t comps = 0;
  std::vector<std::pair<std::int64_t, std::int64_t>> stack;
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      if (m.at(y, x) != kAbdominalWall || seen[static_cast<std::size_t>(y * w + x)]) continue;
      ++comps;
      stack.push_back({y, x});
      seen[static_cast<std::size_t>(y * w + x)] = 1;
      while (!stack.empty()) {
        auto [cy, cx] = stack.back();
        stack.pop_back();
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const std::int64_t ny = cy + dy, nx = cx + dx;
            if (ny < 0 || nx < 0 || ny >= h || nx >= w) continue;
            auto& sflag = seen[static_cast<std::size_t>(ny * w + nx)];
            if (sflag || m.at(ny, nx) != kAbdominalWall) continue;
            sflag = 1;
            stack.push_back({ny, nx});
          }
        }
      }
    }
  }
  // 4-connected flood from the border through non-wall pixels.
  std::vector<int> out(static_cast<std::size_t>(h * w), 0);
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      if ((y == 0 || x == 0 || y == h - 1 || x == w - 1) && m.at(y, x) != kAbdominalWall) {
        out[static_cast<std::size_t>(y * w + x)] = 1;
        stack.push_back({y, x});
      }
    }
  }
  const int d4[4][2] = {{1, 0}, {-1, 0}, {0, 1}, {0, -1}};
  while (!stack.empty()) {
    auto [cy, cx] = stack.back();
    stack.pop_back();
    for (auto& d : d4) {
      const std::int64_t ny = cy + d[0], nx = cx + d[1];
      if (ny < 0 || nx < 0 || ny >= h || nx >= w) continue;
      auto& f = out[static_cast<std::size_t>(ny * w + nx)];
      if (f || m.at(ny, nx) == kAbdominalWall) continue;
      f = 1;
      stack.push_back({ny, nx});
    }
  }
  std::int64_t leaked = 0;
  for (std::int64_t i = 0; i < h * w; ++i) {
    const auto v = m.labels[static_cast<std::size_t>(i)];
    if (out[static_cast<std::size_t>(i)] &&
        (v == kSpine || v == kLiver || v == kStomach || v == kUmbilicalVein)) {
      ++leaked;
    }
  }
  return {comps, leaked};
}

Outcome phantom_containment(Rng& rng) {
  std::int64_t bad = 0;
  std::string first;
  for (int i = 0; i < 100; ++i) {
    const std::uint64_t seed = rng();
    PhantomSpec spec;
    if (i % 4 == 3) spec.height = spec.width = 96;
    const Sample s = generate_phantom(seed, spec);
    const auto r = component_count_and_enclosure(s.mask);
    if (r[0] != 1 || r[1] != 0) {
      if (first.empty()) first = "; first failure seed " + std::to_string(seed);
      ++bad;
    }
  }
  return {bad == 0, static_cast<double>(bad), 0.0,
          "100 seeds, " + std::to_string(bad) + " masks with a broken wall or exposed interior" + first};
}

Outcome phantom_presence(Rng& rng) {
  PhantomSpec spec;
  std::array<int, 7> hits{};
  constexpr int kSeeds = 2000;
  for (int i = 0; i < kSeeds; ++i) {
    const Sample s = generate_phantom(rng(), spec);
    std::array<bool, 7> seen{};
    for (auto v : s.mask.labels) seen[v] = true;
    for (int c = 0; c < 7; ++c) hits[static_cast<std::size_t>(c)] += seen[static_cast<std::size_t>(c)];
  }
  double worst = 0;
  std::string detail = "frequency vs target:";
  for (int c = 1; c < 7; ++c) {
    const double f = hits[static_cast<std::size_t>(c)] / static_cast<double>(kSeeds);
    worst = std::max(worst, std::abs(f - spec.presence[static_cast<std::size_t>(c)]));
    detail += " " + ClassMap{}.names[static_cast<std::size_t>(c)] + " " + fmt("%.3f/%.3f", f, spec.presence[static_cast<std::size_t>(c)]);
  }
  return {worst <= 0.03, worst, 0.03, detail};
}

Outcome phantom_determinism(Rng& rng) {
  bool ok = true;
  for (int i = 0; i < 5; ++i) {
    const std::uint64_t seed = rng();
    const Sample a = generate_phantom(seed, PhantomSpec{}), b = generate_phantom(seed, PhantomSpec{});
    ok = ok && a.image == b.image && a.mask == b.mask;
  }
  return {ok, ok ? 0.0 : 1.0, 0.0, "same seed gives bit-identical image and mask"};
}

Outcome split_partition(Rng& rng) {
  bool ok = true;
  for (int inst = 0; inst < 50 && ok; ++inst) {
    const std::int64_t n = irand(rng, 3, 60);
    std::vector<Sample> all(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) all[static_cast<std::size_t>(i)].id = std::to_string(i);
    const std::uint64_t seed = rng();
    const DatasetSplit a = split_dataset(all, SplitRatios{}, seed), b = split_dataset(all, SplitRatios{}, seed);
    std::multiset<std::string> ids;
    for (const auto* part : {&a.train, &a.val, &a.test}) {
      for (const auto& s : *part) ids.insert(s.id);
    }
    std::multiset<std::string> want;
    for (const auto& s : all) want.insert(s.id);
    const auto sz = split_sizes(n, SplitRatios{});
    ok = ids == want && static_cast<std::int64_t>(a.val.size()) == sz[1] &&
         static_cast<std::int64_t>(a.test.size()) == sz[2] && !a.train.empty() && !a.val.empty() && !a.test.empty();
    for (std::size_t i = 0; ok && i < a.train.size(); ++i) ok = a.train[i].id == b.train[i].id;
  }
  return {ok, ok ? 0.0 : 1.0, 0.0, "50 splits partition their input and are seed-deterministic"};
}

Outcome shape_laws(Rng& rng) {
  std::string why;
  for (std::int64_t base : {8, 16}) {
    ModelConfig mc = ModelConfig::tiny(base);
    mc.seed = rng();
    MSUMamba m(mc);
    for (std::int64_t side : {64, 96}) {
      std::vector<Tensor> enc, dec;
      Tensor emb;
      NetworkHooks hooks;
      hooks.embed_out = &emb;
      hooks.encoder_outputs = &enc;
      hooks.decoder_outputs = &dec;
      Tensor x = rand_tensor({1, 3, side, side}, rng, -1, 1, DType::f32);
      NoGradGuard ng;
      Tensor y = m.forward(x, Context{}, &hooks);
      if (y.shape() != Shape{1, 7, side, side}) why += " logits " + to_string(y.shape());
      if (emb.shape() != Shape{1, base, side / 4, side / 4}) why += " embed " + to_string(emb.shape());
      for (int i = 0; i < 4 && enc.size() == 4; ++i) {
        const Shape want{1, base << i, side / (4 << i), side / (4 << i)};
        if (enc[static_cast<std::size_t>(i)].shape() != want) why += " encoder" + std::to_string(i);
      }
      if (enc.size() != 4) why += " encoder stage count";
      if (dec.size() != 4) why += " decoder stage count";
    }
  }
  Rng r(rng());
  PatchMerge pm(6, InitOptions{}, r);
  PatchExpand pe(12, 2, InitOptions{}, r);
  NoGradGuard ng;
  Tensor x = rand_tensor({2, 6, 8, 4}, r, -1, 1, DType::f32);
  if (pm.forward(x).shape() != Shape{2, 12, 4, 2}) why += " merge";
  if (pe.forward(pm.forward(x)).shape() != x.shape()) why += " expand(merge(x))";
  return {why.empty(), why.empty() ? 0.0 : 1.0, 0.0,
          why.empty() ? "embed H/4, merge halves H,W and doubles C, expand inverts, logits match input" : "mismatch:" + why};
}

Outcome checkpoint_roundtrip(Rng& rng) {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / ("msu_verify_" + std::to_string(rng()));
  fs::create_directories(dir);
  bool ok = true;
  try {
    ModelConfig mc = ModelConfig::tiny(8);
    mc.seed = rng();
    MSUMamba m(mc);
    save_checkpoint(m, dir / "a.ckpt");
    LoadedCheckpoint back = load_checkpoint(dir / "a.ckpt");
    const auto pa = m.named_parameters(), pb = back.model->named_parameters();
    ok = pa.size() == pb.size();
    for (std::size_t i = 0; ok && i < pa.size(); ++i) {
      ok = pa[i].first == pb[i].first && pa[i].second.to_vector() == pb[i].second.to_vector();
    }
    save_checkpoint(*back.model, dir / "b.ckpt");
    std::ifstream fa(dir / "a.ckpt", std::ios::binary), fb(dir / "b.ckpt", std::ios::binary);
    const std::string sa((std::istreambuf_iterator<char>(fa)), {}), sb((std::istreambuf_iterator<char>(fb)), {});
    ok = ok && sa == sb;
  } catch (...) {
    fs::remove_all(dir);
    throw;
  }
  fs::remove_all(dir);
  return {ok, ok ? 0.0 : 1.0, 0.0, "save -> load -> save is byte-identical"};
}

std::vector<std::pair<std::string, OracleFn>> oracle_specs() {
  return {
      {"scan_recurrence", scan_recurrence},
      {"cross_scan_merge_identity", cross_identity},
      {"ss2d_prefix_sum", ss2d_prefix_sum},
      {"channel_shuffle_permutation", shuffle_permutation},
      {"wiring_dual_branch", wiring_dual},
      {"wiring_vss_identity", wiring_vss},
      {"metric_brute_force", metric_brute_force},
      {"loss_spot_values", loss_spot_values},
      {"mc_attention_unbiased", mc_unbiased},
      {"mc_attention_expectation", mc_expectation},
      {"augment_flip_frequency", augment_flip_frequency},
      {"augment_alignment", augment_alignment},
      {"augment_flip_involution", augment_involution},
      {"phantom_determinism", phantom_determinism},
      {"phantom_containment", phantom_containment},
      {"phantom_presence", phantom_presence},
      {"split_partition", split_partition},
      {"shape_laws", shape_laws},
      {"checkpoint_roundtrip", checkpoint_roundtrip},
  };
}

}  // namespace

std::vector<std::string> oracle_names() {
  std::vector<std::string> names;
  for (auto& [n, f] : oracle_specs()) names.push_back(n);
  return names;
}

std::vector<CheckResult> run_oracles(const std::vector<std::string>& names, const VerifyOptions& opts) {
  std::vector<CheckResult> out;
  const std::set<std::string> want(names.begin(), names.end());
  for (const auto& [name, fn] : oracle_specs()) {
    if (!want.count(name)) continue;
    const auto t0 = Clock::now();
    Rng rng(name_seed(opts.seed, name));
    CheckResult r{"oracles", name, false, 0, 0, "", 0};
    try {
      const Outcome o = fn(rng);
      r.passed = o.passed;
      r.measured = o.measured;
      r.bound = o.bound;
      r.detail = o.detail;
    } catch (const std::exception& e) {
      r.detail = std::string("threw: ") + e.what();
    }
    r.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    emit(out, std::move(r), opts);
  }
  return out;
}

std::vector<CheckResult> run_oracle_suite(const VerifyOptions& opts) { return run_oracles(oracle_names(), opts); }

nlohmann::json verify_summary(const std::vector<CheckResult>& results) {
  nlohmann::json checks = nlohmann::json::array();
  std::size_t failed = 0;
  for (const auto& r : results) {
    failed += !r.passed;
    checks.push_back({{"suite", r.suite},
                      {"name", r.name},
                      {"passed", r.passed},
                      {"measured", r.measured},
                      {"bound", r.bound},
                      {"detail", r.detail},
                      {"seconds", r.seconds}});
  }
  return {{"passed", failed == 0}, {"total", results.size()}, {"failed", failed}, {"checks", checks}};
}

}  // namespace msu
