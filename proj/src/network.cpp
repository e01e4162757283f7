// Copyright (c) 2026 The msumamba Authors
// SPDX-License-Identifier: Apache-2.0

#include "msu/network.hpp"

#include <set>

#include "msu/json_util.hpp"

namespace msu {

using nlohmann::json;

std::string to_string(EncoderBlockKind k) {
  switch (k) {
    case EncoderBlockKind::ss_mcat_ssm: return "ss_mcat_ssm";
    case EncoderBlockKind::ss_conv_ssm: return "ss_conv_ssm";
    case EncoderBlockKind::vss_only: return "vss_only";
  }
  return "?";
}

std::string to_string(FusionKind k) {
  switch (k) {
    case FusionKind::adff: return "adff";
    case FusionKind::dff: return "dff";
    case FusionKind::none: return "none";
  }
  return "?";
}

std::string to_string(MCAttnForm f) { return f == MCAttnForm::multiplicative ? "multiplicative" : "printed"; }

std::string to_string(ChannelAttentionForm f) { return f == ChannelAttentionForm::mlp ? "mlp" : "printed"; }

std::string to_string(AblationVariant v) {
  switch (v) {
    case AblationVariant::med_only: return "med_only";
    case AblationVariant::mcat: return "mcat";
    case AblationVariant::dff: return "dff";
    case AblationVariant::adff: return "adff";
  }
  return "?";
}

namespace {

template <class E>
E parse_enum(const json& j, const std::string& field, std::initializer_list<E> values) {
  if (!j.is_string()) throw ConfigError(field + ": expected a string");
  const auto s = j.get<std::string>();
  std::string options;
  for (E v : values) {
    if (to_string(v) == s) return v;
    options += (options.empty() ? "" : ", ") + to_string(v);
  }
  throw ConfigError(field + ": unknown value '" + s + "' (expected one of " + options + ")");
}

void cfg_fail(const std::string& field, const std::string& what) { throw ConfigError("model." + field + ": " + what); }

}  // namespace

void ModelConfig::validate() const {
  if (in_channels < 1) cfg_fail("in_channels", "must be >= 1");
  if (num_classes < 2) cfg_fail("num_classes", "must be >= 2");
  if (stage_dims.size() != 4) cfg_fail("stage_dims", "must have 4 entries");
  if (encoder_depths.size() != 4) cfg_fail("encoder_depths", "must have 4 entries");
  if (decoder_depths.size() != 4) cfg_fail("decoder_depths", "must have 4 entries");
  if (stage_dims[0] != base_dim) cfg_fail("stage_dims", "first entry must equal base_dim");
  for (std::size_t i = 0; i + 1 < stage_dims.size(); ++i) {
    if (stage_dims[i + 1] != 2 * stage_dims[i]) {
      cfg_fail("stage_dims", "entry " + std::to_string(i + 1) + " must be twice entry " + std::to_string(i));
    }
  }
  if (base_dim < 4 || base_dim % 4 != 0) cfg_fail("base_dim", "must be a positive multiple of 4");
  for (auto d : encoder_depths) {
    if (d < 1) cfg_fail("encoder_depths", "entries must be >= 1");
  }
  for (auto d : decoder_depths) {
    if (d < 0) cfg_fail("decoder_depths", "entries must be >= 0");
  }
  if (ssm_state_dim < 1) cfg_fail("ssm_state_dim", "must be >= 1");
  if (conv_branch_depth < 1) cfg_fail("conv_branch_depth", "must be >= 1");
  if (bottleneck_reduction < 1) cfg_fail("bottleneck_reduction", "must be >= 1");
  if (fusion_reduction < 1) cfg_fail("fusion_reduction", "must be >= 1");
  if (encoder_block != EncoderBlockKind::vss_only) {
    if (base_dim % 2 != 0) cfg_fail("base_dim", "dual-branch blocks need an even channel count");
    if (base_dim / 2 / bottleneck_reduction < 1) {
      cfg_fail("bottleneck_reduction", "reduces the first-stage bottleneck to zero channels");
    }
  }
  try {
    mcattn.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("model.") + e.what());
  }
}

json ModelConfig::to_json() const {
  return json{{"in_channels", in_channels},
              {"num_classes", num_classes},
              {"base_dim", base_dim},
              {"stage_dims", stage_dims},
              {"encoder_depths", encoder_depths},
              {"decoder_depths", decoder_depths},
              {"ssm_state_dim", ssm_state_dim},
              {"mcattn", {{"pool_sizes", mcattn.pool_sizes}, {"probs", mcattn.probs}, {"form", to_string(mcattn.form)}}},
              {"fusion", to_string(fusion)},
              {"channel_attention", to_string(channel_form)},
              {"encoder_block", to_string(encoder_block)},
              {"conv_branch_depth", conv_branch_depth},
              {"bottleneck_reduction", bottleneck_reduction},
              {"fusion_reduction", fusion_reduction},
              {"dtype", dtype_name(dtype)},
              {"seed", seed}};
}

ModelConfig ModelConfig::from_json(const json& j) {
  ModelConfig c;
  JsonReader r(j, "model");
  r.get("in_channels", c.in_channels);
  r.get("num_classes", c.num_classes);
  const bool has_base = j.contains("base_dim");
  r.get("base_dim", c.base_dim);
  if (has_base && !j.contains("stage_dims")) c.stage_dims = with_base(c.base_dim).stage_dims;
  r.get("stage_dims", c.stage_dims);
  r.get("encoder_depths", c.encoder_depths);
  r.get("decoder_depths", c.decoder_depths);
  r.get("ssm_state_dim", c.ssm_state_dim);
  if (auto m = r.object("mcattn")) {
    m->get("pool_sizes", c.mcattn.pool_sizes);
    if (j.at("mcattn").contains("pool_sizes") && !j.at("mcattn").contains("probs")) {
      c.mcattn.probs.assign(c.mcattn.pool_sizes.size(), 1.0 / static_cast<double>(c.mcattn.pool_sizes.size()));
    }
    m->get("probs", c.mcattn.probs);
    if (auto f = m->raw("form")) {
      c.mcattn.form = parse_enum(*f, "model.mcattn.form", {MCAttnForm::multiplicative, MCAttnForm::printed});
    }
    m->finish();
  }
  if (auto f = r.raw("fusion")) {
    c.fusion = parse_enum(*f, "model.fusion", {FusionKind::adff, FusionKind::dff, FusionKind::none});
  }
  if (auto f = r.raw("channel_attention")) {
    c.channel_form = parse_enum(*f, "model.channel_attention", {ChannelAttentionForm::mlp, ChannelAttentionForm::printed});
  }
  if (auto f = r.raw("encoder_block")) {
    c.encoder_block = parse_enum(
        *f, "model.encoder_block",
        {EncoderBlockKind::ss_mcat_ssm, EncoderBlockKind::ss_conv_ssm, EncoderBlockKind::vss_only});
  }
  r.get("conv_branch_depth", c.conv_branch_depth);
  r.get("bottleneck_reduction", c.bottleneck_reduction);
  r.get("fusion_reduction", c.fusion_reduction);
  if (auto f = r.raw("dtype")) {
    if (!f->is_string()) throw ConfigError("model.dtype: expected a string");
    try {
      c.dtype = parse_dtype(f->get<std::string>());
    } catch (const Error& e) {
      throw ConfigError(std::string("model.dtype: ") + e.what());
    }
  }
  r.get("seed", c.seed);
  r.finish();
  c.validate();
  return c;
}

ModelConfig ModelConfig::with_base(std::int64_t b) {
  ModelConfig c;
  c.base_dim = b;
  c.stage_dims = {b, 2 * b, 4 * b, 8 * b};
  return c;
}

ModelConfig ModelConfig::tiny(std::int64_t b) {
  ModelConfig c = with_base(b);
  c.encoder_depths = {1, 1, 1, 1};
  c.decoder_depths = {1, 1, 1, 1};
  return c;
}

ModelConfig apply_ablation(ModelConfig cfg, AblationVariant v) {
  switch (v) {
    case AblationVariant::med_only:
      cfg.encoder_block = EncoderBlockKind::ss_conv_ssm;
      cfg.fusion = FusionKind::none;
      break;
    case AblationVariant::mcat:
      cfg.encoder_block = EncoderBlockKind::ss_mcat_ssm;
      cfg.fusion = FusionKind::none;
      break;
    case AblationVariant::dff:
      cfg.encoder_block = EncoderBlockKind::ss_mcat_ssm;
      cfg.fusion = FusionKind::dff;
      break;
    case AblationVariant::adff:
      cfg.encoder_block = EncoderBlockKind::ss_mcat_ssm;
      cfg.fusion = FusionKind::adff;
      break;
  }
  return cfg;
}

EncoderBlock::EncoderBlock(const ModelConfig& cfg, std::int64_t channels, Rng& rng) {
  VSSOptions vo;
  vo.state_dim = cfg.ssm_state_dim;
  if (cfg.encoder_block == EncoderBlockKind::vss_only) {
    vo.channels = channels;
    vss = register_module("vss", std::make_shared<VSSBlock>(vo, rng));
    return;
  }
  DualBranchOptions o;
  o.channels = channels;
  o.conv_branch_depth = cfg.conv_branch_depth;
  o.bottleneck.reduction = cfg.bottleneck_reduction;
  o.bottleneck.attention = cfg.encoder_block == EncoderBlockKind::ss_mcat_ssm;
  o.bottleneck.mcattn = cfg.mcattn;
  o.vss = vo;
  dual = register_module("dual", std::make_shared<SSMcatSSMBlock>(o, rng));
}

Tensor EncoderBlock::forward(const Tensor& x, const Context& ctx) const {
  return dual ? dual->forward(x, ctx) : vss->forward(x);
}

MSUMamba::MSUMamba(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  DTypeScope scope(cfg_.dtype);
  Rng rng(cfg_.seed);
  const InitOptions init{};
  const auto& dims = cfg_.stage_dims;
  embed = register_module("embed", std::make_shared<PatchEmbed>(cfg_.in_channels, dims[0], 4, init, rng));
  for (int i = 0; i < 4; ++i) {
    const std::string prefix = "encoder." + std::to_string(i);
    for (std::int64_t j = 0; j < cfg_.encoder_depths[static_cast<std::size_t>(i)]; ++j) {
      encoder[i].push_back(register_module(prefix + ".blocks." + std::to_string(j),
                                           std::make_shared<EncoderBlock>(cfg_, dims[static_cast<std::size_t>(i)], rng)));
    }
    if (i < 3) {
      merges[i] = register_module(prefix + ".merge",
                                  std::make_shared<PatchMerge>(dims[static_cast<std::size_t>(i)], init, rng));
    }
  }
  for (int i = 3; i >= 0; --i) {
    const auto c = dims[static_cast<std::size_t>(i)];
    const std::string prefix = "decoder." + std::to_string(i);
    if (i < 3) {
      FusionOptions fo;
      fo.kind = cfg_.fusion;
      fo.channel_form = cfg_.channel_form;
      fo.channels = c;
      fo.reduction = cfg_.fusion_reduction;
      fusions[i] = register_module(prefix + ".fusion", std::make_shared<FusionBlock>(fo, rng));
    }
    VSSOptions vo;
    vo.channels = c;
    vo.state_dim = cfg_.ssm_state_dim;
    for (std::int64_t j = 0; j < cfg_.decoder_depths[static_cast<std::size_t>(i)]; ++j) {
      decoder[i].push_back(register_module(prefix + ".blocks." + std::to_string(j), std::make_shared<VSSBlock>(vo, rng)));
    }
    expands[i] = register_module(prefix + ".expand", std::make_shared<PatchExpand>(c, i == 0 ? 4 : 2, init, rng));
  }
  head = register_module(
      "head", std::make_shared<Conv2d>(Conv2d::Options{dims[0] / 4, cfg_.num_classes, 1, {}, true}, init, rng));
}

Tensor MSUMamba::forward(const Tensor& images, const Context& ctx, NetworkHooks* hooks) {
  if (images.ndim() != 4 || images.dim(1) != cfg_.in_channels) {
    throw InputError("forward: expected images [B," + std::to_string(cfg_.in_channels) + ",H,W], got " +
                     to_string(images.shape()));
  }
  if (images.dim(2) % 32 != 0 || images.dim(3) % 32 != 0) {
    throw InputError("forward: H and W must be divisible by 32, got " + std::to_string(images.dim(2)) + "x" +
                     std::to_string(images.dim(3)));
  }
  if (images.dtype() != cfg_.dtype) {
    throw InputError(std::string("forward: images are ") + dtype_name(images.dtype()) + " but the model is " +
                     dtype_name(cfg_.dtype));
  }
  if (ctx.training()) ctx.require_rng("forward");

  Tensor x = embed->forward(images);
  if (hooks && hooks->embed_out) *hooks->embed_out = x;
  std::array<Tensor, 4> skips;
  for (int i = 0; i < 4; ++i) {
    for (const auto& blk : encoder[i]) x = blk->forward(x, ctx);
    if (hooks && hooks->encoder_override) x = hooks->encoder_override(i, x);
    skips[i] = x;
    if (hooks && hooks->encoder_outputs) hooks->encoder_outputs->push_back(x);
    if (i < 3) x = merges[i]->forward(x);
  }
  for (int i = 3; i >= 0; --i) {
    if (i < 3) {
      FusionHooks fh;
      if (hooks && hooks->fusion_traces) fh.trace = &(*hooks->fusion_traces)[static_cast<std::size_t>(i)];
      x = fusions[i]->forward(skips[i], x, ctx, fh);
    }
    for (const auto& blk : decoder[i]) x = blk->forward(x);
    if (hooks && hooks->decoder_outputs) hooks->decoder_outputs->push_back(x);
    x = expands[i]->forward(x);
  }
  return head->forward(x);
}

std::unique_ptr<MSUMamba> build_model(const ModelConfig& cfg) { return std::make_unique<MSUMamba>(cfg); }

std::int64_t count_parameters(const Module& m) { return m.parameter_count(); }

std::map<std::string, std::int64_t> parameter_breakdown(const MSUMamba& m) {
  std::map<std::string, std::int64_t> out;
  for (const auto& [name, t] : m.named_parameters()) {
    // Group by the first one or two name components: "embed", "encoder.2", "head".
    auto dot = name.find('.');
    std::string key = name.substr(0, dot);
    if ((key == "encoder" || key == "decoder") && dot != std::string::npos) {
      key = name.substr(0, name.find('.', dot + 1));
    }
    out[key] += t.numel();
  }
  return out;
}

}  // namespace msu
