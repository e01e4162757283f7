// Copyright (c) 2026 The msumamba Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "msu/blocks.hpp"

namespace msu {

enum class EncoderBlockKind {
  ss_mcat_ssm,  // dual branch with Monte Carlo attention bottleneck
  ss_conv_ssm,  // dual branch, plain bottleneck
  vss_only,     // VSS blocks at full stage width
};

std::string to_string(EncoderBlockKind k);
std::string to_string(FusionKind k);
std::string to_string(MCAttnForm f);
std::string to_string(ChannelAttentionForm f);

struct ModelConfig {
  std::int64_t in_channels = 3;
  std::int64_t num_classes = 7;
  std::int64_t base_dim = 96;
  std::vector<std::int64_t> stage_dims{96, 192, 384, 768};
  std::vector<std::int64_t> encoder_depths{3, 3, 3, 3};
  std::vector<std::int64_t> decoder_depths{2, 2, 2, 2};
  std::int64_t ssm_state_dim = 16;
  MCAttnConfig mcattn{};
  FusionKind fusion = FusionKind::adff;
  ChannelAttentionForm channel_form = ChannelAttentionForm::mlp;
  EncoderBlockKind encoder_block = EncoderBlockKind::ss_mcat_ssm;
  std::int64_t conv_branch_depth = 1;
  std::int64_t bottleneck_reduction = 4;
  std::int64_t fusion_reduction = 4;
  DType dtype = DType::f32;
  std::uint64_t seed = 0;

  /// Throws ConfigError naming the first offending field.
  void validate() const;

  nlohmann::json to_json() const;
  /// Missing keys keep their defaults; unknown keys are rejected.
  static ModelConfig from_json(const nlohmann::json& j);

  /// Four-stage config with dims base·{1,2,4,8}.
  static ModelConfig with_base(std::int64_t base_dim);
  /// 64×64-scale config used by tests and the tiny training preset.
  static ModelConfig tiny(std::int64_t base_dim = 16);
};

/// The four ablation variants of the block/fusion axes.
enum class AblationVariant { med_only, mcat, dff, adff };
std::string to_string(AblationVariant v);
ModelConfig apply_ablation(ModelConfig cfg, AblationVariant v);

/// Inspection and injection points for tests.
struct NetworkHooks {
  /// Called with (stage, output) for each encoder stage; the returned tensor
  /// replaces the stage output (before merging and as the skip source).
  std::function<Tensor(int, const Tensor&)> encoder_override;
  /// Filled when non-null.
  Tensor* embed_out = nullptr;
  std::vector<Tensor>* encoder_outputs = nullptr;
  std::vector<Tensor>* decoder_outputs = nullptr;
  /// Indexed by stage; the deepest stage has no fusion.
  std::array<ADFFTrace, 4>* fusion_traces = nullptr;
};

class EncoderBlock : public Module {
 public:
  EncoderBlock(const ModelConfig& cfg, std::int64_t channels, Rng& rng);
  Tensor forward(const Tensor& x, const Context& ctx) const;

  std::shared_ptr<SSMcatSSMBlock> dual;  // null for vss_only
  std::shared_ptr<VSSBlock> vss;         // null otherwise
};

class MSUMamba : public Module {
 public:
  /// Parameters are drawn from cfg.seed and created with cfg.dtype.
  explicit MSUMamba(const ModelConfig& cfg);

  /// images [B,in_channels,H,W] -> logits [B,num_classes,H,W]; H and W must
  /// be divisible by 32.
  Tensor forward(const Tensor& images, const Context& ctx, NetworkHooks* hooks = nullptr);

  const ModelConfig& config() const { return cfg_; }

  std::shared_ptr<PatchEmbed> embed;
  std::array<std::vector<std::shared_ptr<EncoderBlock>>, 4> encoder;
  std::array<std::shared_ptr<PatchMerge>, 3> merges;
  std::array<std::shared_ptr<FusionBlock>, 3> fusions;
  std::array<std::vector<std::shared_ptr<VSSBlock>>, 4> decoder;
  std::array<std::shared_ptr<PatchExpand>, 4> expands;  // expands[0] is the final ×4
  std::shared_ptr<Conv2d> head;

 private:
  ModelConfig cfg_;
};

std::unique_ptr<MSUMamba> build_model(const ModelConfig& cfg);

std::int64_t count_parameters(const Module& m);

/// Parameter counts keyed by top-level component ("embed", "encoder.0", ...).
std::map<std::string, std::int64_t> parameter_breakdown(const MSUMamba& m);

}  // namespace msu
