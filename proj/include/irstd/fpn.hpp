#pragma once

// Tiny FPN neck with top-down sparse-query interaction, the two early mask
// heads, and dense-prompt injection of the early FPN prediction.

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "irstd/backbone.hpp"
#include "irstd/query.hpp"

namespace irstd {

struct FusedPyramid {
  std::vector<Tensor> levels;  // 4 maps (B, F, h_i, w_i), finest first
  bool prompt_injected = false;

  int64_t channels() const { return levels.front().dim(1); }
};

enum class PredictionStage { early_encoder, early_fpn, final };
std::string to_string(PredictionStage stage);

struct MaskPrediction {
  Tensor logits;  // (B, 1, h, w)
  PredictionStage stage = PredictionStage::final;
  int64_t downsample = 1;  // input size / logit size
  double threshold = 0.0;
};

// logits > threshold as a 0/1 tensor of the same shape.
Tensor binarize(const MaskPrediction& pred);
Tensor binarize(const Tensor& logits, double threshold);

struct FpnConfig {
  int64_t channels = 256;  // F
  BiAttnConfig attention;  // dim must equal the query dim
  bool query_interaction = true;
  bool top_down = true;
};

struct FpnResult {
  FusedPyramid fused;
  Tensor queries;                        // (B, 8, d): Q_encoder then Q_FPN
  std::vector<Tensor> before_interaction;  // merged maps entering each interaction
};

// Lateral 1x1 convs to F channels, top-down nearest upsample + add. At every
// merged level (coarsest first) the concatenated queries run bi-direction
// attention with that level before it is upsampled further. A final 3x3 conv
// per level produces the fused outputs.
class TinyFpn : public nn::Module {
 public:
  TinyFpn(const std::array<int64_t, 4>& stage_channels, const FpnConfig& config, nn::Rng& rng);

  // q_encoder and q_fpn are (B, n, d); both may be undefined when interaction
  // is off.
  FpnResult forward(const FeaturePyramid& pyramid, const Tensor& q_encoder, const Tensor& q_fpn) const;

  const FpnConfig& config() const { return config_; }
  nn::Conv2d& lateral(int i) { return *lateral_[i]; }
  nn::Conv2d& output(int i) { return *output_[i]; }

 private:
  FpnConfig config_;
  std::vector<std::unique_ptr<nn::Conv2d>> lateral_, output_;
  std::vector<std::unique_ptr<BiDirectionAttention>> interact_;
};

// Dot product between a per-sample embedding (B, C) and a feature map
// (B, C, h, w) at every location -> (B, 1, h, w).
Tensor pointwise_dot(const Tensor& embedding, const Tensor& features);

// Conv on the dense query map, 2-layer MLP on the first encoder token.
class EarlyEncoderHead : public nn::Module {
 public:
  EarlyEncoderHead(int64_t dense_channels, int64_t dim, nn::Rng& rng);
  MaskPrediction forward(const Tensor& dense, const Tensor& q_encoder, int64_t downsample) const;

  nn::Mlp& mlp() { return mlp_; }

 private:
  nn::Conv2d conv_;
  nn::Mlp mlp_;
};

// Finest fused level as mask feature, 2-layer MLP on the first FPN token.
class EarlyFpnHead : public nn::Module {
 public:
  EarlyFpnHead(int64_t fpn_channels, int64_t dim, nn::Rng& rng);
  MaskPrediction forward(const FusedPyramid& fused, const Tensor& q_fpn_first,
                         int64_t downsample) const;

  nn::Mlp& mlp() { return mlp_; }

 private:
  nn::Mlp mlp_;
};

// conv3x3(1 -> F), GELU, conv3x3(F -> F) on the early FPN logits, added to
// every fused level after nearest downsampling.
class PromptInjector : public nn::Module {
 public:
  PromptInjector(int64_t fpn_channels, nn::Rng& rng);
  FusedPyramid inject(const MaskPrediction& early_fpn, const FusedPyramid& fused) const;

  nn::Conv2d& conv1() { return conv1_; }
  nn::Conv2d& conv2() { return conv2_; }

 private:
  nn::Conv2d conv1_, conv2_;
};

}  // namespace irstd
