#pragma once

// Two-way transformer mask decoder. Tokens are Q_encoder, Q_FPN and Q_decoder
// concatenated; only the last token survives the stack and produces the mask
// by a dot product with convolutional mask features.

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "irstd/fpn.hpp"

namespace irstd {

struct DecoderConfig {
  int depth = 2;
  int64_t dim = 256;
  int64_t mlp_dim = 2048;
  int heads = 8;
  int attention_downsample = 2;  // internal width of the cross attentions

  void validate() const;
};

// Post-norm block: token self-attention, token->image cross-attention, token
// MLP, image->token cross-attention. Positional terms are re-added before
// every attention.
class TwoWayBlock : public nn::Module {
 public:
  TwoWayBlock(const DecoderConfig& config, nn::Rng& rng);
  void forward(Tensor& tokens, Tensor& image, const Tensor& token_pe, const Tensor& image_pe) const;

 private:
  nn::Attention self_attn_;
  nn::LayerNorm norm1_;
  nn::Attention cross_t2i_;
  nn::LayerNorm norm2_;
  nn::Mlp mlp_;
  nn::LayerNorm norm3_;
  nn::LayerNorm norm4_;
  nn::Attention cross_i2t_;
};

struct DecodeOptions {
  // Called on the token tensor (B, 9, d) after the final token->image
  // attention; may overwrite values in place.
  std::function<void(Tensor&)> post_stack_hook;
  int64_t output_height = 0;  // 0 keeps the feature resolution
  int64_t output_width = 0;
};

class MaskDecoder : public nn::Module {
 public:
  MaskDecoder(int64_t fpn_channels, const DecoderConfig& config, nn::Rng& rng);

  // fused.levels[0] is the image embedding. Tokens (B, n, d) in order
  // Q_encoder, Q_FPN, Q_decoder; the last one is kept.
  MaskPrediction decode(const FusedPyramid& fused, const Tensor& tokens, int64_t downsample,
                        const DecodeOptions& options = {}) const;

  const DecoderConfig& config() const { return config_; }

 private:
  DecoderConfig config_;
  int64_t channels_;
  std::vector<std::unique_ptr<TwoWayBlock>> blocks_;
  nn::Attention final_attn_;
  nn::LayerNorm final_norm_;
  nn::Conv2d mask_conv1_;
  nn::GroupNorm mask_norm_;
  nn::Conv2d mask_conv2_;
  nn::Mlp hyper_;
};

}  // namespace irstd
