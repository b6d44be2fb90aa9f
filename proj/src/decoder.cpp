#include "irstd/decoder.hpp"

#include <stdexcept>
#include <string>

namespace irstd {

void DecoderConfig::validate() const {
  if (depth < 1) throw std::invalid_argument("decoder depth must be >= 1");
  if (dim < 1 || heads < 1 || dim % heads != 0)
    throw std::invalid_argument("decoder dim must be divisible by heads");
  if (attention_downsample < 1 || (dim / attention_downsample) % heads != 0)
    throw std::invalid_argument("decoder cross-attention width must be divisible by heads");
  if (dim % 4 != 0) throw std::invalid_argument("decoder dim must be a multiple of 4");
  if (mlp_dim < 1) throw std::invalid_argument("decoder mlp_dim must be positive");
}

TwoWayBlock::TwoWayBlock(const DecoderConfig& c, nn::Rng& rng)
    : self_attn_(c.dim, c.heads, rng),
      norm1_(c.dim),
      cross_t2i_(c.dim, c.heads, rng, c.attention_downsample),
      norm2_(c.dim),
      mlp_({c.dim, c.mlp_dim, c.dim}, rng),
      norm3_(c.dim),
      norm4_(c.dim),
      cross_i2t_(c.dim, c.heads, rng, c.attention_downsample) {
  register_module("self_attn", self_attn_);
  register_module("norm1", norm1_);
  register_module("cross_t2i", cross_t2i_);
  register_module("norm2", norm2_);
  register_module("mlp", mlp_);
  register_module("norm3", norm3_);
  register_module("norm4", norm4_);
  register_module("cross_i2t", cross_i2t_);
}

void TwoWayBlock::forward(Tensor& tokens, Tensor& image, const Tensor& token_pe,
                          const Tensor& image_pe) const {
  Tensor q = ops::add(tokens, token_pe);
  tokens = norm1_.forward(ops::add(tokens, self_attn_.forward(q, q, tokens)));

  q = ops::add(tokens, token_pe);
  Tensor k = ops::add_broadcast(image, image_pe);
  tokens = norm2_.forward(ops::add(tokens, cross_t2i_.forward(q, k, image)));

  tokens = norm3_.forward(ops::add(tokens, mlp_.forward(tokens)));

  q = ops::add(tokens, token_pe);
  image = norm4_.forward(ops::add(image, cross_i2t_.forward(k, q, tokens)));
}

MaskDecoder::MaskDecoder(int64_t fpn_channels, const DecoderConfig& config, nn::Rng& rng)
    : config_(config),
      channels_(fpn_channels),
      final_attn_(config.dim, config.heads, rng, config.attention_downsample),
      final_norm_(config.dim),
      mask_conv1_(fpn_channels, std::max<int64_t>(fpn_channels / 4, 1), 3, rng),
      mask_norm_(nn::norm_groups(std::max<int64_t>(fpn_channels / 4, 1)),
                 std::max<int64_t>(fpn_channels / 4, 1)),
      mask_conv2_(std::max<int64_t>(fpn_channels / 4, 1), std::max<int64_t>(fpn_channels / 8, 1), 3,
                  rng),
      hyper_({config.dim, config.dim, config.dim, std::max<int64_t>(fpn_channels / 8, 1)}, rng) {
  config_.validate();
  if (fpn_channels != config.dim)
    throw std::invalid_argument("decoder dim " + std::to_string(config.dim) +
                                " must equal fpn channels " + std::to_string(fpn_channels));
  for (int i = 0; i < config.depth; ++i) {
    blocks_.push_back(std::make_unique<TwoWayBlock>(config_, rng));
    register_module("block" + std::to_string(i), *blocks_.back());
  }
  register_module("final_attn", final_attn_);
  register_module("final_norm", final_norm_);
  register_module("mask_conv1", mask_conv1_);
  register_module("mask_norm", mask_norm_);
  register_module("mask_conv2", mask_conv2_);
  register_module("hyper", hyper_);
}

MaskPrediction MaskDecoder::decode(const FusedPyramid& fused, const Tensor& tokens,
                                   int64_t downsample, const DecodeOptions& options) const {
  const Tensor& emb = fused.levels.front();
  if (tokens.rank() != 3 || tokens.dim(2) != config_.dim || tokens.dim(0) != emb.dim(0))
    throw ShapeError("decoder tokens " + shape_str(tokens.shape()) + " do not match dim " +
                     std::to_string(config_.dim));
  if (emb.dim(1) != channels_)
    throw ShapeError("decoder image embedding has " + std::to_string(emb.dim(1)) + " channels");
  const int64_t h = emb.dim(2), w = emb.dim(3), n = tokens.dim(1);
  const Tensor token_pe = tokens;
  const Tensor image_pe = ops::sine_position_encoding(h, w, config_.dim);

  Tensor t = tokens;
  Tensor img = ops::map_to_tokens(emb);
  for (const auto& b : blocks_) b->forward(t, img, token_pe, image_pe);
  Tensor q = ops::add(t, token_pe);
  Tensor k = ops::add_broadcast(img, image_pe);
  t = final_norm_.forward(ops::add(t, final_attn_.forward(q, k, img)));
  if (options.post_stack_hook) options.post_stack_hook(t);

  Tensor keep = ops::reshape(ops::slice(t, 1, n - 1, 1), {t.dim(0), config_.dim});
  Tensor feat = ops::tokens_to_map(img, h, w);
  feat = ops::gelu(mask_norm_.forward(mask_conv1_.forward(feat)));
  feat = ops::gelu(mask_conv2_.forward(feat));
  Tensor logits = pointwise_dot(hyper_.forward(keep), feat);
  const int64_t oh = options.output_height > 0 ? options.output_height : h;
  const int64_t ow = options.output_width > 0 ? options.output_width : w;
  if (oh != h || ow != w) logits = ops::resize_bilinear(logits, oh, ow);
  return {logits, PredictionStage::final, oh == h ? downsample : 1, 0.0};
}

}  // namespace irstd
