#include "irstd/backbone.hpp"

#include <stdexcept>
#include <string>

namespace irstd {

void EncoderConfig::validate() const {
  if (stem_downsample != 1 && stem_downsample != 2 && stem_downsample != 4)
    throw std::invalid_argument("stem_downsample must be 1, 2 or 4, got " +
                                std::to_string(stem_downsample));
  for (int i = 0; i < 4; ++i) {
    if (stage_channels[i] <= 0) throw std::invalid_argument("stage_channels must be positive");
    if (stage_depths[i] <= 0) throw std::invalid_argument("stage_depths must be positive");
  }
  if (input_channels != 1 && input_channels != 3)
    throw std::invalid_argument("input_channels must be 1 or 3");
  if (expansion < 1) throw std::invalid_argument("expansion must be >= 1");
}

void ImageEncoder::check_input(const Tensor& images) const {
  const auto& cfg = config();
  if (images.rank() != 4 || images.dim(1) != cfg.input_channels)
    throw ShapeError("encoder expects (B," + std::to_string(cfg.input_channels) + ",H,W), got " +
                     shape_str(images.shape()));
  const int64_t m = cfg.size_multiple();
  if (images.dim(2) % m != 0 || images.dim(3) % m != 0)
    throw ShapeError("input size " + std::to_string(images.dim(2)) + "x" +
                     std::to_string(images.dim(3)) + " is not divisible by " + std::to_string(m) +
                     " (stem " + std::to_string(cfg.stem_downsample) + " x 8)");
}

FeaturePyramid ImageEncoder::encode(const Tensor& images) const {
  check_input(images);
  FeaturePyramid out;
  out.stem_downsample = config().stem_downsample;
  Tensor x = embed(images);
  for (int i = 0; i < 4; ++i) {
    x = run_stage(i, x);
    out.stages.push_back(x);
  }
  return out;
}

SeparableBlock::SeparableBlock(int64_t channels, int expansion, nn::Rng& rng)
    : dw_(channels, channels, 3, rng, 1, 1, static_cast<int>(channels)),
      norm_(nn::norm_groups(channels), channels),
      pw1_(channels, channels * expansion, 1, rng),
      pw2_(channels * expansion, channels, 1, rng) {
  register_module("dw", dw_);
  register_module("norm", norm_);
  register_module("pw1", pw1_);
  register_module("pw2", pw2_);
}

Tensor SeparableBlock::forward(const Tensor& x) const {
  Tensor h = pw2_.forward(ops::gelu(pw1_.forward(norm_.forward(dw_.forward(x)))));
  return ops::add(x, h);
}

HierarchicalEncoder::ConvNorm::ConvNorm(int64_t in, int64_t out, int stride, nn::Rng& rng)
    : conv(in, out, 3, rng, stride, 1), norm(nn::norm_groups(out), out) {
  register_module("conv", conv);
  register_module("norm", norm);
}

Tensor HierarchicalEncoder::ConvNorm::forward(const Tensor& x) const {
  return norm.forward(conv.forward(x));
}

HierarchicalEncoder::HierarchicalEncoder(const EncoderConfig& config, nn::Rng& rng)
    : config_(config) {
  config_.validate();
  const int64_t c1 = config_.stage_channels[0];
  switch (config_.stem_downsample) {
    case 1:
      stem_.push_back(std::make_unique<ConvNorm>(config_.input_channels, c1, 1, rng));
      break;
    case 2:
      stem_.push_back(std::make_unique<ConvNorm>(config_.input_channels, c1, 2, rng));
      break;
    default:
      stem_.push_back(
          std::make_unique<ConvNorm>(config_.input_channels, std::max<int64_t>(c1 / 2, 1), 2, rng));
      stem_.push_back(std::make_unique<ConvNorm>(std::max<int64_t>(c1 / 2, 1), c1, 2, rng));
      break;
  }
  for (size_t i = 0; i < stem_.size(); ++i) register_module("stem." + std::to_string(i), *stem_[i]);

  for (int s = 0; s < 4; ++s) {
    Stage& st = stages_[s];
    const int64_t c = config_.stage_channels[s];
    if (s > 0) {
      st.down = std::make_unique<ConvNorm>(config_.stage_channels[s - 1], c, 2, rng);
      register_module("stage" + std::to_string(s + 1) + ".down", *st.down);
    }
    for (int j = 0; j < config_.stage_depths[s]; ++j) {
      st.blocks.push_back(std::make_unique<SeparableBlock>(c, config_.expansion, rng));
      register_module("stage" + std::to_string(s + 1) + ".block" + std::to_string(j),
                      *st.blocks.back());
    }
  }
}

Tensor HierarchicalEncoder::embed(const Tensor& images) const {
  Tensor x = images;
  for (const auto& layer : stem_) x = ops::gelu(layer->forward(x));
  return x;
}

Tensor HierarchicalEncoder::run_stage(int index, const Tensor& x) const {
  if (index < 0 || index >= 4) throw std::out_of_range("stage index " + std::to_string(index));
  const Stage& st = stages_[index];
  Tensor h = x;
  if (st.down) h = ops::gelu(st.down->forward(h));
  for (const auto& b : st.blocks) h = b->forward(h);
  return h;
}

std::unique_ptr<HierarchicalEncoder> build_encoder(const EncoderConfig& config, uint64_t seed) {
  config.validate();
  nn::Rng rng(seed);
  return std::make_unique<HierarchicalEncoder>(config, rng);
}

}  // namespace irstd
