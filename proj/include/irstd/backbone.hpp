#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <vector>

#include "irstd/nn.hpp"

namespace irstd {

struct EncoderConfig {
  int stem_downsample = 4;  // 1, 2 or 4
  std::array<int64_t, 4> stage_channels{64, 128, 256, 512};
  std::array<int, 4> stage_depths{2, 2, 6, 2};
  int input_channels = 3;
  int expansion = 2;  // pointwise expansion inside each block

  void validate() const;
  // Inputs must be a multiple of this on both axes.
  int64_t size_multiple() const { return static_cast<int64_t>(stem_downsample) * 8; }
};

// Encoder stage outputs S1..S4, each (B, c_i, H / (stem * 2^(i-1)), ...).
struct FeaturePyramid {
  std::vector<Tensor> stages;
  int stem_downsample = 1;
};

// Abstract encoder role: a stem followed by four stages. The query machinery
// drives the stages one at a time, so implementations expose them
// individually; `encode` simply chains them.
class ImageEncoder : public nn::Module {
 public:
  virtual const EncoderConfig& config() const = 0;
  virtual Tensor embed(const Tensor& images) const = 0;
  // index in [0, 4); stage 0 consumes the stem output.
  virtual Tensor run_stage(int index, const Tensor& x) const = 0;

  // Throws ShapeError unless images are (B, input_channels, H, W) with H and W
  // divisible by stem * 8.
  void check_input(const Tensor& images) const;
  FeaturePyramid encode(const Tensor& images) const;
};

// Residual depthwise-separable block: x + pw2(gelu(pw1(norm(dw(x))))).
class SeparableBlock : public nn::Module {
 public:
  SeparableBlock(int64_t channels, int expansion, nn::Rng& rng);
  Tensor forward(const Tensor& x) const;

 private:
  nn::Conv2d dw_;
  nn::GroupNorm norm_;
  nn::Conv2d pw1_;
  nn::Conv2d pw2_;
};

class HierarchicalEncoder : public ImageEncoder {
 public:
  HierarchicalEncoder(const EncoderConfig& config, nn::Rng& rng);

  const EncoderConfig& config() const override { return config_; }
  Tensor embed(const Tensor& images) const override;
  Tensor run_stage(int index, const Tensor& x) const override;

 private:
  struct ConvNorm : nn::Module {
    ConvNorm(int64_t in, int64_t out, int stride, nn::Rng& rng);
    Tensor forward(const Tensor& x) const;
    nn::Conv2d conv;
    nn::GroupNorm norm;
  };
  struct Stage {
    std::unique_ptr<ConvNorm> down;  // absent for the first stage
    std::vector<std::unique_ptr<SeparableBlock>> blocks;
  };

  EncoderConfig config_;
  std::vector<std::unique_ptr<ConvNorm>> stem_;
  std::array<Stage, 4> stages_;
};

// Deterministic construction from a seed.
std::unique_ptr<HierarchicalEncoder> build_encoder(const EncoderConfig& config, uint64_t seed);

}  // namespace irstd
