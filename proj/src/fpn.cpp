#include "irstd/fpn.hpp"

#include <stdexcept>

namespace irstd {

std::string to_string(PredictionStage stage) {
  switch (stage) {
    case PredictionStage::early_encoder: return "early_encoder";
    case PredictionStage::early_fpn: return "early_fpn";
    case PredictionStage::final: return "final";
  }
  return "unknown";
}

Tensor binarize(const Tensor& logits, double threshold) {
  Tensor out(logits.shape());
  for (int64_t i = 0; i < logits.numel(); ++i) out.data()[i] = logits.data()[i] > threshold ? 1.0 : 0.0;
  return out;
}

Tensor binarize(const MaskPrediction& pred) { return binarize(pred.logits, pred.threshold); }

TinyFpn::TinyFpn(const std::array<int64_t, 4>& stage_channels, const FpnConfig& config, nn::Rng& rng)
    : config_(config) {
  if (config.channels < 1) throw std::invalid_argument("fpn channels must be positive");
  for (int i = 0; i < 4; ++i) {
    lateral_.push_back(std::make_unique<nn::Conv2d>(stage_channels[i], config.channels, 1, rng));
    register_module("lateral" + std::to_string(i + 1), *lateral_.back());
  }
  for (int i = 0; i < 4; ++i) {
    output_.push_back(std::make_unique<nn::Conv2d>(config.channels, config.channels, 3, rng));
    register_module("output" + std::to_string(i + 1), *output_.back());
  }
  if (config.query_interaction) {
    for (int i = 0; i < 4; ++i) {
      interact_.push_back(std::make_unique<BiDirectionAttention>(config.channels, config.attention, rng));
      register_module("interact" + std::to_string(i + 1), *interact_.back());
    }
  }
}

FpnResult TinyFpn::forward(const FeaturePyramid& pyramid, const Tensor& q_encoder,
                           const Tensor& q_fpn) const {
  if (pyramid.stages.size() != 4)
    throw ShapeError("fpn expects 4 stages, got " + std::to_string(pyramid.stages.size()));
  FpnResult out;
  const bool interact = config_.query_interaction;
  if (interact) {
    if (!q_encoder.defined() || !q_fpn.defined())
      throw std::invalid_argument("fpn query interaction needs Q_encoder and Q_FPN");
    out.queries = ops::concat({q_encoder, q_fpn}, 1);
  }
  std::vector<Tensor> merged(4);
  Tensor prev;
  for (int i = 3; i >= 0; --i) {
    const Tensor& s = pyramid.stages[static_cast<size_t>(i)];
    Tensor p = lateral_[static_cast<size_t>(i)]->forward(s);
    if (prev.defined() && config_.top_down) p = ops::add(p, ops::resize_nearest(prev, s.dim(2), s.dim(3)));
    out.before_interaction.insert(out.before_interaction.begin(), p);
    if (interact) std::tie(out.queries, p) = interact_[static_cast<size_t>(i)]->forward(out.queries, p);
    merged[static_cast<size_t>(i)] = p;
    prev = p;
  }
  for (int i = 0; i < 4; ++i)
    out.fused.levels.push_back(output_[static_cast<size_t>(i)]->forward(merged[static_cast<size_t>(i)]));
  return out;
}

Tensor pointwise_dot(const Tensor& embedding, const Tensor& features) {
  if (embedding.rank() != 2 || features.rank() != 4 || embedding.dim(0) != features.dim(0) ||
      embedding.dim(1) != features.dim(1))
    throw ShapeError("pointwise_dot: embedding " + shape_str(embedding.shape()) + " vs features " +
                     shape_str(features.shape()));
  const int64_t b = features.dim(0), c = features.dim(1), h = features.dim(2), w = features.dim(3);
  Tensor e = ops::reshape(embedding, {b, 1, c});
  Tensor f = ops::reshape(features, {b, c, h * w});
  return ops::reshape(ops::matmul(e, f), {b, 1, h, w});
}

namespace {
Tensor first_token(const Tensor& q) {
  if (q.rank() != 3) throw ShapeError("expected tokens (B, n, d), got " + shape_str(q.shape()));
  return ops::reshape(ops::slice(q, 1, 0, 1), {q.dim(0), q.dim(2)});
}
}  // namespace

EarlyEncoderHead::EarlyEncoderHead(int64_t dense_channels, int64_t dim, nn::Rng& rng)
    : conv_(dense_channels, dense_channels, 3, rng), mlp_({dim, dim, dense_channels}, rng) {
  register_module("conv", conv_);
  register_module("mlp", mlp_);
}

MaskPrediction EarlyEncoderHead::forward(const Tensor& dense, const Tensor& q_encoder,
                                         int64_t downsample) const {
  Tensor feat = conv_.forward(dense);
  Tensor emb = mlp_.forward(first_token(q_encoder));
  return {pointwise_dot(emb, feat), PredictionStage::early_encoder, downsample, 0.0};
}

EarlyFpnHead::EarlyFpnHead(int64_t fpn_channels, int64_t dim, nn::Rng& rng)
    : mlp_({dim, dim, fpn_channels}, rng) {
  register_module("mlp", mlp_);
}

MaskPrediction EarlyFpnHead::forward(const FusedPyramid& fused, const Tensor& q_fpn_first,
                                     int64_t downsample) const {
  Tensor emb = mlp_.forward(first_token(q_fpn_first));
  return {pointwise_dot(emb, fused.levels.front()), PredictionStage::early_fpn, downsample, 0.0};
}

PromptInjector::PromptInjector(int64_t fpn_channels, nn::Rng& rng)
    : conv1_(1, fpn_channels, 3, rng), conv2_(fpn_channels, fpn_channels, 3, rng) {
  register_module("conv1", conv1_);
  register_module("conv2", conv2_);
}

FusedPyramid PromptInjector::inject(const MaskPrediction& early_fpn, const FusedPyramid& fused) const {
  if (fused.prompt_injected) throw std::logic_error("dense prompt already injected");
  const Tensor& top = fused.levels.front();
  const Tensor& lg = early_fpn.logits;
  if (lg.rank() != 4 || lg.dim(1) != 1 || lg.dim(2) != top.dim(2) || lg.dim(3) != top.dim(3))
    throw ShapeError("prompt logits " + shape_str(lg.shape()) + " do not match top level " +
                     shape_str(top.shape()));
  Tensor emb = conv2_.forward(ops::gelu(conv1_.forward(lg)));
  FusedPyramid out;
  out.prompt_injected = true;
  for (const auto& level : fused.levels) {
    Tensor e = level.dim(2) == emb.dim(2) && level.dim(3) == emb.dim(3)
                   ? emb
                   : ops::resize_nearest(emb, level.dim(2), level.dim(3));
    out.levels.push_back(ops::add(level, e));
  }
  return out;
}

}  // namespace irstd
