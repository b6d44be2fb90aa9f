#include "irstd/model.hpp"

#include <stdexcept>
#include <string>

namespace irstd {

void ModelConfig::validate() const {
  encoder.validate();
  if (dim < 4 || dim % 4 != 0) throw std::invalid_argument("model.dim must be a positive multiple of 4");
  if (heads < 1 || dim % heads != 0) throw std::invalid_argument("model.dim must be divisible by model.heads");
  if (encoder_queries < 1 || fpn_queries < 1 || decoder_queries != 1)
    throw std::invalid_argument("query counts must be >= 1 (decoder exactly 1)");
  if (decoder.dim != dim) throw std::invalid_argument("decoder.dim must equal model.dim");
  decoder.validate();
  const int64_t c1 = encoder.stage_channels[0];
  if (dense_queries && (c1 % 4 != 0 || c1 % deform.heads != 0))
    throw std::invalid_argument("first-stage channels must be divisible by 4 and deform heads");
}

ModelConfig ModelConfig::full() { return ModelConfig{}; }

ModelConfig ModelConfig::desk() {
  ModelConfig c;
  c.encoder.stem_downsample = 1;
  c.encoder.stage_channels = {16, 24, 32, 48};
  c.encoder.stage_depths = {1, 1, 2, 1};
  c.dim = 32;
  c.heads = 4;
  c.deform.heads = 4;
  c.deform.points = 4;
  c.decoder.dim = 32;
  c.decoder.heads = 4;
  c.decoder.mlp_dim = 256;
  c.decoder.depth = 2;
  return c;
}

IrstdModel::IrstdModel(const ModelConfig& config) : config_(config) {
  config_.validate();
  nn::Rng rng(config_.seed);
  encoder_ = std::make_unique<HierarchicalEncoder>(config_.encoder, rng);
  QueryEngineConfig qc;
  qc.dim = config_.dim;
  qc.heads = config_.heads;
  qc.encoder_queries = config_.encoder_queries;
  qc.deform = config_.deform;
  qc.sparse = config_.sparse_queries;
  qc.dense = config_.dense_queries;
  engine_ = std::make_unique<EncoderQueryEngine>(config_.encoder, qc, rng);
  q_encoder_ = {nn::normal_param({config_.encoder_queries, config_.dim}, 1.0, rng), QueryGroup::encoder};
  q_fpn_ = {nn::normal_param({config_.fpn_queries, config_.dim}, 1.0, rng), QueryGroup::fpn};
  q_decoder_ = {nn::normal_param({config_.decoder_queries, config_.dim}, 1.0, rng), QueryGroup::decoder};

  FpnConfig fc;
  fc.channels = config_.dim;
  fc.attention.dim = config_.dim;
  fc.attention.heads = config_.heads;
  fc.query_interaction = config_.sparse_queries;
  fpn_ = std::make_unique<TinyFpn>(config_.encoder.stage_channels, fc, rng);
  early_enc_ = std::make_unique<EarlyEncoderHead>(config_.encoder.stage_channels[0], config_.dim, rng);
  early_fpn_ = std::make_unique<EarlyFpnHead>(config_.dim, config_.dim, rng);
  prompt_ = std::make_unique<PromptInjector>(config_.dim, rng);
  decoder_ = std::make_unique<MaskDecoder>(config_.dim, config_.decoder, rng);

  register_module("encoder", *encoder_);
  register_module("query_engine", *engine_);
  register_parameter("queries.encoder", q_encoder_.tokens);
  register_parameter("queries.fpn", q_fpn_.tokens);
  register_parameter("queries.decoder", q_decoder_.tokens);
  register_module("fpn", *fpn_);
  register_module("early_encoder", *early_enc_);
  register_module("early_fpn", *early_fpn_);
  register_module("prompt", *prompt_);
  register_module("decoder", *decoder_);
}

ModelOutputs IrstdModel::forward(const Tensor& images, const ForwardOptions& options) const {
  const int64_t batch = images.dim(0);
  const int64_t stem = config_.encoder.stem_downsample;
  ModelOutputs out;
  EncoderQueryResult enc = run_encoder_queries(*encoder_, engine_.get(), images, q_encoder_);
  out.pyramid = enc.pyramid;
  out.q_encoder = enc.q_encoder;
  out.early_encoder = early_enc_->forward(enc.dense.map, enc.q_encoder, stem);

  Tensor q_fpn = expand_tokens(q_fpn_.tokens, batch);
  out.fpn = fpn_->forward(enc.pyramid, enc.q_encoder, q_fpn);
  // Without interaction the initial tokens stand in for the processed ones.
  Tensor q_all = out.fpn.queries.defined() ? out.fpn.queries : ops::concat({enc.q_encoder, q_fpn}, 1);
  out.early_fpn = early_fpn_->forward(
      out.fpn.fused, ops::slice(q_all, 1, config_.encoder_queries, config_.fpn_queries), stem);

  out.fused = out.fpn.fused;
  if (config_.prompt_injection && options.inject_prompt)
    out.fused = prompt_->inject(out.early_fpn, out.fpn.fused);

  Tensor tokens = ops::concat({q_all, expand_tokens(q_decoder_.tokens, batch)}, 1);
  DecodeOptions dopt = options.decode;
  if (dopt.output_height == 0) dopt.output_height = images.dim(2);
  if (dopt.output_width == 0) dopt.output_width = images.dim(3);
  out.final = decoder_->decode(out.fused, tokens, stem, dopt);
  return out;
}

}  // namespace irstd
