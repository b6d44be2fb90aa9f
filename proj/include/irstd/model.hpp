#pragma once

// Full segmentation network: encoder with query engine, tiny FPN, early
// heads, prompt injection and the two-way decoder.

#include <cstdint>
#include <memory>

#include "irstd/decoder.hpp"
#include "irstd/fpn.hpp"
#include "irstd/query.hpp"

namespace irstd {

struct ModelConfig {
  EncoderConfig encoder;
  int64_t dim = 256;  // token dim d, also the FPN width
  int heads = 8;
  DeformConfig deform;
  int encoder_queries = 4;
  int fpn_queries = 4;
  int decoder_queries = 1;
  DecoderConfig decoder;
  bool sparse_queries = true;  // bi-direction attention in encoder and FPN
  bool dense_queries = true;   // deformable fusion in the encoder
  bool prompt_injection = true;
  uint64_t seed = 0;

  void validate() const;

  static ModelConfig full();
  // Narrow widths for CPU-scale tests and demos.
  static ModelConfig desk();
};

struct ModelOutputs {
  MaskPrediction early_encoder;
  MaskPrediction early_fpn;
  MaskPrediction final;
  FeaturePyramid pyramid;
  FusedPyramid fused;  // after prompt injection when enabled
  FpnResult fpn;
  Tensor q_encoder;  // after the encoder stages
};

struct ForwardOptions {
  bool inject_prompt = true;  // ANDed with ModelConfig::prompt_injection
  DecodeOptions decode;       // output size defaults to the input size
};

// Parameter names: encoder.*, query_engine.*, queries.{encoder,fpn,decoder},
// fpn.*, early_encoder.*, early_fpn.*, prompt.*, decoder.*
class IrstdModel : public nn::Module {
 public:
  explicit IrstdModel(const ModelConfig& config);

  ModelOutputs forward(const Tensor& images, const ForwardOptions& options = {}) const;

  const ModelConfig& config() const { return config_; }
  const HierarchicalEncoder& encoder() const { return *encoder_; }
  const EncoderQueryEngine& query_engine() const { return *engine_; }
  TinyFpn& fpn() { return *fpn_; }
  PromptInjector& prompt() { return *prompt_; }
  MaskDecoder& decoder() { return *decoder_; }
  EarlyEncoderHead& early_encoder_head() { return *early_enc_; }
  EarlyFpnHead& early_fpn_head() { return *early_fpn_; }
  SparseQuerySet& q_encoder() { return q_encoder_; }
  SparseQuerySet& q_fpn() { return q_fpn_; }
  SparseQuerySet& q_decoder() { return q_decoder_; }

 private:
  ModelConfig config_;
  std::unique_ptr<HierarchicalEncoder> encoder_;
  std::unique_ptr<EncoderQueryEngine> engine_;
  SparseQuerySet q_encoder_, q_fpn_, q_decoder_;
  std::unique_ptr<TinyFpn> fpn_;
  std::unique_ptr<EarlyEncoderHead> early_enc_;
  std::unique_ptr<EarlyFpnHead> early_fpn_;
  std::unique_ptr<PromptInjector> prompt_;
  std::unique_ptr<MaskDecoder> decoder_;
};

}  // namespace irstd
