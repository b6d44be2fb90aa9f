#pragma once

// Sparse and dense learnable queries that carry information across encoder
// stages: bi-direction attention between a handful of tokens and a feature
// map, and multi-scale deformable attention between a dense query map and
// later encoder stages.

#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "irstd/backbone.hpp"
#include "irstd/nn.hpp"

namespace irstd {

enum class QueryGroup { encoder, fpn, decoder };
std::string to_string(QueryGroup group);

struct SparseQuerySet {
  Tensor tokens;  // (n, d) learnable, or (B, n, d) once expanded/updated
  QueryGroup group = QueryGroup::encoder;

  int64_t count() const { return tokens.dim(-2); }
  int64_t dim() const { return tokens.dim(-1); }
};

// N(0, 1) tokens, trainable, deterministic in `seed`.
SparseQuerySet init_sparse(QueryGroup group, int64_t n, int64_t d, uint64_t seed);

// (n, d) -> (B, n, d), differentiable.
Tensor expand_tokens(const Tensor& tokens, int64_t batch);

struct DenseQueryMap {
  Tensor map;  // (B, m, h1, w1)
};

// Value copy of the first-stage features (gradients flow back to the source).
DenseQueryMap init_dense(const Tensor& stage1_features);

struct BiAttnConfig {
  int64_t dim = 256;
  int heads = 8;
  // Query MLP hidden width = mlp_ratio_x2 * dim / 2. The default of 9 (4.5x)
  // makes query-side projections total 17 d^2 per token.
  int64_t mlp_ratio_x2 = 9;
};

// Four residual pre-norm steps: (1) queries attend to features, (2) MLP on
// queries, (3) query self-attention, (4) features attend to queries. Features
// with c != d are projected to d for attention and back for the residual.
class BiDirectionAttention : public nn::Module {
 public:
  BiDirectionAttention(int64_t feature_channels, const BiAttnConfig& config, nn::Rng& rng);

  // queries (B, n, d), features (B, C, H, W) -> (queries after step 3,
  // features after step 4), shapes preserved.
  std::pair<Tensor, Tensor> forward(const Tensor& queries, const Tensor& features) const;

  int64_t feature_channels() const { return channels_; }
  const BiAttnConfig& config() const { return config_; }

 private:
  BiAttnConfig config_;
  int64_t channels_;
  std::unique_ptr<nn::Linear> proj_in_, proj_out_;
  nn::LayerNorm norm_f1_, norm_q1_, norm_q2_, norm_q3_, norm_q4_, norm_f4_;
  nn::Attention cross_q2f_;
  nn::Mlp mlp_;
  nn::Attention self_attn_;
  nn::Attention cross_f2q_;
};

struct DeformConfig {
  int heads = 8;
  int points = 4;  // sampling points per head per level
};

// Multi-scale deformable attention over the list [dense, stages...]. Every
// location of every level is a query; each samples `points` locations per
// level around its reference point. Updates are residual in each level's own
// channel space.
class DeformableFusion : public nn::Module {
 public:
  DeformableFusion(int64_t dense_channels, const std::vector<int64_t>& stage_channels,
                   const DeformConfig& config, nn::Rng& rng);

  std::pair<Tensor, std::vector<Tensor>> forward(const Tensor& dense,
                                                 const std::vector<Tensor>& stages) const;

  int64_t model_dim() const { return dim_; }
  int levels() const { return static_cast<int>(level_channels_.size()); }

  nn::Linear& offset_proj() { return offset_proj_; }
  nn::Linear& weight_proj() { return weight_proj_; }
  nn::Linear& value_proj() { return value_proj_; }
  nn::Linear& output_proj() { return output_proj_; }

 private:
  DeformConfig config_;
  int64_t dim_;
  std::vector<int64_t> level_channels_;
  std::vector<std::unique_ptr<nn::Linear>> in_proj_, out_proj_;  // null when c == dim
  Tensor level_embed_;
  nn::LayerNorm norm_;
  nn::Linear offset_proj_, weight_proj_, value_proj_, output_proj_;
};

struct QueryEngineConfig {
  int64_t dim = 256;
  int heads = 8;
  int encoder_queries = 4;
  DeformConfig deform;
  bool sparse = true;  // bi-direction attention after each stage
  bool dense = true;   // deformable fusion at stages 2..4
};

// Per-stage query modules for the image encoder. Parameter names:
// stage{i}.biattn.*, stage{i}.deform.*
class EncoderQueryEngine : public nn::Module {
 public:
  EncoderQueryEngine(const EncoderConfig& encoder, const QueryEngineConfig& config, nn::Rng& rng);

  const QueryEngineConfig& config() const { return config_; }
  const BiDirectionAttention& bi_attention(int stage) const { return *bi_[stage]; }
  const DeformableFusion& deformable(int stage) const { return *deform_[stage - 1]; }

 private:
  QueryEngineConfig config_;
  std::vector<std::unique_ptr<BiDirectionAttention>> bi_;
  std::vector<std::unique_ptr<DeformableFusion>> deform_;
};

struct EncoderQueryResult {
  FeaturePyramid pyramid;
  Tensor q_encoder;     // (B, n, d)
  DenseQueryMap dense;  // at first-stage resolution
};

// Stage loop: S_i = stage_i(S_{i-1}); Q_dense = copy of S_1; bi-direction
// attention on (Q_encoder, S_i); deformable fusion on (Q_dense, S_i) for
// stages 2..4. A null engine bypasses all query work and reproduces
// encoder.encode().
EncoderQueryResult run_encoder_queries(const ImageEncoder& encoder,
                                       const EncoderQueryEngine* engine, const Tensor& images,
                                       const SparseQuerySet& q_encoder);

// Analytic operation count of one bi-direction attention module.
struct BiAttnCost {
  int64_t b = 0, n = 0, d = 0, h = 0, w = 0;
  int64_t query_proj = 0;     // 34 b n d^2
  int64_t feature_proj = 0;   // 8 b h w d^2
  int64_t cross_dots = 0;     // 8 b n h w d
  int64_t self_dots = 0;      // 4 b n^2 d
  int64_t total_ops = 0;
};

BiAttnCost bi_attn_cost(int64_t b, int64_t n, int64_t d, int64_t h, int64_t w);

// Runs a freshly built module (feature channels == d) on random inputs under
// an OpCountScope.
OpCounts measure_bi_attention_ops(int64_t b, int64_t n, int64_t d, int64_t h, int64_t w,
                                  int heads, uint64_t seed = 0);
// Same for deformable fusion over a dense map and three stages at halving
// resolutions starting from (h, w).
OpCounts measure_deformable_ops(int64_t channels, int64_t h, int64_t w, const DeformConfig& cfg,
                                uint64_t seed = 0);

}  // namespace irstd
