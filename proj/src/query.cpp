#include "irstd/query.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace irstd {

std::string to_string(QueryGroup group) {
  switch (group) {
    case QueryGroup::encoder: return "encoder";
    case QueryGroup::fpn: return "fpn";
    case QueryGroup::decoder: return "decoder";
  }
  return "unknown";
}

SparseQuerySet init_sparse(QueryGroup group, int64_t n, int64_t d, uint64_t seed) {
  if (n < 1 || d < 1) throw std::invalid_argument("init_sparse: n and d must be positive");
  nn::Rng rng(seed);
  return {nn::normal_param({n, d}, 1.0, rng), group};
}

Tensor expand_tokens(const Tensor& tokens, int64_t batch) {
  if (tokens.rank() == 3) {
    if (tokens.dim(0) != batch) throw ShapeError("expand_tokens: batch mismatch");
    return tokens;
  }
  if (tokens.rank() != 2) throw ShapeError("expand_tokens: expected (n, d)");
  Tensor one = ops::reshape(tokens, {1, tokens.dim(0), tokens.dim(1)});
  if (batch == 1) return one;
  return ops::concat(std::vector<Tensor>(static_cast<size_t>(batch), one), 0);
}

DenseQueryMap init_dense(const Tensor& stage1_features) {
  if (stage1_features.rank() != 4) throw ShapeError("init_dense: expected (B, C, H, W)");
  return {ops::clone(stage1_features)};
}

BiDirectionAttention::BiDirectionAttention(int64_t feature_channels, const BiAttnConfig& config,
                                           nn::Rng& rng)
    : config_(config),
      channels_(feature_channels),
      norm_f1_(config.dim),
      norm_q1_(config.dim),
      norm_q2_(config.dim),
      norm_q3_(config.dim),
      norm_q4_(config.dim),
      norm_f4_(config.dim),
      cross_q2f_(config.dim, config.heads, rng),
      mlp_({config.dim, config.mlp_ratio_x2 * config.dim / 2, config.dim}, rng),
      self_attn_(config.dim, config.heads, rng),
      cross_f2q_(config.dim, config.heads, rng) {
  if ((config.mlp_ratio_x2 * config.dim) % 2 != 0)
    throw std::invalid_argument("bi-direction attention: MLP width must be integral");
  if (feature_channels != config.dim) {
    proj_in_ = std::make_unique<nn::Linear>(feature_channels, config.dim, rng);
    proj_out_ = std::make_unique<nn::Linear>(config.dim, feature_channels, rng);
    register_module("proj_in", *proj_in_);
    register_module("proj_out", *proj_out_);
  }
  register_module("norm_f1", norm_f1_);
  register_module("norm_q1", norm_q1_);
  register_module("norm_q2", norm_q2_);
  register_module("norm_q3", norm_q3_);
  register_module("norm_q4", norm_q4_);
  register_module("norm_f4", norm_f4_);
  register_module("cross_q2f", cross_q2f_);
  register_module("mlp", mlp_);
  register_module("self_attn", self_attn_);
  register_module("cross_f2q", cross_f2q_);
}

std::pair<Tensor, Tensor> BiDirectionAttention::forward(const Tensor& queries,
                                                        const Tensor& features) const {
  if (features.rank() != 4 || features.dim(1) != channels_)
    throw ShapeError("bi-direction attention built for " + std::to_string(channels_) +
                     " channels, got features " + shape_str(features.shape()));
  if (queries.rank() != 3 || queries.dim(2) != config_.dim || queries.dim(0) != features.dim(0))
    throw ShapeError("bi-direction attention: queries " + shape_str(queries.shape()) +
                     " incompatible with dim " + std::to_string(config_.dim));
  const int64_t h = features.dim(2), w = features.dim(3);
  Tensor f_tok = ops::map_to_tokens(features);
  Tensor fd = proj_in_ ? proj_in_->forward(f_tok) : f_tok;

  Tensor fn = norm_f1_.forward(fd);
  Tensor q = ops::add(queries, cross_q2f_.forward(norm_q1_.forward(queries), fn, fn));
  q = ops::add(q, mlp_.forward(norm_q2_.forward(q)));
  Tensor qn = norm_q3_.forward(q);
  q = ops::add(q, self_attn_.forward(qn, qn, qn));

  Tensor kv = norm_q4_.forward(q);
  Tensor upd = cross_f2q_.forward(norm_f4_.forward(fd), kv, kv);
  if (proj_out_) upd = proj_out_->forward(upd);
  Tensor f_out = ops::tokens_to_map(ops::add(f_tok, upd), h, w);
  return {q, f_out};
}

DeformableFusion::DeformableFusion(int64_t dense_channels, const std::vector<int64_t>& stage_channels,
                                   const DeformConfig& config, nn::Rng& rng)
    : config_(config),
      dim_(dense_channels),
      norm_(dense_channels),
      offset_proj_(dense_channels,
                   static_cast<int64_t>(config.heads) * (1 + static_cast<int64_t>(stage_channels.size())) *
                       config.points * 2,
                   rng),
      weight_proj_(dense_channels,
                   static_cast<int64_t>(config.heads) * (1 + static_cast<int64_t>(stage_channels.size())) *
                       config.points,
                   rng),
      value_proj_(dense_channels, dense_channels, rng),
      output_proj_(dense_channels, dense_channels, rng) {
  if (stage_channels.empty()) throw std::invalid_argument("deformable fusion needs >= 1 stage");
  if (config.heads < 1 || dim_ % config.heads != 0)
    throw std::invalid_argument("deformable fusion: channels not divisible by heads");
  if (dim_ % 4 != 0) throw std::invalid_argument("deformable fusion: channels must be a multiple of 4");
  level_channels_.push_back(dense_channels);
  level_channels_.insert(level_channels_.end(), stage_channels.begin(), stage_channels.end());
  const int nl = levels();
  for (int l = 0; l < nl; ++l) {
    const int64_t c = level_channels_[static_cast<size_t>(l)];
    if (c != dim_) {
      in_proj_.push_back(std::make_unique<nn::Linear>(c, dim_, rng));
      out_proj_.push_back(std::make_unique<nn::Linear>(dim_, c, rng));
      register_module("level" + std::to_string(l) + ".in_proj", *in_proj_.back());
      register_module("level" + std::to_string(l) + ".out_proj", *out_proj_.back());
    } else {
      in_proj_.push_back(nullptr);
      out_proj_.push_back(nullptr);
    }
  }
  level_embed_ = nn::normal_param({nl, dim_}, 1.0, rng);
  register_parameter("level_embed", level_embed_);
  register_module("norm", norm_);
  register_module("offset_proj", offset_proj_);
  register_module("weight_proj", weight_proj_);
  register_module("value_proj", value_proj_);
  register_module("output_proj", output_proj_);

  // Offsets start at zero with a per-head radial pattern in the bias: head h
  // points along angle 2*pi*h/heads, point k at distance k+1 pixels.
  for (double& v : offset_proj_.weight.data()) v = 0.0;
  double* ob = offset_proj_.bias.ptr();
  for (int hh = 0; hh < config.heads; ++hh) {
    const double theta = 2.0 * std::numbers::pi * hh / config.heads;
    double cx = std::cos(theta), cy = std::sin(theta);
    const double m = std::max(std::abs(cx), std::abs(cy));
    cx /= m;
    cy /= m;
    for (int l = 0; l < nl; ++l)
      for (int k = 0; k < config.points; ++k) {
        const int64_t idx = ((static_cast<int64_t>(hh) * nl + l) * config.points + k) * 2;
        ob[idx] = cx * (k + 1);
        ob[idx + 1] = cy * (k + 1);
      }
  }
  for (double& v : weight_proj_.weight.data()) v = 0.0;
  for (double& v : weight_proj_.bias.data()) v = 0.0;
}

std::pair<Tensor, std::vector<Tensor>> DeformableFusion::forward(
    const Tensor& dense, const std::vector<Tensor>& stages) const {
  if (stages.empty()) throw std::invalid_argument("deformable fusion: empty stage list");
  if (static_cast<int>(stages.size()) + 1 != levels())
    throw ShapeError("deformable fusion built for " + std::to_string(levels() - 1) +
                     " stages, got " + std::to_string(stages.size()));
  std::vector<Tensor> inputs{dense};
  inputs.insert(inputs.end(), stages.begin(), stages.end());
  const int nl = levels();
  const int64_t batch = dense.dim(0);
  std::vector<ops::LevelShape> shapes;
  std::vector<Tensor> tokens, pos;
  for (int l = 0; l < nl; ++l) {
    const Tensor& x = inputs[static_cast<size_t>(l)];
    if (x.rank() != 4 || x.dim(0) != batch || x.dim(1) != level_channels_[static_cast<size_t>(l)])
      throw ShapeError("deformable fusion: level " + std::to_string(l) + " has shape " +
                       shape_str(x.shape()));
    shapes.push_back({x.dim(2), x.dim(3)});
    Tensor t = ops::map_to_tokens(x);
    if (in_proj_[static_cast<size_t>(l)]) t = in_proj_[static_cast<size_t>(l)]->forward(t);
    tokens.push_back(t);
    Tensor p = ops::sine_position_encoding(x.dim(2), x.dim(3), dim_);
    pos.push_back(ops::add_broadcast(p, ops::slice(level_embed_, 0, l, 1)));
  }
  Tensor src = ops::concat(tokens, 1);  // (B, N, D)
  const int64_t n = src.dim(1);
  Tensor query = ops::add_broadcast(norm_.forward(src), ops::concat(pos, 1));
  const int heads = config_.heads;
  const int np = config_.points;
  const int64_t hd = dim_ / heads;
  Tensor value = ops::reshape(value_proj_.forward(src), {batch, n, heads, hd});
  Tensor offsets = ops::reshape(offset_proj_.forward(query), {batch, n, heads, nl, np, 2});
  Tensor weights = ops::reshape(
      ops::softmax(ops::reshape(weight_proj_.forward(query), {batch, n, heads, nl * np})),
      {batch, n, heads, nl, np});

  // locations = reference + offset / (W_l, H_l)
  Tensor ref(offsets.shape()), inv(offsets.shape());
  {
    double* pr = ref.ptr();
    double* pi = inv.ptr();
    int64_t q = 0;
    for (int l = 0; l < nl; ++l) {
      const auto& s = shapes[static_cast<size_t>(l)];
      for (int64_t y = 0; y < s.height; ++y)
        for (int64_t x = 0; x < s.width; ++x, ++q) {
          const double rx = (static_cast<double>(x) + 0.5) / static_cast<double>(s.width);
          const double ry = (static_cast<double>(y) + 0.5) / static_cast<double>(s.height);
          for (int64_t b = 0; b < batch; ++b)
            for (int hh = 0; hh < heads; ++hh)
              for (int lt = 0; lt < nl; ++lt)
                for (int k = 0; k < np; ++k) {
                  const int64_t idx = ((((b * n + q) * heads + hh) * nl + lt) * np + k) * 2;
                  pr[idx] = rx;
                  pr[idx + 1] = ry;
                  pi[idx] = 1.0 / static_cast<double>(shapes[static_cast<size_t>(lt)].width);
                  pi[idx + 1] = 1.0 / static_cast<double>(shapes[static_cast<size_t>(lt)].height);
                }
        }
    }
  }
  Tensor locations = ops::add(ref, ops::mul(offsets, inv));
  Tensor attended = output_proj_.forward(ops::deform_sample(value, shapes, locations, weights));

  std::vector<Tensor> outs;
  int64_t start = 0;
  for (int l = 0; l < nl; ++l) {
    const auto& s = shapes[static_cast<size_t>(l)];
    const int64_t len = s.height * s.width;
    Tensor upd = ops::slice(attended, 1, start, len);
    start += len;
    if (out_proj_[static_cast<size_t>(l)]) upd = out_proj_[static_cast<size_t>(l)]->forward(upd);
    outs.push_back(ops::add(inputs[static_cast<size_t>(l)], ops::tokens_to_map(upd, s.height, s.width)));
  }
  Tensor dense_out = outs.front();
  outs.erase(outs.begin());
  return {dense_out, outs};
}

EncoderQueryEngine::EncoderQueryEngine(const EncoderConfig& encoder,
                                       const QueryEngineConfig& config, nn::Rng& rng)
    : config_(config) {
  BiAttnConfig bc;
  bc.dim = config.dim;
  bc.heads = config.heads;
  for (int s = 0; s < 4; ++s) {
    bi_.push_back(std::make_unique<BiDirectionAttention>(encoder.stage_channels[s], bc, rng));
    register_module("stage" + std::to_string(s + 1) + ".biattn", *bi_.back());
  }
  for (int s = 1; s < 4; ++s) {
    deform_.push_back(std::make_unique<DeformableFusion>(
        encoder.stage_channels[0], std::vector<int64_t>{encoder.stage_channels[s]}, config.deform,
        rng));
    register_module("stage" + std::to_string(s + 1) + ".deform", *deform_.back());
  }
}

EncoderQueryResult run_encoder_queries(const ImageEncoder& encoder,
                                       const EncoderQueryEngine* engine, const Tensor& images,
                                       const SparseQuerySet& q_encoder) {
  encoder.check_input(images);
  const int64_t batch = images.dim(0);
  EncoderQueryResult out;
  out.pyramid.stem_downsample = encoder.config().stem_downsample;
  Tensor q = expand_tokens(q_encoder.tokens, batch);
  Tensor x = encoder.embed(images);
  for (int i = 0; i < 4; ++i) {
    Tensor s = encoder.run_stage(i, x);
    if (i == 0) out.dense = init_dense(s);
    if (engine && engine->config().sparse) std::tie(q, s) = engine->bi_attention(i).forward(q, s);
    if (engine && engine->config().dense && i > 0) {
      auto [dense, stages] = engine->deformable(i).forward(out.dense.map, {s});
      out.dense.map = dense;
      s = stages.front();
    }
    out.pyramid.stages.push_back(s);
    x = s;
  }
  out.q_encoder = q;
  return out;
}

BiAttnCost bi_attn_cost(int64_t b, int64_t n, int64_t d, int64_t h, int64_t w) {
  if (b < 1 || n < 1 || d < 1 || h < 1 || w < 1)
    throw std::invalid_argument("bi_attn_cost: arguments must be positive");
  BiAttnCost c{b, n, d, h, w};
  c.query_proj = 34 * b * n * d * d;
  c.feature_proj = 8 * b * h * w * d * d;
  c.cross_dots = 8 * b * n * h * w * d;
  c.self_dots = 4 * b * n * n * d;
  c.total_ops = c.query_proj + c.feature_proj + c.cross_dots + c.self_dots;
  return c;
}

namespace {
Tensor random_tensor(Shape shape, nn::Rng& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, 1.0);
  for (double& v : t.data()) v = dist(rng);
  return t;
}
}  // namespace

OpCounts measure_bi_attention_ops(int64_t b, int64_t n, int64_t d, int64_t h, int64_t w, int heads,
                                  uint64_t seed) {
  nn::Rng rng(seed);
  BiAttnConfig cfg;
  cfg.dim = d;
  cfg.heads = heads;
  BiDirectionAttention module(d, cfg, rng);
  Tensor q = random_tensor({b, n, d}, rng);
  Tensor f = random_tensor({b, d, h, w}, rng);
  NoGradGuard no_grad;
  OpCountScope scope;
  module.forward(q, f);
  return scope.counts();
}

OpCounts measure_deformable_ops(int64_t channels, int64_t h, int64_t w, const DeformConfig& cfg,
                                uint64_t seed) {
  nn::Rng rng(seed);
  DeformableFusion module(channels, {channels * 2, channels * 4, channels * 8}, cfg, rng);
  Tensor dense = random_tensor({1, channels, h, w}, rng);
  std::vector<Tensor> stages;
  for (int i = 1; i <= 3; ++i)
    stages.push_back(random_tensor({1, channels << i, std::max<int64_t>(h >> i, 1),
                                    std::max<int64_t>(w >> i, 1)},
                                   rng));
  NoGradGuard no_grad;
  OpCountScope scope;
  module.forward(dense, stages);
  return scope.counts();
}

}  // namespace irstd
