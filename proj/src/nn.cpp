#include "irstd/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace irstd::nn {

Tensor& Module::register_parameter(std::string name, Tensor& t) {
  t.set_requires_grad(true);
  params_.emplace_back(std::move(name), &t);
  return t;
}

void Module::register_module(std::string name, Module& child) {
  children_.emplace_back(std::move(name), &child);
}

std::vector<std::pair<std::string, Tensor>> Module::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (const auto& [name, t] : params_)
    if (t->defined()) out.emplace_back(name, *t);
  for (const auto& [name, child] : children_)
    for (auto& [sub, t] : child->named_parameters()) out.emplace_back(name + "." + sub, t);
  return out;
}

std::vector<Tensor> Module::parameters() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

int64_t Module::parameter_count() const {
  int64_t n = 0;
  for (const auto& t : parameters()) n += t.numel();
  return n;
}

void Module::zero_grad() {
  for (auto t : parameters()) t.zero_grad();
}

Tensor Module::parameter(const std::string& name) const {
  for (auto& [n, t] : named_parameters())
    if (n == name) return t;
  throw std::out_of_range("no parameter named " + name);
}

Tensor uniform_param(Shape shape, double bound, Rng& rng) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (double& v : t.data()) v = dist(rng);
  t.set_requires_grad(true);
  return t;
}

Tensor normal_param(Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : t.data()) v = dist(rng);
  t.set_requires_grad(true);
  return t;
}

Tensor constant_param(Shape shape, double value) {
  Tensor t(std::move(shape), value);
  t.set_requires_grad(true);
  return t;
}

Linear::Linear(int64_t in_features, int64_t out_features, Rng& rng, bool with_bias) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_features));
  weight = uniform_param({out_features, in_features}, bound, rng);
  register_parameter("weight", weight);
  if (with_bias) {
    bias = uniform_param({out_features}, bound, rng);
    register_parameter("bias", bias);
  }
}

Conv2d::Conv2d(int64_t in_channels, int64_t out_channels, int kernel, Rng& rng, int stride,
               int padding, int groups, bool with_bias) {
  options.stride = stride;
  options.padding = padding < 0 ? kernel / 2 : padding;
  options.groups = groups;
  const int64_t fan_in = (in_channels / groups) * kernel * kernel;
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  weight = uniform_param({out_channels, in_channels / groups, kernel, kernel}, bound, rng);
  register_parameter("weight", weight);
  if (with_bias) {
    bias = uniform_param({out_channels}, bound, rng);
    register_parameter("bias", bias);
  }
}

Tensor Conv2d::forward(const Tensor& x) const { return ops::conv2d(x, weight, bias, options); }

LayerNorm::LayerNorm(int64_t dim) {
  gamma = constant_param({dim}, 1.0);
  beta = constant_param({dim}, 0.0);
  register_parameter("weight", gamma);
  register_parameter("bias", beta);
}

GroupNorm::GroupNorm(int groups, int64_t channels) : groups_(groups) {
  gamma = constant_param({channels}, 1.0);
  beta = constant_param({channels}, 0.0);
  register_parameter("weight", gamma);
  register_parameter("bias", beta);
}

int norm_groups(int64_t channels, int preferred) {
  for (int g = preferred; g > 1; --g)
    if (channels % g == 0) return g;
  return 1;
}

Mlp::Mlp(const std::vector<int64_t>& dims, Rng& rng) {
  if (dims.size() < 2) throw std::invalid_argument("Mlp needs at least input and output widths");
  for (size_t i = 0; i + 1 < dims.size(); ++i) {
    layers_.push_back(std::make_unique<Linear>(dims[i], dims[i + 1], rng));
    register_module("layers." + std::to_string(i), *layers_.back());
  }
}

Tensor Mlp::forward(const Tensor& x) const {
  Tensor h = x;
  for (size_t i = 0; i < layers_.size(); ++i) {
    h = layers_[i]->forward(h);
    if (i + 1 < layers_.size()) h = ops::gelu(h);
  }
  return h;
}

Attention::Attention(int64_t dim, int heads, Rng& rng, int downsample)
    : q_proj(dim, dim / downsample, rng),
      k_proj(dim, dim / downsample, rng),
      v_proj(dim, dim / downsample, rng),
      out_proj(dim / downsample, dim, rng),
      heads_(heads),
      internal_(dim / downsample) {
  if (heads < 1 || internal_ % heads != 0)
    throw std::invalid_argument("attention width " + std::to_string(internal_) +
                                " not divisible by " + std::to_string(heads) + " heads");
  register_module("q_proj", q_proj);
  register_module("k_proj", k_proj);
  register_module("v_proj", v_proj);
  register_module("out_proj", out_proj);
}

namespace {
// (B,N,I) -> (B*heads, N, I/heads)
Tensor split_heads(const Tensor& x, int heads) {
  const int64_t b = x.dim(0), n = x.dim(1), hd = x.dim(2) / heads;
  return ops::reshape(ops::permute(ops::reshape(x, {b, n, heads, hd}), {0, 2, 1, 3}),
                      {b * heads, n, hd});
}
Tensor merge_heads(const Tensor& x, int64_t batch, int heads) {
  const int64_t n = x.dim(1), hd = x.dim(2);
  return ops::reshape(ops::permute(ops::reshape(x, {batch, heads, n, hd}), {0, 2, 1, 3}),
                      {batch, n, heads * hd});
}
}  // namespace

Tensor Attention::forward(const Tensor& q, const Tensor& k, const Tensor& v) const {
  if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3 || q.dim(0) != k.dim(0) ||
      k.dim(1) != v.dim(1))
    throw ShapeError("attention: incompatible shapes " + shape_str(q.shape()) + " " +
                     shape_str(k.shape()) + " " + shape_str(v.shape()));
  const int64_t batch = q.dim(0);
  Tensor qh = split_heads(q_proj.forward(q), heads_);
  Tensor kh = split_heads(k_proj.forward(k), heads_);
  Tensor vh = split_heads(v_proj.forward(v), heads_);
  const double inv = 1.0 / std::sqrt(static_cast<double>(internal_ / heads_));
  Tensor attn = ops::softmax(ops::scale(ops::matmul(qh, kh, false, true), inv));
  return out_proj.forward(merge_heads(ops::matmul(attn, vh), batch, heads_));
}

void zero_parameters(Module& m) {
  for (auto t : m.parameters())
    for (double& v : t.data()) v = 0.0;
}

}  // namespace irstd::nn
