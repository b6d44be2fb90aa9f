#pragma once

// Parameter-holding building blocks. Modules register their parameters and
// children by name so that `named_parameters()` yields canonical dotted
// names (e.g. "encoder.stage1.block0.dw.weight") used by checkpoints.

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "irstd/ops.hpp"
#include "irstd/tensor.hpp"

namespace irstd::nn {

using Rng = std::mt19937_64;

class Module {
 public:
  Module() = default;
  virtual ~Module() = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;

  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  std::vector<Tensor> parameters() const;
  int64_t parameter_count() const;
  void zero_grad();

  // Parameter lookup by dotted name; throws std::out_of_range when absent.
  Tensor parameter(const std::string& name) const;

 protected:
  Tensor& register_parameter(std::string name, Tensor& t);
  void register_module(std::string name, Module& child);

 private:
  std::vector<std::pair<std::string, Tensor*>> params_;
  std::vector<std::pair<std::string, Module*>> children_;
};

// Uniform(-bound, bound) parameter tensor with requires_grad set.
Tensor uniform_param(Shape shape, double bound, Rng& rng);
Tensor normal_param(Shape shape, double stddev, Rng& rng);
Tensor constant_param(Shape shape, double value);

class Linear : public Module {
 public:
  Linear(int64_t in_features, int64_t out_features, Rng& rng, bool bias = true);
  Tensor forward(const Tensor& x) const { return ops::linear(x, weight, bias); }
  int64_t in_features() const { return weight.dim(1); }
  int64_t out_features() const { return weight.dim(0); }

  Tensor weight;
  Tensor bias;
};

class Conv2d : public Module {
 public:
  Conv2d(int64_t in_channels, int64_t out_channels, int kernel, Rng& rng, int stride = 1,
         int padding = -1, int groups = 1, bool bias = true);
  Tensor forward(const Tensor& x) const;

  Tensor weight;
  Tensor bias;
  ops::Conv2dOptions options;
};

class LayerNorm : public Module {
 public:
  explicit LayerNorm(int64_t dim);
  Tensor forward(const Tensor& x) const { return ops::layer_norm(x, gamma, beta); }

  Tensor gamma;
  Tensor beta;
};

class GroupNorm : public Module {
 public:
  GroupNorm(int groups, int64_t channels);
  Tensor forward(const Tensor& x) const { return ops::group_norm(x, groups_, gamma, beta); }

  Tensor gamma;
  Tensor beta;

 private:
  int groups_;
};

// Largest divisor of `channels` not exceeding `preferred`.
int norm_groups(int64_t channels, int preferred = 8);

// Linear layers joined by GELU; `dims` lists every width including input and
// output (so {d, h, o} is a 2-layer MLP).
class Mlp : public Module {
 public:
  Mlp(const std::vector<int64_t>& dims, Rng& rng);
  Tensor forward(const Tensor& x) const;
  size_t depth() const { return layers_.size(); }
  Linear& layer(size_t i) { return *layers_[i]; }

 private:
  std::vector<std::unique_ptr<Linear>> layers_;
};

// Multi-head attention with separate q/k/v/out projections into an internal
// width of `dim / downsample`.
class Attention : public Module {
 public:
  Attention(int64_t dim, int heads, Rng& rng, int downsample = 1);
  // q (B,Nq,dim), k/v (B,Nk,dim) -> (B,Nq,dim)
  Tensor forward(const Tensor& q, const Tensor& k, const Tensor& v) const;
  int heads() const { return heads_; }

  Linear q_proj, k_proj, v_proj, out_proj;

 private:
  int heads_;
  int64_t internal_;
};

// Zero every parameter of a module (tests and ablations).
void zero_parameters(Module& m);

}  // namespace irstd::nn
