#pragma once

// Differentiable tensor operations. Feature maps are (B, C, H, W), token
// sequences are (B, N, D); "last dim" ops treat everything before the final
// axis as rows.

#include <vector>

#include "irstd/tensor.hpp"

namespace irstd::ops {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);

// b's shape must equal the trailing dims of a (leading 1s in b are ignored);
// b is repeated over a's leading dims.
Tensor add_broadcast(const Tensor& a, const Tensor& b);

// Batched product of (B,M,K)-shaped operands; 2-D operands are batch 1.
Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);

// y = x W^T + b over the last dim. `bias` may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

struct Conv2dOptions {
  int stride = 1;
  int padding = 0;
  int groups = 1;
};
// x (B,Cin,H,W), weight (Cout, Cin/groups, k, k), bias (Cout) or undefined.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Conv2dOptions opt = {});

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

Tensor gelu(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor softmax(const Tensor& x);  // last dim

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<int>& perm);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, int64_t start, int64_t length);
Tensor clone(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// (B,C,H,W) <-> (B,H*W,C)
Tensor map_to_tokens(const Tensor& x);
Tensor tokens_to_map(const Tensor& t, int64_t height, int64_t width);

// Nearest: src = floor(dst * in / out). Bilinear: half-pixel centers, edge clamped.
Tensor resize_nearest(const Tensor& x, int64_t height, int64_t width);
Tensor resize_bilinear(const Tensor& x, int64_t height, int64_t width);

// Bilinear readout of x (B,C,H,W) at normalized points (B,P,2) holding (x, y)
// in [0,1]; pixel coordinate = p * size - 0.5, clamped to the border.
// Returns (B,C,P). Points are treated as constants.
Tensor point_sample(const Tensor& x, const Tensor& points);

struct LevelShape {
  int64_t height = 0;
  int64_t width = 0;
};

// Multi-scale deformable sampling core.
//   value     (B, Nv, heads, head_dim), levels concatenated row-major
//   locations (B, Nq, heads, L, K, 2)   normalized (x, y), zero padding outside
//   weights   (B, Nq, heads, L, K)
// out (B, Nq, heads * head_dim) = sum_{l,k} w * bilinear(value_l, loc).
Tensor deform_sample(const Tensor& value, const std::vector<LevelShape>& levels,
                     const Tensor& locations, const Tensor& weights);

// Fixed 2-D sinusoidal encoding (1, H*W, dim); dim must be divisible by 4.
Tensor sine_position_encoding(int64_t height, int64_t width, int64_t dim);

}  // namespace irstd::ops
