#include <gtest/gtest.h>

#include <cmath>

#include "irstd/ops.hpp"
#include "support/gradcheck.hpp"

namespace irstd {
namespace {

using testing::gradcheck;
using testing::randn;
using testing::weighted_sum;

constexpr double kStep = 1e-5;
constexpr double kTol = 1e-6;

TEST(Ops, ElementwiseGradients) {
  std::mt19937_64 rng(1);
  Tensor a = randn({2, 3, 4}, rng, 1.0, true);
  Tensor b = randn({2, 3, 4}, rng, 1.0, true);
  auto r = gradcheck(
      [&] {
        return weighted_sum(ops::add_scalar(
            ops::scale(ops::sub(ops::mul(a, b), ops::add(a, b)), 0.7), 0.3));
      },
      {a, b}, 0, kStep);
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Ops, BroadcastAddGradients) {
  std::mt19937_64 rng(2);
  Tensor a = randn({2, 5, 4}, rng, 1.0, true);
  Tensor b = randn({1, 5, 4}, rng, 1.0, true);
  auto r = gradcheck([&] { return weighted_sum(ops::add_broadcast(a, b)); }, {a, b}, 0, kStep);
  EXPECT_LT(r.max_rel_error, kTol);
  EXPECT_THROW(ops::add_broadcast(a, Tensor({3, 4})), ShapeError);
}

TEST(Ops, MatmulAllTransposeModes) {
  std::mt19937_64 rng(3);
  Tensor a = randn({2, 3, 4}, rng, 1.0, true);
  Tensor b = randn({2, 4, 5}, rng, 1.0, true);
  Tensor bt = randn({2, 5, 4}, rng, 1.0, true);
  Tensor at = randn({2, 4, 3}, rng, 1.0, true);
  EXPECT_LT(gradcheck([&] { return weighted_sum(ops::matmul(a, b)); }, {a, b}, 0, kStep).max_rel_error, kTol);
  EXPECT_LT(gradcheck([&] { return weighted_sum(ops::matmul(a, bt, false, true)); }, {a, bt}, 0, kStep).max_rel_error, kTol);
  EXPECT_LT(gradcheck([&] { return weighted_sum(ops::matmul(at, b, true, false)); }, {at, b}, 0, kStep).max_rel_error, kTol);

  // Direct values for a 2x2 case.
  Tensor x({2, 2}, {1, 2, 3, 4});
  Tensor y({2, 2}, {5, 6, 7, 8});
  Tensor z = ops::matmul(x, y);
  EXPECT_DOUBLE_EQ(z.at({0, 0}), 19);
  EXPECT_DOUBLE_EQ(z.at({1, 1}), 50);
  EXPECT_THROW(ops::matmul(x, Tensor({3, 2})), ShapeError);
}

TEST(Ops, LinearGradients) {
  std::mt19937_64 rng(4);
  Tensor x = randn({2, 3, 5}, rng, 1.0, true);
  Tensor w = randn({4, 5}, rng, 1.0, true);
  Tensor b = randn({4}, rng, 1.0, true);
  auto r = gradcheck([&] { return weighted_sum(ops::linear(x, w, b)); }, {x, w, b}, 0, kStep);
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Ops, ConvMatchesDirectLoop) {
  std::mt19937_64 rng(5);
  Tensor x = randn({1, 2, 5, 6}, rng);
  Tensor w = randn({3, 2, 3, 3}, rng);
  Tensor b = randn({3}, rng);
  Tensor y = ops::conv2d(x, w, b, {2, 1, 1});
  ASSERT_EQ(y.shape(), (Shape{1, 3, 3, 3}));
  for (int64_t co = 0; co < 3; ++co)
    for (int64_t oy = 0; oy < 3; ++oy)
      for (int64_t ox = 0; ox < 3; ++ox) {
        double s = b.at({co});
        for (int64_t ci = 0; ci < 2; ++ci)
          for (int64_t ky = 0; ky < 3; ++ky)
            for (int64_t kx = 0; kx < 3; ++kx) {
              const int64_t iy = oy * 2 - 1 + ky, ix = ox * 2 - 1 + kx;
              if (iy < 0 || iy >= 5 || ix < 0 || ix >= 6) continue;
              s += w.at({co, ci, ky, kx}) * x.at({0, ci, iy, ix});
            }
        EXPECT_NEAR(y.at({0, co, oy, ox}), s, 1e-12);
      }
}

TEST(Ops, ConvGradientsIncludingGroups) {
  std::mt19937_64 rng(6);
  Tensor x = randn({2, 4, 5, 5}, rng, 1.0, true);
  Tensor w = randn({4, 2, 3, 3}, rng, 1.0, true);
  Tensor b = randn({4}, rng, 1.0, true);
  auto r = gradcheck([&] { return weighted_sum(ops::conv2d(x, w, b, {1, 1, 2})); }, {x, w, b}, 0, kStep);
  EXPECT_LT(r.max_rel_error, kTol);
  Tensor wd = randn({4, 1, 3, 3}, rng, 1.0, true);
  auto rd = gradcheck([&] { return weighted_sum(ops::conv2d(x, wd, Tensor(), {2, 1, 4})); }, {x, wd}, 0, kStep);
  EXPECT_LT(rd.max_rel_error, kTol);
}

TEST(Ops, NormGradients) {
  std::mt19937_64 rng(7);
  Tensor x = randn({2, 3, 6}, rng, 2.0, true);
  Tensor g = randn({6}, rng, 1.0, true);
  Tensor b = randn({6}, rng, 1.0, true);
  EXPECT_LT(gradcheck([&] { return weighted_sum(ops::layer_norm(x, g, b)); }, {x, g, b}, 0, kStep).max_rel_error, 1e-5);
  Tensor m = randn({2, 4, 3, 3}, rng, 2.0, true);
  Tensor gg = randn({4}, rng, 1.0, true);
  Tensor gb = randn({4}, rng, 1.0, true);
  EXPECT_LT(gradcheck([&] { return weighted_sum(ops::group_norm(m, 2, gg, gb)); }, {m, gg, gb}, 0, kStep).max_rel_error, 1e-5);
}

TEST(Ops, LayerNormNormalizes) {
  Tensor x({1, 4}, {1, 2, 3, 4});
  Tensor y = ops::layer_norm(x, Tensor({4}, 1.0), Tensor({4}, 0.0));
  double mean = 0, var = 0;
  for (double v : y.data()) mean += v / 4;
  for (double v : y.data()) var += (v - mean) * (v - mean) / 4;
  EXPECT_NEAR(mean, 0.0, 1e-12);
  EXPECT_NEAR(var, 1.0, 1e-4);
}

TEST(Ops, ActivationsAndSoftmax) {
  std::mt19937_64 rng(8);
  Tensor x = randn({3, 5}, rng, 2.0, true);
  EXPECT_LT(gradcheck([&] { return weighted_sum(ops::gelu(x)); }, {x}, 0, kStep).max_rel_error, kTol);
  EXPECT_LT(gradcheck([&] { return weighted_sum(ops::sigmoid(x)); }, {x}, 0, kStep).max_rel_error, kTol);
  EXPECT_LT(gradcheck([&] { return weighted_sum(ops::softmax(x)); }, {x}, 0, kStep).max_rel_error, 1e-5);
  Tensor s = ops::softmax(Tensor({1, 3}, {1000.0, 1000.0, 1000.0}));
  for (double v : s.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(ops::gelu(Tensor({1}, {1.0})).item(), 0.8413447460685429, 1e-12);
}

TEST(Ops, ShapeManipulationGradients) {
  std::mt19937_64 rng(9);
  Tensor x = randn({2, 3, 4}, rng, 1.0, true);
  Tensor y = randn({2, 2, 4}, rng, 1.0, true);
  auto r = gradcheck(
      [&] {
        Tensor p = ops::permute(x, {2, 0, 1});
        Tensor c = ops::concat({x, y}, 1);
        Tensor s = ops::slice(c, 1, 1, 3);
        return ops::add(weighted_sum(p, 1), ops::add(weighted_sum(s, 2), weighted_sum(ops::reshape(x, {6, 4}), 3)));
      },
      {x, y}, 0, kStep);
  EXPECT_LT(r.max_rel_error, kTol);
  Tensor p = ops::permute(Tensor({2, 3}, {0, 1, 2, 3, 4, 5}), {1, 0});
  EXPECT_EQ(std::vector<double>(p.data().begin(), p.data().end()), (std::vector<double>{0, 3, 1, 4, 2, 5}));
}

TEST(Ops, TokenRoundTrip) {
  std::mt19937_64 rng(10);
  Tensor x = randn({2, 3, 4, 5}, rng);
  Tensor t = ops::map_to_tokens(x);
  ASSERT_EQ(t.shape(), (Shape{2, 20, 3}));
  EXPECT_DOUBLE_EQ(t.at({1, 7, 2}), x.at({1, 2, 1, 2}));
  Tensor back = ops::tokens_to_map(t, 4, 5);
  EXPECT_EQ(std::vector<double>(back.data().begin(), back.data().end()),
            std::vector<double>(x.data().begin(), x.data().end()));
}

TEST(Ops, ResizeNearestAndBilinear) {
  std::mt19937_64 rng(11);
  Tensor x = randn({1, 2, 3, 4}, rng, 1.0, true);
  EXPECT_LT(gradcheck([&] { return weighted_sum(ops::resize_nearest(x, 6, 8)); }, {x}, 0, kStep).max_rel_error, kTol);
  EXPECT_LT(gradcheck([&] { return weighted_sum(ops::resize_bilinear(x, 7, 5)); }, {x}, 0, kStep).max_rel_error, kTol);

  Tensor up = ops::resize_nearest(Tensor({1, 1, 2, 2}, {1, 2, 3, 4}), 4, 4);
  EXPECT_DOUBLE_EQ(up.at({0, 0, 1, 1}), 1);
  EXPECT_DOUBLE_EQ(up.at({0, 0, 3, 2}), 4);
  Tensor down = ops::resize_nearest(up, 2, 2);
  EXPECT_DOUBLE_EQ(down.at({0, 0, 1, 0}), 3);

  // Constant maps stay constant under bilinear resampling.
  Tensor c = ops::resize_bilinear(Tensor({1, 1, 3, 3}, 2.5), 12, 12);
  for (double v : c.data()) EXPECT_NEAR(v, 2.5, 1e-12);
  // 2x upsampling of a ramp follows the half-pixel convention.
  Tensor r = ops::resize_bilinear(Tensor({1, 1, 1, 2}, {0.0, 1.0}), 1, 4);
  EXPECT_NEAR(r.at({0, 0, 0, 0}), 0.0, 1e-12);
  EXPECT_NEAR(r.at({0, 0, 0, 1}), 0.25, 1e-12);
  EXPECT_NEAR(r.at({0, 0, 0, 2}), 0.75, 1e-12);
  EXPECT_NEAR(r.at({0, 0, 0, 3}), 1.0, 1e-12);
}

TEST(Ops, PointSampleReadsPixelCentersExactly) {
  std::mt19937_64 rng(12);
  Tensor x = randn({1, 2, 4, 5}, rng, 1.0, true);
  Tensor pts({1, 3, 2}, {0.5 / 5, 0.5 / 4, 3.5 / 5, 2.5 / 4, 0.37, 0.81});
  Tensor s = ops::point_sample(x, pts);
  ASSERT_EQ(s.shape(), (Shape{1, 2, 3}));
  EXPECT_NEAR(s.at({0, 1, 0}), x.at({0, 1, 0, 0}), 1e-12);
  EXPECT_NEAR(s.at({0, 0, 1}), x.at({0, 0, 2, 3}), 1e-12);
  EXPECT_LT(gradcheck([&] { return weighted_sum(ops::point_sample(x, pts)); }, {x}, 0, kStep).max_rel_error, kTol);
}

// Independent bilinear oracle with zero padding outside the map.
double bilinear_zero_pad(const std::vector<double>& plane, int64_t h, int64_t w, double x, double y) {
  const double px = x * w - 0.5, py = y * h - 0.5;
  double s = 0;
  for (int64_t yy = static_cast<int64_t>(std::floor(py)); yy <= static_cast<int64_t>(std::floor(py)) + 1; ++yy)
    for (int64_t xx = static_cast<int64_t>(std::floor(px)); xx <= static_cast<int64_t>(std::floor(px)) + 1; ++xx) {
      if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
      s += (1 - std::abs(px - xx)) * (1 - std::abs(py - yy)) * plane[yy * w + xx];
    }
  return s;
}

TEST(Ops, DeformSampleUniformWeightsAtReferenceIsMeanOfBilinearSamples) {
  std::mt19937_64 rng(13);
  const std::vector<ops::LevelShape> levels{{4, 4}, {2, 2}};
  const int64_t nv = 16 + 4, heads = 2, hd = 3, nq = 3, np = 2;
  Tensor value = randn({1, nv, heads, hd}, rng);
  std::vector<std::pair<double, double>> refs{{0.1, 0.2}, {0.5, 0.5}, {0.93, 0.4}};
  Tensor loc({1, nq, heads, 2, np, 2});
  Tensor wts({1, nq, heads, 2, np}, 1.0 / (2 * np));
  for (int64_t q = 0; q < nq; ++q)
    for (int64_t h = 0; h < heads; ++h)
      for (int64_t l = 0; l < 2; ++l)
        for (int64_t k = 0; k < np; ++k) {
          loc.at({0, q, h, l, k, 0}) = refs[q].first;
          loc.at({0, q, h, l, k, 1}) = refs[q].second;
        }
  Tensor out = ops::deform_sample(value, levels, loc, wts);
  ASSERT_EQ(out.shape(), (Shape{1, nq, heads * hd}));
  for (int64_t q = 0; q < nq; ++q)
    for (int64_t h = 0; h < heads; ++h)
      for (int64_t c = 0; c < hd; ++c) {
        double expect = 0;
        int64_t start = 0;
        for (const auto& ls : levels) {
          std::vector<double> plane;
          for (int64_t i = 0; i < ls.height * ls.width; ++i) plane.push_back(value.at({0, start + i, h, c}));
          expect += 0.5 * bilinear_zero_pad(plane, ls.height, ls.width, refs[q].first, refs[q].second);
          start += ls.height * ls.width;
        }
        EXPECT_NEAR(out.at({0, q, h * hd + c}), expect, 1e-12);
      }
}

TEST(Ops, DeformSampleGradients) {
  std::mt19937_64 rng(14);
  const std::vector<ops::LevelShape> levels{{3, 4}, {2, 2}};
  Tensor value = randn({2, 16, 2, 3}, rng, 1.0, true);
  Tensor loc(Shape{2, 5, 2, 2, 3, 2});
  std::uniform_real_distribution<double> u(-0.1, 1.1);
  for (double& v : loc.data()) v = u(rng);
  loc.set_requires_grad(true);
  Tensor w = randn({2, 5, 2, 2, 3}, rng, 1.0, true);
  auto r = gradcheck([&] { return weighted_sum(ops::deform_sample(value, levels, loc, w)); },
                     {value, loc, w}, 0, 1e-6, 0, 1e-6);
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(Ops, OpCounterTalliesMatmulMacs) {
  Tensor a({2, 3, 4}, 1.0), b({2, 4, 5}, 1.0);
  OpCountScope scope;
  ops::matmul(a, b);
  EXPECT_EQ(scope.counts().macs, 2 * 3 * 4 * 5);
  ops::linear(Tensor({7, 4}, 1.0), Tensor({6, 4}, 1.0), Tensor());
  EXPECT_EQ(scope.counts().macs, 120 + 7 * 4 * 6);
}

TEST(Ops, NoGradSkipsGraph) {
  Tensor a({2}, 1.0);
  a.set_requires_grad(true);
  {
    NoGradGuard g;
    EXPECT_FALSE(ops::scale(a, 2.0).requires_grad());
  }
  EXPECT_TRUE(ops::scale(a, 2.0).requires_grad());
}

}  // namespace
}  // namespace irstd
