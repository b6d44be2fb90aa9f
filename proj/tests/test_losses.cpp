#include <gtest/gtest.h>

#include <boost/math/distributions/chi_squared.hpp>
#include <cmath>
#include <numeric>
#include <random>

#include "irstd/losses.hpp"
#include "irstd/ops.hpp"
#include "support/gradcheck.hpp"

namespace irstd {
namespace {

using testing::gradcheck;
using testing::randn;

double chi2_critical(int df, double p) {
  return boost::math::quantile(boost::math::complement(boost::math::chi_squared(df), p));
}

Tensor random_mask(Shape shape, std::mt19937_64& rng, double density = 0.3) {
  Tensor t(std::move(shape));
  std::bernoulli_distribution b(density);
  for (double& v : t.data()) v = b(rng) ? 1.0 : 0.0;
  return t;
}

TEST(Bce, ClosedFormsAndNaiveOracle) {
  std::mt19937_64 rng(1);
  EXPECT_NEAR(bce(Tensor({3, 4}, 0.0), random_mask({3, 4}, rng)).item(), std::log(2.0), 1e-12);
  EXPECT_LT(bce(Tensor({4}, 20.0), Tensor({4}, 1.0)).item(), 3e-9);
  Tensor x = randn({4, 4}, rng, 3.0);
  Tensor y(Shape{4, 4});
  std::uniform_real_distribution<double> u(0, 1);
  for (double& v : y.data()) v = u(rng);
  double naive = 0;
  for (int64_t i = 0; i < 16; ++i) {
    const double s = 1.0 / (1.0 + std::exp(-x.data()[i]));
    naive -= y.data()[i] * std::log(s) + (1 - y.data()[i]) * std::log(1 - s);
  }
  EXPECT_NEAR(bce(x, y).item(), naive / 16, 1e-12);
  EXPECT_THROW(bce(x, Tensor({4, 3})), ShapeError);
  // Extreme logits stay finite.
  EXPECT_TRUE(std::isfinite(bce(Tensor({2}, {800.0, -800.0}), Tensor({2}, {0.0, 1.0})).item()));
}

TEST(Dice, ClosedForms) {
  Tensor y({1, 2, 2}, {1, 0, 0, 1});
  Tensor hard({1, 2, 2}, {40, -40, -40, 40});
  EXPECT_NEAR(dice(hard, y, 0.0).item(), 0.0, 1e-12);
  // p = 1 everywhere on N pixels, target covers N / 2.
  Tensor ones({2, 8, 8}, 40.0);
  Tensor half({2, 8, 8});
  for (int64_t b = 0; b < 2; ++b)
    for (int64_t i = 0; i < 32; ++i) half.data()[b * 64 + i * 2] = 1.0;
  EXPECT_NEAR(dice(ones, half, 0.0).item(), 1.0 / 3.0, 1e-6);
  EXPECT_NEAR(dice(Tensor({1, 4, 4}, -40.0), Tensor({1, 4, 4}), 1.0).item(), 0.0, 1e-12);
  EXPECT_THROW(dice(ones, Tensor({2, 8, 4}), 1.0), ShapeError);
}

TEST(Dice, PerSampleThenBatchMean) {
  std::mt19937_64 rng(2);
  Tensor x = randn({3, 5}, rng), y = random_mask({3, 5}, rng);
  double mean = 0;
  for (int64_t b = 0; b < 3; ++b) {
    double i = 0, ps = 0, ys = 0;
    for (int64_t j = 0; j < 5; ++j) {
      const double p = 1.0 / (1.0 + std::exp(-x.at({b, j})));
      i += p * y.at({b, j});
      ps += p;
      ys += y.at({b, j});
    }
    mean += (1 - (2 * i + 1) / (ps + ys + 1)) / 3;
  }
  EXPECT_NEAR(dice(x, y, 1.0).item(), mean, 1e-12);
}

TEST(KlSpatial, SelfIsZeroNonNegativeAndHandCase) {
  std::mt19937_64 rng(3);
  Tensor a = randn({6, 4, 4}, rng, 3.0);
  EXPECT_NEAR(kl_spatial(a, a, 1.0).item(), 0.0, 1e-12);
  for (int trial = 0; trial < 1000; ++trial) {
    Tensor s = randn({2, 3, 3}, rng, 2.0), t = randn({2, 3, 3}, rng, 2.0);
    ASSERT_GE(kl_spatial(s, t, 1.0).item(), 0.0);
  }
  // 1 channel, 2x2: softmax over 4 positions, summed by hand.
  const double sv[4] = {0.3, -1.2, 2.0, 0.5}, tv[4] = {1.0, 0.0, -0.5, 0.25};
  Tensor s({1, 2, 2}, {sv[0], sv[1], sv[2], sv[3]}), t({1, 2, 2}, {tv[0], tv[1], tv[2], tv[3]});
  double zs = 0, zt = 0;
  for (int i = 0; i < 4; ++i) {
    zs += std::exp(sv[i]);
    zt += std::exp(tv[i]);
  }
  double hand = 0;
  for (int i = 0; i < 4; ++i) {
    const double pt = std::exp(tv[i]) / zt, ps = std::exp(sv[i]) / zs;
    hand += pt * (std::log(pt) - std::log(ps));
  }
  EXPECT_NEAR(kl_spatial(s, t, 1.0).item(), hand, 1e-12);
  // Temperature scaling: tau^2 * KL(softmax(t/tau) || softmax(s/tau)).
  double z2s = 0, z2t = 0, hand2 = 0;
  for (int i = 0; i < 4; ++i) {
    z2s += std::exp(sv[i] / 2);
    z2t += std::exp(tv[i] / 2);
  }
  for (int i = 0; i < 4; ++i) {
    const double pt = std::exp(tv[i] / 2) / z2t, ps = std::exp(sv[i] / 2) / z2s;
    hand2 += pt * (std::log(pt) - std::log(ps));
  }
  EXPECT_NEAR(kl_spatial(s, t, 2.0).item(), 4 * hand2, 1e-12);
}

TEST(KlChannel, SelfZeroSingleChannelAndHandCase) {
  std::mt19937_64 rng(4);
  Tensor a = randn({2, 6, 3, 3}, rng);
  EXPECT_NEAR(kl_channel(a, a, 1.0).item(), 0.0, 1e-12);
  EXPECT_EQ(kl_channel(randn({1, 4, 4}, rng), randn({1, 4, 4}, rng), 1.0).item(), 0.0);
  Tensor s({2, 1, 1}, {0.7, -0.4}), t({2, 1, 1}, {-1.0, 1.5});
  const double ps0 = std::exp(0.7) / (std::exp(0.7) + std::exp(-0.4));
  const double pt0 = std::exp(-1.0) / (std::exp(-1.0) + std::exp(1.5));
  const double hand = pt0 * std::log(pt0 / ps0) + (1 - pt0) * std::log((1 - pt0) / (1 - ps0));
  EXPECT_NEAR(kl_channel(s, t, 1.0).item(), hand, 1e-12);
  for (int trial = 0; trial < 1000; ++trial)
    ASSERT_GE(kl_channel(randn({3, 2, 2}, rng, 2.0), randn({3, 2, 2}, rng, 2.0), 1.0).item(), 0.0);
}

TEST(Kl, ShapeMismatchThrows) {
  EXPECT_THROW(kl_spatial(Tensor({2, 3, 3}), Tensor({3, 3, 3}), 1.0), ShapeError);
  EXPECT_THROW(kl_channel(Tensor({2, 3}), Tensor({2, 3}), 1.0), ShapeError);
}

TEST(LossGradients, MatchFiniteDifferences) {
  std::mt19937_64 rng(5);
  Tensor x = randn({2, 3, 4}, rng, 2.0, true);
  Tensor y = random_mask({2, 3, 4}, rng);
  Tensor t = randn({2, 3, 4}, rng, 2.0);
  const double step = 1e-6;
  EXPECT_LT(gradcheck([&] { return bce(x, y); }, {x}, 0, step).max_rel_error, 1e-6);
  EXPECT_LT(gradcheck([&] { return dice(x, y, 1.0); }, {x}, 0, step).max_rel_error, 1e-6);
  EXPECT_LT(gradcheck([&] { return kl_spatial(x, t, 1.5); }, {x}, 0, step).max_rel_error, 1e-6);
  EXPECT_LT(gradcheck([&] { return kl_channel(x, t, 0.7); }, {x}, 0, step).max_rel_error, 1e-6);
}

TeacherOutputs random_teacher(std::mt19937_64& rng, int64_t n_prompts, int64_t h, int64_t w) {
  TeacherOutputs t;
  t.mid = randn({1, 6 * n_prompts, h, w}, rng, 4.0);
  std::vector<int> sel;
  for (int64_t p = 0; p < n_prompts; ++p) sel.push_back(static_cast<int>(6 * p + p % 6));
  t.selected = {sel};
  std::vector<Tensor> parts;
  for (int s : sel) parts.push_back(ops::slice(t.mid, 1, s, 1));
  t.final = ops::concat(parts, 1);
  return t;
}

StudentOutputs select(const Tensor& mid, const std::vector<int>& sel) {
  std::vector<Tensor> parts;
  for (int s : sel) parts.push_back(ops::slice(mid, 1, s, 1));
  return {mid, ops::concat(parts, 1)};
}

TEST(DistillLoss, LambdaRecombinationIsExact) {
  std::mt19937_64 rng(6);
  LossConfig cfg;
  for (int trial = 0; trial < 20; ++trial) {
    auto t = random_teacher(rng, 2, 4, 5);
    auto s = select(randn(t.mid.shape(), rng, 2.0), t.selected[0]);
    auto b = distill_loss(s, t, cfg);
    EXPECT_EQ(b.total.item(), b.bce + 5.0 * ((b.dice + b.kl) + b.cd));
    EXPECT_GE(b.bce, 0);
    EXPECT_GE(b.dice, 0);
    EXPECT_GE(b.kl, 0);
    EXPECT_GE(b.cd, 0);
  }
}

TEST(DistillLoss, StudentEqualsTeacher) {
  std::mt19937_64 rng(7);
  auto t = random_teacher(rng, 2, 4, 4);
  auto b = distill_loss({t.mid, t.final}, t, LossConfig{});
  EXPECT_NEAR(b.kl, 0.0, 1e-12);
  EXPECT_NEAR(b.cd, 0.0, 1e-12);
  // BCE of logits against their own hard masks: mean softplus(-|t|).
  double expect = 0;
  for (double v : t.final.data()) expect += std::log1p(std::exp(-std::abs(v)));
  EXPECT_NEAR(b.bce, expect / static_cast<double>(t.final.numel()), 1e-12);
}

TEST(DistillLoss, CommonChannelPermutationInvariance) {
  std::mt19937_64 rng(8);
  auto t = random_teacher(rng, 2, 3, 3);
  Tensor smid = randn(t.mid.shape(), rng);
  auto s = select(smid, t.selected[0]);
  const double base = distill_loss(s, t, LossConfig{}).total.item();
  std::vector<int> perm(12);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<Tensor> sp, tp;
  for (int p : perm) {
    sp.push_back(ops::slice(smid, 1, p, 1));
    tp.push_back(ops::slice(t.mid, 1, p, 1));
  }
  TeacherOutputs t2 = t;
  t2.mid = ops::concat(tp, 1);
  std::vector<int> sel2;
  for (int s0 : t.selected[0])
    sel2.push_back(static_cast<int>(std::find(perm.begin(), perm.end(), s0) - perm.begin()));
  t2.selected = {sel2};
  auto s2 = select(ops::concat(sp, 1), sel2);
  EXPECT_NEAR(distill_loss(s2, t2, LossConfig{}).total.item(), base, 1e-12);
}

TEST(DistillLoss, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(9);
  auto t = random_teacher(rng, 1, 3, 4);
  Tensor smid = randn(t.mid.shape(), rng, 1.0, true);
  auto res = gradcheck([&] { return distill_loss(select(smid, t.selected[0]), t, LossConfig{}).total; },
                       {smid}, 0, 1e-6);
  EXPECT_LT(res.max_rel_error, 1e-5);
}

TEST(DistillLoss, CountMismatchThrows) {
  std::mt19937_64 rng(10);
  auto t = random_teacher(rng, 2, 3, 3);
  StudentOutputs s{randn({1, 6, 3, 3}, rng), t.final};
  EXPECT_THROW(distill_loss(s, t, LossConfig{}), ShapeError);
}

TEST(DistillLoss, GradientDescentDecreasesMonotonically) {
  std::mt19937_64 rng(11);
  auto t = random_teacher(rng, 2, 6, 6);
  Tensor smid = randn(t.mid.shape(), rng, 0.5, true);
  double prev = 1e300;
  for (int step = 0; step < 50; ++step) {
    smid.zero_grad();
    Tensor loss = distill_loss(select(smid, t.selected[0]), t, LossConfig{}).total;
    ASSERT_LT(loss.item(), prev) << "step " << step;
    prev = loss.item();
    loss.backward();
    for (int64_t i = 0; i < smid.numel(); ++i) smid.data()[i] -= 2.0 * smid.grad()[i];
  }
}

TEST(SamplePoints, UniformWhenImportanceIsZero) {
  LossConfig cfg;
  cfg.importance_fraction = 0.0;
  cfg.point_count = 10000;
  std::mt19937_64 rng(12);
  Tensor logits = randn({1, 1, 10, 10}, rng);
  Tensor pts = sample_points(logits, 10, 10, cfg, rng);
  ASSERT_EQ(pts.shape(), (Shape{1, 100, 2}));  // capped at the pixel count
  // A coarse grid with many more pixels than points per bin.
  cfg.point_count = 10000;
  Tensor big = randn({1, 1, 200, 200}, rng);
  Tensor p2 = sample_points(big, 200, 200, cfg, rng);
  ASSERT_EQ(p2.dim(1), 10000);
  std::vector<double> bins(100, 0.0);
  for (int64_t i = 0; i < 10000; ++i) {
    const int bx = std::min(9, static_cast<int>(p2.at({0, i, 0}) * 10));
    const int by = std::min(9, static_cast<int>(p2.at({0, i, 1}) * 10));
    bins[by * 10 + bx] += 1;
  }
  double chi2 = 0;
  for (double c : bins) chi2 += (c - 100.0) * (c - 100.0) / 100.0;
  EXPECT_NEAR(chi2_critical(99, 0.01), 134.6416, 1e-3);
  EXPECT_LT(chi2, chi2_critical(99, 0.01));

  cfg.snap_points = false;
  Tensor p3 = sample_points(big, 200, 200, cfg, rng);
  std::vector<double> b4(16, 0.0);
  for (int64_t i = 0; i < 10000; ++i)
    b4[std::min(3, static_cast<int>(p3.at({0, i, 1}) * 4)) * 4 + std::min(3, static_cast<int>(p3.at({0, i, 0}) * 4))] += 1;
  double chi4 = 0;
  for (double c : b4) chi4 += (c - 625.0) * (c - 625.0) / 625.0;
  EXPECT_NEAR(chi2_critical(15, 0.01), 30.5779, 1e-3);
  EXPECT_LT(chi4, chi2_critical(15, 0.01));
}

TEST(SamplePoints, AlwaysInsideUnitSquare) {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 1000; ++trial) {
    LossConfig cfg;
    cfg.point_count = std::uniform_int_distribution<int64_t>(1, 64)(rng);
    cfg.importance_fraction = std::uniform_real_distribution<double>(0, 1)(rng);
    cfg.snap_points = trial % 2 == 0;
    const int64_t h = std::uniform_int_distribution<int64_t>(1, 12)(rng);
    const int64_t w = std::uniform_int_distribution<int64_t>(1, 12)(rng);
    Tensor pts = sample_points(randn({2, 1, h, w}, rng), h, w, cfg, rng);
    ASSERT_EQ(pts.dim(1), std::min<int64_t>(cfg.point_count, h * w));
    for (double v : pts.data()) ASSERT_TRUE(v >= 0.0 && v <= 1.0);
  }
}

TEST(SamplePoints, ImportancePrefersUncertainPixels) {
  // Confident logits everywhere except a band of four columns.
  Tensor logits({1, 1, 16, 16}, 8.0);
  for (int64_t y = 0; y < 16; ++y)
    for (int64_t x = 4; x < 8; ++x) logits.at({0, 0, y, x}) = 0.0;
  auto in_band = [](double px) { return px > 4.0 / 16 && px < 8.0 / 16; };
  LossConfig cfg;
  cfg.point_count = 16;
  cfg.importance_fraction = 0.75;
  std::mt19937_64 rng(14);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor pts = sample_points(logits, 16, 16, cfg, rng);
    int band = 0;
    for (int64_t i = 0; i < 12; ++i) {
      const bool here = in_band(pts.at({0, i, 0}));
      if (i > 0 && here) EXPECT_TRUE(in_band(pts.at({0, i - 1, 0}))) << "uncertain points come first";
      band += here;
    }
    EXPECT_GE(band, 1);
  }
}

TEST(MaskLoss, GridOverrideEqualsDense) {
  std::mt19937_64 rng(15);
  Tensor logits = randn({2, 1, 7, 9}, rng, 3.0);
  Tensor target = random_mask({2, 1, 7, 9}, rng);
  LossConfig cfg;
  auto pts = grid_points(2, 7, 9);
  const auto point = mask_loss_at(logits, target, pts, cfg);
  const auto dense = dense_mask_loss(logits, target, cfg);
  EXPECT_NEAR(point.total.item(), dense.total.item(), 1e-5);
  EXPECT_NEAR(point.bce, dense.bce, 1e-12);
  EXPECT_NEAR(point.dice, dense.dice, 1e-12);
}

TEST(MaskLoss, PerfectPredictionAndWeighting) {
  std::mt19937_64 rng(16);
  Tensor target = random_mask({1, 1, 32, 32}, rng, 0.05);
  Tensor logits(target.shape());
  for (int64_t i = 0; i < target.numel(); ++i) logits.data()[i] = target.data()[i] > 0 ? 20.0 : -20.0;
  LossConfig cfg;
  EXPECT_LE(mask_loss(logits, target, cfg, rng).total.item(), 1e-3);
  for (int trial = 0; trial < 10; ++trial) {
    auto m = mask_loss(randn({2, 1, 16, 16}, rng), random_mask({2, 1, 16, 16}, rng), cfg, rng);
    EXPECT_EQ(m.total.item(), m.bce + 5.0 * m.dice);
  }
}

TEST(MaskLoss, QuarterSamplingMonteCarloWithinTenPercent) {
  std::mt19937_64 rng(17);
  Tensor logits = randn({1, 1, 32, 32}, rng, 2.0);
  Tensor target = random_mask({1, 1, 32, 32}, rng, 0.2);
  LossConfig cfg;
  cfg.point_count = 256;
  cfg.importance_fraction = 0.0;
  const double dense = dense_mask_loss(logits, target, cfg).total.item();
  double mean = 0;
  for (int t = 0; t < 100; ++t) mean += mask_loss(logits, target, cfg, rng).total.item() / 100;
  EXPECT_LT(std::abs(mean - dense) / dense, 0.10);
}

TEST(MaskLoss, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(18);
  Tensor logits = randn({2, 1, 6, 6}, rng, 2.0, true);
  Tensor target = random_mask({2, 1, 12, 12}, rng);
  LossConfig cfg;
  cfg.point_count = 40;
  cfg.snap_points = false;
  Tensor pts = sample_points(logits, 12, 12, cfg, rng);
  auto res = gradcheck([&] { return mask_loss_at(logits, target, pts, cfg).total; }, {logits}, 0, 1e-6);
  EXPECT_LT(res.max_rel_error, 1e-5);
}

TEST(LossConfig, Validation) {
  LossConfig c;
  EXPECT_NO_THROW(c.validate());
  c.dice_eps = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = LossConfig{};
  c.importance_fraction = 1.5;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

}  // namespace
}  // namespace irstd
