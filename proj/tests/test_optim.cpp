#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include "irstd/checkpoint.hpp"
#include "irstd/model.hpp"
#include "irstd/optim.hpp"
#include "support/gradcheck.hpp"
#include "support/toy.hpp"

namespace irstd {
namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("irstd_test_" + name)).string();
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.ptr(), b.ptr(), static_cast<size_t>(a.numel()) * sizeof(double)) == 0;
}

TEST(Schedule, MultistepDropsAtNinetyAndNinetyFive) {
  const int64_t total = 1000;
  EXPECT_DOUBLE_EQ(multistep_lr(1e-4, 0, total), 1e-4);
  EXPECT_DOUBLE_EQ(multistep_lr(1e-4, 890, total), 1e-4);
  EXPECT_NEAR(multistep_lr(1e-4, 910, total), 1e-5, 1e-18);
  EXPECT_NEAR(multistep_lr(1e-4, 960, total), 1e-6, 1e-18);
  EXPECT_DOUBLE_EQ(multistep_lr(1e-4, 899, total), 1e-4);
  EXPECT_NEAR(multistep_lr(1e-4, 900, total), 1e-5, 1e-18);
  EXPECT_NEAR(multistep_lr(1e-4, 950, total), 1e-6, 1e-18);
  // 300-step desk run: floor(270), floor(285)
  EXPECT_DOUBLE_EQ(multistep_lr(1.0, 269, 300), 1.0);
  EXPECT_NEAR(multistep_lr(1.0, 270, 300), 0.1, 1e-15);
  EXPECT_NEAR(multistep_lr(1.0, 285, 300), 0.01, 1e-15);
}

TEST(Schedule, CosineEndpointsAndWarmup) {
  const int64_t total = 500, warm = 10;
  EXPECT_NEAR(cosine_lr(1e-4, 1e-6, 0, total, warm), 1e-5, 1e-18);
  EXPECT_NEAR(cosine_lr(1e-4, 1e-6, warm - 1, total, warm), 1e-4, 1e-18);
  EXPECT_NEAR(cosine_lr(1e-4, 1e-6, total - 1, total, warm), 1e-6, 1e-18);
  // midpoint of the decay
  const int64_t mid = (warm - 1) + (total - warm) / 2;
  EXPECT_NEAR(cosine_lr(1e-4, 1e-6, mid, total, warm), 0.5 * (1e-4 + 1e-6), 1e-12);
  double prev = cosine_lr(1e-4, 1e-6, 0, total, warm);
  for (int64_t s = 1; s < warm; ++s) {
    const double lr = cosine_lr(1e-4, 1e-6, s, total, warm);
    EXPECT_GT(lr, prev);
    prev = lr;
  }
  for (int64_t s = warm; s < total; ++s) {
    const double lr = cosine_lr(1e-4, 1e-6, s, total, warm);
    EXPECT_LE(lr, prev);
    prev = lr;
  }
  EXPECT_NEAR(cosine_lr(1e-4, 1e-6, 3, 4, 10), 1e-6, 1e-18);
}

TEST(AdamW, FirstStepMatchesClosedForm) {
  Tensor w({3}, {1.0, -2.0, 0.5});
  w.set_requires_grad(true);
  auto g = w.grad();
  g[0] = 0.3;
  g[1] = -4.0;
  g[2] = 0.0;
  AdamWConfig cfg;
  cfg.weight_decay = 0.1;
  AdamW opt({{"w", w}}, cfg);
  opt.step(0.01);
  // bias-corrected m/sqrt(v) = sign(g) after one step
  EXPECT_NEAR(w.data()[0], 1.0 * (1 - 0.001) - 0.01 * 0.3 / (0.3 + 1e-8), 1e-12);
  EXPECT_NEAR(w.data()[1], -2.0 * (1 - 0.001) + 0.01 * 4.0 / (4.0 + 1e-8), 1e-12);
  EXPECT_NEAR(w.data()[2], 0.5 * (1 - 0.001), 1e-12);
  EXPECT_EQ(opt.steps(), 1);
}

TEST(AdamW, ZeroLearningRateLeavesParametersBitwise) {
  IrstdModel model(testing::toy_model_config());
  std::vector<Tensor> before;
  for (const auto& [n, t] : model.named_parameters()) {
    before.push_back(t.detach());
    Tensor p = t;
    std::mt19937_64 rng(3);
    std::normal_distribution<double> nd;
    for (double& g : p.grad()) g = nd(rng);
  }
  AdamW opt(model.named_parameters(), AdamWConfig{});
  for (int i = 0; i < 3; ++i) opt.step(0.0);
  size_t i = 0;
  for (const auto& [n, t] : model.named_parameters()) EXPECT_TRUE(bitwise_equal(t, before[i++])) << n;
}

TEST(ClipGrad, ScalesToMaxNorm) {
  Tensor a({2}, {0.0, 0.0});
  a.set_requires_grad(true);
  a.grad()[0] = 3;
  a.grad()[1] = 4;
  EXPECT_DOUBLE_EQ(clip_grad_norm({a}, 1.0), 5.0);
  EXPECT_NEAR(a.grad()[0], 0.6, 1e-15);
  EXPECT_NEAR(a.grad()[1], 0.8, 1e-15);
  EXPECT_NEAR(clip_grad_norm({a}, 10.0), 1.0, 1e-15);
  EXPECT_NEAR(a.grad()[0], 0.6, 1e-15);
}

TEST(Checkpoint, RoundTripIsBitwise) {
  std::mt19937_64 rng(5);
  Checkpoint ck;
  Tensor a = testing::randn({2, 3, 4}, rng, 1e3);
  a.data()[0] = std::nextafter(1.0, 2.0);
  a.data()[1] = -0.0;
  a.data()[2] = 1e-310;
  ck.put("a", a);
  ck.put("scalar", Tensor::scalar(3.25));
  ck.put_text("config", "model.stem=2\nloss.lambda=5\n");
  const std::string path = temp_path("roundtrip.ckpt");
  ck.save(path);
  Checkpoint back = Checkpoint::load(path);
  EXPECT_TRUE(bitwise_equal(back.get("a"), a));
  EXPECT_EQ(back.get("scalar").rank(), 0);
  EXPECT_EQ(back.get("scalar").item(), 3.25);
  EXPECT_EQ(back.text("config"), "model.stem=2\nloss.lambda=5\n");
  EXPECT_FALSE(back.has("missing"));
  EXPECT_THROW(back.get("missing"), std::out_of_range);
  std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsGarbageAndTruncation) {
  const std::string path = temp_path("garbage.ckpt");
  {
    std::ofstream os(path, std::ios::binary);
    os << "not a checkpoint";
  }
  EXPECT_THROW(Checkpoint::load(path), std::runtime_error);
  Checkpoint ck;
  ck.put("x", Tensor({64}, 1.0));
  ck.save(path);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 16);
  EXPECT_THROW(Checkpoint::load(path), std::runtime_error);
  std::filesystem::remove(path);
  EXPECT_THROW(Checkpoint::load(path), std::runtime_error);
}

TEST(Checkpoint, ModelParametersAndOptimizerStateRoundTrip) {
  IrstdModel src(testing::toy_model_config(1, 1));
  IrstdModel dst(testing::toy_model_config(1, 2));
  for (auto& [n, t] : src.named_parameters()) {
    Tensor p = t;
    for (double& g : p.grad()) g = 0.01;
  }
  AdamW opt(src.named_parameters(), AdamWConfig{});
  opt.step(1e-3);
  opt.step(1e-3);
  Checkpoint ck;
  store_parameters(ck, src);
  opt.save_state(ck);
  const std::string path = temp_path("model.ckpt");
  ck.save(path);
  Checkpoint back = Checkpoint::load(path);
  const int n = load_parameters(back, dst);
  EXPECT_EQ(n, static_cast<int>(src.named_parameters().size()));
  auto sp = src.named_parameters();
  auto dp = dst.named_parameters();
  for (size_t i = 0; i < sp.size(); ++i) EXPECT_TRUE(bitwise_equal(sp[i].second, dp[i].second)) << sp[i].first;

  // Resumed optimizer continues bitwise identically.
  for (auto& [nm, t] : dst.named_parameters()) {
    Tensor p = t;
    for (double& g : p.grad()) g = 0.01;
  }
  AdamW resumed(dst.named_parameters(), AdamWConfig{});
  resumed.load_state(back);
  EXPECT_EQ(resumed.steps(), 2);
  opt.step(1e-3);
  resumed.step(1e-3);
  for (size_t i = 0; i < sp.size(); ++i) EXPECT_TRUE(bitwise_equal(sp[i].second, dp[i].second)) << sp[i].first;
  std::filesystem::remove(path);
}

TEST(Checkpoint, PrefixLoadTouchesOnlyMatchingParameters) {
  IrstdModel src(testing::toy_model_config(1, 1));
  IrstdModel dst(testing::toy_model_config(1, 2));
  const Tensor fpn_before = dst.parameter("fpn.lateral1.weight").detach();
  Checkpoint ck;
  store_parameters(ck, src);
  const int n = load_parameters(ck, dst, {"encoder.", "query_engine."});
  EXPECT_GT(n, 0);
  EXPECT_TRUE(bitwise_equal(dst.parameter("fpn.lateral1.weight"), fpn_before));
  for (const auto& [name, t] : dst.named_parameters())
    if (name.rfind("encoder.", 0) == 0) EXPECT_TRUE(bitwise_equal(t, src.parameter(name))) << name;

  Checkpoint wrong;
  for (const auto& [name, t] : src.named_parameters()) wrong.put(name, Tensor({1}));
  EXPECT_THROW(load_parameters(wrong, dst, {"encoder."}), ShapeError);
  EXPECT_THROW(load_parameters(Checkpoint{}, dst, {"encoder."}), std::out_of_range);
}

}  // namespace
}  // namespace irstd
