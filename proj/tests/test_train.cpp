#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "irstd/checkpoint.hpp"
#include "irstd/distill.hpp"
#include "irstd/train.hpp"
#include "support/toy.hpp"

namespace fs = std::filesystem;

namespace irstd {
namespace {

ModelConfig toy(uint64_t seed = 0) {
  ModelConfig c = testing::toy_model_config(1, seed);
  c.encoder.input_channels = 1;
  return c;
}

std::vector<Sample> toy_data(int count) {
  SynthConfig sc;
  sc.height = sc.width = 16;
  sc.min_radius = 1.0;
  sc.max_radius = 2.0;
  return synth_generate(sc, count);
}

TrainConfig quick(int64_t steps) {
  TrainConfig c;
  c.steps = steps;
  c.batch = 2;
  c.lr = 1e-3;
  c.min_lr = 1e-5;
  c.warmup = 2;
  c.augment.enabled = false;
  c.loss.point_count = 64;
  return c;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::memcmp(a.ptr(), b.ptr(), sizeof(double) * a.numel()) == 0;
}

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("irstd_train_" + name);
  fs::remove_all(p);
  return p;
}

TEST(TrainRun, CosineEndpointsAppearInLog) {
  IrstdModel m(toy());
  TrainConfig cfg = quick(12);
  cfg.lr = 1e-4;
  cfg.min_lr = 1e-6;
  cfg.warmup = 3;
  fs::path dir = scratch("cosine");
  cfg.out_dir = dir.string();
  train_run(m, toy_data(4), cfg);
  std::ifstream in(dir / "train_log.jsonl");
  std::vector<TrainLogEntry> log;
  for (std::string line; std::getline(in, line);) log.push_back(parse_train_log_entry(line));
  ASSERT_EQ(log.size(), 12u);
  EXPECT_NEAR(log[2].lr, 1e-4, 1e-8);
  EXPECT_NEAR(log[11].lr, 1e-6, 1e-8);
  EXPECT_LT(log[0].lr, log[1].lr);
  for (const auto& e : log)
    EXPECT_EQ(e.total, e.final_loss + cfg.early_weight * (e.early_encoder + e.early_fpn));
}

TEST(TrainRun, EveryHeadReceivesGradient) {
  IrstdModel m(toy());
  const Tensor enc_head = m.parameter("early_encoder.conv.weight").detach();
  const Tensor fpn_head = m.parameter("early_fpn.mlp.layers.0.weight").detach();
  const Tensor dec = m.parameter("decoder.hyper.layers.0.weight").detach();
  train_run(m, toy_data(2), quick(1));
  EXPECT_FALSE(bitwise_equal(m.parameter("early_encoder.conv.weight"), enc_head));
  EXPECT_FALSE(bitwise_equal(m.parameter("early_fpn.mlp.layers.0.weight"), fpn_head));
  EXPECT_FALSE(bitwise_equal(m.parameter("decoder.hyper.layers.0.weight"), dec));
}

TEST(TrainRun, DeterministicAndAugmentationToggle) {
  auto data = toy_data(4);
  auto run = [&](bool aug) {
    IrstdModel m(toy());
    TrainConfig cfg = quick(3);
    cfg.augment.enabled = aug;
    cfg.augment.crop = 16;
    std::vector<double> totals;
    for (const auto& e : train_run(m, data, cfg).log) totals.push_back(e.total);
    return totals;
  };
  const auto a = run(false), b = run(false), c = run(true);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
}

TEST(TrainRun, ResumeMatchesUninterrupted) {
  auto data = toy_data(4);
  TrainConfig cfg = quick(4);
  cfg.checkpoint_every = 2;
  fs::path dir = scratch("resume");
  cfg.out_dir = dir.string();
  IrstdModel a(toy());
  auto full = train_run(a, data, cfg).log;
  IrstdModel b(toy(3));
  TrainConfig cfg2 = cfg;
  cfg2.out_dir = scratch("resume2").string();
  auto tail = train_run(b, data, cfg2, (dir / "train_step2.ckpt").string()).log;
  ASSERT_EQ(tail.size(), 2u);
  EXPECT_EQ(std::memcmp(&tail[0].total, &full[2].total, sizeof(double)), 0);
  EXPECT_EQ(std::memcmp(&tail[1].total, &full[3].total, sizeof(double)), 0);
}

TEST(TrainRun, DenseLossVariantRuns) {
  IrstdModel m(toy());
  TrainConfig cfg = quick(2);
  cfg.point_sampled = false;
  auto log = train_run(m, toy_data(2), cfg).log;
  EXPECT_TRUE(std::isfinite(log.back().total));
}

TEST(LoadDistilled, OnlyEncoderSideCarriesOver) {
  fs::path dir = scratch("distilled");
  DistillStudent s(toy(5));
  Checkpoint ck;
  store_parameters(ck, s);
  ck.save((dir.string() + ".ckpt"));
  IrstdModel m(toy());
  const Tensor fpn = m.parameter("fpn.lateral1.weight").detach();
  const Tensor qfpn = m.parameter("queries.fpn").detach();
  const int n = load_distilled(m, dir.string() + ".ckpt");
  EXPECT_GT(n, 10);
  EXPECT_TRUE(bitwise_equal(m.parameter("queries.encoder"), s.parameter("queries.encoder")));
  EXPECT_TRUE(bitwise_equal(m.parameter("encoder.stem.0.conv.weight"), s.parameter("encoder.stem.0.conv.weight")));
  // FPN and decoder stay freshly initialized
  EXPECT_TRUE(bitwise_equal(m.parameter("fpn.lateral1.weight"), fpn));
  EXPECT_TRUE(bitwise_equal(m.parameter("queries.fpn"), qfpn));
}

TEST(Predict, OneBinaryMaskPerInput) {
  IrstdModel m(toy());
  auto data = toy_data(5);
  auto masks = predict_masks(m, data, 2);
  ASSERT_EQ(masks.size(), 5u);
  for (const auto& mk : masks) {
    EXPECT_EQ(mk.shape(), (Shape{16, 16}));
    for (double v : mk.data()) EXPECT_TRUE(v == 0.0 || v == 1.0);
  }
  auto r = evaluate_model(m, data);
  EXPECT_EQ(r.per_image.size(), 5u);
}

}  // namespace
}  // namespace irstd
