#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <queue>
#include <random>

#include <opencv2/imgcodecs.hpp>

#include "irstd/data.hpp"

namespace fs = std::filesystem;

namespace irstd {
namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("irstd_data_" + name);
  fs::remove_all(p);
  fs::create_directories(p / "images");
  fs::create_directories(p / "masks");
  return p;
}

void write_pair(const fs::path& root, const std::string& id, int h, int w, uint8_t fill) {
  cv::Mat img(h, w, CV_8UC1, cv::Scalar(fill));
  cv::Mat msk(h, w, CV_8UC1, cv::Scalar(0));
  msk.at<uint8_t>(1, 1) = 255;
  cv::imwrite((root / "images" / (id + ".png")).string(), img);
  cv::imwrite((root / "masks" / (id + ".png")).string(), msk);
}

TEST(Manifest, CommentsExclusionsAndOrder) {
  Manifest m = Manifest::parse("# split\nc\n a \n\nb # trailing\n!a\nc\n");
  EXPECT_EQ(m.ids, (std::vector<std::string>{"c", "a", "b", "c"}));
  EXPECT_EQ(m.excluded, (std::vector<std::string>{"a"}));
  EXPECT_EQ(m.resolved(), (std::vector<std::string>{"c", "b"}));
}

TEST(Loader, ManifestOrderAndCompleteness) {
  fs::path root = scratch("order");
  write_pair(root, "x1", 8, 8, 10);
  write_pair(root, "x2", 8, 8, 20);
  write_pair(root, "x3", 8, 8, 30);
  write_pair(root, "x4", 8, 8, 40);
  auto samples = load_dataset(root.string(), Manifest::parse("x3\nx1\nx2\n"), LoadOptions{});
  ASSERT_EQ(samples.size(), 3u);
  EXPECT_EQ(samples[0].id, "x3");
  EXPECT_EQ(samples[1].id, "x1");
  EXPECT_EQ(samples[2].id, "x2");
  EXPECT_EQ(samples[0].image.shape(), (Shape{3, 8, 8}));
  EXPECT_NEAR(samples[0].image.data()[0], 30.0 / 255.0, 1e-15);
  EXPECT_NEAR(samples[0].image.data()[2 * 64 + 5], 30.0 / 255.0, 1e-15);
  EXPECT_EQ(samples[0].mask.at({1, 1}), 1.0);
  EXPECT_EQ(samples[0].mask.at({0, 0}), 0.0);
  auto evald = load_dataset(root.string(), Manifest::parse("x1\nx2\nx3\nx4\n!x2\n!x4\n"), LoadOptions{});
  ASSERT_EQ(evald.size(), 2u);
  EXPECT_EQ(evald[1].id, "x3");
  EXPECT_EQ(list_ids(root.string()), (std::vector<std::string>{"x1", "x2", "x3", "x4"}));
}

TEST(Loader, MissingMaskNamesTheStem) {
  fs::path root = scratch("missing");
  write_pair(root, "ok", 8, 8, 1);
  cv::imwrite((root / "images" / "lonely.png").string(), cv::Mat(8, 8, CV_8UC1, cv::Scalar(3)));
  try {
    load_dataset(root.string(), Manifest::parse("ok\nlonely\n"), LoadOptions{});
    FAIL() << "expected an error";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("lonely"), std::string::npos);
  }
  EXPECT_THROW(load_dataset((root / "nope").string(), Manifest::parse("ok"), LoadOptions{}), std::runtime_error);
}

TEST(Loader, SixteenBitNonBinaryAndResize) {
  fs::path root = scratch("sixteen");
  cv::Mat img(10, 12, CV_16UC1, cv::Scalar(65535));
  img.at<uint16_t>(0, 0) = 32768;
  cv::Mat msk(10, 12, CV_8UC1, cv::Scalar(0));
  msk.at<uint8_t>(2, 3) = 200;
  msk.at<uint8_t>(2, 4) = 127;
  cv::imwrite((root / "images" / "a.png").string(), img);
  cv::imwrite((root / "masks" / "a.png").string(), msk);
  LoadOptions opt;
  opt.channels = 1;
  opt.warn_nonbinary = false;
  Sample s = load_sample(root.string(), "a", opt);
  EXPECT_NEAR(s.image.data()[0], 32768.0 / 65535.0, 1e-15);
  EXPECT_EQ(s.image.data()[1], 1.0);
  EXPECT_EQ(s.mask.at({2, 3}), 1.0);
  EXPECT_EQ(s.mask.at({2, 4}), 0.0);
  opt.resize = 256;
  Sample r = load_sample(root.string(), "a", opt);
  EXPECT_EQ(r.image.shape(), (Shape{1, 256, 256}));
  EXPECT_EQ(r.mask.shape(), (Shape{256, 256}));
  for (double v : r.mask.data()) EXPECT_TRUE(v == 0.0 || v == 1.0);
}

Sample random_sample(int64_t h, int64_t w, std::mt19937_64& rng) {
  Sample s{Tensor({2, h, w}), Tensor({h, w}), "r"};
  std::uniform_real_distribution<double> u(0, 1);
  for (double& v : s.image.data()) v = u(rng);
  for (double& v : s.mask.data()) v = u(rng) < 0.2 ? 1.0 : 0.0;
  return s;
}

TEST(Augment, IdentityAtUnitScaleFullCrop) {
  std::mt19937_64 rng(1);
  Sample s = random_sample(20, 24, rng);
  AugmentConfig cfg;
  cfg.scale_min = cfg.scale_max = 1.0;
  Sample a = augment(s, cfg, rng);
  EXPECT_EQ(a.image.shape(), s.image.shape());
  for (int64_t i = 0; i < s.image.numel(); ++i) EXPECT_EQ(a.image.data()[i], s.image.data()[i]);
  for (int64_t i = 0; i < s.mask.numel(); ++i) EXPECT_EQ(a.mask.data()[i], s.mask.data()[i]);
}

TEST(Augment, DisabledStreamIsBitwiseIdentical) {
  std::mt19937_64 rng(2);
  AugmentConfig cfg;
  cfg.enabled = false;
  cfg.crop = 8;
  for (int t = 0; t < 5; ++t) {
    Sample s = random_sample(16, 16, rng);
    Sample a = augment(s, cfg, rng);
    EXPECT_EQ(std::memcmp(a.image.ptr(), s.image.ptr(), sizeof(double) * s.image.numel()), 0);
    EXPECT_EQ(std::memcmp(a.mask.ptr(), s.mask.ptr(), sizeof(double) * s.mask.numel()), 0);
  }
}

TEST(Augment, MaskStaysBinaryOverThousandTrials) {
  std::mt19937_64 rng(3);
  Sample s = random_sample(16, 16, rng);
  AugmentConfig cfg;
  cfg.crop = 16;
  for (int t = 0; t < 1000; ++t) {
    Sample a = augment(s, cfg, rng);
    ASSERT_EQ(a.mask.shape(), (Shape{16, 16}));
    for (double v : a.mask.data()) ASSERT_TRUE(v == 0.0 || v == 1.0);
  }
}

TEST(Augment, SentinelMovesWithItsPatch) {
  // Image channel 0 encodes the mask exactly; after any augmentation the
  // nearest-resized mask must sit where the image still reads bright, and
  // the reverse.
  std::mt19937_64 rng(4);
  for (int t = 0; t < 200; ++t) {
    Sample s{Tensor({1, 32, 32}), Tensor({32, 32}), "s"};
    const int64_t y = 4 + t % 20, x = 6 + (t * 7) % 20;
    for (int64_t dy = 0; dy < 4; ++dy)
      for (int64_t dx = 0; dx < 4; ++dx) {
        s.mask.at({y + dy, x + dx}) = 1.0;
        s.image.at({0, y + dy, x + dx}) = 1.0;
      }
    AugmentConfig cfg;
    cfg.crop = 24;
    Sample a = augment(s, cfg, rng);
    for (int64_t i = 0; i < a.mask.numel(); ++i)
      if (a.mask.data()[i] == 1.0) ASSERT_GT(a.image.data()[i], 0.2) << "trial " << t;
    // the nearest source pixel carries at least a quarter of the bilinear
    // weight, so a value above 3/4 is impossible unless it lies in the patch
    for (int64_t i = 0; i < a.mask.numel(); ++i)
      if (a.image.data()[i] > 0.75) ASSERT_EQ(a.mask.data()[i], 1.0) << "trial " << t;
  }
}

TEST(Augment, PadsWithZerosWhenSmallerThanCrop) {
  std::mt19937_64 rng(5);
  Sample s{Tensor({1, 8, 8}, 1.0), Tensor({8, 8}, 1.0), "p"};
  AugmentConfig cfg;
  cfg.scale_min = cfg.scale_max = 1.0;
  cfg.crop = 12;
  Sample a = augment(s, cfg, rng);
  EXPECT_EQ(a.image.shape(), (Shape{1, 12, 12}));
  double sum = 0, msum = 0;
  for (double v : a.image.data()) sum += v;
  for (double v : a.mask.data()) msum += v;
  EXPECT_EQ(sum, 64.0);
  EXPECT_EQ(msum, 64.0);
}

int64_t flood_area(const Tensor& mask, int64_t sy, int64_t sx) {
  const int64_t h = mask.dim(0), w = mask.dim(1);
  std::vector<char> seen(static_cast<size_t>(h * w), 0);
  std::queue<std::pair<int64_t, int64_t>> q;
  q.push({sy, sx});
  seen[sy * w + sx] = 1;
  int64_t n = 0;
  while (!q.empty()) {
    auto [y, x] = q.front();
    q.pop();
    ++n;
    for (int64_t dy = -1; dy <= 1; ++dy)
      for (int64_t dx = -1; dx <= 1; ++dx) {
        const int64_t ny = y + dy, nx = x + dx;
        if (ny < 0 || nx < 0 || ny >= h || nx >= w || seen[ny * w + nx] || mask.at({ny, nx}) != 1.0) continue;
        seen[ny * w + nx] = 1;
        q.push({ny, nx});
      }
  }
  return n;
}

TEST(Synth, EmptyWhenNoTargetsAndDeterministic) {
  SynthConfig cfg;
  cfg.min_targets = cfg.max_targets = 0;
  SyntheticSample s = synth_sample(cfg, 0);
  EXPECT_TRUE(s.targets.empty());
  for (double v : s.sample.mask.data()) EXPECT_EQ(v, 0.0);
  SynthConfig c2;
  c2.seed = 9;
  auto a = synth_generate(c2, 4), b = synth_generate(c2, 4);
  for (size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(std::memcmp(a[i].image.ptr(), b[i].image.ptr(), sizeof(double) * a[i].image.numel()), 0);
    EXPECT_EQ(std::memcmp(a[i].mask.ptr(), b[i].mask.ptr(), sizeof(double) * a[i].mask.numel()), 0);
  }
  c2.seed = 10;
  auto c = synth_generate(c2, 1);
  EXPECT_NE(std::memcmp(a[0].image.ptr(), c[0].image.ptr(), sizeof(double) * a[0].image.numel()), 0);
}

TEST(Synth, ComponentAreaWithinHalfPeakBounds) {
  SynthConfig cfg;
  cfg.height = cfg.width = 96;
  cfg.min_radius = 1.0;
  cfg.max_radius = 12.0;
  cfg.min_targets = 1;
  cfg.max_targets = 4;
  int checked = 0;
  for (int64_t i = 0; i < 60; ++i) {
    SyntheticSample s = synth_sample(cfg, i);
    for (const auto& g : s.targets) {
      const int64_t sy = std::llround(g.cy), sx = std::llround(g.cx);
      ASSERT_EQ(s.sample.mask.at({sy, sx}), 1.0);
      const double area = static_cast<double>(flood_area(s.sample.mask, sy, sx));
      const double r = g.radius;
      EXPECT_GE(area, M_PI * (r / 2) * (r / 2)) << "r=" << r;
      EXPECT_LE(area, M_PI * (2 * r) * (2 * r)) << "r=" << r;
      ++checked;
    }
    for (double v : s.sample.image.data()) ASSERT_TRUE(v >= 0.0 && v <= 1.0);
  }
  EXPECT_GT(checked, 60);
}

TEST(Synth, ConfigValidation) {
  SynthConfig cfg;
  cfg.max_radius = 9.0;  // canvas 64 / 8 = 8
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = SynthConfig{};
  cfg.min_contrast = 0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = SynthConfig{};
  cfg.min_radius = 0.5;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(Synth, MaterializedDatasetLoadsBack) {
  fs::path root = fs::temp_directory_path() / "irstd_data_materialize";
  fs::remove_all(root);
  SynthConfig cfg;
  cfg.height = cfg.width = 32;
  cfg.max_radius = 3.0;
  auto samples = synth_generate(cfg, 3);
  write_dataset(root.string(), samples);
  LoadOptions opt;
  opt.channels = 1;
  auto back = load_dataset(root.string(), Manifest::read((root / "all.txt").string()), opt);
  ASSERT_EQ(back.size(), 3u);
  for (size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back[i].id, samples[i].id);
    for (int64_t k = 0; k < samples[i].mask.numel(); ++k) EXPECT_EQ(back[i].mask.data()[k], samples[i].mask.data()[k]);
    for (int64_t k = 0; k < samples[i].image.numel(); ++k)
      EXPECT_NEAR(back[i].image.data()[k], samples[i].image.data()[k], 0.5 / 65535.0 + 1e-12);
  }
  Batch b = make_batch(back, {2, 0});
  EXPECT_EQ(b.images.shape(), (Shape{2, 1, 32, 32}));
  EXPECT_EQ(b.masks.shape(), (Shape{2, 1, 32, 32}));
  EXPECT_EQ(b.ids[0], samples[2].id);
}

}  // namespace
}  // namespace irstd
