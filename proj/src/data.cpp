#include "irstd/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "irstd/ops.hpp"

namespace fs = std::filesystem;

namespace irstd {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// First file in dir whose stem is `id` (any extension).
std::string find_by_stem(const fs::path& dir, const std::string& id) {
  static const char* exts[] = {".png", ".bmp", ".tif", ".tiff", ".jpg", ".jpeg"};
  for (const char* e : exts) {
    fs::path p = dir / (id + e);
    if (fs::exists(p)) return p.string();
  }
  if (fs::is_directory(dir))
    for (const auto& entry : fs::directory_iterator(dir))
      if (entry.is_regular_file() && entry.path().stem() == id) return entry.path().string();
  return "";
}

// Nearest uses the pixel closest to the bilinear sample position so masks
// stay aligned with their resized images.
Tensor resize_map(const Tensor& chw, int64_t h, int64_t w, bool nearest) {
  const int64_t c = chw.dim(0), ih = chw.dim(1), iw = chw.dim(2);
  if (!nearest) return ops::reshape(ops::resize_bilinear(ops::reshape(chw, {1, c, ih, iw}), h, w), {c, h, w});
  auto src = [](int64_t i, int64_t in, int64_t out) {
    const double p = (static_cast<double>(i) + 0.5) * static_cast<double>(in) / static_cast<double>(out);
    return std::min<int64_t>(in - 1, static_cast<int64_t>(std::floor(p)));
  };
  Tensor y({c, h, w});
  for (int64_t k = 0; k < c; ++k)
    for (int64_t r = 0; r < h; ++r)
      for (int64_t q = 0; q < w; ++q)
        y.data()[(k * h + r) * w + q] = chw.data()[(k * ih + src(r, ih, h)) * iw + src(q, iw, w)];
  return y;
}

}  // namespace

Manifest Manifest::parse(const std::string& text) {
  Manifest m;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line[0] == '!') {
      std::string id = trim(line.substr(1));
      if (!id.empty()) m.excluded.push_back(id);
    } else {
      m.ids.push_back(line);
    }
  }
  return m;
}

Manifest Manifest::read(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read manifest " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse(ss.str());
}

std::vector<std::string> Manifest::resolved() const {
  std::set<std::string> skip(excluded.begin(), excluded.end());
  std::vector<std::string> out;
  for (const auto& id : ids)
    if (skip.insert(id).second) out.push_back(id);
  return out;
}

std::vector<std::string> list_ids(const std::string& root) {
  const fs::path dir = fs::path(root) / "images";
  if (!fs::is_directory(dir)) throw std::runtime_error("no images directory under " + root);
  std::vector<std::string> ids;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_regular_file()) ids.push_back(entry.path().stem().string());
  std::sort(ids.begin(), ids.end());
  return ids;
}

Tensor read_image(const std::string& path, int channels) {
  cv::Mat m = cv::imread(path, cv::IMREAD_UNCHANGED);
  if (m.empty()) throw std::runtime_error("cannot read image " + path);
  if (m.channels() == 3) cv::cvtColor(m, m, cv::COLOR_BGR2GRAY);
  else if (m.channels() == 4) cv::cvtColor(m, m, cv::COLOR_BGRA2GRAY);
  double scale = 1.0 / 255.0;
  if (m.depth() == CV_16U) scale = 1.0 / 65535.0;
  else if (m.depth() != CV_8U) throw std::runtime_error("unsupported pixel depth in " + path);
  cv::Mat f;
  m.convertTo(f, CV_64F, scale);
  const int64_t h = f.rows, w = f.cols;
  Tensor t({channels, h, w});
  for (int c = 0; c < channels; ++c)
    for (int64_t y = 0; y < h; ++y) {
      const double* row = f.ptr<double>(static_cast<int>(y));
      std::copy(row, row + w, t.ptr() + (c * h + y) * w);
    }
  return t;
}

Tensor read_mask(const std::string& path, bool warn_nonbinary) {
  cv::Mat m = cv::imread(path, cv::IMREAD_GRAYSCALE);
  if (m.empty()) throw std::runtime_error("cannot read mask " + path);
  Tensor t({m.rows, m.cols});
  bool nonbinary = false;
  for (int y = 0; y < m.rows; ++y) {
    const uint8_t* row = m.ptr<uint8_t>(y);
    for (int x = 0; x < m.cols; ++x) {
      nonbinary = nonbinary || (row[x] != 0 && row[x] != 255);
      t.data()[static_cast<size_t>(y) * m.cols + x] = row[x] >= 128 ? 1.0 : 0.0;
    }
  }
  if (nonbinary && warn_nonbinary) std::cerr << "warning: non-binary mask " << path << " binarized at 128\n";
  return t;
}

void write_image(const std::string& path, const Tensor& image, bool sixteen_bit) {
  if (image.rank() != 3) throw ShapeError("write_image expects (C, H, W), got " + shape_str(image.shape()));
  const int h = static_cast<int>(image.dim(1)), w = static_cast<int>(image.dim(2));
  const double top = sixteen_bit ? 65535.0 : 255.0;
  cv::Mat m(h, w, sixteen_bit ? CV_16UC1 : CV_8UC1);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double v = std::round(std::clamp(image.data()[static_cast<size_t>(y) * w + x], 0.0, 1.0) * top);
      if (sixteen_bit) m.at<uint16_t>(y, x) = static_cast<uint16_t>(v);
      else m.at<uint8_t>(y, x) = static_cast<uint8_t>(v);
    }
  if (!cv::imwrite(path, m)) throw std::runtime_error("cannot write image " + path);
}

void write_mask(const std::string& path, const Tensor& mask) {
  const int64_t h = mask.dim(mask.rank() - 2), w = mask.dim(mask.rank() - 1);
  if (mask.numel() != h * w) throw ShapeError("write_mask expects a single (H, W) map, got " + shape_str(mask.shape()));
  cv::Mat m(static_cast<int>(h), static_cast<int>(w), CV_8UC1);
  for (int64_t i = 0; i < h * w; ++i) m.data[i] = mask.data()[i] > 0.5 ? 255 : 0;
  if (!cv::imwrite(path, m)) throw std::runtime_error("cannot write mask " + path);
}

Sample load_sample(const std::string& root, const std::string& id, const LoadOptions& options) {
  const std::string img = find_by_stem(fs::path(root) / "images", id);
  if (img.empty()) throw std::runtime_error("no image for id '" + id + "' under " + root + "/images");
  const std::string msk = find_by_stem(fs::path(root) / "masks", id);
  if (msk.empty() && options.require_masks)
    throw std::runtime_error("missing mask for image stem '" + id + "' under " + root + "/masks");
  Tensor image = read_image(img, options.channels);
  Tensor mask = msk.empty() ? Tensor({image.dim(1), image.dim(2)}) : read_mask(msk, options.warn_nonbinary);
  Sample s{image, mask, id};
  if (s.image.dim(1) != s.mask.dim(0) || s.image.dim(2) != s.mask.dim(1))
    throw ShapeError("image and mask sizes differ for '" + id + "'");
  if (options.resize > 0) {
    s.image = resize_map(s.image, options.resize, options.resize, false);
    Tensor m = ops::reshape(s.mask, {1, s.mask.dim(0), s.mask.dim(1)});
    s.mask = ops::reshape(resize_map(m, options.resize, options.resize, true), {options.resize, options.resize});
  }
  return s;
}

std::vector<Sample> load_dataset(const std::string& root, const Manifest& manifest, const LoadOptions& options) {
  if (!fs::is_directory(root)) throw std::runtime_error("data root does not exist: " + root);
  std::vector<Sample> out;
  for (const auto& id : manifest.resolved()) out.push_back(load_sample(root, id, options));
  return out;
}

Sample augment(const Sample& sample, const AugmentConfig& config, std::mt19937_64& rng) {
  if (!config.enabled) return sample;
  const int64_t c = sample.image.dim(0), h = sample.image.dim(1), w = sample.image.dim(2);
  std::uniform_real_distribution<double> us(config.scale_min, config.scale_max);
  const double s = config.scale_min == config.scale_max ? config.scale_min : us(rng);
  const int64_t nh = std::max<int64_t>(1, std::llround(static_cast<double>(h) * s));
  const int64_t nw = std::max<int64_t>(1, std::llround(static_cast<double>(w) * s));
  Tensor img = sample.image, msk = ops::reshape(sample.mask, {1, h, w});
  if (nh != h || nw != w) {
    img = resize_map(img, nh, nw, false);
    msk = resize_map(msk, nh, nw, true);
  }
  const int64_t ch = config.crop > 0 ? config.crop : nh;
  const int64_t cw = config.crop > 0 ? config.crop : nw;
  const int64_t ph = std::max(nh, ch), pw = std::max(nw, cw);
  const int64_t oy = std::uniform_int_distribution<int64_t>(0, ph - ch)(rng);
  const int64_t ox = std::uniform_int_distribution<int64_t>(0, pw - cw)(rng);
  Sample out{Tensor({c, ch, cw}), Tensor({ch, cw}), sample.id};
  for (int64_t y = 0; y < ch; ++y)
    for (int64_t x = 0; x < cw; ++x) {
      const int64_t sy = y + oy, sx = x + ox;
      if (sy >= nh || sx >= nw) continue;  // zero padding
      for (int64_t k = 0; k < c; ++k) out.image.data()[(k * ch + y) * cw + x] = img.data()[(k * nh + sy) * nw + sx];
      out.mask.data()[y * cw + x] = msk.data()[sy * nw + sx];
    }
  return out;
}

void SynthConfig::validate() const {
  if (height < 8 || width < 8) throw std::invalid_argument("synth canvas must be at least 8x8");
  if (channels < 1) throw std::invalid_argument("synth channels must be positive");
  if (min_targets < 0 || max_targets < min_targets) throw std::invalid_argument("synth target count range invalid");
  const double limit = static_cast<double>(std::min(height, width)) / 8.0;
  if (min_radius < 1.0 || max_radius < min_radius || max_radius > limit)
    throw std::invalid_argument("synth radius range must lie within [1, canvas/8]");
  if (min_contrast <= 0 || max_contrast < min_contrast) throw std::invalid_argument("synth contrast must be positive");
  if (octaves < 1 || clutter < 0 || noise < 0) throw std::invalid_argument("synth clutter settings invalid");
}

namespace {

double smooth(double t) { return t * t * (3 - 2 * t); }

// Multi-octave lattice value noise in [0, 1].
std::vector<double> value_noise(int64_t h, int64_t w, int octaves, std::mt19937_64& rng) {
  std::vector<double> out(static_cast<size_t>(h * w), 0.0);
  std::uniform_real_distribution<double> u(0, 1);
  double amp = 1.0, total = 0.0;
  for (int o = 0; o < octaves; ++o) {
    const int64_t cells = int64_t{2} << o;
    const int64_t n = cells + 1;
    std::vector<double> lattice(static_cast<size_t>(n * n));
    for (double& v : lattice) v = u(rng);
    for (int64_t y = 0; y < h; ++y) {
      const double fy = (static_cast<double>(y) + 0.5) / static_cast<double>(h) * static_cast<double>(cells);
      const int64_t y0 = std::min<int64_t>(static_cast<int64_t>(fy), cells - 1);
      const double ty = smooth(fy - static_cast<double>(y0));
      for (int64_t x = 0; x < w; ++x) {
        const double fx = (static_cast<double>(x) + 0.5) / static_cast<double>(w) * static_cast<double>(cells);
        const int64_t x0 = std::min<int64_t>(static_cast<int64_t>(fx), cells - 1);
        const double tx = smooth(fx - static_cast<double>(x0));
        const double a = lattice[y0 * n + x0], b = lattice[y0 * n + x0 + 1];
        const double c = lattice[(y0 + 1) * n + x0], d = lattice[(y0 + 1) * n + x0 + 1];
        out[y * w + x] += amp * ((a * (1 - tx) + b * tx) * (1 - ty) + (c * (1 - tx) + d * tx) * ty);
      }
    }
    total += amp;
    amp *= 0.5;
  }
  for (double& v : out) v /= total;
  return out;
}

}  // namespace

SyntheticSample synth_sample(const SynthConfig& config, int64_t index) {
  config.validate();
  std::seed_seq seq{static_cast<uint32_t>(config.seed), static_cast<uint32_t>(config.seed >> 32),
                    static_cast<uint32_t>(index), static_cast<uint32_t>(static_cast<uint64_t>(index) >> 32)};
  std::mt19937_64 rng(seq);
  std::uniform_real_distribution<double> u(0, 1);
  const int64_t h = config.height, w = config.width;

  std::vector<double> img = value_noise(h, w, config.octaves, rng);
  const double base = 0.1 + 0.1 * u(rng);
  const double angle = 2 * M_PI * u(rng), slope = 0.15 * u(rng);
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      const double gx = static_cast<double>(x) / static_cast<double>(w), gy = static_cast<double>(y) / static_cast<double>(h);
      img[y * w + x] = base + config.clutter * img[y * w + x] + slope * (std::cos(angle) * gx + std::sin(angle) * gy);
    }

  SyntheticSample out;
  const int n = std::uniform_int_distribution<int>(config.min_targets, config.max_targets)(rng);
  for (int t = 0; t < n; ++t) {
    for (int attempt = 0; attempt < 100; ++attempt) {
      SynthTarget g;
      g.radius = config.min_radius + (config.max_radius - config.min_radius) * u(rng);
      g.contrast = config.min_contrast + (config.max_contrast - config.min_contrast) * u(rng);
      const double margin = g.radius + 1.0;
      g.cx = margin + (static_cast<double>(w) - 1 - 2 * margin) * u(rng);
      g.cy = margin + (static_cast<double>(h) - 1 - 2 * margin) * u(rng);
      bool clear = true;
      for (const auto& o : out.targets)
        clear = clear && std::hypot(g.cx - o.cx, g.cy - o.cy) > g.radius + o.radius + 3.0;
      if (clear) {
        out.targets.push_back(g);
        break;
      }
    }
  }

  Tensor mask({h, w});
  for (const auto& g : out.targets) {
    // half-peak radius r  <=>  sigma = r / sqrt(2 ln 2)
    const double sigma = g.radius / std::sqrt(2.0 * std::log(2.0));
    const int64_t reach = static_cast<int64_t>(std::ceil(4 * sigma));
    const int64_t x0 = std::max<int64_t>(0, static_cast<int64_t>(g.cx) - reach);
    const int64_t x1 = std::min<int64_t>(w - 1, static_cast<int64_t>(g.cx) + reach);
    const int64_t y0 = std::max<int64_t>(0, static_cast<int64_t>(g.cy) - reach);
    const int64_t y1 = std::min<int64_t>(h - 1, static_cast<int64_t>(g.cy) + reach);
    for (int64_t y = y0; y <= y1; ++y)
      for (int64_t x = x0; x <= x1; ++x) {
        const double dx = static_cast<double>(x) - g.cx, dy = static_cast<double>(y) - g.cy;
        const double k = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
        img[y * w + x] += g.contrast * k;
        if (k > 0.5) mask.data()[y * w + x] = 1.0;
      }
  }

  std::normal_distribution<double> nd(0.0, 1.0);
  Tensor image({config.channels, h, w});
  for (int64_t i = 0; i < h * w; ++i) {
    const double v = std::clamp(img[i] + config.noise * nd(rng), 0.0, 1.0);
    for (int c = 0; c < config.channels; ++c) image.data()[c * h * w + i] = v;
  }
  char id[32];
  std::snprintf(id, sizeof id, "synth_%05lld", static_cast<long long>(index));
  out.sample = Sample{image, mask, id};
  return out;
}

std::vector<Sample> synth_generate(const SynthConfig& config, int64_t count) {
  std::vector<Sample> out;
  out.reserve(static_cast<size_t>(count));
  for (int64_t i = 0; i < count; ++i) out.push_back(synth_sample(config, i).sample);
  return out;
}

void write_dataset(const std::string& root, const std::vector<Sample>& samples, const std::string& manifest_name) {
  fs::create_directories(fs::path(root) / "images");
  fs::create_directories(fs::path(root) / "masks");
  std::ofstream manifest(fs::path(root) / manifest_name);
  for (const auto& s : samples) {
    Tensor gray = ops::slice(s.image, 0, 0, 1);
    write_image((fs::path(root) / "images" / (s.id + ".png")).string(), gray);
    write_mask((fs::path(root) / "masks" / (s.id + ".png")).string(), s.mask);
    manifest << s.id << '\n';
  }
  if (!manifest) throw std::runtime_error("cannot write manifest under " + root);
}

Batch make_batch(const std::vector<Sample>& samples, const std::vector<size_t>& indices) {
  if (indices.empty()) throw std::invalid_argument("make_batch needs at least one index");
  const Sample& first = samples.at(indices[0]);
  const int64_t c = first.image.dim(0), h = first.image.dim(1), w = first.image.dim(2);
  const int64_t b = static_cast<int64_t>(indices.size());
  Batch out{Tensor({b, c, h, w}), Tensor({b, 1, h, w}), {}};
  for (int64_t i = 0; i < b; ++i) {
    const Sample& s = samples.at(indices[i]);
    if (s.image.shape() != first.image.shape() || s.mask.shape() != Shape{h, w})
      throw ShapeError("make_batch: sample '" + s.id + "' has a different size");
    std::copy(s.image.data().begin(), s.image.data().end(), out.images.data().begin() + i * c * h * w);
    std::copy(s.mask.data().begin(), s.mask.data().end(), out.masks.data().begin() + i * h * w);
    out.ids.push_back(s.id);
  }
  return out;
}

}  // namespace irstd
