#pragma once

// Dataset ingestion, augmentation and the synthetic small-target generator.
// Images are (C, H, W) in [0, 1], masks (H, W) with values in {0, 1}.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "irstd/tensor.hpp"

namespace irstd {

struct Sample {
  Tensor image;  // (C, H, W)
  Tensor mask;   // (H, W)
  std::string id;
};

// One id per line, '#' starts a comment. A line "!id" excludes that id
// wherever it appears (also when listed earlier).
struct Manifest {
  std::vector<std::string> ids;
  std::vector<std::string> excluded;

  static Manifest parse(const std::string& text);
  static Manifest read(const std::string& path);
  // Listed ids minus exclusions, in listed order, duplicates dropped.
  std::vector<std::string> resolved() const;
};

struct LoadOptions {
  int channels = 3;          // loaded as grayscale, then replicated
  int64_t resize = 0;        // square resize (SIRST evaluation uses 256); 0 keeps the size
  bool warn_nonbinary = true;
  bool require_masks = true;  // false: images without a mask get an empty one
};

// Reads root/images/<id>.* and root/masks/<id>.*; missing files throw with
// the stem in the message. Masks are binarized at 128.
Sample load_sample(const std::string& root, const std::string& id, const LoadOptions& options);
std::vector<Sample> load_dataset(const std::string& root, const Manifest& manifest, const LoadOptions& options);
// Stems of every file in root/images, sorted.
std::vector<std::string> list_ids(const std::string& root);

// Image files: 8-bit scaled by 1/255, 16-bit by 1/65535.
Tensor read_image(const std::string& path, int channels);
Tensor read_mask(const std::string& path, bool warn_nonbinary = true);
void write_image(const std::string& path, const Tensor& image, bool sixteen_bit = true);
// Binary mask written as 0 / 255 (values > 0.5 are foreground).
void write_mask(const std::string& path, const Tensor& mask);

struct AugmentConfig {
  bool enabled = true;
  double scale_min = 0.5;
  double scale_max = 2.0;
  int64_t crop = 0;  // 0 keeps the resized size
};

// Random resize (bilinear image, nearest mask), zero pad up to the crop and a
// random crop shared by image and mask. Disabled: returns the input unchanged.
Sample augment(const Sample& sample, const AugmentConfig& config, std::mt19937_64& rng);

struct SynthConfig {
  int64_t height = 64;
  int64_t width = 64;
  int channels = 1;
  int min_targets = 1;
  int max_targets = 3;
  double min_radius = 1.5;  // half-peak radius in pixels
  double max_radius = 4.0;
  double min_contrast = 0.3;
  double max_contrast = 0.6;
  int octaves = 4;
  double clutter = 0.25;  // value-noise amplitude
  double noise = 0.01;    // per-pixel Gaussian sensor noise
  uint64_t seed = 0;

  void validate() const;
};

struct SynthTarget {
  double cx = 0, cy = 0;  // pixel coordinates of the blob center
  double radius = 0;
  double contrast = 0;
};

struct SyntheticSample {
  Sample sample;
  std::vector<SynthTarget> targets;
};

// Sample `index` of the stream defined by config.seed.
SyntheticSample synth_sample(const SynthConfig& config, int64_t index);
std::vector<Sample> synth_generate(const SynthConfig& config, int64_t count);

// Writes images/, masks/ and a manifest listing every id.
void write_dataset(const std::string& root, const std::vector<Sample>& samples,
                   const std::string& manifest_name = "all.txt");

// Stacks samples[indices] into images (B, C, H, W) and masks (B, 1, H, W).
struct Batch {
  Tensor images;
  Tensor masks;
  std::vector<std::string> ids;
};
Batch make_batch(const std::vector<Sample>& samples, const std::vector<size_t>& indices);

}  // namespace irstd
