#pragma once

// Pixel IoU, object-level detection probability P_d and false-alarm rate
// F_a over a dataset of binary masks.

#include <cstdint>
#include <string>
#include <vector>

#include "irstd/tensor.hpp"

namespace irstd {

struct Component {
  std::vector<int64_t> pixels;  // flat indices y * W + x, raster order
  double cy = 0, cx = 0;        // centroid in pixel coordinates
  int64_t area() const { return static_cast<int64_t>(pixels.size()); }
};

// 8-connected foreground (> 0.5) components of an (H, W) map, ordered by
// their first pixel in raster order.
std::vector<Component> connected_components(const Tensor& mask);

enum class MatchRule { centroid_distance, overlap };
std::string to_string(MatchRule rule);
MatchRule parse_match_rule(const std::string& name);

struct MatchConfig {
  MatchRule rule = MatchRule::centroid_distance;
  double distance = 3.0;       // centroid rule threshold in pixels
  bool per_image_iou = false;  // mean of per-image IoU instead of summed counts
};

struct ImageReport {
  std::string id;
  int64_t intersection = 0, union_ = 0;
  int64_t n_targets = 0, n_detected = 0;
  int64_t p_false = 0, p_all = 0;
};

// Greedy one-to-one matching: each ground-truth component in order takes the
// nearest (centroid rule) or most-overlapping (overlap rule) prediction still
// free. Pixels of predictions left unmatched are false alarms; matched
// predictions contribute none.
struct DetectionReport {
  double iou = 0, pd = 0, fa = 0;
  bool pd_defined = false;  // false when there are no targets at all
  int64_t n_pred_correct = 0, n_all_targets = 0;
  int64_t p_false = 0, p_all = 0;
  int64_t intersection = 0, union_ = 0;
  MatchConfig match;
  std::vector<ImageReport> per_image;
};

ImageReport evaluate_image(const Tensor& pred, const Tensor& gt, const MatchConfig& config);
DetectionReport evaluate(const std::vector<Tensor>& preds, const std::vector<Tensor>& gts,
                         const MatchConfig& config = {}, const std::vector<std::string>& ids = {});
// Aggregates per-image counts (used by evaluate).
DetectionReport aggregate(std::vector<ImageReport> images, const MatchConfig& config);

// value * scale at two decimals with trailing zeros removed ("97.04", "100").
std::string format_scaled(double value, double scale);

// IoU and P_d in 1e-2, F_a in 1e-6.
std::string render_report(const DetectionReport& report);
std::string report_json(const DetectionReport& report);
std::string report_csv(const DetectionReport& report);

}  // namespace irstd
