#include "irstd/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace irstd {

namespace {

void plane_dims(const Tensor& m, int64_t& h, int64_t& w) {
  if (m.rank() < 2) throw ShapeError("mask must be (H, W), got " + shape_str(m.shape()));
  h = m.dim(m.rank() - 2);
  w = m.dim(m.rank() - 1);
  if (m.numel() != h * w) throw ShapeError("expected a single mask plane, got " + shape_str(m.shape()));
}

}  // namespace

std::vector<Component> connected_components(const Tensor& mask) {
  int64_t h = 0, w = 0;
  plane_dims(mask, h, w);
  std::vector<int> label(static_cast<size_t>(h * w), -1);
  std::vector<Component> out;
  std::vector<int64_t> stack;
  for (int64_t start = 0; start < h * w; ++start) {
    if (label[start] >= 0 || mask.data()[start] <= 0.5) continue;
    const int id = static_cast<int>(out.size());
    Component c;
    label[start] = id;
    stack.push_back(start);
    while (!stack.empty()) {
      const int64_t p = stack.back();
      stack.pop_back();
      c.pixels.push_back(p);
      const int64_t y = p / w, x = p % w;
      for (int64_t dy = -1; dy <= 1; ++dy)
        for (int64_t dx = -1; dx <= 1; ++dx) {
          const int64_t ny = y + dy, nx = x + dx;
          if (ny < 0 || nx < 0 || ny >= h || nx >= w) continue;
          const int64_t q = ny * w + nx;
          if (label[q] >= 0 || mask.data()[q] <= 0.5) continue;
          label[q] = id;
          stack.push_back(q);
        }
    }
    std::sort(c.pixels.begin(), c.pixels.end());
    double sy = 0, sx = 0;
    for (int64_t p : c.pixels) {
      sy += static_cast<double>(p / w);
      sx += static_cast<double>(p % w);
    }
    c.cy = sy / static_cast<double>(c.pixels.size());
    c.cx = sx / static_cast<double>(c.pixels.size());
    out.push_back(std::move(c));
  }
  return out;
}

std::string to_string(MatchRule rule) {
  return rule == MatchRule::centroid_distance ? "centroid" : "overlap";
}

MatchRule parse_match_rule(const std::string& name) {
  if (name == "centroid") return MatchRule::centroid_distance;
  if (name == "overlap") return MatchRule::overlap;
  throw std::invalid_argument("unknown match rule '" + name + "' (centroid|overlap)");
}

ImageReport evaluate_image(const Tensor& pred, const Tensor& gt, const MatchConfig& config) {
  int64_t h = 0, w = 0, gh = 0, gw = 0;
  plane_dims(pred, h, w);
  plane_dims(gt, gh, gw);
  if (h != gh || w != gw)
    throw ShapeError("prediction " + shape_str(pred.shape()) + " and ground truth " + shape_str(gt.shape()) +
                     " differ in size");
  ImageReport r;
  r.p_all = h * w;
  for (int64_t i = 0; i < h * w; ++i) {
    const bool p = pred.data()[i] > 0.5, g = gt.data()[i] > 0.5;
    r.intersection += p && g;
    r.union_ += p || g;
  }
  const auto pc = connected_components(pred);
  const auto gc = connected_components(gt);
  r.n_targets = static_cast<int64_t>(gc.size());
  std::vector<char> taken(pc.size(), 0);
  for (const auto& g : gc) {
    int best = -1;
    double best_score = 0;
    for (size_t j = 0; j < pc.size(); ++j) {
      if (taken[j]) continue;
      if (config.rule == MatchRule::centroid_distance) {
        const double d = std::hypot(pc[j].cy - g.cy, pc[j].cx - g.cx);
        if (d <= config.distance && (best < 0 || d < best_score)) {
          best = static_cast<int>(j);
          best_score = d;
        }
      } else {
        std::vector<int64_t> both;
        std::set_intersection(pc[j].pixels.begin(), pc[j].pixels.end(), g.pixels.begin(), g.pixels.end(),
                              std::back_inserter(both));
        const double ov = static_cast<double>(both.size());
        if (ov >= 1 && ov > best_score) {
          best = static_cast<int>(j);
          best_score = ov;
        }
      }
    }
    if (best >= 0) {
      taken[best] = 1;
      ++r.n_detected;
    }
  }
  for (size_t j = 0; j < pc.size(); ++j)
    if (!taken[j]) r.p_false += pc[j].area();
  return r;
}

DetectionReport aggregate(std::vector<ImageReport> images, const MatchConfig& config) {
  DetectionReport rep;
  rep.match = config;
  double iou_sum = 0;
  for (const auto& r : images) {
    rep.intersection += r.intersection;
    rep.union_ += r.union_;
    rep.n_all_targets += r.n_targets;
    rep.n_pred_correct += r.n_detected;
    rep.p_false += r.p_false;
    rep.p_all += r.p_all;
    iou_sum += r.union_ > 0 ? static_cast<double>(r.intersection) / static_cast<double>(r.union_) : 1.0;
  }
  // empty prediction on empty ground truth counts as perfect overlap
  if (config.per_image_iou)
    rep.iou = images.empty() ? 1.0 : iou_sum / static_cast<double>(images.size());
  else
    rep.iou = rep.union_ > 0 ? static_cast<double>(rep.intersection) / static_cast<double>(rep.union_) : 1.0;
  rep.pd_defined = rep.n_all_targets > 0;
  rep.pd = rep.pd_defined ? static_cast<double>(rep.n_pred_correct) / static_cast<double>(rep.n_all_targets)
                          : std::numeric_limits<double>::quiet_NaN();
  rep.fa = rep.p_all > 0 ? static_cast<double>(rep.p_false) / static_cast<double>(rep.p_all) : 0.0;
  rep.per_image = std::move(images);
  return rep;
}

DetectionReport evaluate(const std::vector<Tensor>& preds, const std::vector<Tensor>& gts, const MatchConfig& config,
                         const std::vector<std::string>& ids) {
  if (preds.size() != gts.size())
    throw std::invalid_argument("evaluate: " + std::to_string(preds.size()) + " predictions for " +
                                std::to_string(gts.size()) + " ground-truth masks");
  if (!ids.empty() && ids.size() != preds.size()) throw std::invalid_argument("evaluate: id count mismatch");
  std::vector<ImageReport> images;
  for (size_t i = 0; i < preds.size(); ++i) {
    try {
      images.push_back(evaluate_image(preds[i], gts[i], config));
    } catch (const ShapeError& e) {
      throw ShapeError("image " + (ids.empty() ? std::to_string(i) : ids[i]) + ": " + e.what());
    }
    images.back().id = ids.empty() ? std::to_string(i) : ids[i];
  }
  return aggregate(std::move(images), config);
}

std::string format_scaled(double value, double scale) {
  if (!std::isfinite(value)) return "undefined";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", std::round(value * scale * 100.0) / 100.0);
  std::string s = buf;
  if (s.find('.') != std::string::npos) {
    while (s.back() == '0') s.pop_back();
    if (s.back() == '.') s.pop_back();
  }
  if (s == "-0") s = "0";
  return s;
}

std::string render_report(const DetectionReport& r) {
  std::ostringstream os;
  os << "IoU(1e-2)  Pd(1e-2)  Fa(1e-6)\n";
  char line[128];
  std::snprintf(line, sizeof line, "%-10s %-9s %s\n", format_scaled(r.iou, 1e2).c_str(),
                format_scaled(r.pd_defined ? r.pd : std::nan(""), 1e2).c_str(), format_scaled(r.fa, 1e6).c_str());
  os << line;
  os << "targets " << r.n_pred_correct << "/" << r.n_all_targets << ", false pixels " << r.p_false << "/" << r.p_all
     << ", match " << to_string(r.match.rule);
  if (r.match.rule == MatchRule::centroid_distance) os << " <= " << r.match.distance << " px";
  os << ", iou " << (r.match.per_image_iou ? "per-image mean" : "summed") << "\n";
  return os.str();
}

std::string report_json(const DetectionReport& r) {
  nlohmann::ordered_json j;
  j["iou"] = r.iou;
  j["pd"] = r.pd_defined ? nlohmann::ordered_json(r.pd) : nlohmann::ordered_json(nullptr);
  j["fa"] = r.fa;
  j["table"] = {{"iou_1e-2", format_scaled(r.iou, 1e2)},
                {"pd_1e-2", format_scaled(r.pd_defined ? r.pd : std::nan(""), 1e2)},
                {"fa_1e-6", format_scaled(r.fa, 1e6)}};
  j["n_pred_correct"] = r.n_pred_correct;
  j["n_all_targets"] = r.n_all_targets;
  j["p_false"] = r.p_false;
  j["p_all"] = r.p_all;
  j["intersection"] = r.intersection;
  j["union"] = r.union_;
  j["match_rule"] = to_string(r.match.rule);
  j["match_distance"] = r.match.distance;
  j["iou_mode"] = r.match.per_image_iou ? "per_image_mean" : "summed";
  auto& per = j["per_image"] = nlohmann::ordered_json::array();
  for (const auto& im : r.per_image)
    per.push_back({{"id", im.id},
                   {"intersection", im.intersection},
                   {"union", im.union_},
                   {"n_targets", im.n_targets},
                   {"n_detected", im.n_detected},
                   {"p_false", im.p_false},
                   {"p_all", im.p_all}});
  return j.dump(2) + "\n";
}

std::string report_csv(const DetectionReport& r) {
  std::ostringstream os;
  os << "id,intersection,union,n_targets,n_detected,p_false,p_all\n";
  for (const auto& im : r.per_image)
    os << im.id << ',' << im.intersection << ',' << im.union_ << ',' << im.n_targets << ',' << im.n_detected << ','
       << im.p_false << ',' << im.p_all << '\n';
  return os.str();
}

}  // namespace irstd
