#include "irstd/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include "irstd/ops.hpp"

namespace irstd {

using detail::grad_of;
using detail::make_result;

void LossConfig::validate() const {
  if (!(lambda_distill > 0) || !(lambda_dice > 0) || !(temperature > 0) || !(dice_eps > 0))
    throw std::invalid_argument("loss weights, temperature and dice_eps must be positive");
  if (point_count < 1) throw std::invalid_argument("loss.point_count must be >= 1");
  if (oversample_ratio < 1) throw std::invalid_argument("loss.oversample_ratio must be >= 1");
  if (importance_fraction < 0 || importance_fraction > 1)
    throw std::invalid_argument("loss.importance_fraction must lie in [0, 1]");
}

namespace {

void require_same(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Tensor bce(const Tensor& logits, const Tensor& targets) {
  require_same(logits, targets, "bce");
  const int64_t n = logits.numel();
  if (n == 0) throw ShapeError("bce: empty input");
  const double* x = logits.ptr();
  const double* y = targets.ptr();
  double s = 0;
  for (int64_t i = 0; i < n; ++i)
    s += std::max(x[i], 0.0) - x[i] * y[i] + std::log1p(std::exp(-std::abs(x[i])));
  const double inv = 1.0 / static_cast<double>(n);
  return make_result(Shape{}, {s * inv}, {&logits}, [logits, targets, inv](TensorImpl& o) {
    double* g = grad_of(logits);
    const double* x = logits.ptr();
    const double* y = targets.ptr();
    const double go = o.grad[0] * inv;
    for (int64_t i = 0; i < logits.numel(); ++i) g[i] += go * (sigmoid(x[i]) - y[i]);
  });
}

Tensor dice(const Tensor& logits, const Tensor& targets, double eps) {
  require_same(logits, targets, "dice");
  if (logits.rank() < 1 || logits.numel() == 0) throw ShapeError("dice: empty input");
  if (eps < 0) throw std::invalid_argument("dice: eps must be >= 0");
  const int64_t batch = logits.rank() == 1 ? 1 : logits.dim(0);
  const int64_t per = logits.numel() / batch;
  std::vector<double> inter(static_cast<size_t>(batch)), denom(static_cast<size_t>(batch));
  const double* x = logits.ptr();
  const double* y = targets.ptr();
  double total = 0;
  for (int64_t b = 0; b < batch; ++b) {
    double i_s = 0, p_s = 0, y_s = 0;
    for (int64_t j = b * per; j < (b + 1) * per; ++j) {
      const double p = sigmoid(x[j]);
      i_s += p * y[j];
      p_s += p;
      y_s += y[j];
    }
    inter[static_cast<size_t>(b)] = i_s;
    denom[static_cast<size_t>(b)] = p_s + y_s + eps;
    total += 1.0 - (2.0 * i_s + eps) / (p_s + y_s + eps);
  }
  return make_result(
      Shape{}, {total / static_cast<double>(batch)}, {&logits},
      [logits, targets, inter, denom, batch, per, eps](TensorImpl& o) {
        double* g = grad_of(logits);
        const double* x = logits.ptr();
        const double* y = targets.ptr();
        const double go = o.grad[0] / static_cast<double>(batch);
        for (int64_t b = 0; b < batch; ++b) {
          const double num = 2.0 * inter[static_cast<size_t>(b)] + eps;
          const double den = denom[static_cast<size_t>(b)];
          for (int64_t j = b * per; j < (b + 1) * per; ++j) {
            const double p = sigmoid(x[j]);
            const double dl_dp = -(2.0 * y[j] * den - num) / (den * den);
            g[j] += go * dl_dp * p * (1.0 - p);
          }
        }
      });
}

Tensor kl_rows(const Tensor& student, const Tensor& teacher, double tau) {
  require_same(student, teacher, "kl");
  if (!(tau > 0)) throw std::invalid_argument("kl: temperature must be positive");
  const int64_t cols = student.dim(-1);
  const int64_t rows = student.numel() / cols;
  std::vector<double> s_prob(static_cast<size_t>(student.numel()));
  std::vector<double> t_prob(s_prob.size());
  const double* s = student.ptr();
  const double* t = teacher.ptr();
  double total = 0;
  for (int64_t r = 0; r < rows; ++r) {
    const double* sr = s + r * cols;
    const double* tr = t + r * cols;
    const double sm = *std::max_element(sr, sr + cols) / tau;
    const double tm = *std::max_element(tr, tr + cols) / tau;
    double sz = 0, tz = 0;
    for (int64_t c = 0; c < cols; ++c) {
      sz += std::exp(sr[c] / tau - sm);
      tz += std::exp(tr[c] / tau - tm);
    }
    const double s_log_z = sm + std::log(sz), t_log_z = tm + std::log(tz);
    double kl = 0;
    for (int64_t c = 0; c < cols; ++c) {
      const double log_s = sr[c] / tau - s_log_z;
      const double log_t = tr[c] / tau - t_log_z;
      const double pt = std::exp(log_t);
      s_prob[static_cast<size_t>(r * cols + c)] = std::exp(log_s);
      t_prob[static_cast<size_t>(r * cols + c)] = pt;
      if (pt > 0) kl += pt * (log_t - log_s);
    }
    total += kl;
  }
  const double value = total / static_cast<double>(rows) * tau * tau;
  return make_result(Shape{}, {value}, {&student},
                     [student, s_prob, t_prob, rows, tau](TensorImpl& o) {
                       double* g = grad_of(student);
                       const double k = o.grad[0] * tau / static_cast<double>(rows);
                       for (size_t i = 0; i < s_prob.size(); ++i) g[i] += k * (s_prob[i] - t_prob[i]);
                     });
}

namespace {
Tensor as_batched(const Tensor& x, const char* what) {
  if (x.rank() == 3) return ops::reshape(x, {1, x.dim(0), x.dim(1), x.dim(2)});
  if (x.rank() == 4) return x;
  throw ShapeError(std::string(what) + ": expected (6N,h,w) or (B,6N,h,w), got " + shape_str(x.shape()));
}
}  // namespace

Tensor kl_spatial(const Tensor& student, const Tensor& teacher, double tau) {
  require_same(student, teacher, "kl_spatial");
  Tensor s = as_batched(student, "kl_spatial"), t = as_batched(teacher, "kl_spatial");
  const int64_t rows = s.dim(0) * s.dim(1), cols = s.dim(2) * s.dim(3);
  return kl_rows(ops::reshape(s, {rows, cols}), ops::reshape(t, {rows, cols}), tau);
}

Tensor kl_channel(const Tensor& student, const Tensor& teacher, double tau) {
  require_same(student, teacher, "kl_channel");
  Tensor s = ops::permute(as_batched(student, "kl_channel"), {0, 2, 3, 1});
  Tensor t = ops::permute(as_batched(teacher, "kl_channel"), {0, 2, 3, 1});
  return kl_rows(s, t, tau);
}

DistillLoss distill_loss(const StudentOutputs& student, const TeacherOutputs& teacher,
                         const LossConfig& config) {
  if (student.mid.shape() != teacher.mid.shape())
    throw ShapeError("distill_loss: student mid " + shape_str(student.mid.shape()) +
                     " does not pair with teacher mid " + shape_str(teacher.mid.shape()));
  require_same(student.final, teacher.final, "distill_loss final");
  Tensor target = config.soft_teacher_targets ? ops::sigmoid(teacher.final.detach())
                                              : Tensor(teacher.final.shape());
  if (!config.soft_teacher_targets)
    for (int64_t i = 0; i < target.numel(); ++i) target.data()[i] = teacher.final.data()[i] > 0 ? 1.0 : 0.0;
  DistillLoss out;
  Tensor l_bce = bce(student.final, target);
  Tensor l_dice = dice(student.final, target, config.dice_eps);
  Tensor l_kl = kl_spatial(student.mid, teacher.mid, config.temperature);
  Tensor l_cd = kl_channel(student.mid, teacher.mid, config.temperature);
  out.bce = l_bce.item();
  out.dice = l_dice.item();
  out.kl = l_kl.item();
  out.cd = l_cd.item();
  out.total = ops::add(l_bce, ops::scale(ops::add(ops::add(l_dice, l_kl), l_cd), config.lambda_distill));
  return out;
}

Tensor grid_points(int64_t batch, int64_t height, int64_t width) {
  Tensor pts({batch, height * width, 2});
  double* p = pts.ptr();
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t y = 0; y < height; ++y)
      for (int64_t x = 0; x < width; ++x, p += 2) {
        p[0] = (static_cast<double>(x) + 0.5) / static_cast<double>(width);
        p[1] = (static_cast<double>(y) + 0.5) / static_cast<double>(height);
      }
  return pts;
}

Tensor sample_points(const Tensor& logits, int64_t grid_h, int64_t grid_w, const LossConfig& config,
                     std::mt19937_64& rng) {
  if (logits.rank() != 4 || logits.dim(1) != 1)
    throw ShapeError("sample_points: expected logits (B,1,h,w), got " + shape_str(logits.shape()));
  if (config.point_count < 1) throw std::invalid_argument("sample_points: point_count must be >= 1");
  const int64_t batch = logits.dim(0);
  const int64_t count = std::min(config.point_count, grid_h * grid_w);
  const int64_t important =
      static_cast<int64_t>(std::floor(config.importance_fraction * static_cast<double>(count)));
  const int64_t candidates =
      important > 0 ? static_cast<int64_t>(std::ceil(config.oversample_ratio * static_cast<double>(count))) : 0;

  std::uniform_int_distribution<int64_t> px(0, grid_w - 1), py(0, grid_h - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto draw = [&](double* p) {
    if (config.snap_points) {
      p[0] = (static_cast<double>(px(rng)) + 0.5) / static_cast<double>(grid_w);
      p[1] = (static_cast<double>(py(rng)) + 0.5) / static_cast<double>(grid_h);
    } else {
      p[0] = unit(rng);
      p[1] = unit(rng);
    }
  };

  Tensor out({batch, count, 2});
  Tensor cand;
  Tensor cand_logits;
  if (important > 0) {
    cand = Tensor({batch, candidates, 2});
    for (int64_t i = 0; i < batch * candidates; ++i) draw(cand.ptr() + 2 * i);
    NoGradGuard ng;
    cand_logits = ops::point_sample(logits.detach(), cand);  // (B, 1, candidates)
  }
  for (int64_t b = 0; b < batch; ++b) {
    double* o = out.ptr() + b * count * 2;
    if (important > 0) {
      std::vector<int64_t> idx(static_cast<size_t>(candidates));
      std::iota(idx.begin(), idx.end(), 0);
      const double* lg = cand_logits.ptr() + b * candidates;
      std::stable_sort(idx.begin(), idx.end(),
                       [lg](int64_t a, int64_t c) { return std::abs(lg[a]) < std::abs(lg[c]); });
      for (int64_t k = 0; k < important; ++k) {
        const double* src = cand.ptr() + (b * candidates + idx[static_cast<size_t>(k)]) * 2;
        o[2 * k] = src[0];
        o[2 * k + 1] = src[1];
      }
    }
    for (int64_t k = important; k < count; ++k) draw(o + 2 * k);
  }
  return out;
}

MaskLoss mask_loss_at(const Tensor& logits, const Tensor& targets, const Tensor& points,
                      const LossConfig& config) {
  if (targets.rank() != 4 || targets.dim(1) != 1 || targets.dim(0) != logits.dim(0))
    throw ShapeError("mask_loss: targets " + shape_str(targets.shape()) + " vs logits " +
                     shape_str(logits.shape()));
  Tensor pl = ops::point_sample(logits, points);
  Tensor pt = ops::point_sample(targets.detach(), points);
  MaskLoss out;
  Tensor l_bce = bce(pl, pt);
  Tensor l_dice = dice(pl, pt, config.dice_eps);
  out.bce = l_bce.item();
  out.dice = l_dice.item();
  out.total = ops::add(l_bce, ops::scale(l_dice, config.lambda_dice));
  return out;
}

MaskLoss mask_loss(const Tensor& logits, const Tensor& targets, const LossConfig& config,
                   std::mt19937_64& rng) {
  Tensor pts = sample_points(logits, targets.dim(2), targets.dim(3), config, rng);
  return mask_loss_at(logits, targets, pts, config);
}

MaskLoss dense_mask_loss(const Tensor& logits, const Tensor& targets, const LossConfig& config) {
  MaskLoss out;
  Tensor l_bce = bce(logits, targets);
  Tensor l_dice = dice(logits, targets, config.dice_eps);
  out.bce = l_bce.item();
  out.dice = l_dice.item();
  out.total = ops::add(l_bce, ops::scale(l_dice, config.lambda_dice));
  return out;
}

}  // namespace irstd
