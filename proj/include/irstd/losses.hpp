#pragma once

// Training objectives. Losses take logits and treat targets / teacher values
// as constants; each returns a scalar tensor with an analytic backward.

#include <cstdint>
#include <random>
#include <vector>

#include "irstd/tensor.hpp"

namespace irstd {

struct LossConfig {
  double lambda_distill = 5.0;
  double lambda_dice = 5.0;
  double temperature = 1.0;
  double dice_eps = 1.0;
  int64_t point_count = 1024;  // capped at the pixel count
  double oversample_ratio = 3.0;
  double importance_fraction = 0.75;
  bool snap_points = true;             // sample at pixel centers of the target grid
  bool soft_teacher_targets = false;   // sigmoid(T_final) instead of hard masks

  void validate() const;
};

// Mean binary cross-entropy from logits, numerically stable.
Tensor bce(const Tensor& logits, const Tensor& targets);

// Soft Dice 1 - (2 sum(p y) + eps) / (sum p + sum y + eps) per sample (first
// axis), averaged over the batch.
Tensor dice(const Tensor& logits, const Tensor& targets, double eps);

// KL(teacher || student) between softmax(./tau) distributions over the last
// axis of 2-D views, averaged over rows and scaled by tau^2.
Tensor kl_rows(const Tensor& student, const Tensor& teacher, double tau);

// Mask logits (6N, h, w) or (B, 6N, h, w).
// Spatial: one distribution over h*w per mask channel.
Tensor kl_spatial(const Tensor& student, const Tensor& teacher, double tau);
// Channel: one distribution over the 6N masks per spatial position.
Tensor kl_channel(const Tensor& student, const Tensor& teacher, double tau);

// Teacher and student mask sets for distillation. `mid` holds the 6N
// pre-matching masks, `final` the K selected ones.
struct TeacherOutputs {
  Tensor mid;    // (B, 6N, h, w)
  Tensor final;  // (B, K, h, w)
  std::vector<std::vector<int>> selected;  // per sample, K indices into mid
  std::vector<std::vector<std::pair<double, double>>> prompts;  // normalized (x, y)
};

struct StudentOutputs {
  Tensor mid;
  Tensor final;
};

struct DistillLoss {
  Tensor total;
  double bce = 0, dice = 0, kl = 0, cd = 0;
};

// bce(S_final, T) + lambda * (dice(S_final, T) + kl_spatial + kl_channel) with
// T the teacher's final masks binarized at logit 0 (or soft when configured).
DistillLoss distill_loss(const StudentOutputs& student, const TeacherOutputs& teacher,
                         const LossConfig& config);

// (B, P, 2) normalized (x, y) points. importance_fraction of them are the
// most uncertain (smallest |logit|) among oversample_ratio * P uniform
// candidates; the rest are uniform. `grid` is the (H, W) of the target map.
Tensor sample_points(const Tensor& logits, int64_t grid_h, int64_t grid_w, const LossConfig& config,
                     std::mt19937_64& rng);
// Every pixel center of an (H, W) grid in raster order, (B, H*W, 2).
Tensor grid_points(int64_t batch, int64_t height, int64_t width);

struct MaskLoss {
  Tensor total;
  double bce = 0, dice = 0;
};

// bce + lambda_dice * dice on logits and targets read out at `points`.
// logits (B, 1, h, w), targets (B, 1, H, W) in [0, 1].
MaskLoss mask_loss_at(const Tensor& logits, const Tensor& targets, const Tensor& points,
                      const LossConfig& config);
// Draws points with sample_points, then mask_loss_at.
MaskLoss mask_loss(const Tensor& logits, const Tensor& targets, const LossConfig& config,
                   std::mt19937_64& rng);
// Same combination over every element (logits and targets of equal shape).
MaskLoss dense_mask_loss(const Tensor& logits, const Tensor& targets, const LossConfig& config);

}  // namespace irstd
