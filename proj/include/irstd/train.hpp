#pragma once

// Fine-tuning of the full network with point-sampled mask losses on the
// final and both early predictions.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "irstd/data.hpp"
#include "irstd/losses.hpp"
#include "irstd/metrics.hpp"
#include "irstd/model.hpp"
#include "irstd/optim.hpp"

namespace irstd {

struct TrainConfig {
  int64_t steps = 500;
  int batch = 4;
  double lr = 1e-4;
  double min_lr = 1e-6;
  int64_t warmup = 10;
  AdamWConfig adamw;
  LossConfig loss;
  AugmentConfig augment;  // crop 0 crops back to the (square) input size
  bool point_sampled = true;  // false: dense loss over every pixel
  double early_weight = 1.0;  // weight of each early-head loss
  double clip_norm = 0;
  uint64_t seed = 0;
  int64_t checkpoint_every = 0;
  int64_t eval_every = 0;  // 0: no periodic train-set evaluation
  std::string out_dir;
};

struct TrainLogEntry {
  int64_t step = 0;
  double lr = 0, total = 0;
  double final_loss = 0, early_encoder = 0, early_fpn = 0;
  double eval_iou = -1;  // train-set IoU when evaluated at this step
};

struct TrainResult {
  std::vector<TrainLogEntry> log;
  std::string checkpoint;
};

// Copies encoder, query-engine and Q_encoder weights from a distillation
// checkpoint; everything else keeps its fresh initialization.
int load_distilled(IrstdModel& model, const std::string& checkpoint);

TrainResult train_run(IrstdModel& model, const std::vector<Sample>& data, const TrainConfig& config,
                      const std::string& resume = "",
                      const std::function<void(const TrainLogEntry&)>& on_step = {});

// Final-head logits for each sample, (1, 1, H, W) each, computed without
// gradients in batches of `batch`.
std::vector<Tensor> predict_logits(const IrstdModel& model, const std::vector<Sample>& data, int batch = 4);
// Binarized (H, W) masks.
std::vector<Tensor> predict_masks(const IrstdModel& model, const std::vector<Sample>& data, int batch = 4);

DetectionReport evaluate_model(const IrstdModel& model, const std::vector<Sample>& data,
                               const MatchConfig& match = {}, int batch = 4);

std::string format_log_entry(const TrainLogEntry& e);
TrainLogEntry parse_train_log_entry(const std::string& line);

}  // namespace irstd
