#pragma once

// Distillation pre-training: teacher interface, the mock granularity
// teacher, the student with a prompt/granularity head, and the loop.

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "irstd/data.hpp"
#include "irstd/fpn.hpp"
#include "irstd/losses.hpp"
#include "irstd/model.hpp"
#include "irstd/optim.hpp"

namespace irstd {

inline constexpr int kGranularities = 6;

// Dilation radii of the six mock granularity masks, finest first.
inline constexpr int kMockRadii[kGranularities] = {0, 1, 2, 4, 8, 16};
inline constexpr double kMockLogit = 10.0;

// gt (H, W) binary. mid (1, 6N, H, W) holds for prompt n the dilations of
// its component at index n * 6 + k; final (1, N, H, W) the radius-0 masks.
TeacherOutputs mock_teacher(const Tensor& gt, int prompts, uint64_t seed);

// Concatenates single-image teacher outputs along the batch axis.
TeacherOutputs stack_teachers(const std::vector<TeacherOutputs>& parts);

class Teacher {
 public:
  virtual ~Teacher() = default;
  virtual TeacherOutputs operator()(const Sample& sample, int prompts, uint64_t seed) const = 0;
};

class MockTeacher : public Teacher {
 public:
  TeacherOutputs operator()(const Sample& sample, int prompts, uint64_t seed) const override {
    return mock_teacher(sample.mask, prompts, seed);
  }
};

// Precomputed teacher outputs, one archive per sample id: tensors "mid"
// (6N, H, W) and "final" (K, H, W), texts "selected" and "prompts"
// (whitespace separated). The prompt count and seed are ignored.
class FileTeacher : public Teacher {
 public:
  explicit FileTeacher(std::string dir) : dir_(std::move(dir)) {}
  TeacherOutputs operator()(const Sample& sample, int prompts, uint64_t seed) const override;
  static void write(const std::string& dir, const std::string& id, const TeacherOutputs& t);

 private:
  std::string dir_;
};

// Encoder (with its query engine and Q_encoder), tiny FPN and a decoding
// head that emits 6 granularity masks per point prompt. Parameter names for
// the shared parts match IrstdModel so fine-tuning can pick them up.
class DistillStudent : public nn::Module {
 public:
  explicit DistillStudent(const ModelConfig& config);

  // images (B, C, H, W); prompts normalized (x, y) per sample, N each.
  // mid (B, 6N, H, W); final gathers `selected` from mid.
  StudentOutputs forward(const Tensor& images, const std::vector<std::vector<std::pair<double, double>>>& prompts,
                         const std::vector<std::vector<int>>& selected) const;

  const ModelConfig& config() const { return config_; }

 private:
  ModelConfig config_;
  std::unique_ptr<HierarchicalEncoder> encoder_;
  std::unique_ptr<EncoderQueryEngine> engine_;
  SparseQuerySet q_encoder_, q_fpn_;
  std::unique_ptr<TinyFpn> fpn_;
  std::unique_ptr<nn::Conv2d> prompt_proj_, mix_, mix2_, granularity_;
};

struct DistillConfig {
  int64_t steps = 300;  // total optimizer steps
  int batch = 2;
  int prompts = 2;
  double lr = 1e-4;
  AdamWConfig adamw;
  std::vector<double> milestones{0.9, 0.95};
  double gamma = 0.1;
  double clip_norm = 0;  // 0 disables gradient clipping
  LossConfig loss;
  uint64_t seed = 0;
  int64_t checkpoint_every = 0;  // 0: only the final checkpoint
  std::string out_dir;           // empty: no files written
};

struct DistillLogEntry {
  int64_t step = 0;
  double lr = 0, total = 0, bce = 0, dice = 0, kl = 0, cd = 0;
};

struct DistillResult {
  std::vector<DistillLogEntry> log;
  std::string checkpoint;  // final checkpoint path when written
};

// Batch composition and teacher prompts depend only on (seed, step), so a
// run resumed from a checkpoint continues bitwise identically.
std::vector<size_t> batch_indices(size_t dataset_size, int batch, int64_t step, uint64_t seed);

// Optimizes distill_loss. `resume` (optional) is a checkpoint written by a
// previous run with the same config. `on_step` sees every log entry.
DistillResult distill_run(DistillStudent& student, const Teacher& teacher, const std::vector<Sample>& data,
                          const DistillConfig& config, const std::string& resume = "",
                          const std::function<void(const DistillLogEntry&)>& on_step = {});

std::string format_log_entry(const DistillLogEntry& e);
DistillLogEntry parse_log_entry(const std::string& line);

}  // namespace irstd
