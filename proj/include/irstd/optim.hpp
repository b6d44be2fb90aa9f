#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "irstd/tensor.hpp"

namespace irstd {

class Checkpoint;

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

// Decoupled weight decay Adam over a fixed list of named parameters.
class AdamW {
 public:
  AdamW(std::vector<std::pair<std::string, Tensor>> params, const AdamWConfig& config);

  // One update with learning rate `lr`; parameters without a gradient buffer
  // are skipped. lr == 0 leaves every value untouched.
  void step(double lr);
  void zero_grad();
  int64_t steps() const { return steps_; }

  // State entries "optim.m.<name>", "optim.v.<name>", "optim.steps".
  void save_state(Checkpoint& ck) const;
  void load_state(const Checkpoint& ck);

 private:
  std::vector<std::pair<std::string, Tensor>> params_;
  std::vector<std::vector<double>> m_, v_;
  AdamWConfig config_;
  int64_t steps_ = 0;
};

// base * gamma^k where k counts milestones floor(f * total) already reached.
double multistep_lr(double base, int64_t step, int64_t total,
                    const std::vector<double>& fractions = {0.9, 0.95}, double gamma = 0.1);

// Linear warm-up reaching `base` at step warmup - 1, then half-cosine decay to
// `min_lr` at step total - 1.
double cosine_lr(double base, double min_lr, int64_t step, int64_t total, int64_t warmup);

// Global L2 norm of all gradients; scales them down to max_norm when larger.
double clip_grad_norm(const std::vector<Tensor>& params, double max_norm);

}  // namespace irstd
