#include "irstd/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "irstd/checkpoint.hpp"

namespace irstd {

AdamW::AdamW(std::vector<std::pair<std::string, Tensor>> params, const AdamWConfig& config)
    : params_(std::move(params)), config_(config) {
  for (const auto& [name, t] : params_) {
    m_.emplace_back(static_cast<size_t>(t.numel()), 0.0);
    v_.emplace_back(static_cast<size_t>(t.numel()), 0.0);
  }
}

void AdamW::step(double lr) {
  ++steps_;
  if (lr == 0.0) return;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  for (size_t p = 0; p < params_.size(); ++p) {
    Tensor& t = params_[p].second;
    if (!t.has_grad()) continue;
    auto g = t.grad();
    auto x = t.data();
    auto& m = m_[p];
    auto& v = v_[p];
    for (size_t i = 0; i < x.size(); ++i) {
      m[i] = b1 * m[i] + (1 - b1) * g[i];
      v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i];
      x[i] -= lr * config_.weight_decay * x[i];
      x[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + config_.eps);
    }
  }
}

void AdamW::zero_grad() {
  for (auto& [name, t] : params_) t.zero_grad();
}

void AdamW::save_state(Checkpoint& ck) const {
  for (size_t p = 0; p < params_.size(); ++p) {
    const auto& shape = params_[p].second.shape();
    ck.put("optim.m." + params_[p].first, Tensor(shape, m_[p]));
    ck.put("optim.v." + params_[p].first, Tensor(shape, v_[p]));
  }
  ck.put_text("optim.steps", std::to_string(steps_));
}

void AdamW::load_state(const Checkpoint& ck) {
  for (size_t p = 0; p < params_.size(); ++p) {
    const Tensor& m = ck.get("optim.m." + params_[p].first);
    const Tensor& v = ck.get("optim.v." + params_[p].first);
    if (m.numel() != params_[p].second.numel() || v.numel() != params_[p].second.numel())
      throw std::runtime_error("optimizer state size mismatch for " + params_[p].first);
    m_[p].assign(m.data().begin(), m.data().end());
    v_[p].assign(v.data().begin(), v.data().end());
  }
  steps_ = std::stoll(ck.text("optim.steps"));
}

double multistep_lr(double base, int64_t step, int64_t total, const std::vector<double>& fractions,
                    double gamma) {
  double lr = base;
  for (double f : fractions)
    if (step >= static_cast<int64_t>(std::floor(f * static_cast<double>(total)))) lr *= gamma;
  return lr;
}

double cosine_lr(double base, double min_lr, int64_t step, int64_t total, int64_t warmup) {
  // short runs: warm-up shrinks so the last step still lands on min_lr
  warmup = std::min(warmup, total - 1);
  if (warmup > 0 && step < warmup - 1)
    return base * static_cast<double>(step + 1) / static_cast<double>(warmup);
  const int64_t start = std::max<int64_t>(warmup - 1, 0);
  const int64_t span = total - 1 - start;
  if (span <= 0) return step >= total - 1 ? min_lr : base;
  const double p = std::min(1.0, static_cast<double>(step - start) / static_cast<double>(span));
  return min_lr + (base - min_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * p));
}

double clip_grad_norm(const std::vector<Tensor>& params, double max_norm) {
  double sq = 0;
  for (const auto& t : params)
    if (t.has_grad())
      for (double g : const_cast<Tensor&>(t).grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (const auto& t : params)
      if (t.has_grad())
        for (double& g : const_cast<Tensor&>(t).grad()) g *= s;
  }
  return norm;
}

}  // namespace irstd
