#pragma once

#include "pomni/numerics/autodiff.hpp"

#include <cmath>
#include <map>
#include <numbers>
#include <stdexcept>
#include <string>

namespace pomni {

/// Linear warmup to the peak rate, then cosine decay to the minimal rate.
/// The returned rate never drops below the minimal rate.
struct LrSchedule {
  double peak_lr = 1e-3;
  double min_lr = 1e-5;
  long warmup_steps = 0;
  long total_steps = 1;

  double at(long step) const {
    double lr;
    if (step < warmup_steps) {
      lr = peak_lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
    } else {
      const long span = std::max(1L, total_steps - 1 - warmup_steps);
      const double progress = std::min(1.0, static_cast<double>(step - warmup_steps) / static_cast<double>(span));
      lr = min_lr + 0.5 * (peak_lr - min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
    }
    return std::max(lr, min_lr);
  }
};

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

class NonFiniteGradient : public std::runtime_error {
 public:
  explicit NonFiniteGradient(const std::string& param)
      : std::runtime_error("non-finite gradient for parameter " + param), param_(param) {}
  const std::string& param() const { return param_; }

 private:
  std::string param_;
};

/// Scales gradients so their global norm is at most max_norm; returns the
/// norm before clipping. max_norm <= 0 disables clipping.
template <typename Scalar>
double clip_grad_norm(GradStore<Scalar>& grads, double max_norm) {
  const double norm = std::sqrt(grads.squared_norm());
  if (max_norm > 0.0 && norm > max_norm) grads.scale(static_cast<Scalar>(max_norm / (norm + 1e-6)));
  return norm;
}

/// Adam with decoupled weight decay. Decay applies to tensors of rank >= 2.
template <typename Scalar>
class AdamW {
 public:
  struct Moments {
    Tensor<Scalar> first;
    Tensor<Scalar> second;
  };

  explicit AdamW(AdamWConfig config = {}) : config_(config) {}

  /// Applies one update. All gradients are validated before any parameter
  /// changes; a non-finite entry aborts the whole step.
  void step(ParamStore<Scalar>& params, const GradStore<Scalar>& grads, double lr) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& p = params[i];
      if (!p.trainable) continue;
      if (const auto* g = grads.find(p.id); g && !g->all_finite()) throw NonFiniteGradient(p.name);
    }
    ++steps_;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
    const auto b1 = static_cast<Scalar>(config_.beta1);
    const auto b2 = static_cast<Scalar>(config_.beta2);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i];
      if (!p.trainable) continue;
      const auto* g = grads.find(p.id);
      if (!g) continue;
      auto& m = moments_[p.name];
      if (m.first.shape() != p.value.shape()) {
        m.first = Tensor<Scalar>::zeros(p.value.shape());
        m.second = Tensor<Scalar>::zeros(p.value.shape());
      }
      m.first.array() = b1 * m.first.array() + (Scalar(1) - b1) * g->array();
      m.second.array() = b2 * m.second.array() + (Scalar(1) - b2) * g->array().square();
      const auto step_size = static_cast<Scalar>(lr / bc1);
      const auto denom_scale = static_cast<Scalar>(1.0 / std::sqrt(bc2));
      if (config_.weight_decay > 0.0 && p.value.rank() >= 2) {
        p.value.array() *= static_cast<Scalar>(1.0 - lr * config_.weight_decay);
      }
      p.value.array() -= step_size * m.first.array() /
                         (m.second.array().sqrt() * denom_scale + static_cast<Scalar>(config_.eps));
    }
  }

  long steps() const { return steps_; }
  void set_steps(long steps) { steps_ = steps; }
  const AdamWConfig& config() const { return config_; }
  std::map<std::string, Moments>& moments() { return moments_; }
  const std::map<std::string, Moments>& moments() const { return moments_; }

 private:
  AdamWConfig config_;
  long steps_ = 0;
  std::map<std::string, Moments> moments_;
};

}  // namespace pomni
