#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "dstcs/core.hpp"
#include "dstcs/nn/tensor.hpp"

namespace dstcs {

enum class LrSchedule { polynomial, constant };

inline double learning_rate(LrSchedule schedule, double lr0, long iteration, long max_iterations, double power = 0.9) {
  if (schedule == LrSchedule::constant || max_iterations <= 0) return lr0;
  const double frac = std::clamp(static_cast<double>(iteration) / static_cast<double>(max_iterations), 0.0, 1.0);
  return lr0 * std::pow(1.0 - frac, power);
}

/// SGD with momentum and L2 weight decay folded into the gradient:
///   v <- momentum * v + (g + wd * p);  p <- p - lr * v
/// Only the velocity buffers live here; parameters are passed to step().
class Sgd {
 public:
  Sgd() = default;
  Sgd(const std::vector<nn::Param*>& params, double momentum, double weight_decay)
      : momentum_(momentum), weight_decay_(weight_decay) {
    for (const auto* p : params) velocity_.emplace_back(p->value.size(), 0.0f);
  }

  void step(const std::vector<nn::Param*>& params, double lr) {
    if (params.size() != velocity_.size()) throw ShapeError("Sgd: parameter list does not match optimizer state");
    const auto m = static_cast<float>(momentum_), wd = static_cast<float>(weight_decay_), rate = static_cast<float>(lr);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& v = velocity_[i];
      auto& value = params[i]->value;
      const auto& grad = params[i]->grad;
      if (v.size() != value.size()) throw ShapeError("Sgd: tensor size changed for " + params[i]->name);
      for (std::size_t j = 0; j < v.size(); ++j) {
        v[j] = m * v[j] + grad[j] + wd * value[j];
        value[j] -= rate * v[j];
      }
    }
  }

  std::vector<std::vector<float>>& velocity() noexcept { return velocity_; }
  const std::vector<std::vector<float>>& velocity() const noexcept { return velocity_; }

 private:
  double momentum_ = 0.9, weight_decay_ = 0.0;
  std::vector<std::vector<float>> velocity_;
};

}  // namespace dstcs
