#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace cof {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // L2 penalty folded into the gradient
};

/// Adam with coupled L2 weight decay (the torch.optim.Adam update).
class Adam {
 public:
  Adam(std::size_t size, const AdamConfig& cfg) : cfg_(cfg), m_(size, 0.0), v_(size, 0.0) {}

  void step(std::span<double> params, std::span<const double> grad) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double c2 = 1.0 - std::pow(cfg_.beta2, t_);
    for (std::size_t i = 0; i < params.size(); ++i) {
      const double g = grad[i] + cfg_.weight_decay * params[i];
      m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
      v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g * g;
      params[i] -= cfg_.lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + cfg_.eps);
    }
  }

  long steps() const { return t_; }
  double lr() const { return cfg_.lr; }
  void set_lr(double lr) { cfg_.lr = lr; }

 private:
  AdamConfig cfg_;
  std::vector<double> m_;
  std::vector<double> v_;
  long t_ = 0;
};

}  // namespace cof
