#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

namespace nhmm {

/// One-cycle learning rate: linear warm-up from lr_min to lr_max over the
/// first half of the cycle, linear decay back to lr_min over the second half,
/// then constant lr_min. The cycle covers `cycle_fraction` of all steps.
struct OneCycleSchedule {
  double lr_min = 1.2e-5;
  double lr_max = 3.0e-4;
  double cycle_fraction = 0.8;
  std::uint64_t total_steps = 1;

  void validate() const {
    if (!(lr_min > 0.0) || !(lr_max >= lr_min))
      throw std::invalid_argument("learning rates must satisfy 0 < lr_min <= lr_max");
    if (!(cycle_fraction > 0.0 && cycle_fraction <= 1.0))
      throw std::invalid_argument("cycle_fraction must be in (0, 1]");
  }

  double cycle_steps() const noexcept {
    return std::max(1.0, cycle_fraction * static_cast<double>(total_steps));
  }

  double operator()(std::uint64_t step) const noexcept {
    const double cycle = cycle_steps();
    const double half = 0.5 * cycle;
    const double s = static_cast<double>(step);
    if (s >= cycle) return lr_min;
    const double frac = s <= half ? s / half : (cycle - s) / half;
    return lr_min + (lr_max - lr_min) * std::clamp(frac, 0.0, 1.0);
  }
};

/// Adam with Nesterov momentum (NAdam, constant momentum schedule):
///
///   m_t = b1 m_{t-1} + (1 - b1) g
///   v_t = b2 v_{t-1} + (1 - b2) g^2
///   m^  = b1 m_t / (1 - b1^{t+1}) + (1 - b1) g / (1 - b1^t)
///   v^  = v_t / (1 - b2^t)
///   x  -= lr m^ / (sqrt(v^) + eps)
///
/// Parameters are passed as an ordered list of blocks; the block layout must
/// stay the same across steps.
class NAdam {
 public:
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  std::uint64_t step_count() const noexcept { return step_; }
  const std::vector<std::vector<double>>& first_moments() const noexcept { return m_; }
  const std::vector<std::vector<double>>& second_moments() const noexcept { return v_; }

  void restore(std::uint64_t step, std::vector<std::vector<double>> m,
               std::vector<std::vector<double>> v) {
    step_ = step;
    m_ = std::move(m);
    v_ = std::move(v);
  }

  /// Descends along `grads`. Blocks whose `frozen` flag is set are left untouched.
  void update(std::span<const std::span<double>> params,
              std::span<const std::span<const double>> grads, double lr,
              std::span<const std::uint8_t> frozen = {}) {
    if (params.size() != grads.size()) throw std::invalid_argument("parameter/gradient block mismatch");
    if (m_.empty()) {
      for (const auto& p : params) {
        m_.emplace_back(p.size(), 0.0);
        v_.emplace_back(p.size(), 0.0);
      }
    }
    if (m_.size() != params.size()) throw std::invalid_argument("parameter block layout changed");
    ++step_;
    const double t = static_cast<double>(step_);
    const double bc1 = 1.0 - std::pow(beta1, t);
    const double bc1_next = 1.0 - std::pow(beta1, t + 1.0);
    const double bc2 = 1.0 - std::pow(beta2, t);
    for (std::size_t b = 0; b < params.size(); ++b) {
      if (params[b].size() != grads[b].size() || params[b].size() != m_[b].size())
        throw std::invalid_argument("parameter block size changed");
      if (!frozen.empty() && frozen[b]) continue;
      auto& m = m_[b];
      auto& v = v_[b];
      for (std::size_t i = 0; i < params[b].size(); ++i) {
        const double g = grads[b][i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        const double m_hat = beta1 * m[i] / bc1_next + (1.0 - beta1) * g / bc1;
        const double v_hat = v[i] / bc2;
        params[b][i] -= lr * m_hat / (std::sqrt(v_hat) + epsilon);
      }
    }
  }

 private:
  std::uint64_t step_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

}  // namespace nhmm
