#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <string>

#include "smolora/errors.hpp"
#include "smolora/tape.hpp"

namespace smolora {

// Half-cosine decay from base_rate at step 0 down to 0 at total_steps.
class CosineSchedule {
 public:
  CosineSchedule(double base_rate, std::size_t total_steps)
      : base_rate_(base_rate), total_steps_(total_steps) {
    if (!(base_rate > 0.0)) throw ArgumentError("cosine schedule: base rate must be positive");
    if (total_steps == 0) throw ArgumentError("cosine schedule: total steps must be positive");
  }

  double base_rate() const noexcept { return base_rate_; }
  std::size_t total_steps() const noexcept { return total_steps_; }
  std::size_t current_step() const noexcept { return step_; }

  double rate() const {
    const double progress = static_cast<double>(step_) / static_cast<double>(total_steps_);
    const double r = base_rate_ * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
    return r < 0.0 ? 0.0 : r;
  }

  void set_step(std::size_t step) {
    if (step > total_steps_) {
      throw ArgumentError("cosine schedule: step " + std::to_string(step) + " beyond " +
                          std::to_string(total_steps_));
    }
    step_ = step;
  }

  void advance() { set_step(step_ + 1); }

 private:
  double base_rate_;
  std::size_t total_steps_;
  std::size_t step_ = 0;
};

inline double schedule_rate(const CosineSchedule& s) { return s.rate(); }

// p <- p - rate * g for every trainable parameter that has a gradient.
// Frozen parameters are skipped even if a gradient is supplied.
inline void sgd_step(std::span<Parameter* const> params, const GradientMap& grads, double rate) {
  for (Parameter* p : params) {
    if (!p->trainable()) continue;
    auto it = grads.find(p);
    if (it == grads.end()) continue;
    const Matrix& g = it->second;
    if (!g.same_shape(p->value())) {
      throw ShapeError("sgd_step: gradient " + g.shape() + " for parameter '" + p->name() +
                       "' of shape " + p->value().shape());
    }
    auto pv = p->value().data();
    auto gv = g.data();
    for (std::size_t i = 0; i < pv.size(); ++i) pv[i] -= rate * gv[i];
  }
}

}  // namespace smolora
