#pragma once

#include <vector>

#include "maskkd/autodiff.hpp"

namespace maskkd {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction. Moment buffers are keyed by parameter order,
// so the same parameter list must be passed to every step.
class Adam {
 public:
  explicit Adam(AdamOptions opts = {}) : opts_(opts) {}

  // Updates every parameter in place and clears its gradient.
  // Throws UnreadyParameterError if a parameter has no gradient.
  void step(std::vector<Var>& params);

  const AdamOptions& options() const noexcept { return opts_; }
  // Takes effect from the next step; moment state is kept.
  void set_options(const AdamOptions& opts) noexcept { opts_ = opts; }
  long steps() const noexcept { return t_; }

 private:
  AdamOptions opts_;
  long t_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

void zero_grads(std::vector<Var>& params);

}  // namespace maskkd
