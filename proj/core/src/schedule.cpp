#include "maskkd/schedule.hpp"

#include <algorithm>
#include <cmath>

#include "maskkd/error.hpp"

namespace maskkd {

DivergenceTrace tokenwise_reverse_kl(const Tensor& student_logits, const Tensor& teacher_logits,
                                     double tau) {
  if (student_logits.shape() != teacher_logits.shape() || student_logits.rank() != 2) {
    throw DimensionError("token-wise KL needs matching logit blocks, got " +
                         shape_str(student_logits.shape()) + " and " +
                         shape_str(teacher_logits.shape()));
  }
  if (!(tau > 0.0)) throw RangeError("temperature must be positive");
  Tensor ps = softmax_rows(student_logits, tau);
  Tensor pt = softmax_rows(teacher_logits, tau);
  DivergenceTrace out;
  out.r.reserve(ps.rows());
  for (std::size_t i = 0; i < ps.rows(); ++i) {
    const auto s = ps.row(i), t = pt.row(i);
    double kl = 0.0;
    for (std::size_t y = 0; y < s.size(); ++y)
      kl += s[y] * (std::log(std::max(s[y], kProbFloor)) - std::log(std::max(t[y], kProbFloor)));
    out.r.push_back(kl);
  }
  return out;
}

BudgetSchedule self_paced_thresholds(const DivergenceTrace& trace, double rho_min, double rho_max,
                                     double epsilon) {
  if (!(rho_min <= rho_max)) throw ConfigError("rho_min must not exceed rho_max");
  if (!(epsilon > 0.0)) throw ConfigError("schedule epsilon must be positive");
  const std::size_t n = trace.r.size();
  if (n == 0) throw PreconditionError("self-paced schedule needs at least one token");
  std::vector<double> score(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double r = trace.r[i];
    if (!std::isfinite(r) || r < 0.0) {
      throw DataError("divergence trace entry " + std::to_string(i) +
                      " is not a finite nonnegative value");
    }
    score[i] = -std::log(r + epsilon);
  }
  // Centre on the mean, accumulated in sorted order as offsets from the
  // minimum: the result is permutation invariant and exact for constant input.
  std::vector<double> sorted = score;
  std::sort(sorted.begin(), sorted.end());
  double offset_sum = 0.0;
  for (double s : sorted) offset_sum += s - sorted.front();
  const double mean = sorted.front() + offset_sum / static_cast<double>(n);

  // sigmoid(x) = (1 + tanh(x / 2)) / 2, so rho = mid + half * tanh(x / 2).
  const double mid = 0.5 * rho_min + 0.5 * rho_max;
  const double half = 0.5 * rho_max - 0.5 * rho_min;
  BudgetSchedule out{std::vector<double>(n), rho_min, rho_max, epsilon};
  for (std::size_t i = 0; i < n; ++i) {
    const double rho = mid + half * std::tanh(0.5 * (score[i] - mean));
    out.rho[i] = std::clamp(rho, rho_min, rho_max);
  }
  return out;
}

BudgetSchedule static_threshold(std::size_t n, double rho) {
  if (!(rho >= 0.0 && rho <= 1.0)) {
    throw RangeError("static threshold " + std::to_string(rho) + " outside [0, 1]");
  }
  return BudgetSchedule{std::vector<double>(n, rho), rho, rho, 0.0};
}

ThresholdRule make_threshold_rule(ThresholdMode mode, double param) {
  switch (mode) {
    case ThresholdMode::cumulative: return {mode, 0.0};
    case ThresholdMode::attention_threshold:
    case ThresholdMode::masking_ratio:
      if (!(param >= 0.0 && param <= 1.0)) {
        throw RangeError(to_string(mode) + " parameter " + std::to_string(param) +
                         " outside [0, 1]");
      }
      return {mode, param};
  }
  throw EnumError("unknown threshold mode");
}

ThresholdMode parse_threshold_mode(const std::string& s) {
  if (s == "cumulative") return ThresholdMode::cumulative;
  if (s == "attention_threshold") return ThresholdMode::attention_threshold;
  if (s == "masking_ratio") return ThresholdMode::masking_ratio;
  throw EnumError("unknown threshold mode '" + s +
                  "' (expected cumulative, attention_threshold or masking_ratio)");
}

std::string to_string(ThresholdMode m) {
  switch (m) {
    case ThresholdMode::cumulative: return "cumulative";
    case ThresholdMode::attention_threshold: return "attention_threshold";
    case ThresholdMode::masking_ratio: return "masking_ratio";
  }
  return "?";
}

}  // namespace maskkd
