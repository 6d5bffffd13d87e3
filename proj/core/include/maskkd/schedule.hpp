#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "maskkd/tensor.hpp"

namespace maskkd {

// Token-wise reverse KL between student and teacher at each response row.
struct DivergenceTrace {
  std::vector<double> r;
};

// Per-token cumulative-ratio thresholds.
struct BudgetSchedule {
  std::vector<double> rho;
  double rho_min = 0.0;
  double rho_max = 1.0;
  double epsilon = 0.0;
};

inline constexpr double kDefaultRhoMin = 0.3;
inline constexpr double kDefaultRhoMax = 0.5;
inline constexpr double kDefaultScheduleEpsilon = 1e-8;
inline constexpr double kDefaultTau = 2.0;

// r_n = KL(softmax(student_n / tau) || softmax(teacher_n / tau)) for each row.
// Probabilities are floored at kProbFloor inside the log only.
DivergenceTrace tokenwise_reverse_kl(const Tensor& student_logits, const Tensor& teacher_logits,
                                     double tau);

// rho_n = rho_min + (rho_max - rho_min) * sigmoid(s_n - mean(s)), with
// s_n = -log(r_n + epsilon). Lower divergence gets a larger budget.
BudgetSchedule self_paced_thresholds(const DivergenceTrace& trace, double rho_min, double rho_max,
                                     double epsilon);

BudgetSchedule static_threshold(std::size_t n, double rho);

// How a row's prefixes are chosen once they are ranked by attention.
enum class ThresholdMode {
  cumulative,           // smallest top set whose normalized mass reaches rho_n
  attention_threshold,  // every prefix whose normalized weight exceeds param
  masking_ratio,        // the top floor(param * K) of K eligible prefixes
};

struct ThresholdRule {
  ThresholdMode mode = ThresholdMode::cumulative;
  double param = 0.0;  // unused for cumulative
};

// Validates the parameter range for the mode (both alternatives take [0, 1]).
ThresholdRule make_threshold_rule(ThresholdMode mode, double param);

ThresholdMode parse_threshold_mode(const std::string& s);
std::string to_string(ThresholdMode m);

}  // namespace maskkd
