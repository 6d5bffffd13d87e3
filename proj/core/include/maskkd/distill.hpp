#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "maskkd/autodiff.hpp"
#include "maskkd/corpus.hpp"
#include "maskkd/masking.hpp"
#include "maskkd/model.hpp"
#include "maskkd/optim.hpp"
#include "maskkd/schedule.hpp"

namespace maskkd {

enum class DistillMask { salient, causal_only, region_visual, region_question };
enum class BudgetKind { self_paced, fixed };

DistillMask parse_distill_mask(const std::string& s);
std::string to_string(DistillMask m);
BudgetKind parse_budget_kind(const std::string& s);
std::string to_string(BudgetKind b);
ops::KlKind parse_kl_kind(const std::string& s);
std::string to_string(ops::KlKind k);

struct DistillConfig {
  double tau = kDefaultTau;
  double rho_min = kDefaultRhoMin;
  double rho_max = kDefaultRhoMax;
  double epsilon = kDefaultScheduleEpsilon;
  ops::KlKind loss_kind = ops::KlKind::reverse;
  DistillMask mask_kind = DistillMask::salient;
  SelectionStrategy selection_strategy = SelectionStrategy::high_attention;
  ThresholdMode threshold_mode = ThresholdMode::cumulative;
  double threshold_param = 0.0;
  BudgetKind budget = BudgetKind::self_paced;
  double fixed_rho = 0.4;
  // false: the auxiliary pass uses a frozen copy of the initial student.
  bool aux_weight_shared = true;
  bool exclude_immediate_prev = true;
  // false: the token-wise divergence driving the budget uses tau = 1.
  bool tau_scaled_divergence = true;
  double lr = 1e-3;
  int epochs = 2;
  int batch_size = 8;
  std::uint64_t seed = 1;
  int diag_interval = 50;  // optimizer steps per metrics row

  // Throws ConfigError naming the violated constraint.
  void validate() const;
};

// Everything the masked forward needs, computed without gradients from the
// teacher and auxiliary passes. Rows of teacher_logits, divergence and
// schedule follow prediction_rows(layout); selection rows follow the
// response span.
struct MaskPlan {
  AttentionMaskMatrix mask;
  Tensor teacher_logits;
  DivergenceTrace divergence;
  BudgetSchedule schedule;
  SalientSelection selection;
};

struct StepDiagnostics {
  double loss = 0.0;
  std::vector<double> r;             // per prediction row, concatenated over the batch
  std::vector<double> rho;           // per prediction row, concatenated over the batch
  std::vector<std::size_t> mask_sizes;  // |S_n| per response row
  std::vector<std::size_t> distances;   // row - masked position, every masked entry
  double visual_attention_mass = 0.0;   // masked pass, mean over prediction rows
  std::vector<SalientSelection> selections;
  std::vector<SegmentLayout> layouts;
};

// Teacher logits on the prediction rows under the causal mask.
Tensor teacher_logits(const Model& teacher, const Sequence& seq);

// Runs the auxiliary causal pass of `aux`, schedules budgets and builds the
// mask for cfg.mask_kind.
MaskPlan plan_mask(const Model& aux, const Sequence& seq, Tensor teacher_rows,
                   const DistillConfig& cfg, Rng& rng);

// KD divergence of the student under plan.mask against plan.teacher_logits.
// Records on `tape` when non-null. attention_out, when non-null, receives the
// layer/head-averaged attention of the masked pass.
Var masked_kd_loss(const Model& student, const Sequence& seq, const MaskPlan& plan,
                   const DistillConfig& cfg, Tape* tape, Tensor* attention_out = nullptr);

// Accumulates batch-mean gradients into the student's parameters without
// updating them. `frozen_aux` replaces the student in the auxiliary pass;
// `cached_teacher` (aligned with batch) skips the teacher forward.
StepDiagnostics distill_gradients(const Model& teacher, Model& student,
                                  std::span<const Sequence> batch, const DistillConfig& cfg,
                                  std::uint64_t step, const Model* frozen_aux = nullptr,
                                  std::span<const Tensor> cached_teacher = {});

// The model is its own teacher: a detached full-context pass supplies the
// targets and the attention; gradients flow through the masked pass only.
StepDiagnostics self_distill_gradients(Model& model, std::span<const Sequence> batch,
                                       const DistillConfig& cfg, std::uint64_t step);

// Gradients followed by one Adam update. Throws TrainingAbort, leaving the
// parameters untouched, when the loss is not finite.
StepDiagnostics distill_step(const Model& teacher, Model& student, std::span<const Sequence> batch,
                             const DistillConfig& cfg, Adam& opt, std::uint64_t step,
                             const Model* frozen_aux = nullptr,
                             std::span<const Tensor> cached_teacher = {});
StepDiagnostics self_distill_step(Model& model, std::span<const Sequence> batch,
                                  const DistillConfig& cfg, Adam& opt, std::uint64_t step);

// Mean over `rows` of the chosen KL between tau-scaled softmaxes of the two
// logit blocks (student rows selected by `rows`, teacher rows aligned).
double kd_loss(const Tensor& student_logits, std::span<const std::size_t> rows,
               const Tensor& teacher_rows, double tau, ops::KlKind kind);

struct TeacherTrainConfig {
  int epochs = 12;
  int batch_size = 8;
  double lr = 1e-3;
  double final_lr_fraction = 0.1;  // linear decay of lr to this fraction
  std::uint64_t seed = 1;
  int log_interval = 50;
};

struct LossLogRow {
  long step = 0;
  double loss = 0.0;
};

// Next-token cross-entropy on response positions. Throws DataError on an
// empty corpus. Returns one row per log interval (mean loss over it).
std::vector<LossLogRow> train_teacher(Model& model, std::span<const Sequence> data,
                                      const TeacherTrainConfig& cfg);

struct DistillSet {
  std::vector<TaskSample> samples;  // responses replaced by teacher traces
  std::size_t kept = 0;
  std::size_t total = 0;
  double kept_ratio() const noexcept {
    return total == 0 ? 0.0 : static_cast<double>(kept) / static_cast<double>(total);
  }
};

// Teacher answer at the slot after <answer> in a decoded trace; nullopt when
// the trace never opens an answer.
std::optional<int> traced_answer(std::span<const int> trace);

// Greedy-decodes the teacher on each prompt and keeps traces whose answer
// matches gold. Throws DataError reporting the accuracy when nothing is kept.
DistillSet build_distill_set(const Model& teacher, std::span<const TaskSample> samples,
                             std::size_t max_new);

struct MetricsRow {
  long step = 0;
  double loss = 0.0;
  double mean_r = 0.0;
  double mean_rho = 0.0;
  double mean_mask_count = 0.0;
  double mean_masked_distance = 0.0;
  double visual_attention_mass = 0.0;
};

std::vector<std::string> metrics_header();
std::vector<std::string> metrics_cells(const MetricsRow& row);

struct TrainingResult {
  std::vector<MetricsRow> metrics;
  long steps = 0;
  bool aborted = false;
  std::string abort_message;
};

struct TrainingHooks {
  // Called for the first sequence of every step that closes a metrics row.
  std::function<void(long step, const StepDiagnostics&)> on_diagnostics;
};

// Full distillation run: epochs of shuffled batches, one metrics row per
// diag_interval steps plus a final partial row. teacher == nullptr selects
// self-distillation. On a non-finite loss the run stops with the student at
// its last good parameters and result.aborted set.
TrainingResult run_training(const DistillConfig& cfg, const Model* teacher, Model& student,
                            std::span<const Sequence> data,
                            std::span<const Tensor> cached_teacher = {},
                            const TrainingHooks& hooks = {});

// Number of metrics rows run_training emits for a data set of n sequences.
std::size_t expected_metrics_rows(const DistillConfig& cfg, std::size_t n);

// CSV: example,position,r,rho for every prediction row of a plan.
void write_schedule_dump_header(std::ostream& os);
void write_schedule_dump(std::ostream& os, const StepDiagnostics& diag, std::size_t example);

}  // namespace maskkd
