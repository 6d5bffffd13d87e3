#include "maskkd/distill.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

#include "maskkd/csv.hpp"
#include "maskkd/error.hpp"

namespace maskkd {

DistillMask parse_distill_mask(const std::string& s) {
  if (s == "salient") return DistillMask::salient;
  if (s == "causal_only") return DistillMask::causal_only;
  if (s == "region_visual") return DistillMask::region_visual;
  if (s == "region_question") return DistillMask::region_question;
  throw EnumError("unknown mask kind '" + s +
                  "' (expected salient, causal_only, region_visual, region_question)");
}

std::string to_string(DistillMask m) {
  switch (m) {
    case DistillMask::salient: return "salient";
    case DistillMask::causal_only: return "causal_only";
    case DistillMask::region_visual: return "region_visual";
    case DistillMask::region_question: return "region_question";
  }
  return "?";
}

BudgetKind parse_budget_kind(const std::string& s) {
  if (s == "self_paced") return BudgetKind::self_paced;
  if (s == "fixed") return BudgetKind::fixed;
  throw EnumError("unknown budget '" + s + "' (expected self_paced, fixed)");
}

std::string to_string(BudgetKind b) {
  return b == BudgetKind::self_paced ? "self_paced" : "fixed";
}

ops::KlKind parse_kl_kind(const std::string& s) {
  if (s == "reverse") return ops::KlKind::reverse;
  if (s == "forward") return ops::KlKind::forward;
  if (s == "mixed") return ops::KlKind::mixed;
  throw EnumError("unknown loss kind '" + s + "' (expected reverse, forward, mixed)");
}

std::string to_string(ops::KlKind k) {
  switch (k) {
    case ops::KlKind::reverse: return "reverse";
    case ops::KlKind::forward: return "forward";
    case ops::KlKind::mixed: return "mixed";
  }
  return "?";
}

void DistillConfig::validate() const {
  if (!(tau > 0.0)) throw ConfigError("tau must be positive");
  if (!(rho_min >= 0.0 && rho_min <= rho_max && rho_max <= 1.0)) {
    throw ConfigError("need 0 <= rho_min <= rho_max <= 1");
  }
  if (!(epsilon > 0.0)) throw ConfigError("epsilon must be positive");
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (diag_interval < 1) throw ConfigError("diag_interval must be >= 1");
  if (!(fixed_rho >= 0.0 && fixed_rho <= 1.0)) throw ConfigError("fixed_rho must lie in [0, 1]");
  if (threshold_mode != ThresholdMode::cumulative) make_threshold_rule(threshold_mode, threshold_param);
}

namespace {

Tensor gather_rows(const Tensor& m, std::span<const std::size_t> rows) {
  Tensor out({rows.size(), m.cols()});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto src = m.row(rows[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

// Prediction-row budgets shifted onto response rows: response row i is the
// input position of prediction row i + 1. The last response row predicts
// nothing and keeps an empty budget.
std::vector<double> response_row_budgets(const std::vector<double>& rho_pred) {
  std::vector<double> out(rho_pred.size(), 0.0);
  for (std::size_t i = 0; i + 1 < rho_pred.size(); ++i) out[i] = rho_pred[i + 1];
  return out;
}

MaskPlan plan_from_aux(const Tensor& aux_logits, const std::optional<Tensor>& attention,
                       const Sequence& seq, Tensor teacher_rows, const DistillConfig& cfg,
                       Rng& rng) {
  const auto rows = prediction_rows(seq.layout);
  if (teacher_rows.rows() != rows.size() ||
      teacher_rows.cols() != aux_logits.cols()) {
    throw DimensionError("teacher logits " + shape_str(teacher_rows.shape()) + " do not cover " +
                         std::to_string(rows.size()) + " prediction rows");
  }
  MaskPlan plan;
  const Tensor aux_rows = gather_rows(aux_logits, rows);
  plan.divergence =
      tokenwise_reverse_kl(aux_rows, teacher_rows, cfg.tau_scaled_divergence ? cfg.tau : 1.0);
  for (std::size_t i = 0; i < plan.divergence.r.size(); ++i) {
    if (!std::isfinite(plan.divergence.r[i])) {
      throw TrainingAbort("non-finite token divergence at prediction row " + std::to_string(i) +
                          " (teacher or auxiliary logits are not finite)");
    }
  }
  plan.teacher_logits = std::move(teacher_rows);
  plan.schedule = cfg.budget == BudgetKind::self_paced
                      ? self_paced_thresholds(plan.divergence, cfg.rho_min, cfg.rho_max,
                                              cfg.epsilon)
                      : static_threshold(rows.size(), cfg.fixed_rho);

  switch (cfg.mask_kind) {
    case DistillMask::causal_only:
      plan.mask = causal_mask(seq.size());
      break;
    case DistillMask::region_visual:
      plan.mask = build_region_mask(Region::visual, seq.layout);
      break;
    case DistillMask::region_question:
      plan.mask = build_region_mask(Region::question, seq.layout);
      break;
    case DistillMask::salient: {
      const Tensor a_resp = extract_response_attention(attention, seq.layout);
      SelectionOptions opts;
      opts.strategy = cfg.selection_strategy;
      opts.rule = cfg.threshold_mode == ThresholdMode::cumulative
                      ? ThresholdRule{}
                      : make_threshold_rule(cfg.threshold_mode, cfg.threshold_param);
      opts.exclude_immediate_prev = cfg.exclude_immediate_prev;
      const auto budgets = response_row_budgets(plan.schedule.rho);
      plan.selection = select_salient_set(a_resp, budgets, seq.layout, opts, rng);
      plan.mask = build_salient_mask(plan.selection, seq.layout);
      break;
    }
  }
  return plan;
}

Rng step_rng(const DistillConfig& cfg, std::uint64_t step, std::size_t example) {
  return Rng(cfg.seed ^ 0x73656c656374ULL, step).fork(example);
}

double visual_mass(const Tensor& attention, const SegmentLayout& layout) {
  const auto rows = prediction_rows(layout);
  if (rows.empty() || layout.visual.empty()) return 0.0;
  double acc = 0.0;
  for (std::size_t r : rows) {
    double v = 0.0, total = 0.0;
    for (std::size_t c = 0; c <= r; ++c) {
      total += attention(r, c);
      if (layout.visual.contains(c)) v += attention(r, c);
    }
    if (total > 0.0) acc += v / total;
  }
  return acc / static_cast<double>(rows.size());
}

void record(StepDiagnostics& d, const MaskPlan& plan, const Sequence& seq) {
  d.r.insert(d.r.end(), plan.divergence.r.begin(), plan.divergence.r.end());
  d.rho.insert(d.rho.end(), plan.schedule.rho.begin(), plan.schedule.rho.end());
  const std::size_t n = seq.layout.response.size();
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t row = seq.layout.response.start + i;
    if (i < plan.selection.rows()) {
      d.mask_sizes.push_back(plan.selection.masked[i].size());
      for (std::size_t p : plan.selection.masked[i]) d.distances.push_back(row - p);
    } else {
      d.mask_sizes.push_back(0);
    }
  }
  d.selections.push_back(plan.selection);
  d.layouts.push_back(seq.layout);
}

// Shared body of the distillation variants. `teacher == nullptr` means the
// auxiliary pass doubles as the detached teacher.
StepDiagnostics accumulate(const Model* teacher, Model& student, const Model& aux,
                           std::span<const Sequence> batch, const DistillConfig& cfg,
                           std::uint64_t step, std::span<const Tensor> cached) {
  cfg.validate();
  if (batch.empty()) throw PreconditionError("distillation step on an empty batch");
  if (!cached.empty() && cached.size() != batch.size()) {
    throw DimensionError("cached teacher logits do not align with the batch");
  }
  StepDiagnostics diag;
  const double scale = 1.0 / static_cast<double>(batch.size());
  double loss_sum = 0.0, vis_sum = 0.0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const Sequence& seq = batch[b];
    seq.validate();
    if (seq.layout.response.empty()) throw DataError("sequence has an empty response");
    Rng rng = step_rng(cfg, step, b);
    const bool need_attention = cfg.mask_kind == DistillMask::salient;
    const auto aux_out = forward(aux, seq.tokens, causal_mask(seq.size()),
                                 ForwardOptions{.capture_attention = need_attention});
    Tensor target;
    if (teacher == nullptr) {
      target = gather_rows(aux_out.logits.value(), prediction_rows(seq.layout));
    } else if (!cached.empty()) {
      target = cached[b];
    } else {
      target = teacher_logits(*teacher, seq);
    }
    const MaskPlan plan =
        plan_from_aux(aux_out.logits.value(), aux_out.attention_avg, seq, std::move(target), cfg,
                      rng);
    Tape tape;
    Tensor attention;
    Var loss = masked_kd_loss(student, seq, plan, cfg, &tape, &attention);
    const double l = loss.value()[0];
    if (!std::isfinite(l)) {
      throw TrainingAbort("non-finite loss at step " + std::to_string(step) + ", batch item " +
                          std::to_string(b) + " (mean r " +
                          csv::num(std::accumulate(plan.divergence.r.begin(),
                                                   plan.divergence.r.end(), 0.0) /
                                   static_cast<double>(plan.divergence.r.size())) +
                          ", masked prefixes " + std::to_string(plan.selection.total_masked()) +
                          ")");
    }
    tape.backward(loss, scale);
    loss_sum += l;
    vis_sum += visual_mass(attention, seq.layout);
    record(diag, plan, seq);
  }
  diag.loss = loss_sum * scale;
  diag.visual_attention_mass = vis_sum * scale;
  return diag;
}

}  // namespace

Tensor teacher_logits(const Model& teacher, const Sequence& seq) {
  const auto out = forward(teacher, seq.tokens, causal_mask(seq.size()));
  return gather_rows(out.logits.value(), prediction_rows(seq.layout));
}

MaskPlan plan_mask(const Model& aux, const Sequence& seq, Tensor teacher_rows,
                   const DistillConfig& cfg, Rng& rng) {
  cfg.validate();
  seq.validate();
  const auto out = forward(aux, seq.tokens, causal_mask(seq.size()),
                           ForwardOptions{.capture_attention = cfg.mask_kind == DistillMask::salient});
  return plan_from_aux(out.logits.value(), out.attention_avg, seq, std::move(teacher_rows), cfg,
                       rng);
}

Var masked_kd_loss(const Model& student, const Sequence& seq, const MaskPlan& plan,
                   const DistillConfig& cfg, Tape* tape, Tensor* attention_out) {
  const auto rows = prediction_rows(seq.layout);
  ForwardOptions opts;
  opts.tape = tape;
  opts.capture_attention = attention_out != nullptr;
  auto out = forward(student, seq.tokens, plan.mask, opts);
  if (attention_out) *attention_out = std::move(*out.attention_avg);
  return ops::kd_divergence(tape, out.logits, rows, plan.teacher_logits, cfg.tau, cfg.loss_kind);
}

StepDiagnostics distill_gradients(const Model& teacher, Model& student,
                                  std::span<const Sequence> batch, const DistillConfig& cfg,
                                  std::uint64_t step, const Model* frozen_aux,
                                  std::span<const Tensor> cached_teacher) {
  const Model& aux = frozen_aux ? *frozen_aux : student;
  try {
    return accumulate(&teacher, student, aux, batch, cfg, step, cached_teacher);
  } catch (const TrainingAbort&) {
    zero_grads(student.parameters());
    throw;
  }
}

StepDiagnostics self_distill_gradients(Model& model, std::span<const Sequence> batch,
                                       const DistillConfig& cfg, std::uint64_t step) {
  try {
    return accumulate(nullptr, model, model, batch, cfg, step, {});
  } catch (const TrainingAbort&) {
    zero_grads(model.parameters());
    throw;
  }
}

StepDiagnostics distill_step(const Model& teacher, Model& student, std::span<const Sequence> batch,
                             const DistillConfig& cfg, Adam& opt, std::uint64_t step,
                             const Model* frozen_aux, std::span<const Tensor> cached_teacher) {
  auto diag = distill_gradients(teacher, student, batch, cfg, step, frozen_aux, cached_teacher);
  opt.step(student.parameters());
  return diag;
}

StepDiagnostics self_distill_step(Model& model, std::span<const Sequence> batch,
                                  const DistillConfig& cfg, Adam& opt, std::uint64_t step) {
  auto diag = self_distill_gradients(model, batch, cfg, step);
  opt.step(model.parameters());
  return diag;
}

double kd_loss(const Tensor& student_logits, std::span<const std::size_t> rows,
               const Tensor& teacher_rows, double tau, ops::KlKind kind) {
  Var logits(student_logits);
  return ops::kd_divergence(nullptr, logits, rows, teacher_rows, tau, kind).value()[0];
}

std::vector<LossLogRow> train_teacher(Model& model, std::span<const Sequence> data,
                                      const TeacherTrainConfig& cfg) {
  if (data.empty()) throw DataError("teacher training needs a nonempty corpus");
  if (cfg.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (cfg.log_interval < 1) throw ConfigError("log_interval must be >= 1");
  std::vector<LossLogRow> log;
  if (cfg.epochs <= 0) return log;

  const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
  const std::size_t steps_per_epoch = (data.size() + bs - 1) / bs;
  const long total_steps = static_cast<long>(steps_per_epoch) * cfg.epochs;
  AdamOptions ao;
  ao.lr = cfg.lr;
  Adam opt(ao);
  std::vector<std::size_t> order(data.size());
  long step = 0;
  double interval_sum = 0.0;
  long interval_n = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(cfg.seed ^ 0x7465616368ULL, static_cast<std::uint64_t>(epoch));
    rng.shuffle(order);
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      const std::size_t lo = s * bs, hi = std::min(lo + bs, data.size());
      const double scale = 1.0 / static_cast<double>(hi - lo);
      double batch_loss = 0.0;
      for (std::size_t k = lo; k < hi; ++k) {
        const Sequence& seq = data[order[k]];
        Tape tape;
        auto out = forward(model, seq.tokens, causal_mask(seq.size()), ForwardOptions{.tape = &tape});
        const auto rows = prediction_rows(seq.layout);
        const auto targets = response_targets(seq);
        Var loss = ops::cross_entropy(&tape, out.logits, rows, targets);
        if (!std::isfinite(loss.value()[0])) {
          throw TrainingAbort("non-finite teacher loss at step " + std::to_string(step));
        }
        tape.backward(loss, scale);
        batch_loss += loss.value()[0] * scale;
      }
      const double progress = total_steps > 1 ? static_cast<double>(step) /
                                                    static_cast<double>(total_steps - 1)
                                              : 0.0;
      ao.lr = cfg.lr * (1.0 - (1.0 - cfg.final_lr_fraction) * progress);
      opt.set_options(ao);
      opt.step(model.parameters());
      ++step;
      interval_sum += batch_loss;
      ++interval_n;
      if (interval_n == cfg.log_interval) {
        log.push_back({step, interval_sum / static_cast<double>(interval_n)});
        interval_sum = 0.0;
        interval_n = 0;
      }
    }
  }
  if (interval_n > 0) log.push_back({step, interval_sum / static_cast<double>(interval_n)});
  return log;
}

std::optional<int> traced_answer(std::span<const int> trace) {
  auto it = std::find(trace.begin(), trace.end(), Vocab::kAnswerBegin);
  if (it == trace.end() || std::next(it) == trace.end()) return std::nullopt;
  return *std::next(it);
}

DistillSet build_distill_set(const Model& teacher, std::span<const TaskSample> samples,
                             std::size_t max_new) {
  DistillSet set;
  set.total = samples.size();
  for (const auto& s : samples) {
    const auto prompt = s.prompt();
    const auto trace = generate(teacher, prompt, max_new, Vocab::kEnd, s.response);
    const auto ans = traced_answer(trace);
    if (!ans || *ans != s.answer) continue;
    TaskSample kept = s;
    kept.response = trace;
    set.samples.push_back(std::move(kept));
  }
  set.kept = set.samples.size();
  if (set.kept == 0) {
    throw DataError("teacher produced no correct trace on " + std::to_string(set.total) +
                    " prompts (accuracy 0)");
  }
  return set;
}

std::vector<std::string> metrics_header() {
  return {"step", "loss", "mean_r", "mean_rho", "mean_mask_count", "mean_masked_distance",
          "visual_attention_mass"};
}

std::vector<std::string> metrics_cells(const MetricsRow& row) {
  return {std::to_string(row.step),       csv::num(row.loss),
          csv::num(row.mean_r),           csv::num(row.mean_rho),
          csv::num(row.mean_mask_count),  csv::num(row.mean_masked_distance),
          csv::num(row.visual_attention_mass)};
}

std::size_t expected_metrics_rows(const DistillConfig& cfg, std::size_t n) {
  if (n == 0 || cfg.epochs <= 0) return 0;
  const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
  const std::size_t steps = (n + bs - 1) / bs * static_cast<std::size_t>(cfg.epochs);
  const std::size_t di = static_cast<std::size_t>(cfg.diag_interval);
  return (steps + di - 1) / di;
}

namespace {

struct MetricsAccumulator {
  double loss = 0.0, vis = 0.0;
  double r_sum = 0.0, rho_sum = 0.0, dist_sum = 0.0;
  std::size_t r_n = 0, mask_rows = 0, mask_total = 0, dist_n = 0;
  long steps = 0;

  void add(const StepDiagnostics& d) {
    loss += d.loss;
    vis += d.visual_attention_mass;
    for (double v : d.r) r_sum += v;
    for (double v : d.rho) rho_sum += v;
    r_n += d.r.size();
    mask_rows += d.mask_sizes.size();
    for (std::size_t m : d.mask_sizes) mask_total += m;
    for (std::size_t v : d.distances) dist_sum += static_cast<double>(v);
    dist_n += d.distances.size();
    ++steps;
  }
  MetricsRow flush(long step) {
    MetricsRow row;
    row.step = step;
    const double ns = static_cast<double>(steps);
    row.loss = loss / ns;
    row.visual_attention_mass = vis / ns;
    row.mean_r = r_n ? r_sum / static_cast<double>(r_n) : 0.0;
    row.mean_rho = r_n ? rho_sum / static_cast<double>(r_n) : 0.0;
    row.mean_mask_count =
        mask_rows ? static_cast<double>(mask_total) / static_cast<double>(mask_rows) : 0.0;
    row.mean_masked_distance = dist_n ? dist_sum / static_cast<double>(dist_n) : 0.0;
    *this = MetricsAccumulator{};
    return row;
  }
};

}  // namespace

TrainingResult run_training(const DistillConfig& cfg, const Model* teacher, Model& student,
                            std::span<const Sequence> data, std::span<const Tensor> cached_teacher,
                            const TrainingHooks& hooks) {
  cfg.validate();
  if (data.empty()) throw DataError("distillation needs a nonempty data set");
  if (!cached_teacher.empty() && cached_teacher.size() != data.size()) {
    throw DimensionError("cached teacher logits do not align with the data set");
  }
  if (teacher == nullptr && !cached_teacher.empty()) {
    throw PreconditionError("self-distillation cannot use cached teacher logits");
  }
  TrainingResult result;
  AdamOptions ao;
  ao.lr = cfg.lr;
  Adam opt(ao);
  std::optional<Model> frozen;
  if (!cfg.aux_weight_shared) frozen.emplace(student.clone());

  const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
  const std::size_t steps_per_epoch = (data.size() + bs - 1) / bs;
  std::vector<std::size_t> order(data.size());
  std::vector<Sequence> batch;
  std::vector<Tensor> batch_cache;
  MetricsAccumulator acc;
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs && !result.aborted; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(cfg.seed ^ 0x65706f6368ULL, static_cast<std::uint64_t>(epoch));
    rng.shuffle(order);
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      const std::size_t lo = s * bs, hi = std::min(lo + bs, data.size());
      batch.clear();
      batch_cache.clear();
      for (std::size_t k = lo; k < hi; ++k) {
        batch.push_back(data[order[k]]);
        if (!cached_teacher.empty()) batch_cache.push_back(cached_teacher[order[k]]);
      }
      StepDiagnostics diag;
      try {
        const auto ustep = static_cast<std::uint64_t>(step);
        diag = teacher ? distill_step(*teacher, student, batch, cfg, opt, ustep,
                                      frozen ? &*frozen : nullptr, batch_cache)
                       : self_distill_step(student, batch, cfg, opt, ustep);
      } catch (const TrainingAbort& e) {
        result.aborted = true;
        result.abort_message = e.what();
        break;
      }
      ++step;
      acc.add(diag);
      if (step % cfg.diag_interval == 0) {
        result.metrics.push_back(acc.flush(step));
        if (hooks.on_diagnostics) hooks.on_diagnostics(step, diag);
      }
    }
  }
  if (acc.steps > 0) result.metrics.push_back(acc.flush(step));
  result.steps = step;
  return result;
}

void write_schedule_dump_header(std::ostream& os) { os << "example,position,r,rho\n"; }

void write_schedule_dump(std::ostream& os, const StepDiagnostics& diag, std::size_t example) {
  std::size_t offset = 0;
  for (std::size_t s = 0; s < diag.layouts.size(); ++s) {
    const std::size_t n = diag.layouts[s].response.size();
    for (std::size_t i = 0; i < n && offset + i < diag.r.size(); ++i) {
      os << example + s << ',' << i << ',' << csv::num(diag.r[offset + i]) << ','
         << csv::num(diag.rho[offset + i]) << '\n';
    }
    offset += n;
  }
}

}  // namespace maskkd
