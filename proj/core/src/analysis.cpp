#include "maskkd/analysis.hpp"

#include <algorithm>
#include <cmath>

#include "maskkd/csv.hpp"
#include "maskkd/error.hpp"
#include "maskkd/schedule.hpp"

namespace maskkd {

double AttentionCurve::mean_ratio() const noexcept {
  double acc = 0.0;
  std::size_t total = 0;
  for (std::size_t k = 0; k < fraction.size(); ++k) {
    acc += fraction[k] * static_cast<double>(n[k]);
    total += n[k];
  }
  return total == 0 ? 0.0 : acc / static_cast<double>(total);
}

AttentionCurve visual_attention_curve(const Model& model, std::span<const Sequence> seqs) {
  if (seqs.empty()) throw DataError("attention curve needs at least one sequence");
  AttentionCurve curve;
  std::vector<double> sums;
  for (const auto& seq : seqs) {
    seq.validate();
    const auto out = forward(model, seq.tokens, causal_mask(seq.size()),
                             ForwardOptions{.capture_attention = true});
    const Tensor& a = *out.attention_avg;
    const auto rows = prediction_rows(seq.layout);
    if (rows.size() > sums.size()) {
      sums.resize(rows.size(), 0.0);
      curve.n.resize(rows.size(), 0);
    }
    for (std::size_t k = 0; k < rows.size(); ++k) {
      const std::size_t r = rows[k];
      double vis = 0.0, total = 0.0;
      for (std::size_t c = 0; c <= r; ++c) {
        total += a(r, c);
        if (seq.layout.visual.contains(c)) vis += a(r, c);
      }
      sums[k] += total > 0.0 ? std::clamp(vis / total, 0.0, 1.0) : 0.0;
      ++curve.n[k];
    }
  }
  curve.fraction.resize(sums.size());
  for (std::size_t k = 0; k < sums.size(); ++k)
    curve.fraction[k] = sums[k] / static_cast<double>(curve.n[k]);
  return curve;
}

namespace {

double mean_of_buckets(const IntervalKLProfile& p, std::size_t lo, std::size_t hi) {
  double acc = 0.0;
  std::size_t n = 0;
  for (std::size_t i = lo; i < hi; ++i) {
    acc += p.mean_kl[i] * static_cast<double>(p.count[i]);
    n += p.count[i];
  }
  return n == 0 ? 0.0 : acc / static_cast<double>(n);
}

std::size_t quarter(std::size_t k) { return std::max<std::size_t>(1, k / 4); }

}  // namespace

double IntervalKLProfile::first_quartile_mean() const {
  return mean_of_buckets(*this, 0, std::min(quarter(mean_kl.size()), mean_kl.size()));
}

double IntervalKLProfile::last_quartile_mean() const {
  const std::size_t k = mean_kl.size();
  return mean_of_buckets(*this, k - std::min(quarter(k), k), k);
}

IntervalKLProfile bucket_profile(const std::vector<std::vector<double>>& per_trace, std::size_t k) {
  if (k == 0) throw ConfigError("interval count must be positive");
  IntervalKLProfile p;
  p.mean_kl.assign(k, 0.0);
  p.count.assign(k, 0);
  for (const auto& trace : per_trace) {
    const std::size_t n = trace.size();
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t b = std::min(k - 1, i * k / n);
      p.mean_kl[b] += trace[i];
      ++p.count[b];
    }
  }
  for (std::size_t b = 0; b < k; ++b)
    if (p.count[b] > 0) p.mean_kl[b] /= static_cast<double>(p.count[b]);
  return p;
}

IntervalKLProfile interval_kl_decay(const Model& teacher, const Model& student,
                                    std::span<const Sequence> traces, std::size_t k, double tau) {
  if (traces.empty()) throw DataError("interval KL needs at least one trace");
  std::vector<std::vector<double>> per_trace;
  per_trace.reserve(traces.size());
  for (const auto& seq : traces) {
    seq.validate();
    const Tensor t = teacher_logits(teacher, seq);
    const Tensor s = teacher_logits(student, seq);
    per_trace.push_back(tokenwise_reverse_kl(s, t, tau).r);
  }
  return bucket_profile(per_trace, k);
}

DistanceHistogram masked_distance_histogram(std::span<const SalientSelection> selections,
                                            std::span<const SegmentLayout> layouts) {
  if (selections.size() != layouts.size()) {
    throw DimensionError("selections and layouts differ in count");
  }
  DistanceHistogram h;
  for (std::size_t s = 0; s < selections.size(); ++s) {
    const auto& sel = selections[s];
    for (std::size_t i = 0; i < sel.rows(); ++i) {
      const std::size_t row = layouts[s].response.start + i;
      for (std::size_t p : sel.masked[i]) ++h[row - p];
    }
  }
  return h;
}

DistanceHistogram masked_distance_histogram(std::span<const std::size_t> distances) {
  DistanceHistogram h;
  for (std::size_t d : distances) ++h[d];
  return h;
}

StepDiagnostics collect_selections(const Model& teacher, const Model& student,
                                   std::span<const Sequence> seqs, const DistillConfig& cfg) {
  StepDiagnostics all;
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    Rng rng = Rng(cfg.seed ^ 0x616e616c79ULL, i);
    const MaskPlan plan = plan_mask(student, seqs[i], teacher_logits(teacher, seqs[i]), cfg, rng);
    all.r.insert(all.r.end(), plan.divergence.r.begin(), plan.divergence.r.end());
    all.rho.insert(all.rho.end(), plan.schedule.rho.begin(), plan.schedule.rho.end());
    for (std::size_t j = 0; j < plan.selection.rows(); ++j) {
      all.mask_sizes.push_back(plan.selection.masked[j].size());
      const std::size_t row = seqs[i].layout.response.start + j;
      for (std::size_t p : plan.selection.masked[j]) all.distances.push_back(row - p);
    }
    all.selections.push_back(plan.selection);
    all.layouts.push_back(seqs[i].layout);
  }
  return all;
}

std::vector<double> mean_visual_attention_map(const Model& model, const Sequence& seq) {
  seq.validate();
  const auto out = forward(model, seq.tokens, causal_mask(seq.size()),
                           ForwardOptions{.capture_attention = true});
  const Tensor& a = *out.attention_avg;
  const auto rows = prediction_rows(seq.layout);
  std::vector<double> map(seq.layout.visual.size(), 0.0);
  if (rows.empty()) return map;
  for (std::size_t r : rows)
    for (std::size_t j = 0; j < map.size(); ++j) map[j] += a(r, seq.layout.visual.start + j);
  for (double& v : map) v /= static_cast<double>(rows.size());
  return map;
}

int predicted_answer(const Model& model, const TaskSample& sample, std::size_t max_new) {
  const Vocab vocab{model.config().vocab_size};
  auto context = sample.prompt();
  const std::size_t cap = static_cast<std::size_t>(model.config().max_seq_len);
  // Room for the forced <answer> token.
  const std::size_t budget = std::min(max_new, cap - std::min(cap, context.size() + 1));
  const auto trace = generate(model, context, budget, Vocab::kEnd, sample.response);
  auto it = std::find(trace.begin(), trace.end(), Vocab::kAnswerBegin);
  if (it != trace.end()) {
    context.insert(context.end(), trace.begin(), std::next(it));
  } else {
    auto stop = std::find(trace.begin(), trace.end(), Vocab::kEnd);
    context.insert(context.end(), trace.begin(), stop);
    context.push_back(Vocab::kAnswerBegin);
  }
  const auto out = forward(model, context, causal_mask(context.size()));
  const auto row = out.logits.value().row(context.size() - 1);
  int best = vocab.value(0);
  for (int v = vocab.value(0); v < vocab.value(vocab.n_values()); ++v)
    if (row[static_cast<std::size_t>(v)] > row[static_cast<std::size_t>(best)]) best = v;
  return best;
}

AccuracyResult answer_accuracy(const Model& model, std::span<const TaskSample> samples,
                               std::size_t max_new) {
  AccuracyResult res;
  for (const auto& s : samples) {
    ++res.n;
    if (predicted_answer(model, s, max_new) == s.answer) ++res.correct;
  }
  return res;
}

void write_curve_csv(const std::filesystem::path& path, const AttentionCurve& curve) {
  csv::Writer w(path, {"position", "fraction", "n"});
  for (std::size_t k = 0; k < curve.fraction.size(); ++k)
    w.row({std::to_string(k), csv::num(curve.fraction[k]), std::to_string(curve.n[k])});
  w.close();
}

void write_profile_csv(const std::filesystem::path& path, const IntervalKLProfile& profile) {
  csv::Writer w(path, {"interval", "mean_kl"});
  for (std::size_t b = 0; b < profile.mean_kl.size(); ++b)
    w.row({std::to_string(b), csv::num(profile.mean_kl[b])});
  w.close();
}

void write_histogram_csv(const std::filesystem::path& path, const DistanceHistogram& hist) {
  csv::Writer w(path, {"distance", "count"});
  for (const auto& [d, c] : hist) w.row({std::to_string(d), std::to_string(c)});
  w.close();
}

void write_map_csv(const std::filesystem::path& path, const std::vector<double>& map) {
  csv::Writer w(path, {"visual_position", "mean_attention"});
  for (std::size_t j = 0; j < map.size(); ++j) w.row({std::to_string(j), csv::num(map[j])});
  w.close();
}

void write_accuracy_csv(const std::filesystem::path& path,
                        const std::vector<std::pair<std::string, AccuracyResult>>& rows) {
  csv::Writer w(path, {"split", "n", "correct", "fraction"});
  for (const auto& [split, r] : rows)
    w.row({split, std::to_string(r.n), std::to_string(r.correct), csv::num(r.fraction())});
  w.close();
}

}  // namespace maskkd
