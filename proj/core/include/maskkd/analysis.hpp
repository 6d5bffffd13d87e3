#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <span>
#include <vector>

#include "maskkd/corpus.hpp"
#include "maskkd/distill.hpp"
#include "maskkd/model.hpp"

namespace maskkd {

// All per-position analyses index the prediction rows of each sequence:
// position k is the row whose logits produce response token k.

struct AttentionCurve {
  std::vector<double> fraction;  // mean visual share of attention at position k
  std::vector<std::size_t> n;    // sequences contributing to position k

  // Mean over every (sequence, position) pair.
  double mean_ratio() const noexcept;
};

// Causal pass with attention capture per sequence; the visual share of row k
// is its visual-column mass over its total mass. Throws DataError when empty.
AttentionCurve visual_attention_curve(const Model& model, std::span<const Sequence> seqs);

struct IntervalKLProfile {
  std::vector<double> mean_kl;       // one entry per interval
  std::vector<std::size_t> count;    // tokens pooled into each interval

  double first_quartile_mean() const;
  double last_quartile_mean() const;
};

// Position k of an N-token trace falls into interval floor(k * K / N); each
// interval mean pools its tokens over all traces.
IntervalKLProfile bucket_profile(const std::vector<std::vector<double>>& per_trace, std::size_t k);

// Token-wise reverse KL(student || teacher) at temperature tau under causal
// masks, bucketed into k intervals. Throws DataError when traces is empty.
IntervalKLProfile interval_kl_decay(const Model& teacher, const Model& student,
                                    std::span<const Sequence> traces, std::size_t k,
                                    double tau = 1.0);

using DistanceHistogram = std::map<std::size_t, std::size_t>;

DistanceHistogram masked_distance_histogram(std::span<const SalientSelection> selections,
                                            std::span<const SegmentLayout> layouts);
DistanceHistogram masked_distance_histogram(std::span<const std::size_t> distances);

// Selections the masked student would train on for each sequence: teacher
// targets, the student's own auxiliary pass, and cfg's budget and strategy.
StepDiagnostics collect_selections(const Model& teacher, const Model& student,
                                   std::span<const Sequence> seqs, const DistillConfig& cfg);

// Mean over prediction rows of the averaged attention on each visual column.
std::vector<double> mean_visual_attention_map(const Model& model, const Sequence& seq);

struct AccuracyResult {
  std::size_t n = 0;
  std::size_t correct = 0;
  double fraction() const noexcept {
    return n == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(n);
  }
};

// Greedy decode from the prompt. The answer is the highest-scoring value
// symbol at the slot after the first <answer>; when the model never opens an
// answer, <answer> is appended to its output to locate the slot.
int predicted_answer(const Model& model, const TaskSample& sample, std::size_t max_new);
AccuracyResult answer_accuracy(const Model& model, std::span<const TaskSample> samples,
                               std::size_t max_new);

void write_curve_csv(const std::filesystem::path& path, const AttentionCurve& curve);
void write_profile_csv(const std::filesystem::path& path, const IntervalKLProfile& profile);
void write_histogram_csv(const std::filesystem::path& path, const DistanceHistogram& hist);
void write_map_csv(const std::filesystem::path& path, const std::vector<double>& map);
void write_accuracy_csv(const std::filesystem::path& path,
                        const std::vector<std::pair<std::string, AccuracyResult>>& rows);

}  // namespace maskkd
