#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "maskkd/analysis.hpp"
#include "maskkd/error.hpp"
#include "rigs.hpp"

using namespace maskkd;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny(std::uint64_t seed, int d = 16, int layers = 1) {
  return ModelConfig{.vocab_size = 64, .d_model = d, .n_heads = 2, .n_layers = layers,
                     .max_seq_len = 64, .seed = seed};
}

// Zero query/key/value projections: every row attends uniformly to its
// visible context.
Model uniform_attention(std::uint64_t seed) {
  Model m(tiny(seed, 16, 2));
  for (std::size_t i = 0; i < m.parameters().size(); ++i)
    if (m.parameter_names()[i].find("attn.qkv") != std::string::npos)
      m.parameters()[i].mutable_value().fill(0.0);
  return m;
}

std::vector<TaskSample> samples(std::size_t n, std::uint64_t seed = 3) {
  CorpusParams p;
  p.n_facts = 4;
  p.restatements = 3;
  return gen_corpus(n, seed, p);
}

std::vector<Sequence> seqs_of(const std::vector<TaskSample>& s) {
  std::vector<Sequence> out;
  for (const auto& x : s) out.push_back(layout_of(x, 64));
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("attention curve under uniform attention follows the counting formula") {
  const Model m = uniform_attention(1);
  const auto seqs = seqs_of(samples(1));
  const auto curve = visual_attention_curve(m, seqs);
  const auto& layout = seqs[0].layout;
  REQUIRE(curve.fraction.size() == layout.response.size());
  for (std::size_t k = 0; k < curve.fraction.size(); ++k) {
    const double visible = static_cast<double>(layout.response.start + k);  // row + 1
    CHECK(std::abs(curve.fraction[k] - static_cast<double>(layout.visual.size()) / visible) < 1e-12);
    CHECK(curve.n[k] == 1);
  }
}

TEST_CASE("attention curve edge cases and invariants") {
  const Model m(tiny(2));
  Sequence no_visual;
  no_visual.tokens = {Vocab::kQueryOneHop, 8, 1, 8, 40, 2, 3, 40, 4};
  no_visual.layout = SegmentLayout::from_lengths(0, 2, 7);
  const auto flat = visual_attention_curve(m, {&no_visual, 1});
  for (double f : flat.fraction) CHECK(f == 0.0);
  CHECK_THROWS_AS(visual_attention_curve(m, {}), DataError);

  auto seqs = seqs_of(samples(6));
  const auto a = visual_attention_curve(m, seqs);
  for (double f : a.fraction) CHECK((f >= 0.0 && f <= 1.0));
  std::reverse(seqs.begin(), seqs.end());
  std::swap(seqs[1], seqs[4]);
  const auto b = visual_attention_curve(m, seqs);
  REQUIRE(a.fraction.size() == b.fraction.size());
  for (std::size_t k = 0; k < a.fraction.size(); ++k)
    CHECK(std::abs(a.fraction[k] - b.fraction[k]) < 1e-12);
  CHECK(std::abs(a.mean_ratio() - b.mean_ratio()) < 1e-12);
}

TEST_CASE("interval KL profile") {
  const Model m(tiny(4));
  const Model copy = m.clone();
  const auto seqs = seqs_of(samples(5));
  const auto zero = interval_kl_decay(m, copy, seqs, 8);
  for (double v : zero.mean_kl) CHECK(v == 0.0);
  CHECK_THROWS_AS(interval_kl_decay(m, copy, {}, 8), DataError);

  const Model other(tiny(5));
  const auto one = interval_kl_decay(m, other, seqs, 1);
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& s : seqs) {
    const auto r = tokenwise_reverse_kl(teacher_logits(other, s), teacher_logits(m, s), 1.0).r;
    for (double v : r) total += v;
    n += r.size();
  }
  REQUIRE(one.mean_kl.size() == 1);
  CHECK(std::abs(one.mean_kl[0] - total / static_cast<double>(n)) < 1e-12);
  CHECK(one.count[0] == n);
}

TEST_CASE("bucket means match hand computation") {
  // Trace A: 8 tokens over 4 intervals, two per interval. Trace B: 3 tokens
  // land in intervals 0, 1 and 2 (floor(i * 4 / 3)).
  const auto p = bucket_profile({{1, 2, 3, 4, 5, 6, 7, 8}, {10, 20, 30}}, 4);
  CHECK(p.count == std::vector<std::size_t>{3, 3, 3, 2});
  CHECK(std::abs(p.mean_kl[0] - 13.0 / 3) < 1e-12);
  CHECK(std::abs(p.mean_kl[1] - 27.0 / 3) < 1e-12);
  CHECK(std::abs(p.mean_kl[2] - 41.0 / 3) < 1e-12);
  CHECK(std::abs(p.mean_kl[3] - 7.5) < 1e-12);
  CHECK(std::abs(p.first_quartile_mean() - 13.0 / 3) < 1e-12);
  CHECK(std::abs(p.last_quartile_mean() - 7.5) < 1e-12);
  // A trace shorter than k fills the leading intervals only.
  const auto s = bucket_profile({{5}}, 4);
  CHECK(s.count == std::vector<std::size_t>{1, 0, 0, 0});
  CHECK(s.mean_kl[0] == 5.0);
  // 8 intervals: quartiles pool two intervals each.
  const auto e = bucket_profile({{1, 1, 2, 2, 3, 3, 4, 4, 5, 5, 6, 6, 7, 7, 8, 8}}, 8);
  CHECK(e.first_quartile_mean() == 1.5);
  CHECK(e.last_quartile_mean() == 7.5);
  CHECK_THROWS_AS(bucket_profile({{1}}, 0), ConfigError);
}

TEST_CASE("masked distance histogram") {
  CHECK(masked_distance_histogram(std::vector<std::size_t>{}).empty());
  const auto h = masked_distance_histogram(std::vector<std::size_t>{3});
  CHECK(h == DistanceHistogram{{3, 1}});

  const SegmentLayout layout = SegmentLayout::from_lengths(2, 2, 5);
  SalientSelection sel;
  sel.masked = {{}, {}, {}, {}, {}};
  CHECK(masked_distance_histogram(std::vector<SalientSelection>{sel},
                                  std::vector<SegmentLayout>{layout})
            .empty());
  sel.masked[4] = {4, 6};  // row 8
  sel.masked[3] = {4};     // row 7
  const auto g = masked_distance_histogram(std::vector<SalientSelection>{sel},
                                           std::vector<SegmentLayout>{layout});
  CHECK(g == DistanceHistogram{{2, 1}, {3, 1}, {4, 1}});
  CHECK_THROWS_AS(masked_distance_histogram(std::vector<SalientSelection>{sel},
                                            std::vector<SegmentLayout>{}),
                  DimensionError);

  const Model teacher(tiny(6, 24));
  const Model student(tiny(7));
  const auto seqs = seqs_of(samples(4));
  const auto diag = collect_selections(teacher, student, seqs, DistillConfig{});
  const auto hist = masked_distance_histogram(diag.selections, diag.layouts);
  std::size_t sum = 0;
  for (auto [d, c] : hist) sum += c;
  CHECK(sum == diag.distances.size());
  CHECK(hist.count(1) == 0);
  CHECK(hist == masked_distance_histogram(diag.distances));
}

TEST_CASE("mean visual attention map") {
  const Model u = uniform_attention(2);
  const auto seq = seqs_of(samples(1))[0];
  const auto flat = mean_visual_attention_map(u, seq);
  REQUIRE(flat.size() == seq.layout.visual.size());
  for (double v : flat) CHECK(std::abs(v - flat[0]) < 1e-15);

  const Model m(tiny(8));
  const auto map = mean_visual_attention_map(m, seq);
  const auto out =
      forward(m, seq.tokens, causal_mask(seq.size()), ForwardOptions{.capture_attention = true});
  const auto rows = prediction_rows(seq.layout);
  for (std::size_t j = 0; j < map.size(); ++j) {
    CHECK(map[j] >= 0.0);
    double acc = 0.0;
    for (std::size_t r : rows) acc += (*out.attention_avg)(r, j);
    CHECK(std::abs(map[j] - acc / static_cast<double>(rows.size())) < 1e-15);
  }
}

TEST_CASE("answer accuracy") {
  const Vocab v;
  std::vector<TaskSample> right, wrong;
  for (int i = 0; i < 3; ++i) {
    TaskSample s;
    s.visual = {v.key(0), v.value(5)};
    s.question = {Vocab::kQueryOneHop, v.key(0)};
    s.answer = v.value(5);
    s.response = {Vocab::kThinkBegin, Vocab::kThinkEnd, Vocab::kAnswerBegin, s.answer, Vocab::kEnd};
    right.push_back(s);
    s.answer = v.value(6);
    s.response[3] = s.answer;
    wrong.push_back(s);
  }
  Model m(tiny(1));
  rig::bigram(m, {{v.key(0), Vocab::kThinkBegin},
                  {Vocab::kThinkBegin, Vocab::kThinkEnd},
                  {Vocab::kThinkEnd, Vocab::kAnswerBegin},
                  {Vocab::kAnswerBegin, v.value(5)},
                  {v.value(5), Vocab::kEnd}});
  CHECK(answer_accuracy(m, right, 16).fraction() == 1.0);
  CHECK(answer_accuracy(m, wrong, 16).fraction() == 0.0);
  // Never opening an answer: the slot is located by appending <answer>.
  Model silent(tiny(1));
  rig::bigram(silent, {{v.key(0), Vocab::kEnd}, {Vocab::kAnswerBegin, v.value(5)}});
  CHECK(predicted_answer(silent, right[0], 16) == v.value(5));
  CHECK(AccuracyResult{}.fraction() == 0.0);
}

TEST_CASE("untrained model answers at chance") {
  const Model m(tiny(11));
  const auto s = gen_corpus(1000, 77, CorpusParams{});
  const auto acc = answer_accuracy(m, s, 64);
  const double p = 1.0 / Vocab{}.n_values();
  const double sigma = std::sqrt(1000 * p * (1 - p));
  CHECK(acc.n == 1000);
  CHECK(std::abs(static_cast<double>(acc.correct) - 1000 * p) <= 3 * sigma);
}

TEST_CASE("csv writers") {
  const auto dir = fs::temp_directory_path() / "maskkd_analysis_csv";
  fs::remove_all(dir);
  fs::create_directories(dir);
  write_curve_csv(dir / "c.csv", AttentionCurve{{0.5, 0.25}, {2, 1}});
  CHECK(slurp(dir / "c.csv") == "position,fraction,n\n0,0.5,2\n1,0.25,1\n");
  write_profile_csv(dir / "p.csv", IntervalKLProfile{{1.5}, {2}});
  CHECK(slurp(dir / "p.csv") == "interval,mean_kl\n0,1.5\n");
  write_histogram_csv(dir / "h.csv", DistanceHistogram{{2, 4}});
  CHECK(slurp(dir / "h.csv") == "distance,count\n2,4\n");
  write_map_csv(dir / "m.csv", {0.125});
  CHECK(slurp(dir / "m.csv") == "visual_position,mean_attention\n0,0.125\n");
  write_accuracy_csv(dir / "a.csv", {{"eval", AccuracyResult{4, 3}}});
  CHECK(slurp(dir / "a.csv") == "split,n,correct,fraction\neval,4,3,0.75\n");
  fs::remove_all(dir);
}
