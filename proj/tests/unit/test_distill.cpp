#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "maskkd/distill.hpp"
#include "maskkd/error.hpp"
#include "oracles.hpp"
#include "rigs.hpp"

using namespace maskkd;

namespace {

ModelConfig tiny(std::uint64_t seed, int d = 16, int layers = 1) {
  return ModelConfig{.vocab_size = 64, .d_model = d, .n_heads = 2, .n_layers = layers,
                     .max_seq_len = 40, .seed = seed};
}

std::vector<Sequence> small_data(std::size_t n, std::uint64_t seed = 5) {
  CorpusParams p;
  p.n_facts = 3;
  p.restatements = 2;
  std::vector<Sequence> out;
  for (const auto& s : gen_corpus(n, seed, p)) out.push_back(layout_of(s, 40));
  return out;
}

oracle::Kind oracle_kind(ops::KlKind k) {
  return k == ops::KlKind::reverse   ? oracle::Kind::reverse
         : k == ops::KlKind::forward ? oracle::Kind::forward
                                     : oracle::Kind::mixed;
}

std::vector<std::vector<double>> grads_of(const Model& m) {
  std::vector<std::vector<double>> g;
  for (const auto& p : m.parameters()) g.push_back(p.has_grad() ? p.grad_storage() : std::vector<double>(p.value().size(), 0.0));
  return g;
}

double max_abs_grad(const Model& m) {
  double mx = 0.0;
  for (const auto& g : grads_of(m))
    for (double v : g) mx = std::max(mx, std::abs(v));
  return mx;
}

// Plain causal KD written out directly: student and teacher forwards under
// the causal mask, divergence summed over the vocabulary row by row.
double naive_kd(const Model& teacher, const Model& student, const Sequence& seq, double tau,
                oracle::Kind kind) {
  const auto rows = prediction_rows(seq.layout);
  const Tensor s = forward(student, seq.tokens, causal_mask(seq.size())).logits.value();
  const Tensor t = forward(teacher, seq.tokens, causal_mask(seq.size())).logits.value();
  Tensor srows({rows.size(), s.cols()}), trows({rows.size(), s.cols()});
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t c = 0; c < s.cols(); ++c) {
      srows(i, c) = s(rows[i], c);
      trows(i, c) = t(rows[i], c);
    }
  return oracle::kd_reference(srows, trows, tau, kind);
}

constexpr ops::KlKind kKinds[] = {ops::KlKind::reverse, ops::KlKind::forward, ops::KlKind::mixed};

}  // namespace

TEST_CASE("kd_loss matches brute-force summation") {
  const Tensor s = oracle::random_matrix(6, 64, 11, 3.0);
  const Tensor t = oracle::random_matrix(4, 64, 12, 3.0);
  const std::vector<std::size_t> rows{1, 2, 4, 5};
  Tensor srows({4, 64});
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t c = 0; c < 64; ++c) srows(i, c) = s(rows[i], c);
  for (auto kind : kKinds) {
    const double got = kd_loss(s, rows, t, 2.0, kind);
    CHECK(std::abs(got - oracle::kd_reference(srows, t, 2.0, oracle_kind(kind))) < 1e-10);
    CHECK(got >= 0.0);
    CHECK(std::abs(kd_loss(s, rows, srows, 2.0, kind)) < 1e-12);
  }
  const std::vector<std::size_t> all{0, 1, 2, 3};
  CHECK(std::abs(kd_loss(srows, all, t, 2.0, ops::KlKind::mixed) -
                 kd_loss(t, all, srows, 2.0, ops::KlKind::mixed)) < 1e-12);
  CHECK(std::abs(kd_loss(srows, all, t, 2.0, ops::KlKind::reverse) -
                 kd_loss(t, all, srows, 2.0, ops::KlKind::forward)) < 1e-12);
}

TEST_CASE("enum parsing and config validation") {
  for (auto m : {DistillMask::salient, DistillMask::causal_only, DistillMask::region_visual,
                 DistillMask::region_question})
    CHECK(parse_distill_mask(to_string(m)) == m);
  for (auto k : kKinds) CHECK(parse_kl_kind(to_string(k)) == k);
  CHECK(parse_budget_kind("fixed") == BudgetKind::fixed);
  CHECK_THROWS_AS(parse_kl_kind("js"), EnumError);
  CHECK_THROWS_AS(parse_distill_mask("full"), EnumError);
  CHECK_THROWS_AS(parse_budget_kind("annealed"), EnumError);
  DistillConfig c;
  CHECK_NOTHROW(c.validate());
  c.tau = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = DistillConfig{};
  c.rho_min = 0.6;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = DistillConfig{};
  c.rho_max = 1.2;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = DistillConfig{};
  c.threshold_mode = ThresholdMode::masking_ratio;
  c.threshold_param = 2.0;
  CHECK_THROWS(c.validate());
}

TEST_CASE("causal distillation against the student's own copy is zero") {
  const Model student(tiny(3));
  const Model teacher = student.clone();
  Model s = student.clone();
  const auto data = small_data(3);
  DistillConfig cfg;
  cfg.mask_kind = DistillMask::causal_only;
  for (auto kind : kKinds) {
    cfg.loss_kind = kind;
    zero_grads(s.parameters());
    const auto d = distill_gradients(teacher, s, data, cfg, 0);
    CHECK(std::abs(d.loss) < 1e-10);
    CHECK(max_abs_grad(s) < 1e-10);
  }
}

TEST_CASE("causal distillation equals a naive KD reference") {
  const Model teacher(tiny(1, 24, 2));
  Model student(tiny(2));
  const auto data = small_data(4);
  DistillConfig cfg;
  cfg.mask_kind = DistillMask::causal_only;
  for (auto kind : kKinds) {
    cfg.loss_kind = kind;
    for (const auto& seq : data) {
      zero_grads(student.parameters());
      const auto d = distill_gradients(teacher, student, {&seq, 1}, cfg, 0);
      CHECK(std::abs(d.loss - naive_kd(teacher, student, seq, cfg.tau, oracle_kind(kind))) <
            1e-10);
    }
  }
}

TEST_CASE("zero budgets reduce salient masking to causal KD") {
  const Model teacher(tiny(1, 24, 2));
  Model student(tiny(2));
  const auto data = small_data(4);
  DistillConfig zero;
  zero.rho_min = zero.rho_max = 0.0;
  DistillConfig causal;
  causal.mask_kind = DistillMask::causal_only;
  for (auto kind : kKinds) {
    zero.loss_kind = causal.loss_kind = kind;
    const auto a = distill_gradients(teacher, student, data, zero, 0);
    zero_grads(student.parameters());
    const auto b = distill_gradients(teacher, student, data, causal, 0);
    zero_grads(student.parameters());
    CHECK(std::abs(a.loss - b.loss) < 1e-10);
    for (std::size_t m : a.mask_sizes) CHECK(m == 0);
    CHECK(a.distances.empty());
    // Nonzero budgets do mask something.
    const auto c = distill_gradients(teacher, student, data, DistillConfig{}, 0);
    zero_grads(student.parameters());
    CHECK_FALSE(c.distances.empty());
  }
}

TEST_CASE("self-distillation gradients equal distillation from a frozen copy") {
  Model model(tiny(7));
  const Model copy = model.clone();
  const auto data = small_data(3);
  for (auto mask : {DistillMask::salient, DistillMask::region_visual}) {
    DistillConfig cfg;
    cfg.mask_kind = mask;
    zero_grads(model.parameters());
    const auto a = self_distill_gradients(model, data, cfg, 4);
    const auto ga = grads_of(model);
    zero_grads(model.parameters());
    const auto b = distill_gradients(copy, model, data, cfg, 4);
    const auto gb = grads_of(model);
    zero_grads(model.parameters());
    CHECK(a.loss == b.loss);
    CHECK(ga == gb);
    CHECK(a.loss >= 0.0);
    for (double r : a.r) CHECK(r == 0.0);
  }
  DistillConfig zero;
  zero.rho_min = zero.rho_max = 0.0;
  CHECK(std::abs(self_distill_gradients(model, data, zero, 0).loss) < 1e-12);
  zero_grads(model.parameters());
}

TEST_CASE("teacher stays bit-identical across steps") {
  const Model teacher(tiny(1, 24, 2));
  const Model before = teacher.clone();
  Model student(tiny(2));
  const auto data = small_data(4);
  Adam opt;
  for (int step = 0; step < 3; ++step) distill_step(teacher, student, data, DistillConfig{}, opt, step);
  CHECK(teacher.values_equal(before));
  CHECK_FALSE(student.values_equal(Model(tiny(2))));
}

TEST_CASE("step gradient is the gradient of the masked loss alone") {
  const Model teacher(tiny(1, 24, 2));
  Model student(tiny(2, 8));
  const auto data = small_data(1, 9);
  const Sequence& seq = data[0];
  DistillConfig cfg;
  zero_grads(student.parameters());
  const auto diag = distill_gradients(teacher, student, {&seq, 1}, cfg, 0);
  const auto analytic = grads_of(student);
  zero_grads(student.parameters());
  Rng rng(1);
  const MaskPlan plan = plan_mask(student, seq, teacher_logits(teacher, seq), cfg, rng);
  CHECK(std::abs(masked_kd_loss(student, seq, plan, cfg, nullptr).value()[0] - diag.loss) < 1e-12);
  CHECK(plan.selection.total_masked() > 0);

  Rng pick(3);
  int checked = 0;
  for (std::size_t p = 0; p < student.parameters().size(); ++p) {
    auto& value = student.parameters()[p].mutable_value().storage();
    for (int k = 0; k < 3; ++k) {
      const std::size_t i = pick.below(value.size());
      const double g = analytic[p][i];
      const double orig = value[i], h = 1e-5;
      value[i] = orig + h;
      const double up = masked_kd_loss(student, seq, plan, cfg, nullptr).value()[0];
      value[i] = orig - h;
      const double down = masked_kd_loss(student, seq, plan, cfg, nullptr).value()[0];
      value[i] = orig;
      const double fd = (up - down) / (2 * h);
      if (std::abs(fd) < 1e-7 && std::abs(g) < 1e-7) continue;
      CHECK(std::abs(fd - g) / std::max(std::abs(fd), std::abs(g)) < 1e-4);
      ++checked;
    }
  }
  CHECK(checked > 20);
}

TEST_CASE("masked distances skip the immediately preceding token") {
  const Model teacher(tiny(1, 24, 2));
  Model student(tiny(2));
  const auto data = small_data(6);
  const auto d = distill_gradients(teacher, student, data, DistillConfig{}, 0);
  zero_grads(student.parameters());
  REQUIRE_FALSE(d.distances.empty());
  for (std::size_t v : d.distances) CHECK(v >= 2);
  CHECK(d.r.size() == d.rho.size());
  for (double rho : d.rho) CHECK((rho >= 0.3 && rho <= 0.5));
  CHECK(d.mask_sizes.size() == 6 * data[0].layout.response.size());
}

TEST_CASE("frozen auxiliary pass keeps the initial weights") {
  const Model teacher(tiny(1, 24, 2));
  Model student(tiny(2));
  const Model initial = student.clone();
  const auto data = small_data(4);
  DistillConfig cfg;
  Adam opt;
  distill_step(teacher, student, data, cfg, opt, 0, &initial);
  Model probe = initial.clone();
  const auto frozen = distill_gradients(teacher, student, data, cfg, 1, &initial);
  zero_grads(student.parameters());
  const auto reference = distill_gradients(teacher, probe, data, cfg, 1);
  CHECK(frozen.r == reference.r);
  const auto live = distill_gradients(teacher, student, data, cfg, 1);
  zero_grads(student.parameters());
  CHECK(live.r != reference.r);
}

TEST_CASE("non-finite loss aborts without touching the student") {
  Model teacher(tiny(1, 24, 2));
  teacher.param("head.b").mutable_value()[0] = NAN;
  Model student(tiny(2));
  const Model before = student.clone();
  const auto data = small_data(4);
  Adam opt;
  CHECK_THROWS_AS(distill_step(teacher, student, data, DistillConfig{}, opt, 0), TrainingAbort);
  CHECK(student.values_equal(before));
  DistillConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 2;
  const auto res = run_training(cfg, &teacher, student, data);
  CHECK(res.aborted);
  CHECK(res.abort_message.find("non-finite") != std::string::npos);
  CHECK(res.steps == 0);
  CHECK(student.values_equal(before));
}

TEST_CASE("run_training is deterministic and logs the configured rows") {
  const Model teacher(tiny(1, 24, 2));
  const auto data = small_data(10);
  DistillConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 4;  // 3 steps per epoch
  cfg.diag_interval = 4;
  Model a(tiny(2)), b(tiny(2));
  long hook_calls = 0;
  TrainingHooks hooks;
  hooks.on_diagnostics = [&](long, const StepDiagnostics&) { ++hook_calls; };
  const auto ra = run_training(cfg, &teacher, a, data, {}, hooks);
  std::vector<Tensor> cache;
  for (const auto& s : data) cache.push_back(teacher_logits(teacher, s));
  const auto rb = run_training(cfg, &teacher, b, data, cache);
  CHECK(a.values_equal(b));
  CHECK(ra.steps == 6);
  CHECK(ra.metrics.size() == 2);
  CHECK(ra.metrics.size() == expected_metrics_rows(cfg, data.size()));
  CHECK(hook_calls == 1);
  REQUIRE(rb.metrics.size() == 2);
  CHECK(ra.metrics[1].loss == rb.metrics[1].loss);
  CHECK(ra.metrics[0].step == 4);
  CHECK(ra.metrics[1].step == 6);
  CHECK(ra.metrics[0].mean_masked_distance >= 2.0);
  CHECK(metrics_header().size() == metrics_cells(ra.metrics[0]).size());

  cfg.seed = 2;
  Model c(tiny(2));
  run_training(cfg, &teacher, c, data);
  CHECK_FALSE(a.values_equal(c));
  Model self(tiny(2));
  const auto rs = run_training(cfg, nullptr, self, data);
  CHECK(rs.steps == 6);
  CHECK_THROWS_AS(run_training(cfg, &teacher, self, {}), DataError);
}

TEST_CASE("schedule dump rows") {
  const Model teacher(tiny(1, 24, 2));
  Model student(tiny(2));
  const auto data = small_data(2);
  const auto d = distill_gradients(teacher, student, data, DistillConfig{}, 0);
  zero_grads(student.parameters());
  std::ostringstream os;
  write_schedule_dump_header(os);
  write_schedule_dump(os, d, 10);
  const std::string text = os.str();
  CHECK(text.rfind("example,position,r,rho\n", 0) == 0);
  CHECK(std::count(text.begin(), text.end(), '\n') ==
        static_cast<long>(1 + 2 * data[0].layout.response.size()));
  CHECK(text.find("\n11,0,") != std::string::npos);
}

TEST_CASE("teacher training") {
  const auto data = small_data(400, 31);
  Model m(tiny(4, 32, 2));
  const Model before = m.clone();
  TeacherTrainConfig cfg;
  cfg.epochs = 0;
  CHECK(train_teacher(m, data, cfg).empty());
  CHECK(m.values_equal(before));
  CHECK_THROWS_AS(train_teacher(m, {}, cfg), DataError);
  cfg.epochs = 1;
  cfg.log_interval = 10;
  const auto log = train_teacher(m, data, cfg);
  REQUIRE(log.size() == 5);
  for (std::size_t i = 1; i < log.size(); ++i) CHECK(log[i].loss < log[i - 1].loss);
  CHECK(log.back().step == 50);
}

TEST_CASE("traced answers and the distill set") {
  CHECK(traced_answer(std::vector<int>{1, 3, 40, 4}) == 40);
  CHECK_FALSE(traced_answer(std::vector<int>{1, 2, 4}).has_value());
  CHECK_FALSE(traced_answer(std::vector<int>{1, 3}).has_value());

  // Every prompt ends in key K0; the rigged teacher answers <think> </think>
  // <answer> V5 <end> after it.
  const Vocab v;
  std::vector<TaskSample> samples;
  for (int i = 0; i < 4; ++i) {
    TaskSample s;
    s.visual = {v.key(0), v.value(i)};
    s.question = {Vocab::kQueryOneHop, v.key(0)};
    s.answer = i == 3 ? v.value(6) : v.value(5);
    s.response = {Vocab::kThinkBegin, Vocab::kThinkEnd, Vocab::kAnswerBegin, s.answer, Vocab::kEnd};
    samples.push_back(s);
  }
  Model t(tiny(1, 16));
  rig::bigram(t, {{v.key(0), Vocab::kThinkBegin},
                  {Vocab::kThinkBegin, Vocab::kThinkEnd},
                  {Vocab::kThinkEnd, Vocab::kAnswerBegin},
                  {Vocab::kAnswerBegin, v.value(5)},
                  {v.value(5), Vocab::kEnd}});
  const std::vector<TaskSample> good(samples.begin(), samples.begin() + 3);
  const auto set = build_distill_set(t, good, 16);
  CHECK(set.kept_ratio() == 1.0);
  CHECK(set.samples == good);
  const auto mixed = build_distill_set(t, samples, 16);
  CHECK(mixed.kept == 3);
  CHECK(mixed.total == 4);
  const std::vector<TaskSample> bad(samples.begin() + 3, samples.end());
  CHECK_THROWS_AS(build_distill_set(t, bad, 16), DataError);
}
