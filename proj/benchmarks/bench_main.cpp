#include <benchmark/benchmark.h>

#include "maskkd/corpus.hpp"
#include "maskkd/distill.hpp"
#include "maskkd/masking.hpp"
#include "maskkd/model.hpp"

using namespace maskkd;

namespace {

Tensor random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t({r, c});
  for (double& v : t.storage()) v = rng.normal();
  return t;
}

Sequence desk_sequence() {
  Rng rng(3);
  return layout_of(gen_sample(rng, CorpusParams{}), 128);
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Tensor a = random_matrix(n, n, 1), b = random_matrix(n, n, 2);
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<long>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(32)->Arg(64)->Arg(128);

void BM_Forward(benchmark::State& state) {
  const Model model(state.range(0) ? ModelConfig::teacher_default()
                                   : ModelConfig::student_default());
  const Sequence seq = desk_sequence();
  const auto mask = causal_mask(seq.size());
  for (auto _ : state) benchmark::DoNotOptimize(forward(model, seq.tokens, mask));
}
BENCHMARK(BM_Forward)->ArgName("teacher")->Arg(0)->Arg(1);

void BM_SalientSelection(benchmark::State& state) {
  const std::size_t n = static_cast<std::size_t>(state.range(0));
  Tensor a = random_matrix(n, n, 4);
  for (double& v : a.storage()) v = std::abs(v);
  const auto layout = SegmentLayout::from_lengths(0, 0, n);
  const std::vector<double> rho(n, 0.4);
  Rng rng(5);
  for (auto _ : state) {
    benchmark::DoNotOptimize(select_salient_set(a, rho, layout, SelectionOptions{}, rng));
  }
}
BENCHMARK(BM_SalientSelection)->Arg(26)->Arg(64);

void BM_DistillStep(benchmark::State& state) {
  const Model teacher(ModelConfig::teacher_default());
  Model student(ModelConfig::student_default());
  const std::vector<Sequence> batch(8, desk_sequence());
  DistillConfig cfg;
  cfg.mask_kind = state.range(0) ? DistillMask::salient : DistillMask::causal_only;
  Adam opt;
  std::uint64_t step = 0;
  for (auto _ : state) benchmark::DoNotOptimize(distill_step(teacher, student, batch, cfg, opt, step++));
}
BENCHMARK(BM_DistillStep)->ArgName("salient")->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
