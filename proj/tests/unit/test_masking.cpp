#include <doctest.h>

#include <set>
#include <sstream>

#include "maskkd/error.hpp"
#include "maskkd/masking.hpp"
#include "oracles.hpp"

using namespace maskkd;

namespace {

std::vector<double> random_weights(Rng& rng, std::size_t n, bool ties) {
  std::vector<double> w(n);
  double total = 0;
  for (double& v : w) {
    v = ties ? static_cast<double>(rng.below(4)) : rng.uniform();
    total += v;
  }
  if (total == 0) {
    w[0] = 1;
    total = 1;
  }
  for (double& v : w) v /= total;
  return w;
}

Tensor random_attention(Rng& rng, std::size_t n) {
  Tensor a({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    for (std::size_t j = 0; j <= i; ++j) s += (a(i, j) = rng.uniform() + 1e-3);
    for (std::size_t j = 0; j <= i; ++j) a(i, j) /= s;
  }
  return a;
}

}  // namespace

TEST_CASE("normalize_prefix_row") {
  const Tensor a = Tensor::matrix({{1, 0, 0, 0}, {1, 1, 0, 0}, {2, 2, 5, 0}, {1, 0, 3, 9}});
  CHECK(*normalize_prefix_row(a, 3) == std::vector<double>{0.5, 0.5});
  CHECK(*normalize_prefix_row(a, 4) == std::vector<double>{0.25, 0.0, 0.75});
  const Tensor z = Tensor::matrix({{1, 0}, {0, 1}});
  CHECK_FALSE(normalize_prefix_row(z, 2).has_value());
  CHECK_THROWS_AS(normalize_prefix_row(a, 1), PreconditionError);
  Rng rng(1);
  for (int t = 0; t < 100; ++t) {
    const Tensor r = random_attention(rng, 10);
    const auto w = *normalize_prefix_row(r, 10);
    double s = 0;
    for (double v : w) s += v;
    CHECK(std::abs(s - 1.0) < 1e-9);
    for (std::size_t i = 0; i < 9; ++i)
      for (std::size_t j = 0; j < 9; ++j)
        if (r(9, i) < r(9, j)) CHECK(w[i] <= w[j]);
  }
}

TEST_CASE("select_salient_prefixes examples") {
  const std::vector<double> w = {0.5, 0.3, 0.2};
  auto s = select_salient_prefixes(w, 0.5);
  CHECK(s.positions == std::vector<std::size_t>{0});
  CHECK(s.achieved_mass == 0.5);
  s = select_salient_prefixes(w, 0.6);
  CHECK(s.positions == std::vector<std::size_t>{0, 1});
  CHECK(s.achieved_mass == doctest::Approx(0.8));
  CHECK(select_salient_prefixes(w, 0.0).positions.empty());
  const std::vector<std::size_t> ex = {0};
  s = select_salient_prefixes(w, 0.9, ex);
  CHECK(s.positions == std::vector<std::size_t>{1, 2});  // saturated
  CHECK(select_salient_prefixes(std::vector<double>{}, 0.5).positions.empty());
  CHECK_THROWS_AS(select_salient_prefixes(w, 1.5), RangeError);
  // Ties go to the lower index.
  s = select_salient_prefixes(std::vector<double>{0.25, 0.25, 0.25, 0.25}, 0.5);
  CHECK(s.positions == std::vector<std::size_t>{0, 1});
}

TEST_CASE("selection matches the sort-and-cumsum oracle; minimal and monotone") {
  Rng rng(2024);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = 1 + rng.below(64);
    const auto w = random_weights(rng, n, t % 3 == 0);
    const double rho = rng.uniform();
    std::set<std::size_t> ex;
    std::vector<std::size_t> exv;
    if (n > 1 && t % 2 == 0) {
      ex.insert(n - 1);
      exv.push_back(n - 1);
    }
    const auto got = select_salient_prefixes(w, rho, exv);
    const auto ref = oracle::top_rho(w, rho, ex);
    REQUIRE(got.positions == ref.positions);
    CHECK(got.achieved_mass == ref.mass);
    if (got.achieved_mass >= rho && !got.positions.empty()) {
      // Dropping the weakest member falls below the budget.
      std::vector<double> vals;
      for (auto p : got.positions) vals.push_back(w[p]);
      std::sort(vals.begin(), vals.end(), std::greater<>());
      vals.pop_back();
      double rest = 0;
      for (double v : vals) rest += v;
      CHECK(rest < rho);
    }
    const double rho2 = std::min(1.0, rho + 0.5 * rng.uniform());
    const auto bigger = select_salient_prefixes(w, rho2, exv);
    CHECK(std::includes(bigger.positions.begin(), bigger.positions.end(), got.positions.begin(),
                        got.positions.end()));
  }
}

TEST_CASE("variant strategies") {
  const std::vector<double> w = {0.5, 0.3, 0.2};
  Rng rng(1);
  CHECK(select_variant_prefixes(w, 0.2, SelectionStrategy::low_attention, rng).positions ==
        std::vector<std::size_t>{2});
  CHECK(select_variant_prefixes(w, 0.6, SelectionStrategy::high_attention, rng).positions ==
        select_salient_prefixes(w, 0.6).positions);
  // Median rank first.
  CHECK(select_variant_prefixes(w, 0.1, SelectionStrategy::middle_attention, rng).positions ==
        std::vector<std::size_t>{1});
  const std::vector<double> w5 = {0.3, 0.25, 0.2, 0.15, 0.1};
  Rng r1(7), r2(7);
  const auto a = select_variant_prefixes(w5, 0.5, SelectionStrategy::random, r1);
  const auto b = select_variant_prefixes(w5, 0.5, SelectionStrategy::random, r2);
  CHECK(a.positions == b.positions);
  CHECK(a.achieved_mass >= 0.5);
  CHECK_THROWS_AS(parse_selection_strategy("widest"), EnumError);
}

TEST_CASE("alternative threshold rules") {
  const std::vector<double> w = {0.5, 0.3, 0.1, 0.1};
  CHECK(select_by_rule(w, 0, make_threshold_rule(ThresholdMode::attention_threshold, 0.2)).positions ==
        std::vector<std::size_t>{0, 1});
  CHECK(select_by_rule(w, 0, make_threshold_rule(ThresholdMode::masking_ratio, 0.5)).positions ==
        std::vector<std::size_t>{0, 1});
  CHECK(select_by_rule(w, 0, make_threshold_rule(ThresholdMode::masking_ratio, 0.0)).positions.empty());
}

TEST_CASE("build_salient_mask") {
  const auto layout = SegmentLayout::from_lengths(3, 2, 4);
  SalientSelection empty;
  empty.masked.assign(4, {});
  empty.rho.assign(4, 0.0);
  empty.achieved_mass.assign(4, 0.0);
  CHECK(build_salient_mask(empty, layout).entries == causal_mask(9).entries);

  SalientSelection one = empty;
  one.masked[3] = {5};  // fourth response row hides the first response token
  const auto m = build_salient_mask(one, layout);
  const auto c = causal_mask(9);
  std::size_t diff = 0;
  for (std::size_t r = 0; r < 9; ++r)
    for (std::size_t col = 0; col < 9; ++col)
      if (m.entries(r, col) != c.entries(r, col)) ++diff;
  CHECK(diff == 1);
  CHECK(m.masked(8, 5));
  CHECK(m.kind == MaskKind::salient);

  SalientSelection bad = empty;
  bad.masked[1] = {7};  // future position
  CHECK_THROWS_AS(build_salient_mask(bad, layout), InvariantError);
  bad = empty;
  bad.masked[2] = {1};  // visual column
  CHECK_THROWS_AS(build_salient_mask(bad, layout), InvariantError);
}

TEST_CASE("salient masks keep structural invariants") {
  Rng rng(99);
  for (int t = 0; t < 200; ++t) {
    const std::size_t nv = rng.below(5), nq = rng.below(3), nr = 1 + rng.below(20);
    const auto layout = SegmentLayout::from_lengths(nv, nq, nr);
    const Tensor a = random_attention(rng, nr);
    std::vector<double> rho(nr);
    for (double& r : rho) r = rng.uniform();
    const auto sel = select_salient_set(a, rho, layout, SelectionOptions{}, rng);
    const auto m = build_salient_mask(sel, layout);
    const std::size_t n = layout.total();
    for (std::size_t r = 0; r < n; ++r) {
      CHECK_FALSE(m.masked(r, r));
      for (std::size_t c = r + 1; c < n; ++c) CHECK(m.masked(r, c));
      if (layout.response.contains(r)) {
        if (r > layout.response.start) CHECK_FALSE(m.masked(r, r - 1));
        for (std::size_t c = 0; c < layout.response.start; ++c) CHECK_FALSE(m.masked(r, c));
      } else {
        for (std::size_t c = 0; c <= r; ++c) CHECK_FALSE(m.masked(r, c));
      }
    }
  }
}

TEST_CASE("region masks") {
  const auto none = build_region_mask(Region::visual, SegmentLayout::from_lengths(0, 2, 3));
  CHECK(none.entries == causal_mask(5).entries);
  const auto layout = SegmentLayout::from_lengths(3, 2, 4);
  const auto q = build_region_mask(Region::question, layout);
  for (std::size_t r = 0; r < 9; ++r) {
    CHECK_FALSE(q.masked(r, r));
    for (std::size_t c = 0; c < r; ++c) {
      const bool expect = layout.response.contains(r) && layout.question.contains(c);
      CHECK(q.masked(r, c) == expect);
    }
  }
  CHECK(q.kind == MaskKind::region_question);
}

TEST_CASE("mask dump format") {
  const auto layout = SegmentLayout::from_lengths(1, 1, 3);
  SalientSelection sel;
  sel.masked = {{}, {}, {2}};
  sel.rho = {0, 0.4, 0.5};
  sel.achieved_mass = {0, 0, 0.75};
  std::ostringstream os;
  write_mask_dump_header(os);
  write_mask_dump(os, sel, layout, 7);
  CHECK(os.str() ==
        "example,position,rho,achieved_mass,masked_positions\n"
        "7,2,0,0,\n7,3,0.4,0,\n7,4,0.5,0.75,2\n");
}
