#include "maskkd/masking.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

#include "maskkd/csv.hpp"
#include "maskkd/error.hpp"

namespace maskkd {

std::size_t SalientSelection::total_masked() const noexcept {
  std::size_t n = 0;
  for (const auto& m : masked) n += m.size();
  return n;
}

std::optional<std::vector<double>> normalize_prefix_row(const Tensor& a_resp, std::size_t n) {
  if (n < 2) throw PreconditionError("prefix normalization needs n >= 2");
  if (a_resp.rank() != 2 || n > a_resp.rows() || n - 1 > a_resp.cols()) {
    throw DimensionError("response position " + std::to_string(n) + " outside attention " +
                         shape_str(a_resp.shape()));
  }
  auto row = a_resp.row(n - 1);
  double total = 0.0;
  for (std::size_t j = 0; j + 1 < n; ++j) total += row[j];
  if (!(total > 0.0)) return std::nullopt;
  std::vector<double> w(n - 1);
  for (std::size_t j = 0; j + 1 < n; ++j) w[j] = row[j] / total;
  return w;
}

namespace {

std::vector<std::size_t> eligible_indices(std::size_t k, std::span<const std::size_t> exclude) {
  std::vector<bool> skip(k, false);
  for (auto e : exclude)
    if (e < k) skip[e] = true;
  std::vector<std::size_t> out;
  out.reserve(k);
  for (std::size_t j = 0; j < k; ++j)
    if (!skip[j]) out.push_back(j);
  return out;
}

// Stable by index for equal weights.
void sort_descending(std::vector<std::size_t>& idx, std::span<const double> w) {
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return w[a] > w[b]; });
}

void sort_ascending(std::vector<std::size_t>& idx, std::span<const double> w) {
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return w[a] < w[b]; });
}

SelectionEntry collect(const std::vector<std::size_t>& order, std::span<const double> w,
                       double rho) {
  SelectionEntry e;
  e.rho = rho;
  double cum = 0.0;
  for (std::size_t idx : order) {
    if (cum >= rho) break;
    cum += w[idx];
    e.positions.push_back(idx);
  }
  e.achieved_mass = cum;
  std::sort(e.positions.begin(), e.positions.end());
  return e;
}

}  // namespace

SelectionEntry select_salient_prefixes(std::span<const double> weights, double rho,
                                       std::span<const std::size_t> exclude) {
  if (!(rho >= 0.0 && rho <= 1.0)) {
    throw RangeError("selection threshold " + std::to_string(rho) + " outside [0, 1]");
  }
  auto order = eligible_indices(weights.size(), exclude);
  sort_descending(order, weights);
  return collect(order, weights, rho);
}

SelectionStrategy parse_selection_strategy(const std::string& s) {
  if (s == "high_attention") return SelectionStrategy::high_attention;
  if (s == "low_attention") return SelectionStrategy::low_attention;
  if (s == "middle_attention") return SelectionStrategy::middle_attention;
  if (s == "random") return SelectionStrategy::random;
  if (s == "non_adaptive") return SelectionStrategy::non_adaptive;
  throw EnumError("unknown selection strategy '" + s + "'");
}

std::string to_string(SelectionStrategy s) {
  switch (s) {
    case SelectionStrategy::high_attention: return "high_attention";
    case SelectionStrategy::low_attention: return "low_attention";
    case SelectionStrategy::middle_attention: return "middle_attention";
    case SelectionStrategy::random: return "random";
    case SelectionStrategy::non_adaptive: return "non_adaptive";
  }
  return "?";
}

SelectionEntry select_variant_prefixes(std::span<const double> weights, double rho,
                                       SelectionStrategy strategy, Rng& rng,
                                       std::span<const std::size_t> exclude) {
  if (!(rho >= 0.0 && rho <= 1.0)) {
    throw RangeError("selection threshold " + std::to_string(rho) + " outside [0, 1]");
  }
  auto order = eligible_indices(weights.size(), exclude);
  switch (strategy) {
    case SelectionStrategy::high_attention:
    case SelectionStrategy::non_adaptive:
      return select_salient_prefixes(weights, rho, exclude);
    case SelectionStrategy::low_attention:
      sort_ascending(order, weights);
      return collect(order, weights, rho);
    case SelectionStrategy::middle_attention: {
      sort_descending(order, weights);
      // Walk outward from the median rank: m, m+1, m-1, m+2, ...
      std::vector<std::size_t> walk;
      walk.reserve(order.size());
      if (!order.empty()) {
        const std::ptrdiff_t k = static_cast<std::ptrdiff_t>(order.size());
        const std::ptrdiff_t m = (k - 1) / 2;
        walk.push_back(order[static_cast<std::size_t>(m)]);
        for (std::ptrdiff_t step = 1; static_cast<std::ptrdiff_t>(walk.size()) < k; ++step) {
          if (m + step < k) walk.push_back(order[static_cast<std::size_t>(m + step)]);
          if (m - step >= 0) walk.push_back(order[static_cast<std::size_t>(m - step)]);
        }
      }
      return collect(walk, weights, rho);
    }
    case SelectionStrategy::random:
      rng.shuffle(order);
      return collect(order, weights, rho);
  }
  throw EnumError("unknown selection strategy");
}

SelectionEntry select_by_rule(std::span<const double> weights, double rho, const ThresholdRule& rule,
                              std::span<const std::size_t> exclude) {
  switch (rule.mode) {
    case ThresholdMode::cumulative: return select_salient_prefixes(weights, rho, exclude);
    case ThresholdMode::attention_threshold: {
      SelectionEntry e;
      e.rho = rule.param;
      for (std::size_t j : eligible_indices(weights.size(), exclude)) {
        if (weights[j] > rule.param) {
          e.positions.push_back(j);
          e.achieved_mass += weights[j];
        }
      }
      return e;
    }
    case ThresholdMode::masking_ratio: {
      auto order = eligible_indices(weights.size(), exclude);
      sort_descending(order, weights);
      const auto take = static_cast<std::size_t>(
          std::floor(rule.param * static_cast<double>(order.size()) + 1e-9));
      SelectionEntry e;
      e.rho = rule.param;
      for (std::size_t i = 0; i < take && i < order.size(); ++i) {
        e.positions.push_back(order[i]);
        e.achieved_mass += weights[order[i]];
      }
      std::sort(e.positions.begin(), e.positions.end());
      return e;
    }
  }
  throw EnumError("unknown threshold mode");
}

SalientSelection select_salient_set(const Tensor& a_resp, std::span<const double> rho,
                                    const SegmentLayout& layout, const SelectionOptions& opts,
                                    Rng& rng) {
  const std::size_t n = layout.response.size();
  if (a_resp.rank() != 2 || a_resp.rows() != n || a_resp.cols() != n) {
    throw DimensionError("response attention " + shape_str(a_resp.shape()) +
                         " does not match response span of " + std::to_string(n));
  }
  if (rho.size() != n) {
    throw DimensionError("budget has " + std::to_string(rho.size()) + " entries for " +
                         std::to_string(n) + " response rows");
  }
  SalientSelection sel;
  sel.masked.resize(n);
  sel.rho.assign(rho.begin(), rho.end());
  sel.achieved_mass.assign(n, 0.0);

  // Normalized prefix rows; row i (0-based) has i prefixes.
  std::vector<std::optional<std::vector<double>>> rows(n);
  for (std::size_t i = 1; i < n; ++i) rows[i] = normalize_prefix_row(a_resp, i + 1);

  auto exclusions = [&](std::size_t i) {
    std::vector<std::size_t> ex;
    if (opts.exclude_immediate_prev && i >= 1) ex.push_back(i - 1);
    return ex;
  };

  if (opts.strategy == SelectionStrategy::non_adaptive) {
    // One global set from the mean normalized prefix attention, applied to
    // every row's eligible prefixes.
    std::vector<double> mean(n, 0.0);
    std::size_t used = 0;
    double rho_sum = 0.0;
    for (std::size_t i = 1; i < n; ++i) {
      if (!rows[i]) continue;
      for (std::size_t j = 0; j < i; ++j) mean[j] += (*rows[i])[j];
      rho_sum += rho[i];
      ++used;
    }
    if (used == 0) return sel;
    double total = 0.0;
    for (double& m : mean) total += m;
    for (double& m : mean) m /= total;
    const double rho_global = rho_sum / static_cast<double>(used);
    SelectionEntry global = select_by_rule(mean, rho_global, opts.rule);
    for (std::size_t i = 1; i < n; ++i) {
      if (!rows[i]) continue;
      auto ex = exclusions(i);
      for (std::size_t j : global.positions) {
        if (j >= i || std::find(ex.begin(), ex.end(), j) != ex.end()) continue;
        sel.masked[i].push_back(layout.response.start + j);
        sel.achieved_mass[i] += (*rows[i])[j];
      }
      sel.rho[i] = rho_global;
    }
    return sel;
  }

  for (std::size_t i = 1; i < n; ++i) {
    if (!rows[i]) continue;
    auto ex = exclusions(i);
    SelectionEntry e;
    if (opts.rule.mode != ThresholdMode::cumulative) {
      e = select_by_rule(*rows[i], rho[i], opts.rule, ex);
    } else if (opts.strategy == SelectionStrategy::high_attention) {
      e = select_salient_prefixes(*rows[i], rho[i], ex);
    } else {
      e = select_variant_prefixes(*rows[i], rho[i], opts.strategy, rng, ex);
    }
    for (std::size_t j : e.positions) sel.masked[i].push_back(layout.response.start + j);
    sel.rho[i] = e.rho;
    sel.achieved_mass[i] = e.achieved_mass;
  }
  return sel;
}

AttentionMaskMatrix build_salient_mask(const SalientSelection& selection,
                                       const SegmentLayout& layout) {
  layout.validate();
  const std::size_t n = layout.response.size();
  if (selection.masked.size() != n) {
    throw DimensionError("selection has " + std::to_string(selection.masked.size()) +
                         " rows for " + std::to_string(n) + " response positions");
  }
  AttentionMaskMatrix m = causal_mask(layout.total());
  m.kind = MaskKind::salient;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t row = layout.response.start + i;
    for (std::size_t col : selection.masked[i]) {
      if (col >= row) {
        throw InvariantError("selection for row " + std::to_string(row) +
                             " references non-prefix position " + std::to_string(col));
      }
      if (!layout.response.contains(col)) {
        throw InvariantError("selection for row " + std::to_string(row) +
                             " references non-response position " + std::to_string(col));
      }
      m.entries(row, col) = kNegInf;
    }
  }
  return m;
}

AttentionMaskMatrix build_region_mask(Region region, const SegmentLayout& layout) {
  layout.validate();
  AttentionMaskMatrix m = causal_mask(layout.total());
  const Span span = region == Region::visual ? layout.visual : layout.question;
  m.kind = region == Region::visual ? MaskKind::region_visual : MaskKind::region_question;
  for (std::size_t row = layout.response.start; row < layout.response.end; ++row)
    for (std::size_t col = span.start; col < span.end; ++col) m.entries(row, col) = kNegInf;
  return m;
}

void write_mask_dump_header(std::ostream& os) {
  os << "example,position,rho,achieved_mass,masked_positions\n";
}

void write_mask_dump(std::ostream& os, const SalientSelection& selection,
                     const SegmentLayout& layout, std::size_t example) {
  for (std::size_t i = 0; i < selection.rows(); ++i) {
    os << example << ',' << layout.response.start + i << ',' << csv::num(selection.rho[i]) << ','
       << csv::num(selection.achieved_mass[i]) << ',';
    for (std::size_t k = 0; k < selection.masked[i].size(); ++k) {
      if (k) os << ' ';
      os << selection.masked[i][k];
    }
    os << '\n';
  }
}

}  // namespace maskkd
