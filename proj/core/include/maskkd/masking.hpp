#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "maskkd/layout.hpp"
#include "maskkd/rng.hpp"
#include "maskkd/schedule.hpp"
#include "maskkd/tensor.hpp"

namespace maskkd {

// One row's selection. `positions` index into the weight vector it was
// selected from, ascending.
struct SelectionEntry {
  std::vector<std::size_t> positions;
  double rho = 0.0;
  double achieved_mass = 0.0;
};

// Selections for every response row of a sequence; masked positions are
// absolute sequence positions.
struct SalientSelection {
  std::vector<std::vector<std::size_t>> masked;
  std::vector<double> rho;
  std::vector<double> achieved_mass;

  std::size_t rows() const noexcept { return masked.size(); }
  std::size_t total_masked() const noexcept;
};

// Row n (1-based) of the response attention normalized over its n - 1
// prefixes. nullopt when the prefix mass is zero.
std::optional<std::vector<double>> normalize_prefix_row(const Tensor& a_resp, std::size_t n);

// Greedy top-rho collection: prefixes ranked by descending weight (ties to the
// lower index), excluded indices skipped, stopping once the cumulative weight
// reaches rho. Saturates to every eligible index when rho is unreachable.
SelectionEntry select_salient_prefixes(std::span<const double> weights, double rho,
                                       std::span<const std::size_t> exclude = {});

enum class SelectionStrategy { high_attention, low_attention, middle_attention, random, non_adaptive };

SelectionStrategy parse_selection_strategy(const std::string& s);
std::string to_string(SelectionStrategy s);

// Ablation orderings with the same stopping rule. non_adaptive selects from
// `weights` as given; callers pass the mean attention row and intersect.
SelectionEntry select_variant_prefixes(std::span<const double> weights, double rho,
                                       SelectionStrategy strategy, Rng& rng,
                                       std::span<const std::size_t> exclude = {});

// Selection under an alternative threshold rule; cumulative uses `rho`.
SelectionEntry select_by_rule(std::span<const double> weights, double rho, const ThresholdRule& rule,
                              std::span<const std::size_t> exclude = {});

struct SelectionOptions {
  SelectionStrategy strategy = SelectionStrategy::high_attention;
  ThresholdRule rule{};
  bool exclude_immediate_prev = true;
};

// Runs selection for every response row of `a_resp` (response x response
// attention). rho[i] is the budget of response row i.
SalientSelection select_salient_set(const Tensor& a_resp, std::span<const double> rho,
                                    const SegmentLayout& layout, const SelectionOptions& opts,
                                    Rng& rng);

// Causal mask plus -inf at every selected (response row, prefix) entry.
// Throws InvariantError if a selection names a non-response, diagonal or
// future position.
AttentionMaskMatrix build_salient_mask(const SalientSelection& selection,
                                       const SegmentLayout& layout);

enum class Region { visual, question };

// Causal mask plus -inf at every (response row, region column) entry.
AttentionMaskMatrix build_region_mask(Region region, const SegmentLayout& layout);

// CSV: example,position,rho,achieved_mass,masked_positions (space separated).
void write_mask_dump_header(std::ostream& os);
void write_mask_dump(std::ostream& os, const SalientSelection& selection,
                     const SegmentLayout& layout, std::size_t example);

}  // namespace maskkd
