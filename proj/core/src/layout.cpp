#include "maskkd/layout.hpp"

#include "maskkd/error.hpp"

namespace maskkd {

void SegmentLayout::validate() const {
  if (visual.start != 0 || visual.end < visual.start || question.start != visual.end ||
      question.end < question.start || response.start != question.end ||
      response.end < response.start) {
    throw InvariantError("segment spans must be contiguous and ordered visual -> question -> "
                         "response starting at 0");
  }
}

SegmentLayout SegmentLayout::from_lengths(std::size_t n_visual, std::size_t n_question,
                                          std::size_t n_response) {
  SegmentLayout l;
  l.visual = {0, n_visual};
  l.question = {n_visual, n_visual + n_question};
  l.response = {n_visual + n_question, n_visual + n_question + n_response};
  return l;
}

void Sequence::validate() const {
  layout.validate();
  if (layout.total() != tokens.size()) {
    throw InvariantError("layout covers " + std::to_string(layout.total()) +
                         " positions but sequence has " + std::to_string(tokens.size()));
  }
}

std::vector<std::size_t> prediction_rows(const SegmentLayout& layout) {
  if (layout.response.empty()) return {};
  if (layout.response.start == 0) {
    throw PreconditionError("response span needs a preceding prompt token");
  }
  std::vector<std::size_t> rows;
  rows.reserve(layout.response.size());
  for (std::size_t p = layout.response.start; p < layout.response.end; ++p) rows.push_back(p - 1);
  return rows;
}

std::vector<int> response_targets(const Sequence& seq) {
  return {seq.tokens.begin() + static_cast<std::ptrdiff_t>(seq.layout.response.start),
          seq.tokens.begin() + static_cast<std::ptrdiff_t>(seq.layout.response.end)};
}

std::string to_string(MaskKind kind) {
  switch (kind) {
    case MaskKind::causal: return "causal";
    case MaskKind::salient: return "salient";
    case MaskKind::region_visual: return "region_visual";
    case MaskKind::region_question: return "region_question";
  }
  return "?";
}

AttentionMaskMatrix causal_mask(std::size_t n) {
  AttentionMaskMatrix m{Tensor({n, n}, 0.0), MaskKind::causal};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) m.entries(i, j) = kNegInf;
  return m;
}

}  // namespace maskkd
