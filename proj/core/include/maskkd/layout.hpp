#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "maskkd/tensor.hpp"

namespace maskkd {

struct Span {
  std::size_t start = 0;
  std::size_t end = 0;  // exclusive

  std::size_t size() const noexcept { return end - start; }
  bool empty() const noexcept { return end == start; }
  bool contains(std::size_t i) const noexcept { return i >= start && i < end; }
  friend bool operator==(const Span&, const Span&) = default;
};

// Partition of a sequence into visual, question and response spans, in order.
struct SegmentLayout {
  Span visual;
  Span question;
  Span response;

  std::size_t total() const noexcept { return response.end; }

  // Throws InvariantError unless the spans are contiguous, ordered and
  // jointly cover [0, total).
  void validate() const;

  static SegmentLayout from_lengths(std::size_t n_visual, std::size_t n_question,
                                    std::size_t n_response);
  friend bool operator==(const SegmentLayout&, const SegmentLayout&) = default;
};

struct Sequence {
  std::vector<int> tokens;
  SegmentLayout layout;

  std::size_t size() const noexcept { return tokens.size(); }
  void validate() const;
};

// Rows whose next-token logits predict the response tokens: row
// response.start - 1 + n predicts response token n. These are the rows that
// carry distillation loss, token-wise divergences and budgets.
std::vector<std::size_t> prediction_rows(const SegmentLayout& layout);
// Gold next tokens for prediction_rows(layout), i.e. the response tokens.
std::vector<int> response_targets(const Sequence& seq);

enum class MaskKind { causal, salient, region_visual, region_question };

std::string to_string(MaskKind kind);

// Additive attention mask over the full sequence; entries are 0 or -inf.
struct AttentionMaskMatrix {
  Tensor entries;
  MaskKind kind = MaskKind::causal;

  std::size_t size() const noexcept { return entries.rows(); }
  bool masked(std::size_t row, std::size_t col) const noexcept {
    return entries(row, col) == kNegInf;
  }
};

AttentionMaskMatrix causal_mask(std::size_t n);

}  // namespace maskkd
