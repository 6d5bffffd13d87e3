#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "maskkd/layout.hpp"
#include "maskkd/rng.hpp"

namespace maskkd {

// Token inventory of the synthetic lookup task. Ids below kFirstContent are
// specials; the rest split evenly into key and value symbols.
struct Vocab {
  static constexpr int kPad = 0;
  static constexpr int kThinkBegin = 1;
  static constexpr int kThinkEnd = 2;
  static constexpr int kAnswerBegin = 3;
  static constexpr int kEnd = 4;
  static constexpr int kSep = 5;
  static constexpr int kQueryOneHop = 6;
  static constexpr int kQueryTwoHop = 7;
  static constexpr int kFirstContent = 8;

  int size = 64;

  int n_keys() const noexcept { return (size - kFirstContent) / 2; }
  int n_values() const noexcept { return n_keys(); }
  int key(int i) const noexcept { return kFirstContent + i; }
  int value(int i) const noexcept { return kFirstContent + n_keys() + i; }
  bool is_key(int tok) const noexcept { return tok >= key(0) && tok < key(n_keys()); }
  bool is_value(int tok) const noexcept { return tok >= value(0) && tok < value(n_values()); }
  bool is_special(int tok) const noexcept { return tok >= 0 && tok < kFirstContent; }
  std::string name(int tok) const;

  void write(const std::filesystem::path& path) const;
};

struct CorpusParams {
  int n_facts = 6;
  int hops = 2;
  int restatements = 7;  // copies of the first-hop fact in the think segment
  double eval_fraction = 0.1;
  int vocab_size = 64;

  void validate() const;
  // Token counts of the encoding.
  std::size_t visual_length() const noexcept { return 2 * static_cast<std::size_t>(n_facts); }
  std::size_t question_length() const noexcept { return 2; }
  std::size_t response_length() const noexcept {
    return 3 * static_cast<std::size_t>(restatements) + 5;
  }
};

enum class Split { train, eval };

// visual: shuffled (key value) pairs; question: (query symbol, first key);
// response: <think> (k1 x ;) * restatements </think> <answer> a <end>, where x
// is the first-hop value. For two hops x is itself a key whose value is a.
struct TaskSample {
  std::vector<int> visual;
  std::vector<int> question;
  std::vector<int> response;
  int answer = -1;
  Split split = Split::train;

  std::vector<int> prompt() const;
  friend bool operator==(const TaskSample&, const TaskSample&) = default;
};

TaskSample gen_sample(Rng& rng, const CorpusParams& params);

// Sample i draws from stream i of `seed`; the last round(n * eval_fraction)
// samples form the eval split.
std::vector<TaskSample> gen_corpus(std::size_t n, std::uint64_t seed, const CorpusParams& params);

std::string serialize_sample(const TaskSample& s);
TaskSample parse_sample(const std::string& line);

// JSONL with a leading '#' header line; a vocabulary sidecar is written next
// to it as <path>.vocab. Returns the FNV-1a hash of the corpus file bytes.
std::uint64_t write_corpus(const std::filesystem::path& path, std::span<const TaskSample> samples,
                           const std::string& header, const Vocab& vocab);
std::vector<TaskSample> read_corpus(const std::filesystem::path& path);

std::uint64_t file_hash(const std::filesystem::path& path);
std::string hex64(std::uint64_t h);

// Throws CapacityError if the sample does not fit in max_seq_len.
Sequence layout_of(const TaskSample& sample, std::size_t max_seq_len);

std::vector<TaskSample> filter_split(std::span<const TaskSample> samples, Split split);

}  // namespace maskkd
