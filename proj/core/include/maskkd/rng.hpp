#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace maskkd {

// Counter-based generator: output i of stream s under seed k is a pure
// function of (k, s, i). Independent streams need no shared state, so
// per-sample or per-worker generators are reproducible in any order.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0) noexcept
      : seed_(seed), stream_(stream) {}

  std::uint64_t next_u64() noexcept;

  // Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept;

  // Uniform integer in [0, n); n must be > 0.
  std::uint64_t below(std::uint64_t n) noexcept;

  // Standard normal via Box-Muller (no cached second variate).
  double normal() noexcept;

  template <typename T>
  void shuffle(std::span<T> items) noexcept {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }
  template <typename T>
  void shuffle(std::vector<T>& items) noexcept {
    shuffle(std::span<T>(items));
  }

  // Child generator with an independent stream derived from this one.
  Rng fork(std::uint64_t tag) const noexcept;

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream() const noexcept { return stream_; }
  std::uint64_t counter() const noexcept { return counter_; }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t counter_ = 0;
};

std::uint64_t splitmix64(std::uint64_t x) noexcept;

// FNV-1a over raw bytes; used for file and corpus provenance hashes.
std::uint64_t fnv1a64(std::span<const unsigned char> bytes,
                      std::uint64_t h = 0xcbf29ce484222325ULL) noexcept;

}  // namespace maskkd
