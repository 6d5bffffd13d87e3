#include "maskkd/rng.hpp"

#include <cmath>
#include <numbers>

namespace maskkd {

std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t Rng::next_u64() noexcept {
  // Two rounds of mixing over (seed, stream, counter).
  std::uint64_t key = splitmix64(seed_ ^ splitmix64(stream_ + 0x632be59bd9b4e019ULL));
  std::uint64_t out = splitmix64(key + counter_ * 0x9e3779b97f4a7c15ULL);
  ++counter_;
  return splitmix64(out ^ key);
}

double Rng::uniform() noexcept {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::uint64_t Rng::below(std::uint64_t n) noexcept {
  // Lemire rejection keeps the result exactly uniform.
  std::uint64_t threshold = (0 - n) % n;
  for (;;) {
    std::uint64_t x = next_u64();
    __uint128_t m = static_cast<__uint128_t>(x) * n;
    if (static_cast<std::uint64_t>(m) >= threshold) {
      return static_cast<std::uint64_t>(m >> 64);
    }
  }
}

double Rng::normal() noexcept {
  double u1 = uniform();
  double u2 = uniform();
  if (u1 < 0x1.0p-60) u1 = 0x1.0p-60;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

Rng Rng::fork(std::uint64_t tag) const noexcept {
  return Rng(splitmix64(seed_ ^ (stream_ * 0xd1342543de82ef95ULL)) ^ splitmix64(tag + counter_),
             splitmix64(tag));
}

std::uint64_t fnv1a64(std::span<const unsigned char> bytes, std::uint64_t h) noexcept {
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace maskkd
