#include "commlearn/rng.hpp"

#include <cmath>
#include <numbers>

namespace commlearn {

namespace {

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ull;

std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

}  // namespace

std::uint64_t derive_key(std::initializer_list<std::uint64_t> parts) {
  std::uint64_t acc = 0x243F6A8885A308D3ull;  // pi digits
  for (std::uint64_t p : parts) {
    acc = mix64(acc + kGolden + p);
  }
  return acc;
}

std::uint64_t RngStream::derive_key_with_root(std::uint64_t root,
                                              std::initializer_list<std::uint64_t> path) {
  std::uint64_t acc = mix64(0x243F6A8885A308D3ull + kGolden + root);
  for (std::uint64_t p : path) {
    acc = mix64(acc + kGolden + p);
  }
  return acc;
}

std::uint64_t RngStream::next_u64() {
  ++counter_;
  return mix64(key_ + counter_ * kGolden);
}

double RngStream::next_uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngStream::next_normal() {
  // Box-Muller, cosine branch only; consumes two uniforms per draw.
  double u1 = next_uniform();
  double u2 = next_uniform();
  if (u1 <= 0.0) u1 = 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::int64_t RngStream::next_below(std::int64_t n) {
  return static_cast<std::int64_t>(next_u64() % static_cast<std::uint64_t>(n));
}

}  // namespace commlearn
