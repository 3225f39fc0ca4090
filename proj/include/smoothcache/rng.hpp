#pragma once

#include <cstdint>

#include "smoothcache/tensor.hpp"

namespace smoothcache {

/// SplitMix64 generator. Pure integer arithmetic, so the uniform stream is
/// identical on every platform for a given seed.
///
/// normal() uses Box-Muller on two consecutive uniform draws and returns the
/// cosine branch only; each normal consumes exactly two 64-bit draws.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 bits of resolution.
  double uniform();
  /// Standard normal sample.
  float normal();

  Tensor normal_tensor(Shape shape, float scale = 1.0f);

  std::uint64_t state() const { return state_; }

 private:
  std::uint64_t state_;
};

/// Derives an independent child seed (e.g. per sample or per stream) from a
/// base seed. Stable across releases: golden files depend on it.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream, std::uint64_t index);

}  // namespace smoothcache
