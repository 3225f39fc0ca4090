#include "smoothcache/rng.hpp"

#include <cmath>
#include <numbers>

namespace smoothcache {

std::uint64_t SeededRng::next_u64() {
  std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

double SeededRng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

float SeededRng::normal() {
  // u1 in (0, 1] keeps the log finite.
  const double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
  const double u2 = uniform();
  return static_cast<float>(std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2));
}

Tensor SeededRng::normal_tensor(Shape shape, float scale) {
  Tensor t(std::move(shape));
  for (float& v : t.data()) v = normal() * scale;
  return t;
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream, std::uint64_t index) {
  SeededRng mix(base ^ (stream * 0xd1b54a32d192ed03ULL));
  for (std::uint64_t i = 0; i < 2; ++i) mix.next_u64();
  SeededRng out(mix.next_u64() + index * 0x9e3779b97f4a7c15ULL);
  return out.next_u64();
}

}  // namespace smoothcache
