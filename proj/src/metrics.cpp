#include "smoothcache/metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <vector>

#include "smoothcache/errors.hpp"

namespace smoothcache {

MacBreakdown mac_model(const ModelConfig& cfg) {
  cfg.validate();
  const std::uint64_t L = cfg.tokens, Lc = cfg.context_tokens, d = cfg.dim, N = cfg.blocks, m = cfg.ffn_mult;
  const std::uint64_t n_sub = cfg.kinds().size();

  MacBreakdown b;
  // qkv + out projections, scores and values (summed over heads).
  b.per_sublayer[LayerKind::SelfAttention] = matmul_macs(L, d, 3 * d) + matmul_macs(L, d, d) + 2 * L * L * d;
  if (cfg.has_cross_attention()) {
    b.per_sublayer[LayerKind::CrossAttention] =
        2 * matmul_macs(L, d, d) + matmul_macs(Lc, d, 2 * d) + 2 * L * Lc * d;
  }
  b.per_sublayer[LayerKind::FeedForward] = matmul_macs(L, d, m * d) + matmul_macs(L, m * d, d);

  for (const auto& [kind, macs] : b.per_sublayer) {
    b.eligible_per_kind[kind] = N * macs;
    b.eligible += N * macs;
  }
  b.non_eligible = 2 * matmul_macs(1, d, d)             // time-embedding MLP
                   + N * matmul_macs(1, d, 3 * n_sub * d)  // per-block adaLN
                   + matmul_macs(1, d, 2 * d)              // final adaLN
                   + matmul_macs(L, d, d);                 // output head
  b.eligible_fraction = static_cast<double>(b.eligible) / static_cast<double>(b.total());
  return b;
}

LatencyStats bench(const std::function<void()>& fn, std::size_t warmup, std::size_t runs) {
  if (runs == 0) throw ConfigError("bench: runs must be at least 1");
  using clock = std::chrono::steady_clock;
  for (std::size_t i = 0; i < warmup; ++i) fn();
  std::vector<double> times;
  times.reserve(runs);
  for (std::size_t i = 0; i < runs; ++i) {
    const auto t0 = clock::now();
    fn();
    times.push_back(std::chrono::duration<double>(clock::now() - t0).count());
  }
  LatencyStats s;
  s.runs = runs;
  s.warmup = warmup;
  double sum = 0.0;
  for (double t : times) sum += t;
  s.mean_s = sum / static_cast<double>(runs);
  s.min_s = *std::min_element(times.begin(), times.end());
  if (runs > 1) {
    double ss = 0.0;
    for (double t : times) ss += (t - s.mean_s) * (t - s.mean_s);
    s.std_s = std::sqrt(ss / static_cast<double>(runs - 1));
  }
  return s;
}

nlohmann::json to_json(const LatencyStats& s) {
  return {{"mean_s", s.mean_s}, {"std_s", s.std_s}, {"min_s", s.min_s}, {"runs", s.runs}, {"warmup", s.warmup}};
}

double implied_eligible_fraction(double observed_ratio, double computed_fraction) {
  if (computed_fraction >= 1.0) throw ConfigError("computed fraction must be below 1");
  return (1.0 - observed_ratio) / (1.0 - computed_fraction);
}

}  // namespace smoothcache
