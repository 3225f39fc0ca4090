#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>

#include <json.hpp>

#include "smoothcache/model.hpp"

namespace smoothcache {

/// Analytic MACs of one forward evaluation of a single sample (batch 1).
/// Matmuls are priced at m*k*n; softmax, norms and elementwise ops at zero.
struct MacBreakdown {
  /// MACs of one sublayer instance, per kind.
  std::map<LayerKind, std::uint64_t> per_sublayer;
  /// Summed over all N blocks, per kind.
  std::map<LayerKind, std::uint64_t> eligible_per_kind;
  std::uint64_t eligible = 0;
  /// Time-embedding MLP, adaLN projections and the output head.
  std::uint64_t non_eligible = 0;
  double eligible_fraction = 0.0;

  std::uint64_t total() const { return eligible + non_eligible; }
};

MacBreakdown mac_model(const ModelConfig& cfg);

constexpr std::uint64_t matmul_macs(std::uint64_t m, std::uint64_t k, std::uint64_t n) { return m * k * n; }

struct LatencyStats {
  std::size_t runs = 0;
  std::size_t warmup = 0;
  double mean_s = 0.0;
  double std_s = 0.0;
  double min_s = 0.0;
};

/// Runs `fn` warmup times untimed, then `runs` times on the steady clock.
/// std is the sample standard deviation (0 for a single run).
LatencyStats bench(const std::function<void()>& fn, std::size_t warmup, std::size_t runs);

nlohmann::json to_json(const LatencyStats& s);

/// Eligible fraction f implied by an observed uniform-caching MAC ratio,
/// solving ratio = (1 - f) + f * computed_fraction.
double implied_eligible_fraction(double observed_ratio, double computed_fraction);

}  // namespace smoothcache
