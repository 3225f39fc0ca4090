#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "smoothcache/calibration.hpp"
#include "smoothcache/diffusion.hpp"
#include "smoothcache/model.hpp"

namespace smoothcache {

/// Compute at this step, or reuse the branch output cached at `source`.
struct Decision {
  std::optional<std::size_t> source;

  static Decision compute() { return {}; }
  static Decision reuse(std::size_t src) { return {src}; }
  bool is_compute() const { return !source.has_value(); }
  bool operator==(const Decision&) const = default;
};

/// Static per-kind caching plan over execution steps.
struct Schedule {
  std::size_t steps = 0;
  std::optional<float> alpha;  // absent for uniform baselines
  std::size_t k_max = 0;
  std::map<LayerKind, std::vector<Decision>> decisions;

  std::size_t computed_steps(LayerKind kind) const;
  std::size_t reuse_count() const;
  bool operator==(const Schedule&) const = default;
};

/// Greedy anchor rule, per kind independently: scan s = 1..S-1 keeping the
/// last computed step a; reuse a when s - a <= k_max and the curve mean at
/// (s, s - a) is strictly below alpha, otherwise compute and move a to s.
/// Throws ValidationError naming (kind, s, k) when the curves do not cover
/// every cell with k <= k_max and s < S.
Schedule synthesize_greedy(const CurveSet& curves, float alpha, std::size_t k_max, std::size_t steps);

/// Compute every n-th step, reuse the latest computed step otherwise; same
/// pattern for every kind. k_max is recorded as n.
Schedule synthesize_uniform(std::size_t n, std::size_t steps,
                            std::span<const LayerKind> kinds = std::span<const LayerKind>(kAllLayerKinds));

struct Violation {
  std::optional<LayerKind> kind;
  std::size_t step = 0;
  std::string message;
};

/// Empty iff the schedule satisfies every invariant.
std::vector<Violation> validate(const Schedule& schedule);

struct MacPrediction {
  std::uint64_t total = 0;
  std::uint64_t baseline = 0;
  double ratio = 1.0;
  /// Eligible MACs actually spent per kind.
  std::map<LayerKind, std::uint64_t> per_kind;
};

/// Throws ValidationError if the schedule is invalid, its step count differs
/// from the sampler, or a kind present in the model is missing.
MacPrediction predict_macs(const Schedule& schedule, const ModelConfig& model_cfg, const SamplerConfig& sampler_cfg);

nlohmann::json schedule_to_json(const Schedule& schedule);
Schedule schedule_from_json(const nlohmann::json& j);
void save_schedule(const Schedule& schedule, const std::filesystem::path& path);
/// IoError when unreadable, ValidationError on malformed/invalid content.
Schedule load_schedule(const std::filesystem::path& path);

/// Compact rendering such as "C R0 R0 C".
std::string render(const std::vector<Decision>& row);

}  // namespace smoothcache
