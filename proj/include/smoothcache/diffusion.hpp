#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include <json.hpp>

#include "smoothcache/model.hpp"
#include "smoothcache/rng.hpp"
#include "smoothcache/tensor.hpp"

namespace smoothcache {

/// Linear-beta forward process. Index t runs 1..T; betas[t-1] is beta_t.
struct NoiseSchedule {
  std::size_t T = 0;
  std::vector<float> betas;
  std::vector<float> alpha_bars;

  float alpha_bar(std::size_t t) const { return alpha_bars.at(t - 1); }
};

NoiseSchedule make_schedule(std::size_t T, float beta_start, float beta_end);

struct SamplerConfig {
  std::size_t steps = 50;
  /// 0 disables classifier-free guidance.
  float cfg_scale = 0.0f;
  std::uint64_t seed = 0;
  std::size_t T = 1000;
  float beta_start = 1e-4f;
  float beta_end = 0.02f;

  void validate() const;
  bool guided() const { return cfg_scale > 0.0f; }
  /// Model evaluations (batch rows) per execution step.
  std::size_t batch() const { return guided() ? 2 : 1; }
  bool operator==(const SamplerConfig&) const = default;
};

nlohmann::json to_json(const SamplerConfig& cfg);
SamplerConfig sampler_config_from_json(const nlohmann::json& j);

/// Evenly spaced, strictly descending subsequence of 1..T with `steps` entries.
/// Execution step s runs at timesteps[s].
std::vector<std::size_t> sampling_timesteps(std::size_t T, std::size_t steps);

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, eps ~ N(0, I) from rng.
Tensor forward_noise(const Tensor& x0, std::size_t t, const NoiseSchedule& schedule, SeededRng& rng);

/// Noise predictor seen by the sampler: (x_batched, timestep, step) -> eps_batched.
using EpsFn = std::function<Tensor(const Tensor& x, std::size_t timestep, std::size_t step)>;

struct SampleResult {
  Tensor x0;
  /// x_T followed by the state after each of the S updates.
  std::vector<Tensor> trajectory;
};

/// Deterministic (eta = 0) DDIM driven by an arbitrary predictor. `x_T` is the
/// initial state [L x d]. When `guided`, the predictor receives the state
/// stacked twice ([cond; uncond]) and must return eps for both halves.
SampleResult ddim_loop(const EpsFn& eps_fn, const Tensor& x_T, const NoiseSchedule& schedule, std::size_t steps,
                       float cfg_scale);

/// Initial noise x_T ~ N(0, I) for a sample seed.
Tensor initial_noise(const ModelConfig& model_cfg, std::uint64_t seed);

/// Full DDIM sampling of the toy DiT. With guidance the conditional half uses
/// `context` (or the null context when absent) and the unconditional half the
/// null context, batched into one forward per step.
SampleResult ddim_sample(const DiTModel& model, const SamplerConfig& sampler, const NoiseSchedule& schedule,
                         BranchPolicy& policy, const Tensor* context = nullptr);

}  // namespace smoothcache
