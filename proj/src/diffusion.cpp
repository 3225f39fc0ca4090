#include "smoothcache/diffusion.hpp"

#include <cmath>

#include "smoothcache/errors.hpp"

namespace smoothcache {

NoiseSchedule make_schedule(std::size_t T, float beta_start, float beta_end) {
  if (T == 0) throw ConfigError("noise schedule needs T >= 1");
  if (!(beta_start > 0.0f && beta_start <= beta_end && beta_end < 1.0f)) {
    throw ConfigError("noise schedule needs 0 < beta_start <= beta_end < 1");
  }
  NoiseSchedule s;
  s.T = T;
  s.betas.resize(T);
  s.alpha_bars.resize(T);
  float prod = 1.0f;
  for (std::size_t i = 0; i < T; ++i) {
    const float frac = T == 1 ? 0.0f : static_cast<float>(i) / static_cast<float>(T - 1);
    s.betas[i] = beta_start + (beta_end - beta_start) * frac;
    prod *= 1.0f - s.betas[i];
    s.alpha_bars[i] = prod;
  }
  return s;
}

void SamplerConfig::validate() const {
  if (T == 0) throw ConfigError("sampler.T must be positive");
  if (steps == 0 || steps > T) throw ConfigError("sampler.steps must be in [1, T]");
  if (!std::isfinite(cfg_scale) || cfg_scale < 0.0f) throw ConfigError("sampler.cfg_scale must be >= 0");
  if (!(beta_start > 0.0f && beta_start <= beta_end && beta_end < 1.0f)) {
    throw ConfigError("sampler.beta_start/beta_end must satisfy 0 < start <= end < 1");
  }
}

nlohmann::json to_json(const SamplerConfig& cfg) {
  return {{"steps", cfg.steps}, {"cfg_scale", cfg.cfg_scale},   {"seed", cfg.seed},
          {"T", cfg.T},         {"beta_start", cfg.beta_start}, {"beta_end", cfg.beta_end}};
}

SamplerConfig sampler_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("sampler must be an object");
  SamplerConfig cfg;
  auto read = [&](const char* key, auto& out) {
    if (!j.contains(key)) return;
    try {
      out = j.at(key).get<std::decay_t<decltype(out)>>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(std::string("sampler.") + key + " has the wrong type");
    }
  };
  read("steps", cfg.steps);
  read("cfg_scale", cfg.cfg_scale);
  read("seed", cfg.seed);
  read("T", cfg.T);
  read("beta_start", cfg.beta_start);
  read("beta_end", cfg.beta_end);
  cfg.validate();
  return cfg;
}

std::vector<std::size_t> sampling_timesteps(std::size_t T, std::size_t steps) {
  if (steps == 0 || steps > T) throw ConfigError("sampling steps must be in [1, T]");
  std::vector<std::size_t> ts(steps);
  for (std::size_t s = 0; s < steps; ++s) ts[s] = T - (s * T) / steps;
  return ts;
}

Tensor forward_noise(const Tensor& x0, std::size_t t, const NoiseSchedule& schedule, SeededRng& rng) {
  if (t < 1 || t > schedule.T) throw ConfigError("forward_noise: t out of range");
  const double ab = schedule.alpha_bar(t);
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  Tensor out(x0.shape());
  for (std::size_t i = 0; i < x0.numel(); ++i) out[i] = static_cast<float>(a * x0[i] + b * rng.normal());
  return out;
}

namespace {

Tensor stack_rows(const Tensor& top, const Tensor& bottom) {
  std::vector<float> data(top.data().begin(), top.data().end());
  data.insert(data.end(), bottom.data().begin(), bottom.data().end());
  return Tensor({top.rows() + bottom.rows(), top.cols()}, std::move(data));
}

}  // namespace

SampleResult ddim_loop(const EpsFn& eps_fn, const Tensor& x_T, const NoiseSchedule& schedule, std::size_t steps,
                       float cfg_scale) {
  const auto ts = sampling_timesteps(schedule.T, steps);
  const bool guided = cfg_scale > 0.0f;
  const std::size_t n = x_T.numel();

  SampleResult res;
  res.trajectory.reserve(steps + 1);
  res.trajectory.push_back(x_T);
  Tensor x = x_T;
  for (std::size_t s = 0; s < steps; ++s) {
    const double ab_t = schedule.alpha_bar(ts[s]);
    const bool last = s + 1 == steps;
    const double ab_prev = last ? 1.0 : schedule.alpha_bar(ts[s + 1]);

    const Tensor out = eps_fn(guided ? stack_rows(x, x) : x, ts[s], s);
    if (out.numel() != (guided ? 2 * n : n)) throw ShapeError("ddim: predictor returned wrong shape");

    Tensor next(x.shape());
    const double sqrt_ab = std::sqrt(ab_t), sqrt_1mab = std::sqrt(1.0 - ab_t);
    const double sqrt_prev = std::sqrt(ab_prev), sqrt_1mprev = std::sqrt(1.0 - ab_prev);
    for (std::size_t i = 0; i < n; ++i) {
      double eps = out[i];
      if (guided) {
        const double uncond = out[n + i];
        eps = uncond + static_cast<double>(cfg_scale) * (eps - uncond);
      }
      const double x0_pred = (static_cast<double>(x[i]) - sqrt_1mab * eps) / sqrt_ab;
      next[i] = static_cast<float>(last ? x0_pred : sqrt_prev * x0_pred + sqrt_1mprev * eps);
    }
    x = std::move(next);
    res.trajectory.push_back(x);
  }
  res.x0 = x;
  return res;
}

Tensor initial_noise(const ModelConfig& model_cfg, std::uint64_t seed) {
  SeededRng rng(seed);
  return rng.normal_tensor({model_cfg.tokens, model_cfg.dim});
}

SampleResult ddim_sample(const DiTModel& model, const SamplerConfig& sampler, const NoiseSchedule& schedule,
                         BranchPolicy& policy, const Tensor* context) {
  sampler.validate();
  if (sampler.steps > schedule.T) throw ConfigError("sampler.steps exceeds schedule T");
  const ModelConfig& mc = model.config();

  Tensor batched_ctx;
  const Tensor* ctx = context;
  if (mc.has_cross_attention() && sampler.guided()) {
    const Tensor& cond = context ? *context : model.null_context();
    batched_ctx = stack_rows(cond, model.null_context());
    ctx = &batched_ctx;
  } else if (!mc.has_cross_attention()) {
    ctx = nullptr;
  }

  EpsFn fn = [&](const Tensor& x, std::size_t t, std::size_t s) {
    return model.forward(x, static_cast<double>(t), ctx, policy, s).eps;
  };
  return ddim_loop(fn, initial_noise(mc, sampler.seed), schedule, sampler.steps, sampler.cfg_scale);
}

}  // namespace smoothcache
