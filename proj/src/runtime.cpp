#include "smoothcache/runtime.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "smoothcache/errors.hpp"
#include "smoothcache/ops.hpp"

namespace smoothcache {

void CacheStore::store(const LayerKey& key, const Tensor& value, std::size_t step) {
  entries_[key] = Entry{value, step};
}

const Tensor& CacheStore::fetch(const LayerKey& key, std::size_t source_step) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) throw InvariantError("cache miss for " + to_string(key));
  if (it->second.source_step != source_step) {
    throw InvariantError("cache for " + to_string(key) + " holds step " + std::to_string(it->second.source_step) +
                         ", schedule asked for step " + std::to_string(source_step));
  }
  return it->second.value;
}

std::optional<std::string> ExecutionTrace::mismatch(const Schedule& schedule, const std::vector<LayerKey>& keys) const {
  if (entries.size() != schedule.steps * keys.size()) {
    return "trace has " + std::to_string(entries.size()) + " entries, expected " +
           std::to_string(schedule.steps * keys.size());
  }
  std::size_t i = 0;
  for (std::size_t s = 0; s < schedule.steps; ++s) {
    for (const auto& key : keys) {
      const TraceEntry expected{s, key, schedule.decisions.at(key.kind).at(s)};
      if (!(entries[i] == expected)) {
        return "trace diverges from schedule at step " + std::to_string(s) + " for " + to_string(key);
      }
      ++i;
    }
  }
  return std::nullopt;
}

const Tensor* SchedulePolicy::cached_branch(const LayerKey& key, std::size_t step) {
  const Decision& d = schedule_.decisions.at(key.kind).at(step);
  if (d.is_compute()) return nullptr;
  const Tensor& value = cache_.fetch(key, *d.source);
  trace_.entries.push_back({step, key, d});
  return &value;
}

void SchedulePolicy::on_computed(const BranchOutput& out) {
  cache_.store(out.key, out.value, out.step);
  trace_.entries.push_back({out.step, out.key, Decision::compute()});
}

CachedRun run_cached(const DiTModel& model, const SamplerConfig& sampler, const Schedule& schedule,
                     const Tensor* context) {
  const auto violations = validate(schedule);
  if (!violations.empty()) throw ValidationError("invalid schedule: " + violations.front().message);
  if (schedule.steps != sampler.steps) {
    throw ValidationError("schedule has " + std::to_string(schedule.steps) + " steps, sampler has " +
                          std::to_string(sampler.steps));
  }
  for (LayerKind kind : model.config().kinds()) {
    if (!schedule.decisions.count(kind)) {
      throw ValidationError("schedule has no decisions for kind " + std::string(to_string(kind)));
    }
  }

  const NoiseSchedule noise = make_schedule(sampler.T, sampler.beta_start, sampler.beta_end);
  SchedulePolicy policy(schedule);
  MacScope macs;
  SampleResult sample = ddim_sample(model, sampler, noise, policy, context);

  CachedRun run{std::move(sample.x0), std::move(sample.trajectory), std::move(policy.trace())};
  run.trace.macs = macs.elapsed();
  if (auto why = run.trace.mismatch(schedule, model.cacheable_keys())) throw InvariantError(*why);
  return run;
}

SampleResult run_uncached(const DiTModel& model, const SamplerConfig& sampler, const Tensor* context) {
  const NoiseSchedule noise = make_schedule(sampler.T, sampler.beta_start, sampler.beta_end);
  ComputeAllPolicy policy;
  return ddim_sample(model, sampler, noise, policy, context);
}

double psnr(const Tensor& reference, const Tensor& test) {
  if (reference.shape() != test.shape()) throw ShapeError("psnr: shape mismatch");
  const auto [lo, hi] = std::minmax_element(reference.data().begin(), reference.data().end());
  const double range = static_cast<double>(*hi) - static_cast<double>(*lo);
  double se = 0.0;
  for (std::size_t i = 0; i < reference.numel(); ++i) {
    const double e = static_cast<double>(reference[i]) - static_cast<double>(test[i]);
    se += e * e;
  }
  const double mse = se / static_cast<double>(reference.numel());
  if (mse == 0.0 || range == 0.0) return mse == 0.0 ? kMaxPsnr : 0.0;
  return std::min(kMaxPsnr, 20.0 * std::log10(range) - 10.0 * std::log10(mse));
}

double cosine_similarity(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("cosine: shape mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  if (na == 0.0 && nb == 0.0) return 1.0;
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

namespace {

double rel_l1_or_zero(const Tensor& ref, const Tensor& test) {
  try {
    return rel_l1_error(ref, test);
  } catch (const DegenerateReferenceError&) {
    // Zero reference: identical tensors count as no divergence, anything else
    // as unbounded.
    return ref.bitwise_equal(test) ? 0.0 : std::numeric_limits<double>::infinity();
  }
}

}  // namespace

FidelityReport compare_runs(const Tensor& baseline_x0, const Tensor& cached_x0, const std::vector<Tensor>& baseline_traj,
                            const std::vector<Tensor>& cached_traj) {
  if (baseline_x0.shape() != cached_x0.shape()) throw ShapeError("compare_runs: x0 shape mismatch");
  if (baseline_traj.size() != cached_traj.size()) throw ShapeError("compare_runs: trajectory length mismatch");
  FidelityReport r;
  r.rel_l1 = rel_l1_or_zero(baseline_x0, cached_x0);
  r.psnr = psnr(baseline_x0, cached_x0);
  r.cosine = cosine_similarity(baseline_x0, cached_x0);
  for (std::size_t i = 0; i < baseline_traj.size(); ++i)
    r.trajectory_divergence.push_back(rel_l1_or_zero(baseline_traj[i], cached_traj[i]));
  return r;
}

nlohmann::json to_json(const FidelityReport& r, bool include_trajectory) {
  nlohmann::json j = {{"rel_l1", r.rel_l1}, {"psnr", r.psnr}, {"cosine", r.cosine}};
  if (include_trajectory) j["trajectory_divergence"] = r.trajectory_divergence;
  return j;
}

void write_trace_jsonl(const ExecutionTrace& trace, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& e : trace.entries) {
    nlohmann::json j = {{"step", e.step}, {"kind", to_string(e.key.kind)}, {"block", e.key.block}};
    j["action"] = e.action.is_compute() ? nlohmann::json("C") : nlohmann::json(*e.action.source);
    out << j.dump() << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace smoothcache
