#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <vector>

#include <json.hpp>

#include "smoothcache/diffusion.hpp"
#include "smoothcache/model.hpp"
#include "smoothcache/scheduler.hpp"

namespace smoothcache {

/// One live branch output per sublayer plus the step it was computed at.
class CacheStore {
 public:
  struct Entry {
    Tensor value;
    std::size_t source_step = 0;
  };

  /// Deep copy; overwrites any earlier entry for the key.
  void store(const LayerKey& key, const Tensor& value, std::size_t step);
  /// Entry for `key` computed at `source_step`. Throws InvariantError on a
  /// miss or when the live entry comes from a different step.
  const Tensor& fetch(const LayerKey& key, std::size_t source_step) const;
  std::size_t size() const { return entries_.size(); }

 private:
  std::map<LayerKey, Entry> entries_;
};

struct TraceEntry {
  std::size_t step = 0;
  LayerKey key{LayerKind::SelfAttention, 0};
  Decision action;
  bool operator==(const TraceEntry&) const = default;
};

struct ExecutionTrace {
  std::vector<TraceEntry> entries;
  /// Matmul MACs actually executed during the run (instrumented count).
  std::uint64_t macs = 0;

  /// Entry-for-entry comparison against the plan; returns the first mismatch
  /// description or nullopt.
  std::optional<std::string> mismatch(const Schedule& schedule, const std::vector<LayerKey>& keys) const;
};

/// Branch policy that follows a Schedule, filling and serving a CacheStore
/// and recording what it actually did.
class SchedulePolicy : public BranchPolicy {
 public:
  explicit SchedulePolicy(const Schedule& schedule) : schedule_(schedule) {}

  const Tensor* cached_branch(const LayerKey& key, std::size_t step) override;
  void on_computed(const BranchOutput& out) override;

  const ExecutionTrace& trace() const { return trace_; }
  ExecutionTrace& trace() { return trace_; }

 private:
  const Schedule& schedule_;
  CacheStore cache_;
  ExecutionTrace trace_;
};

struct CachedRun {
  Tensor x0;
  std::vector<Tensor> trajectory;
  ExecutionTrace trace;
};

/// Samples under `schedule`, injecting cached branch outputs for Reuse
/// decisions. Throws ValidationError for invalid/mismatched schedules and
/// InvariantError if the executed trace diverges from the plan.
CachedRun run_cached(const DiTModel& model, const SamplerConfig& sampler, const Schedule& schedule,
                     const Tensor* context = nullptr);

/// Plain uncached sampling for the same sampler settings.
SampleResult run_uncached(const DiTModel& model, const SamplerConfig& sampler, const Tensor* context = nullptr);

struct FidelityReport {
  double rel_l1 = 0.0;
  double psnr = 0.0;
  double cosine = 1.0;
  /// rel_l1 between baseline and cached states at each trajectory index.
  std::vector<double> trajectory_divergence;
};

inline constexpr double kMaxPsnr = 99.0;

/// Baseline-referenced fidelity. PSNR uses the baseline's value range as the
/// peak and is capped at kMaxPsnr.
FidelityReport compare_runs(const Tensor& baseline_x0, const Tensor& cached_x0,
                            const std::vector<Tensor>& baseline_traj = {}, const std::vector<Tensor>& cached_traj = {});

double psnr(const Tensor& reference, const Tensor& test);
double cosine_similarity(const Tensor& a, const Tensor& b);

nlohmann::json to_json(const FidelityReport& r, bool include_trajectory = false);
void write_trace_jsonl(const ExecutionTrace& trace, const std::filesystem::path& path);

}  // namespace smoothcache
