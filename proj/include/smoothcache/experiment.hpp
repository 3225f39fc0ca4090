#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "smoothcache/calibration.hpp"
#include "smoothcache/diffusion.hpp"
#include "smoothcache/metrics.hpp"
#include "smoothcache/model.hpp"
#include "smoothcache/runtime.hpp"
#include "smoothcache/scheduler.hpp"

namespace smoothcache {

/// Everything a calibrate/schedule/run/sweep invocation needs. Missing JSON
/// fields fall back to these defaults.
struct ExperimentConfig {
  ModelConfig model;
  SamplerConfig sampler;
  CalibrationConfig calib;
  /// Explicit thresholds.
  std::vector<float> alphas;
  /// Thresholds placed at these percentiles (0-100) of all curve means.
  std::vector<double> alpha_percentiles{30.0, 60.0, 90.0};
  /// Uniform periods; n = 1 is the uncached row.
  std::vector<std::size_t> baselines{1, 2, 3};
  std::size_t eval_samples = 2;
  std::size_t bench_warmup = 1;
  std::size_t bench_runs = 3;
  std::filesystem::path output_dir = "smoothcache_out";

  /// Throws ConfigError naming the field.
  void validate() const;
  void validate_for_sweep() const;
};

nlohmann::json to_json(const ExperimentConfig& cfg);
ExperimentConfig experiment_from_json(const nlohmann::json& j);
/// IoError if unreadable, ConfigError if malformed.
ExperimentConfig load_experiment(const std::filesystem::path& path);

/// Linear-interpolation percentile (p in [0, 100]).
double percentile(std::vector<double> values, double p);
/// Every cell mean of every kind, unsorted.
std::vector<double> curve_means(const CurveSet& curves);

/// Runs calibration and writes records.jsonl, curves.json and
/// curves_<kind>.csv into `out_dir`.
CalibrationResult calibrate_to_dir(const ExperimentConfig& cfg, const std::filesystem::path& out_dir,
                                   std::size_t workers = 1);

/// Uncached evaluation outputs for the config's eval samples.
struct Baseline {
  std::vector<SampleResult> samples;
};
Baseline run_baseline(const DiTModel& model, const ExperimentConfig& cfg);

struct EvaluatedSchedule {
  std::vector<Tensor> x0;
  MacPrediction predicted;
  /// Instrumented MACs of a single sample run.
  std::uint64_t measured_macs = 0;
  /// Averaged over eval samples.
  FidelityReport fidelity;
};

/// Runs every eval sample under `schedule` and compares with the baseline.
/// Throws InvariantError if measured MACs differ from the prediction.
EvaluatedSchedule evaluate_schedule(const DiTModel& model, const ExperimentConfig& cfg, const Schedule& schedule,
                                    const Baseline& baseline);

LatencyStats bench_schedule(const DiTModel& model, const ExperimentConfig& cfg, const Schedule& schedule);

struct SweepRow {
  std::string label;
  std::optional<float> alpha;
  std::optional<double> alpha_percentile;
  std::optional<std::size_t> uniform_n;
  Schedule schedule;
  MacPrediction macs;
  FidelityReport fidelity;
  std::optional<LatencyStats> latency;
};

struct SweepResult {
  CalibrationResult calibration;
  MacBreakdown mac_breakdown;
  /// Sorted by MAC ratio, descending.
  std::vector<SweepRow> rows;
};

/// Calibrate once, synthesize every alpha / uniform schedule, run each
/// against the shared uncached baseline. Writes curves, schedules,
/// sweep.csv (deterministic), sweep.md and latency.json into `out_dir`.
SweepResult run_sweep(const ExperimentConfig& cfg, const std::filesystem::path& out_dir, bool measure_latency = true);

/// Deterministic CSV of the sweep rows (no latency).
std::string sweep_csv(const SweepResult& result);
/// Human-readable table including latency and the MAC cross-check notes.
std::string sweep_markdown(const SweepResult& result);

/// Published uniform n=2 reference numbers used by the MAC cross-check.
struct MacCrossCheck {
  double reference_ratio = 0.0;
  double implied_fraction_26 = 0.0;  // ratio = (1-f) + f*26/50
  double implied_fraction_25 = 0.0;  // ratio = (1-f) + f*25/50
};
MacCrossCheck reference_mac_cross_check();

}  // namespace smoothcache
