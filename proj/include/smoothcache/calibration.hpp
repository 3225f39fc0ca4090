#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include <json.hpp>

#include "smoothcache/diffusion.hpp"
#include "smoothcache/model.hpp"

namespace smoothcache {

/// Cross-step error of one sublayer: rel_l1(h_step, h_{step-k}) for one sample.
struct ErrorRecord {
  std::size_t sample = 0;
  LayerKey key{LayerKind::SelfAttention, 0};
  std::size_t step = 0;
  std::size_t k = 1;
  float err = 0.0f;
  /// Zero-norm reference at `step`; excluded from aggregation.
  bool degenerate = false;
};

/// Deterministic merge order: (sample, step, key, k).
void sort_records(std::vector<ErrorRecord>& records);

struct CurveCell {
  float mean = 0.0f;
  float std = 0.0f;
  float ci95 = 0.0f;
  /// Number of calibration samples behind the cell. n == 1 means std is
  /// undefined and stored as 0.
  std::size_t n = 0;
  bool operator==(const CurveCell&) const = default;
};

/// Mean error per (execution step s, skip k), averaged over blocks and samples.
struct ErrorCurve {
  LayerKind kind = LayerKind::SelfAttention;
  std::size_t steps = 0;
  std::size_t k_max = 0;
  std::map<std::pair<std::size_t, std::size_t>, CurveCell> cells;

  const CurveCell* find(std::size_t s, std::size_t k) const;
  bool operator==(const ErrorCurve&) const = default;
};

using CurveSet = std::map<LayerKind, ErrorCurve>;

/// Number of (s, k) cells a complete curve has: sum over k of (steps - k).
std::size_t expected_cell_count(std::size_t steps, std::size_t k_max);

struct CalibrationConfig {
  std::size_t n_samples = 10;
  std::size_t k_max = 3;
  /// Seeded random contexts instead of the null context.
  bool conditional = false;
  std::uint64_t seed = 1000;

  void validate() const;
  bool operator==(const CalibrationConfig&) const = default;
};

nlohmann::json to_json(const CalibrationConfig& cfg);
CalibrationConfig calibration_config_from_json(const nlohmann::json& j);

/// Seed and (optional) conditioning context of sample `index`.
struct SampleInputs {
  std::uint64_t seed = 0;
  std::optional<Tensor> context;
};
SampleInputs make_sample_inputs(const ModelConfig& model_cfg, std::uint64_t base_seed, std::size_t index,
                                bool conditional);

/// Online error tracker: keeps the last k_max branch outputs per sublayer and
/// emits one record per k whenever a new output arrives.
class ErrorTracker {
 public:
  ErrorTracker(std::size_t sample, std::size_t k_max) : sample_(sample), k_max_(k_max) {}
  void observe(const BranchOutput& out, std::vector<ErrorRecord>& sink);

 private:
  std::size_t sample_;
  std::size_t k_max_;
  std::map<LayerKey, std::deque<std::pair<std::size_t, Tensor>>> history_;
};

/// Per-(kind, s, k) statistics: block average within each sample, then
/// mean / Bessel-corrected std / 1.96*std/sqrt(n) across samples.
CurveSet aggregate_curves(std::span<const ErrorRecord> records, std::span<const LayerKind> kinds, std::size_t steps,
                          std::size_t k_max);

/// mean, sample std and ci95 of a set of per-sample values.
CurveCell summarize(std::span<const double> values);

struct CalibrationResult {
  std::vector<ErrorRecord> records;
  CurveSet curves;
  std::size_t degenerate_count = 0;
};

/// Optional tap on every branch output seen during calibration. Called from
/// worker threads when workers > 1.
using BranchObserver = std::function<void(std::size_t sample, const BranchOutput&)>;

/// Fully uncached calibration passes over n_samples seeded samples.
CalibrationResult calibrate(const DiTModel& model, const SamplerConfig& sampler, const CalibrationConfig& calib,
                            const BranchObserver& observer = {}, std::size_t workers = 1);

nlohmann::json curves_to_json(const CurveSet& curves);
/// Schema validation with field paths; throws ValidationError.
CurveSet curves_from_json(const nlohmann::json& j);

void save_curves(const CurveSet& curves, const std::filesystem::path& path);
/// Throws IoError when unreadable, ValidationError on malformed or
/// incomplete content (parse errors carry line/column).
CurveSet load_curves(const std::filesystem::path& path);

void write_records_jsonl(std::span<const ErrorRecord> records, const std::filesystem::path& path);
/// Columns step,k,mean,lo,hi with lo/hi = mean -/+ ci95.
void export_curve_csv(const ErrorCurve& curve, const std::filesystem::path& path);

}  // namespace smoothcache
