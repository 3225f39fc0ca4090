// smoothcache: calibrate / schedule / run / compare / sweep / export-curves.
//
// Exit codes: 0 success, 2 validation, 3 IO, 4 internal invariant breach.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "smoothcache/errors.hpp"
#include "smoothcache/experiment.hpp"
#include "smoothcache/ops.hpp"
#include "smoothcache/sctd.hpp"

namespace fs = std::filesystem;
using namespace smoothcache;

namespace {

enum ExitCode { kOk = 0, kValidation = 2, kIo = 3, kInternal = 4 };

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> k_max;
  std::optional<std::size_t> steps;
  std::optional<float> cfg_scale;
  std::optional<std::size_t> samples;
  std::optional<std::size_t> threads;
  std::string out;
};

void add_common(CLI::App* cmd, Overrides& o, bool with_seed) {
  cmd->add_option("--config", o.config, "Experiment config JSON");
  if (with_seed) cmd->add_option("--seed", o.seed, "Seed (falls back to $SMOOTHCACHE_SEED)")->envname("SMOOTHCACHE_SEED");
  cmd->add_option("--steps", o.steps, "Sampling steps S");
  cmd->add_option("--cfg-scale", o.cfg_scale, "Classifier-free guidance scale (0 disables)");
  cmd->add_option("--threads", o.threads, "Matmul kernel threads");
  cmd->add_option("--out", o.out, "Output path");
}

ExperimentConfig resolve(const Overrides& o) {
  ExperimentConfig cfg = o.config.empty() ? ExperimentConfig{} : load_experiment(o.config);
  if (o.steps) cfg.sampler.steps = *o.steps;
  if (o.cfg_scale) cfg.sampler.cfg_scale = *o.cfg_scale;
  if (o.k_max) cfg.calib.k_max = *o.k_max;
  if (o.threads) set_kernel_threads(*o.threads);
  return cfg;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

int cmd_calibrate(const Overrides& o) {
  ExperimentConfig cfg = resolve(o);
  if (o.seed) cfg.calib.seed = *o.seed;
  if (o.samples) cfg.calib.n_samples = *o.samples;
  cfg.validate();
  const fs::path out = o.out.empty() ? cfg.output_dir : fs::path(o.out);
  const CalibrationResult res = calibrate_to_dir(cfg, out);
  std::size_t cells = 0;
  for (const auto& [kind, curve] : res.curves) {
    std::cout << to_string(kind) << ": " << curve.cells.size() << " cells\n";
    cells += curve.cells.size();
  }
  std::cout << "total cells: " << cells << "\n"
            << "degenerate records: " << res.degenerate_count << "\n"
            << "curves written to " << (out / "curves.json").string() << "\n";
  return kOk;
}

int cmd_schedule(const Overrides& o, const std::string& curves_path, std::optional<float> alpha,
                 std::optional<std::size_t> uniform) {
  ExperimentConfig cfg = resolve(o);
  if (alpha.has_value() == uniform.has_value()) throw ConfigError("schedule needs exactly one of --alpha or --uniform");
  Schedule sched;
  if (alpha) {
    if (!(*alpha > 0.0f)) throw ConfigError("--alpha must be > 0");
    if (curves_path.empty()) throw ConfigError("--alpha requires --curves");
    const CurveSet curves = load_curves(curves_path);
    if (!o.steps && !curves.empty()) cfg.sampler.steps = curves.begin()->second.steps;
    sched = synthesize_greedy(curves, *alpha, cfg.calib.k_max, cfg.sampler.steps);
  } else {
    if (*uniform == 0) throw ConfigError("--uniform must be >= 1");
    const auto kinds = cfg.model.kinds();
    sched = synthesize_uniform(*uniform, cfg.sampler.steps, kinds);
  }
  cfg.validate();
  const auto violations = validate(sched);
  if (!violations.empty()) throw InvariantError("synthesized schedule is invalid: " + violations.front().message);
  const fs::path out = o.out.empty() ? cfg.output_dir / "schedule.json" : fs::path(o.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  save_schedule(sched, out);
  const MacPrediction p = predict_macs(sched, cfg.model, cfg.sampler);
  for (const auto& [kind, row] : sched.decisions)
    std::cout << to_string(kind) << ": " << sched.computed_steps(kind) << "/" << sched.steps << " computed\n";
  std::cout << "predicted MAC ratio: " << p.ratio << "\n"
            << "schedule written to " << out.string() << "\n";
  return kOk;
}

int cmd_run(const Overrides& o, const std::string& schedule_path, const std::string& report_path) {
  ExperimentConfig cfg = resolve(o);
  if (o.seed) cfg.sampler.seed = *o.seed;
  if (o.samples) cfg.eval_samples = *o.samples;
  cfg.validate();
  const DiTModel model = DiTModel::build(cfg.model);
  const Schedule sched = schedule_path.empty() ? synthesize_uniform(1, cfg.sampler.steps, cfg.model.kinds())
                                               : load_schedule(schedule_path);
  if (sched.steps != cfg.sampler.steps) {
    throw ConfigError("schedule has " + std::to_string(sched.steps) + " steps but sampler.steps is " +
                      std::to_string(cfg.sampler.steps));
  }
  const fs::path out = o.out.empty() ? cfg.output_dir : fs::path(o.out);
  fs::create_directories(out);

  const Baseline baseline = run_baseline(model, cfg);
  const EvaluatedSchedule ev = evaluate_schedule(model, cfg, sched, baseline);
  for (std::size_t i = 0; i < ev.x0.size(); ++i) sctd::save(out / ("sample_" + std::to_string(i) + ".sctd"), ev.x0[i]);

  const fs::path report = report_path.empty() ? out / "report.json" : fs::path(report_path);
  nlohmann::json j = {{"macs", {{"total", ev.measured_macs}, {"baseline", ev.predicted.baseline},
                                {"ratio", static_cast<double>(ev.measured_macs) / static_cast<double>(ev.predicted.baseline)}}},
                      {"fidelity", to_json(ev.fidelity)}};
  write_json(report, j);

  const LatencyStats lat = bench_schedule(model, cfg, sched);
  fs::path lat_path = report;
  lat_path.replace_extension(".latency.json");
  write_json(lat_path, {{"latency", to_json(lat)}});

  std::cout << "samples: " << ev.x0.size() << "\n"
            << "MAC ratio: " << j["macs"]["ratio"].get<double>() << "\n"
            << "rel_l1: " << ev.fidelity.rel_l1 << "  psnr: " << ev.fidelity.psnr << "  cosine: " << ev.fidelity.cosine
            << "\n"
            << "report written to " << report.string() << "\n";
  return kOk;
}

int cmd_compare(const std::string& baseline_path, const std::string& cached_path, const std::string& out) {
  const auto base = sctd::load_sequence(baseline_path);
  const auto cached = sctd::load_sequence(cached_path);
  if (base.size() != cached.size()) throw ValidationError("compare: files hold different numbers of tensors");
  const FidelityReport r = base.size() > 1 ? compare_runs(base.back(), cached.back(), base, cached)
                                           : compare_runs(base.back(), cached.back());
  const nlohmann::json j = to_json(r, base.size() > 1);
  if (out.empty()) {
    std::cout << j.dump(2) << "\n";
  } else {
    write_json(out, j);
  }
  return kOk;
}

int cmd_sweep(const Overrides& o, const std::vector<float>& alphas, const std::vector<std::size_t>& uniforms,
              bool no_latency) {
  ExperimentConfig cfg = resolve(o);
  if (o.seed) cfg.sampler.seed = *o.seed;
  if (o.samples) cfg.calib.n_samples = *o.samples;
  if (!alphas.empty()) {
    cfg.alphas = alphas;
    cfg.alpha_percentiles.clear();
  }
  if (!uniforms.empty()) cfg.baselines = uniforms;
  cfg.validate_for_sweep();
  const fs::path out = o.out.empty() ? cfg.output_dir : fs::path(o.out);
  const SweepResult res = run_sweep(cfg, out, !no_latency);
  std::cout << sweep_markdown(res) << "results written to " << out.string() << "\n";
  return kOk;
}

int cmd_export_curves(const std::string& curves_path, const std::string& out) {
  const CurveSet curves = load_curves(curves_path);
  const fs::path dir = out.empty() ? fs::path(".") : fs::path(out);
  fs::create_directories(dir);
  for (const auto& [kind, curve] : curves) {
    const fs::path p = dir / ("curves_" + std::string(to_string(kind)) + ".csv");
    export_curve_csv(curve, p);
    std::cout << p.string() << "\n";
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Calibration-driven layer-output caching for diffusion transformers"};
  app.require_subcommand(1);

  Overrides o;
  std::string curves_path, schedule_path, report_path, baseline_path, cached_path;
  std::optional<float> alpha;
  std::optional<std::size_t> uniform;
  std::vector<float> sweep_alphas;
  std::vector<std::size_t> sweep_uniforms;
  bool no_latency = false;

  auto* calibrate = app.add_subcommand("calibrate", "Run uncached calibration passes and write error curves");
  add_common(calibrate, o, true);
  calibrate->add_option("--k-max", o.k_max, "Maximum skip distance");
  calibrate->add_option("--samples", o.samples, "Calibration samples");

  auto* schedule = app.add_subcommand("schedule", "Synthesize a caching schedule");
  add_common(schedule, o, false);
  schedule->add_option("--curves", curves_path, "Curves JSON from calibrate");
  schedule->add_option("--alpha", alpha, "Error threshold (greedy schedule)");
  schedule->add_option("--uniform", uniform, "Uniform period n");
  schedule->add_option("--k-max", o.k_max, "Maximum skip distance");

  auto* run = app.add_subcommand("run", "Generate samples, optionally under a schedule");
  add_common(run, o, true);
  run->add_option("--schedule", schedule_path, "Schedule JSON (omit for uncached)");
  run->add_option("--report", report_path, "RunReport JSON path");
  run->add_option("--samples", o.samples, "Evaluation samples");

  auto* compare = app.add_subcommand("compare", "Fidelity of a cached sample against a baseline");
  compare->add_option("baseline", baseline_path, "Baseline SCTD file")->required();
  compare->add_option("cached", cached_path, "Cached SCTD file")->required();
  compare->add_option("--out", o.out, "Write the report here instead of stdout");

  auto* sweep = app.add_subcommand("sweep", "Calibrate once, then run every alpha and uniform baseline");
  add_common(sweep, o, true);
  sweep->add_option("--alpha", sweep_alphas, "Thresholds (replace the config's alphas and percentiles)");
  sweep->add_option("--uniform", sweep_uniforms, "Uniform periods (replace the config's baselines)");
  sweep->add_option("--k-max", o.k_max, "Maximum skip distance");
  sweep->add_option("--samples", o.samples, "Calibration samples");
  sweep->add_flag("--no-latency", no_latency, "Skip latency benchmarking");

  auto* export_curves = app.add_subcommand("export-curves", "Write per-kind CSV from a curves JSON");
  export_curves->add_option("curves", curves_path, "Curves JSON")->required();
  export_curves->add_option("--out", o.out, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kValidation;
  }

  try {
    if (*calibrate) return cmd_calibrate(o);
    if (*schedule) return cmd_schedule(o, curves_path, alpha, uniform);
    if (*run) return cmd_run(o, schedule_path, report_path);
    if (*compare) return cmd_compare(baseline_path, cached_path, o.out);
    if (*sweep) return cmd_sweep(o, sweep_alphas, sweep_uniforms, no_latency);
    if (*export_curves) return cmd_export_curves(curves_path, o.out);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kValidation;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kValidation;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kValidation;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kIo;
  } catch (const InvariantError& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kInternal;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kInternal;
  }
  return kInternal;
}
