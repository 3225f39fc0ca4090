#include "smoothcache/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <set>
#include <sstream>

#include "smoothcache/errors.hpp"

namespace smoothcache {

namespace {

std::string fmt(double v, const char* spec = "%.9g") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Published DiT-XL/2 TMACs at 50 DDIM steps: no cache vs uniform n=2.
constexpr double kReferenceNoCacheTmacs = 365.59;
constexpr double kReferenceUniform2Tmacs = 190.25;

}  // namespace

void ExperimentConfig::validate() const {
  model.validate();
  sampler.validate();
  calib.validate();
  for (float a : alphas) {
    if (!(a > 0.0f) || !std::isfinite(a)) throw ConfigError("alphas entries must be finite and > 0");
  }
  for (double p : alpha_percentiles) {
    if (!(p >= 0.0 && p <= 100.0)) throw ConfigError("alpha_percentiles entries must lie in [0, 100]");
  }
  for (std::size_t n : baselines) {
    if (n == 0) throw ConfigError("baselines entries must be >= 1");
  }
  if (eval_samples == 0) throw ConfigError("eval_samples must be at least 1");
  if (bench_runs == 0) throw ConfigError("bench.runs must be at least 1");
  if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
}

void ExperimentConfig::validate_for_sweep() const {
  validate();
  if (alphas.empty() && alpha_percentiles.empty() && baselines.empty()) {
    throw ConfigError("sweep needs at least one of alphas, alpha_percentiles, baselines");
  }
}

nlohmann::json to_json(const ExperimentConfig& cfg) {
  return {{"model", to_json(cfg.model)},
          {"sampler", to_json(cfg.sampler)},
          {"calib", to_json(cfg.calib)},
          {"alphas", cfg.alphas},
          {"alpha_percentiles", cfg.alpha_percentiles},
          {"baselines", cfg.baselines},
          {"eval_samples", cfg.eval_samples},
          {"bench", {{"warmup", cfg.bench_warmup}, {"runs", cfg.bench_runs}}},
          {"output_dir", cfg.output_dir.string()}};
}

ExperimentConfig experiment_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  static const std::set<std::string> known{"model",    "sampler",      "calib", "alphas", "alpha_percentiles",
                                           "baselines", "eval_samples", "bench", "output_dir"};
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw ConfigError("unknown config field '" + key + "'");
  }
  ExperimentConfig cfg;
  auto read = [&](const nlohmann::json& obj, const char* key, auto& out, const std::string& name) {
    if (!obj.contains(key)) return;
    try {
      out = obj.at(key).get<std::decay_t<decltype(out)>>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(name + " has the wrong type");
    }
  };
  if (j.contains("model")) cfg.model = model_config_from_json(j.at("model"));
  if (j.contains("sampler")) cfg.sampler = sampler_config_from_json(j.at("sampler"));
  if (j.contains("calib")) cfg.calib = calibration_config_from_json(j.at("calib"));
  read(j, "alphas", cfg.alphas, "alphas");
  read(j, "alpha_percentiles", cfg.alpha_percentiles, "alpha_percentiles");
  read(j, "baselines", cfg.baselines, "baselines");
  read(j, "eval_samples", cfg.eval_samples, "eval_samples");
  if (j.contains("bench")) {
    read(j.at("bench"), "warmup", cfg.bench_warmup, "bench.warmup");
    read(j.at("bench"), "runs", cfg.bench_runs, "bench.runs");
  }
  std::string out_dir = cfg.output_dir.string();
  read(j, "output_dir", out_dir, "output_dir");
  cfg.output_dir = out_dir;
  cfg.validate();
  return cfg;
}

ExperimentConfig load_experiment(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return experiment_from_json(j);
}

double percentile(std::vector<double> values, double p) {
  if (values.empty()) throw ValidationError("percentile of an empty set");
  std::sort(values.begin(), values.end());
  const double pos = std::clamp(p, 0.0, 100.0) / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

std::vector<double> curve_means(const CurveSet& curves) {
  std::vector<double> out;
  for (const auto& [kind, curve] : curves)
    for (const auto& [sk, cell] : curve.cells) out.push_back(cell.mean);
  return out;
}

CalibrationResult calibrate_to_dir(const ExperimentConfig& cfg, const std::filesystem::path& out_dir,
                                   std::size_t workers) {
  cfg.validate();
  ensure_dir(out_dir);
  const DiTModel model = DiTModel::build(cfg.model);
  CalibrationResult res = calibrate(model, cfg.sampler, cfg.calib, {}, workers);
  write_records_jsonl(res.records, out_dir / "records.jsonl");
  save_curves(res.curves, out_dir / "curves.json");
  for (const auto& [kind, curve] : res.curves)
    export_curve_csv(curve, out_dir / ("curves_" + std::string(to_string(kind)) + ".csv"));
  return res;
}

Baseline run_baseline(const DiTModel& model, const ExperimentConfig& cfg) {
  Baseline b;
  for (std::size_t i = 0; i < cfg.eval_samples; ++i) {
    const SampleInputs in = make_sample_inputs(model.config(), cfg.sampler.seed, i, cfg.calib.conditional);
    SamplerConfig sc = cfg.sampler;
    sc.seed = in.seed;
    b.samples.push_back(run_uncached(model, sc, in.context ? &*in.context : nullptr));
  }
  return b;
}

EvaluatedSchedule evaluate_schedule(const DiTModel& model, const ExperimentConfig& cfg, const Schedule& schedule,
                                    const Baseline& baseline) {
  if (baseline.samples.size() != cfg.eval_samples) throw InvariantError("baseline sample count mismatch");
  EvaluatedSchedule ev;
  ev.fidelity.cosine = 0.0;
  ev.predicted = predict_macs(schedule, model.config(), cfg.sampler);
  for (std::size_t i = 0; i < cfg.eval_samples; ++i) {
    const SampleInputs in = make_sample_inputs(model.config(), cfg.sampler.seed, i, cfg.calib.conditional);
    SamplerConfig sc = cfg.sampler;
    sc.seed = in.seed;
    CachedRun run = run_cached(model, sc, schedule, in.context ? &*in.context : nullptr);
    if (run.trace.macs != ev.predicted.total) {
      throw InvariantError("measured MACs " + std::to_string(run.trace.macs) + " differ from predicted " +
                           std::to_string(ev.predicted.total));
    }
    ev.measured_macs = run.trace.macs;
    const auto& base = baseline.samples[i];
    const FidelityReport f = compare_runs(base.x0, run.x0, base.trajectory, run.trajectory);
    ev.fidelity.rel_l1 += f.rel_l1;
    ev.fidelity.psnr += f.psnr;
    ev.fidelity.cosine += f.cosine;
    if (ev.fidelity.trajectory_divergence.empty()) ev.fidelity.trajectory_divergence.assign(f.trajectory_divergence.size(), 0.0);
    for (std::size_t t = 0; t < f.trajectory_divergence.size(); ++t)
      ev.fidelity.trajectory_divergence[t] += f.trajectory_divergence[t];
    ev.x0.push_back(std::move(run.x0));
  }
  const double n = static_cast<double>(cfg.eval_samples);
  ev.fidelity.rel_l1 /= n;
  ev.fidelity.psnr /= n;
  ev.fidelity.cosine /= n;
  for (double& d : ev.fidelity.trajectory_divergence) d /= n;
  return ev;
}

LatencyStats bench_schedule(const DiTModel& model, const ExperimentConfig& cfg, const Schedule& schedule) {
  const SampleInputs in = make_sample_inputs(model.config(), cfg.sampler.seed, 0, cfg.calib.conditional);
  SamplerConfig sc = cfg.sampler;
  sc.seed = in.seed;
  const Tensor* ctx = in.context ? &*in.context : nullptr;
  return bench([&] { (void)run_cached(model, sc, schedule, ctx); }, cfg.bench_warmup, cfg.bench_runs);
}

MacCrossCheck reference_mac_cross_check() {
  MacCrossCheck c;
  c.reference_ratio = kReferenceUniform2Tmacs / kReferenceNoCacheTmacs;
  c.implied_fraction_26 = implied_eligible_fraction(c.reference_ratio, 26.0 / 50.0);
  c.implied_fraction_25 = implied_eligible_fraction(c.reference_ratio, 25.0 / 50.0);
  return c;
}

SweepResult run_sweep(const ExperimentConfig& cfg, const std::filesystem::path& out_dir, bool measure_latency) {
  cfg.validate_for_sweep();
  ensure_dir(out_dir);
  ensure_dir(out_dir / "schedules");

  SweepResult result;
  result.calibration = calibrate_to_dir(cfg, out_dir);
  const DiTModel model = DiTModel::build(cfg.model);
  result.mac_breakdown = mac_model(cfg.model);
  const CurveSet& curves = result.calibration.curves;
  const auto kinds = cfg.model.kinds();
  const std::size_t S = cfg.sampler.steps;

  std::vector<SweepRow> rows;
  if (!cfg.alpha_percentiles.empty()) {
    const auto means = curve_means(curves);
    for (double p : cfg.alpha_percentiles) {
      const auto alpha = static_cast<float>(percentile(means, p));
      if (!(alpha > 0.0f)) throw ValidationError("percentile " + fmt(p) + " of curve means is not positive");
      SweepRow r;
      r.label = "alpha@p" + fmt(p, "%g") + "=" + fmt(alpha, "%.6g");
      r.alpha = alpha;
      r.alpha_percentile = p;
      r.schedule = synthesize_greedy(curves, alpha, cfg.calib.k_max, S);
      rows.push_back(std::move(r));
    }
  }
  for (float alpha : cfg.alphas) {
    SweepRow r;
    r.label = "alpha=" + fmt(alpha, "%.6g");
    r.alpha = alpha;
    r.schedule = synthesize_greedy(curves, alpha, cfg.calib.k_max, S);
    rows.push_back(std::move(r));
  }
  for (std::size_t n : cfg.baselines) {
    SweepRow r;
    r.label = n == 1 ? "no-cache" : "uniform n=" + std::to_string(n);
    r.uniform_n = n;
    r.schedule = synthesize_uniform(n, S, kinds);
    rows.push_back(std::move(r));
  }

  const Baseline baseline = run_baseline(model, cfg);
  for (auto& r : rows) {
    if (!validate(r.schedule).empty()) throw InvariantError("synthesized schedule failed validation: " + r.label);
    const EvaluatedSchedule ev = evaluate_schedule(model, cfg, r.schedule, baseline);
    r.macs = ev.predicted;
    r.fidelity = ev.fidelity;
    if (measure_latency) r.latency = bench_schedule(model, cfg, r.schedule);
  }
  std::stable_sort(rows.begin(), rows.end(), [](const SweepRow& a, const SweepRow& b) {
    if (a.macs.ratio != b.macs.ratio) return a.macs.ratio > b.macs.ratio;
    return a.label < b.label;
  });
  result.rows = std::move(rows);

  for (std::size_t i = 0; i < result.rows.size(); ++i) {
    std::string file = result.rows[i].label;
    for (char& c : file)
      if (!std::isalnum(static_cast<unsigned char>(c)) && c != '.' && c != '-') c = '_';
    save_schedule(result.rows[i].schedule, out_dir / "schedules" / (std::to_string(i) + "_" + file + ".json"));
  }
  write_text(out_dir / "sweep.csv", sweep_csv(result));
  write_text(out_dir / "sweep.md", sweep_markdown(result));

  nlohmann::json lat = {{"timestamp", utc_timestamp()}, {"rows", nlohmann::json::array()}};
  for (const auto& r : result.rows) {
    nlohmann::json row = {{"schedule", r.label}};
    if (r.latency) row["latency"] = to_json(*r.latency);
    lat["rows"].push_back(row);
  }
  write_text(out_dir / "latency.json", lat.dump(2) + "\n");
  return result;
}

std::string sweep_csv(const SweepResult& result) {
  std::ostringstream os;
  os << "schedule,alpha,mac_ratio,total_macs,baseline_macs,reused_entries";
  for (LayerKind k : kAllLayerKinds) os << ",computed_" << to_string(k);
  os << ",rel_l1,psnr,cosine\n";
  for (const auto& r : result.rows) {
    os << r.label << ',' << (r.alpha ? fmt(*r.alpha) : "") << ',' << fmt(r.macs.ratio, "%.17g") << ','
       << r.macs.total << ',' << r.macs.baseline << ',' << r.schedule.reuse_count();
    for (LayerKind k : kAllLayerKinds) {
      os << ',';
      if (r.schedule.decisions.count(k) && r.macs.per_kind.count(k)) os << r.schedule.computed_steps(k);
    }
    os << ',' << fmt(r.fidelity.rel_l1, "%.17g") << ',' << fmt(r.fidelity.psnr, "%.17g") << ','
       << fmt(r.fidelity.cosine, "%.17g") << '\n';
  }
  return os.str();
}

std::string sweep_markdown(const SweepResult& result) {
  std::ostringstream os;
  os << "| schedule | rel_l1 | psnr (dB) | cosine | MAC ratio | latency (s) |\n";
  os << "|---|---|---|---|---|---|\n";
  for (const auto& r : result.rows) {
    os << "| " << r.label << " | " << fmt(r.fidelity.rel_l1, "%.5f") << " | " << fmt(r.fidelity.psnr, "%.2f") << " | "
       << fmt(r.fidelity.cosine, "%.6f") << " | " << fmt(r.macs.ratio, "%.4f") << " | ";
    if (r.latency) {
      os << fmt(r.latency->mean_s, "%.4f") << " ± " << fmt(r.latency->std_s, "%.4f");
    } else {
      os << "n/a";
    }
    os << " |\n";
  }
  const MacCrossCheck cc = reference_mac_cross_check();
  os << "\nToy model eligible MAC fraction: " << fmt(result.mac_breakdown.eligible_fraction, "%.4f") << "\n";
  os << "Reference cross-check (DiT-XL/2, 50 DDIM steps, uniform n=2 vs no cache): TMAC ratio "
     << fmt(kReferenceUniform2Tmacs, "%.2f") << "/" << fmt(kReferenceNoCacheTmacs, "%.2f") << " = "
     << fmt(cc.reference_ratio, "%.4f") << "; implied eligible fraction f = " << fmt(cc.implied_fraction_26, "%.3f")
     << " under ratio = (1-f) + f*26/50, f = " << fmt(cc.implied_fraction_25, "%.3f")
     << " under ratio = (1-f) + f*25/50.\n";
  os << "Calibration: " << result.calibration.records.size() << " records, " << result.calibration.degenerate_count
     << " degenerate.\n";
  return os.str();
}

}  // namespace smoothcache
