#include "smoothcache/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>
#include <tuple>

#include "smoothcache/errors.hpp"
#include "smoothcache/ops.hpp"
#include "smoothcache/rng.hpp"

namespace smoothcache {

namespace {

constexpr std::uint64_t kNoiseStream = 1;
constexpr std::uint64_t kContextStream = 2;

std::string fmt_float(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

void sort_records(std::vector<ErrorRecord>& records) {
  std::sort(records.begin(), records.end(), [](const ErrorRecord& a, const ErrorRecord& b) {
    return std::tie(a.sample, a.step, a.key, a.k) < std::tie(b.sample, b.step, b.key, b.k);
  });
}

const CurveCell* ErrorCurve::find(std::size_t s, std::size_t k) const {
  auto it = cells.find({s, k});
  return it == cells.end() ? nullptr : &it->second;
}

std::size_t expected_cell_count(std::size_t steps, std::size_t k_max) {
  std::size_t n = 0;
  for (std::size_t k = 1; k <= k_max; ++k) n += steps > k ? steps - k : 0;
  return n;
}

void CalibrationConfig::validate() const {
  if (n_samples == 0) throw ConfigError("calib.n_samples must be at least 1");
  if (k_max == 0) throw ConfigError("calib.k_max must be at least 1");
}

nlohmann::json to_json(const CalibrationConfig& cfg) {
  return {{"n_samples", cfg.n_samples}, {"k_max", cfg.k_max}, {"conditional", cfg.conditional}, {"seed", cfg.seed}};
}

CalibrationConfig calibration_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("calib must be an object");
  CalibrationConfig cfg;
  auto read = [&](const char* key, auto& out) {
    if (!j.contains(key)) return;
    try {
      out = j.at(key).get<std::decay_t<decltype(out)>>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(std::string("calib.") + key + " has the wrong type");
    }
  };
  read("n_samples", cfg.n_samples);
  read("k_max", cfg.k_max);
  read("conditional", cfg.conditional);
  read("seed", cfg.seed);
  cfg.validate();
  return cfg;
}

SampleInputs make_sample_inputs(const ModelConfig& model_cfg, std::uint64_t base_seed, std::size_t index,
                                bool conditional) {
  SampleInputs in;
  in.seed = derive_seed(base_seed, kNoiseStream, index);
  if (conditional && model_cfg.has_cross_attention()) {
    SeededRng rng(derive_seed(base_seed, kContextStream, index));
    in.context = rng.normal_tensor({model_cfg.context_tokens, model_cfg.dim});
  }
  return in;
}

void ErrorTracker::observe(const BranchOutput& out, std::vector<ErrorRecord>& sink) {
  auto& hist = history_[out.key];
  for (const auto& [step, value] : hist) {
    if (step >= out.step) throw InvariantError("calibration: branch outputs arrived out of step order");
    const std::size_t k = out.step - step;
    if (k > k_max_) continue;
    ErrorRecord rec{sample_, out.key, out.step, k, 0.0f, false};
    try {
      rec.err = rel_l1_error(out.value, value);
    } catch (const DegenerateReferenceError&) {
      rec.degenerate = true;
    }
    sink.push_back(rec);
  }
  hist.emplace_front(out.step, out.value);
  while (!hist.empty() && out.step - hist.back().first >= k_max_) hist.pop_back();
}

CurveCell summarize(std::span<const double> values) {
  CurveCell cell;
  cell.n = values.size();
  if (values.empty()) return cell;
  // Sorting first makes the result independent of sample order.
  std::vector<double> v(values.begin(), values.end());
  std::sort(v.begin(), v.end());
  double sum = 0.0;
  for (double x : v) sum += x;
  const double mean = sum / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  const double sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
  cell.mean = static_cast<float>(mean);
  cell.std = static_cast<float>(sd);
  cell.ci95 = static_cast<float>(1.96 * sd / std::sqrt(static_cast<double>(v.size())));
  return cell;
}

CurveSet aggregate_curves(std::span<const ErrorRecord> records, std::span<const LayerKind> kinds, std::size_t steps,
                          std::size_t k_max) {
  // (kind, s, k) -> sample -> block errors
  std::map<std::tuple<LayerKind, std::size_t, std::size_t>, std::map<std::size_t, std::vector<double>>> groups;
  for (const auto& r : records) {
    if (r.degenerate || r.k > k_max || r.step >= steps) continue;
    groups[{r.key.kind, r.step, r.k}][r.sample].push_back(r.err);
  }
  CurveSet curves;
  for (LayerKind kind : kinds) {
    ErrorCurve& c = curves[kind];
    c.kind = kind;
    c.steps = steps;
    c.k_max = k_max;
  }
  for (const auto& [cell_key, per_sample] : groups) {
    const auto& [kind, s, k] = cell_key;
    auto it = curves.find(kind);
    if (it == curves.end()) continue;
    std::vector<double> sample_means;
    for (const auto& [sample, errs] : per_sample) {
      double sum = 0.0;
      for (double e : errs) sum += e;
      sample_means.push_back(sum / static_cast<double>(errs.size()));
    }
    it->second.cells[{s, k}] = summarize(sample_means);
  }
  return curves;
}

CalibrationResult calibrate(const DiTModel& model, const SamplerConfig& sampler, const CalibrationConfig& calib,
                            const BranchObserver& observer, std::size_t workers) {
  sampler.validate();
  calib.validate();
  const NoiseSchedule schedule = make_schedule(sampler.T, sampler.beta_start, sampler.beta_end);

  class TrackingPolicy : public ComputeAllPolicy {
   public:
    TrackingPolicy(std::size_t sample, std::size_t k_max, std::vector<ErrorRecord>& sink, const BranchObserver& obs)
        : sample_(sample), tracker_(sample, k_max), sink_(sink), observer_(obs) {}
    void on_computed(const BranchOutput& out) override {
      if (observer_) observer_(sample_, out);
      tracker_.observe(out, sink_);
    }

   private:
    std::size_t sample_;
    ErrorTracker tracker_;
    std::vector<ErrorRecord>& sink_;
    const BranchObserver& observer_;
  };

  auto run_sample = [&](std::size_t i, std::vector<ErrorRecord>& sink) {
    const SampleInputs in = make_sample_inputs(model.config(), calib.seed, i, calib.conditional);
    SamplerConfig sc = sampler;
    sc.seed = in.seed;
    TrackingPolicy policy(i, calib.k_max, sink, observer);
    ddim_sample(model, sc, schedule, policy, in.context ? &*in.context : nullptr);
  };

  const std::size_t n_workers = std::clamp<std::size_t>(workers, 1, calib.n_samples);
  std::vector<std::vector<ErrorRecord>> partial(n_workers);
  if (n_workers == 1) {
    for (std::size_t i = 0; i < calib.n_samples; ++i) run_sample(i, partial[0]);
  } else {
    std::vector<std::thread> threads;
    std::vector<std::exception_ptr> failures(n_workers);
    for (std::size_t w = 0; w < n_workers; ++w) {
      threads.emplace_back([&, w] {
        try {
          for (std::size_t i = w; i < calib.n_samples; i += n_workers) run_sample(i, partial[w]);
        } catch (...) {
          failures[w] = std::current_exception();
        }
      });
    }
    for (auto& t : threads) t.join();
    for (auto& f : failures)
      if (f) std::rethrow_exception(f);
  }

  CalibrationResult res;
  for (auto& p : partial) res.records.insert(res.records.end(), p.begin(), p.end());
  sort_records(res.records);
  res.degenerate_count = static_cast<std::size_t>(
      std::count_if(res.records.begin(), res.records.end(), [](const ErrorRecord& r) { return r.degenerate; }));
  const auto kinds = model.config().kinds();
  res.curves = aggregate_curves(res.records, kinds, sampler.steps, calib.k_max);
  return res;
}

nlohmann::json curves_to_json(const CurveSet& curves) {
  nlohmann::json kinds = nlohmann::json::object();
  for (const auto& [kind, curve] : curves) {
    nlohmann::json cells = nlohmann::json::array();
    for (const auto& [sk, c] : curve.cells) {
      cells.push_back({{"s", sk.first}, {"k", sk.second}, {"mean", c.mean}, {"std", c.std}, {"ci95", c.ci95},
                       {"n", c.n}});
    }
    kinds[std::string(to_string(kind))] = {{"k_max", curve.k_max}, {"steps", curve.steps}, {"cells", cells}};
  }
  return {{"version", 1}, {"kinds", kinds}};
}

namespace {

template <typename T>
T field(const nlohmann::json& obj, const char* key, const std::string& path) {
  if (!obj.is_object() || !obj.contains(key)) throw ValidationError("curves: missing field " + path + "." + key);
  const auto& v = obj.at(key);
  if constexpr (std::is_same_v<T, float>) {
    if (!v.is_number()) throw ValidationError("curves: field " + path + "." + key + " must be a number");
    const double d = v.get<double>();
    if (!std::isfinite(d) || d < 0.0) {
      throw ValidationError("curves: field " + path + "." + key + " must be finite and >= 0");
    }
    return static_cast<float>(d);
  } else {
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0)) {
      throw ValidationError("curves: field " + path + "." + key + " must be a non-negative integer");
    }
    return v.get<T>();
  }
}

}  // namespace

CurveSet curves_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ValidationError("curves: top level must be an object");
  if (!j.contains("version")) throw ValidationError("curves: missing field version");
  if (!j.at("version").is_number_integer() || j.at("version").get<int>() != 1) {
    throw ValidationError("curves: unsupported version " + j.at("version").dump() + " (supported: 1)");
  }
  if (!j.contains("kinds") || !j.at("kinds").is_object()) throw ValidationError("curves: missing object field kinds");
  CurveSet out;
  for (const auto& [name, body] : j.at("kinds").items()) {
    const std::string path = "kinds." + name;
    ErrorCurve c;
    c.kind = parse_layer_kind(name);
    c.k_max = field<std::size_t>(body, "k_max", path);
    c.steps = field<std::size_t>(body, "steps", path);
    if (c.k_max == 0 || c.steps == 0) throw ValidationError("curves: " + path + " needs k_max >= 1 and steps >= 1");
    if (!body.contains("cells") || !body.at("cells").is_array()) {
      throw ValidationError("curves: missing array field " + path + ".cells");
    }
    std::size_t idx = 0;
    for (const auto& cell : body.at("cells")) {
      const std::string cpath = path + ".cells[" + std::to_string(idx++) + "]";
      const auto s = field<std::size_t>(cell, "s", cpath);
      const auto k = field<std::size_t>(cell, "k", cpath);
      if (k == 0 || k > c.k_max || s < k || s >= c.steps) {
        throw ValidationError("curves: " + cpath + " has out-of-range (s=" + std::to_string(s) +
                              ", k=" + std::to_string(k) + ")");
      }
      CurveCell cc{field<float>(cell, "mean", cpath), field<float>(cell, "std", cpath),
                   field<float>(cell, "ci95", cpath), field<std::size_t>(cell, "n", cpath)};
      if (!c.cells.emplace(std::make_pair(s, k), cc).second) {
        throw ValidationError("curves: duplicate cell (s=" + std::to_string(s) + ", k=" + std::to_string(k) +
                              ") in " + path);
      }
    }
    for (std::size_t s = 1; s < c.steps; ++s) {
      for (std::size_t k = 1; k <= std::min(c.k_max, s); ++k) {
        if (!c.find(s, k)) {
          throw ValidationError("curves: missing cell (kind=" + name + ", s=" + std::to_string(s) +
                                ", k=" + std::to_string(k) + ")");
        }
      }
    }
    out.emplace(c.kind, std::move(c));
  }
  return out;
}

void save_curves(const CurveSet& curves, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << curves_to_json(curves).dump(1) << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

CurveSet load_curves(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string text = buf.str();
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    std::size_t line = 1, col = 1;
    for (std::size_t i = 0; i + 1 < e.byte && i < text.size(); ++i) {
      if (text[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    throw ValidationError("curves: parse error at line " + std::to_string(line) + ", column " + std::to_string(col) +
                          " of " + path.string());
  }
  return curves_from_json(j);
}

void write_records_jsonl(std::span<const ErrorRecord> records, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& r : records) {
    nlohmann::json j = {{"sample", r.sample}, {"kind", to_string(r.key.kind)}, {"block", r.key.block},
                        {"step", r.step},     {"k", r.k},                      {"err", r.err}};
    if (r.degenerate) j["degenerate"] = true;
    out << j.dump() << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

void export_curve_csv(const ErrorCurve& curve, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "step,k,mean,lo,hi\n";
  for (const auto& [sk, c] : curve.cells) {
    out << sk.first << ',' << sk.second << ',' << fmt_float(c.mean) << ','
        << fmt_float(static_cast<double>(c.mean) - c.ci95) << ',' << fmt_float(static_cast<double>(c.mean) + c.ci95)
        << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace smoothcache
