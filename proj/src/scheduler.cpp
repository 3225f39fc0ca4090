#include "smoothcache/scheduler.hpp"

#include <fstream>
#include <sstream>

#include "smoothcache/errors.hpp"
#include "smoothcache/metrics.hpp"

namespace smoothcache {

std::size_t Schedule::computed_steps(LayerKind kind) const {
  auto it = decisions.find(kind);
  if (it == decisions.end()) return 0;
  std::size_t n = 0;
  for (const auto& d : it->second) n += d.is_compute();
  return n;
}

std::size_t Schedule::reuse_count() const {
  std::size_t n = 0;
  for (const auto& [kind, row] : decisions)
    for (const auto& d : row) n += !d.is_compute();
  return n;
}

Schedule synthesize_greedy(const CurveSet& curves, float alpha, std::size_t k_max, std::size_t steps) {
  if (!(alpha > 0.0f)) throw ConfigError("alpha must be > 0");
  if (k_max == 0) throw ConfigError("k_max must be at least 1");
  if (steps == 0) throw ConfigError("steps must be at least 1");

  Schedule sched;
  sched.steps = steps;
  sched.alpha = alpha;
  sched.k_max = k_max;
  for (const auto& [kind, curve] : curves) {
    for (std::size_t s = 1; s < steps; ++s) {
      for (std::size_t k = 1; k <= std::min(k_max, s); ++k) {
        if (!curve.find(s, k)) {
          throw ValidationError("curve coverage gap: kind=" + std::string(to_string(kind)) +
                                " s=" + std::to_string(s) + " k=" + std::to_string(k));
        }
      }
    }
    std::vector<Decision> row(steps, Decision::compute());
    std::size_t anchor = 0;
    for (std::size_t s = 1; s < steps; ++s) {
      const std::size_t k = s - anchor;
      if (k <= k_max && curve.find(s, k)->mean < alpha) {
        row[s] = Decision::reuse(anchor);
      } else {
        anchor = s;
      }
    }
    sched.decisions.emplace(kind, std::move(row));
  }
  return sched;
}

Schedule synthesize_uniform(std::size_t n, std::size_t steps, std::span<const LayerKind> kinds) {
  if (n == 0) throw ConfigError("uniform period n must be at least 1");
  if (steps == 0) throw ConfigError("steps must be at least 1");
  Schedule sched;
  sched.steps = steps;
  sched.k_max = n;
  std::vector<Decision> row(steps);
  for (std::size_t s = 0; s < steps; ++s) row[s] = s % n == 0 ? Decision::compute() : Decision::reuse(n * (s / n));
  for (LayerKind k : kinds) sched.decisions[k] = row;
  return sched;
}

std::vector<Violation> validate(const Schedule& schedule) {
  std::vector<Violation> out;
  if (schedule.steps == 0) out.push_back({std::nullopt, 0, "schedule must have at least one step"});
  if (schedule.k_max == 0) out.push_back({std::nullopt, 0, "k_max must be at least 1"});
  if (schedule.alpha && !(*schedule.alpha > 0.0f)) out.push_back({std::nullopt, 0, "alpha must be > 0"});
  for (const auto& [kind, row] : schedule.decisions) {
    if (row.size() != schedule.steps) {
      out.push_back({kind, 0, "decision count " + std::to_string(row.size()) + " differs from steps"});
      continue;
    }
    for (std::size_t s = 0; s < row.size(); ++s) {
      if (row[s].is_compute()) continue;
      const std::size_t src = *row[s].source;
      if (s == 0) {
        out.push_back({kind, s, "first step must compute"});
        continue;
      }
      if (src >= s) {
        out.push_back({kind, s, "source must precede the step"});
        continue;
      }
      if (s - src > schedule.k_max) out.push_back({kind, s, "skip distance exceeds k_max"});
      if (!row[src].is_compute()) out.push_back({kind, s, "source not computed"});
      // Reuse must point at the most recent computed step: the runtime keeps
      // one live cache entry per sublayer.
      for (std::size_t q = src + 1; q < s; ++q) {
        if (row[q].is_compute()) {
          out.push_back({kind, s, "source is not the latest computed step"});
          break;
        }
      }
    }
  }
  return out;
}

namespace {

void require_valid(const Schedule& schedule) {
  const auto v = validate(schedule);
  if (!v.empty()) {
    std::string msg = "invalid schedule: " + v.front().message;
    if (v.front().kind) msg += " (kind=" + std::string(to_string(*v.front().kind)) + ", step=" + std::to_string(v.front().step) + ")";
    throw ValidationError(msg);
  }
}

}  // namespace

MacPrediction predict_macs(const Schedule& schedule, const ModelConfig& model_cfg, const SamplerConfig& sampler_cfg) {
  require_valid(schedule);
  if (schedule.steps != sampler_cfg.steps) {
    throw ValidationError("schedule has " + std::to_string(schedule.steps) + " steps, sampler has " +
                          std::to_string(sampler_cfg.steps));
  }
  const MacBreakdown mb = mac_model(model_cfg);
  const std::uint64_t S = sampler_cfg.steps, B = sampler_cfg.batch();
  MacPrediction p;
  p.baseline = mb.total() * B * S;
  p.total = mb.non_eligible * B * S;
  for (LayerKind kind : model_cfg.kinds()) {
    if (!schedule.decisions.count(kind)) {
      throw ValidationError("schedule has no decisions for kind " + std::string(to_string(kind)));
    }
    const std::uint64_t spent = mb.eligible_per_kind.at(kind) * B * schedule.computed_steps(kind);
    p.per_kind[kind] = spent;
    p.total += spent;
  }
  p.ratio = static_cast<double>(p.total) / static_cast<double>(p.baseline);
  return p;
}

nlohmann::json schedule_to_json(const Schedule& schedule) {
  nlohmann::json decisions = nlohmann::json::object();
  for (const auto& [kind, row] : schedule.decisions) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& d : row) {
      if (d.is_compute()) {
        arr.push_back("C");
      } else {
        arr.push_back(*d.source);
      }
    }
    decisions[std::string(to_string(kind))] = std::move(arr);
  }
  nlohmann::json j = {{"version", 1}, {"steps", schedule.steps}, {"k_max", schedule.k_max}};
  j["alpha"] = schedule.alpha ? nlohmann::json(*schedule.alpha) : nlohmann::json(nullptr);
  j["decisions"] = std::move(decisions);
  return j;
}

Schedule schedule_from_json(const nlohmann::json& j) {
  auto fail = [](const std::string& msg) -> ValidationError { return ValidationError("schedule: " + msg); };
  if (!j.is_object()) throw fail("top level must be an object");
  if (!j.contains("version") || !j.at("version").is_number_integer() || j.at("version").get<int>() != 1) {
    throw fail("unsupported version (supported: 1)");
  }
  for (const char* key : {"steps", "k_max"}) {
    if (!j.contains(key) || !j.at(key).is_number_unsigned()) throw fail(std::string("field ") + key + " must be a non-negative integer");
  }
  Schedule s;
  s.steps = j.at("steps").get<std::size_t>();
  s.k_max = j.at("k_max").get<std::size_t>();
  if (!j.contains("alpha")) throw fail("missing field alpha");
  if (!j.at("alpha").is_null()) {
    if (!j.at("alpha").is_number()) throw fail("field alpha must be a number or null");
    s.alpha = j.at("alpha").get<float>();
  }
  if (!j.contains("decisions") || !j.at("decisions").is_object()) throw fail("missing object field decisions");
  for (const auto& [name, arr] : j.at("decisions").items()) {
    const LayerKind kind = parse_layer_kind(name);
    if (!arr.is_array()) throw fail("decisions." + name + " must be an array");
    std::vector<Decision> row;
    for (const auto& e : arr) {
      if (e.is_string() && e.get<std::string>() == "C") {
        row.push_back(Decision::compute());
      } else if (e.is_number_unsigned()) {
        row.push_back(Decision::reuse(e.get<std::size_t>()));
      } else {
        throw fail("decisions." + name + " entries must be \"C\" or a source step");
      }
    }
    s.decisions.emplace(kind, std::move(row));
  }
  return s;
}

void save_schedule(const Schedule& schedule, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << schedule_to_json(schedule).dump() << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

Schedule load_schedule(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(std::string("schedule: ") + e.what());
  }
  Schedule s = schedule_from_json(j);
  require_valid(s);
  return s;
}

std::string render(const std::vector<Decision>& row) {
  std::ostringstream os;
  for (std::size_t i = 0; i < row.size(); ++i) {
    if (i) os << ' ';
    if (row[i].is_compute()) {
      os << 'C';
    } else {
      os << 'R' << *row[i].source;
    }
  }
  return os.str();
}

}  // namespace smoothcache
