#include <algorithm>
#include <fstream>

#include <doctest.h>

#include "helpers.hpp"
#include "oracles.hpp"
#include "smoothcache/calibration.hpp"
#include "smoothcache/errors.hpp"
#include "smoothcache/sctd.hpp"

using namespace smoothcache;

namespace {

ModelConfig tiny_model() {
  ModelConfig m;
  m.blocks = 2;
  m.dim = 16;
  m.heads = 2;
  m.tokens = 4;
  m.context_tokens = 3;
  m.seed = 8;
  return m;
}

SamplerConfig short_sampler(std::size_t steps = 12) {
  SamplerConfig s;
  s.steps = steps;
  return s;
}

ErrorRecord rec(std::size_t sample, LayerKind kind, std::size_t block, std::size_t step, std::size_t k, float err) {
  return ErrorRecord{sample, {kind, block}, step, k, err, false};
}

}  // namespace

TEST_CASE("summarize matches hand statistics") {
  const std::vector<double> two{0.1, 0.3};
  const CurveCell c = summarize(two);
  CHECK(c.n == 2);
  CHECK(c.mean == doctest::Approx(0.2).epsilon(1e-6));
  CHECK(c.std == doctest::Approx(0.1414).epsilon(1e-3));
  CHECK(c.std == doctest::Approx(std::sqrt(0.02)).epsilon(1e-6));
  CHECK(c.ci95 == doctest::Approx(0.196).epsilon(1e-3));
  CHECK(c.ci95 == doctest::Approx(1.96 * std::sqrt(0.02) / std::sqrt(2.0)).epsilon(1e-6));

  const std::vector<double> one{0.4};
  const CurveCell single = summarize(one);
  CHECK(single.n == 1);
  CHECK(single.std == 0.0f);
  CHECK(single.ci95 == 0.0f);
}

TEST_CASE("aggregation averages blocks within a sample first") {
  const std::vector<LayerKind> kinds{LayerKind::SelfAttention};
  std::vector<ErrorRecord> rs{
      rec(0, LayerKind::SelfAttention, 0, 1, 1, 0.0f), rec(0, LayerKind::SelfAttention, 1, 1, 1, 0.2f),
      rec(1, LayerKind::SelfAttention, 0, 1, 1, 0.3f), rec(1, LayerKind::SelfAttention, 1, 1, 1, 0.3f),
  };
  const CurveSet cs = aggregate_curves(rs, kinds, 2, 1);
  const CurveCell* c = cs.at(LayerKind::SelfAttention).find(1, 1);
  REQUIRE(c != nullptr);
  CHECK(c->n == 2);
  CHECK(c->mean == doctest::Approx(0.2));
  CHECK(c->std == doctest::Approx(std::sqrt(0.02)).epsilon(1e-5));

  // degenerate records are excluded
  rs.push_back(ErrorRecord{2, {LayerKind::SelfAttention, 0}, 1, 1, 0.0f, true});
  CHECK(aggregate_curves(rs, kinds, 2, 1).at(LayerKind::SelfAttention).find(1, 1)->n == 2);
}

TEST_CASE("aggregation is invariant to record order") {
  SeededRng rng(12);
  std::vector<ErrorRecord> rs;
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t s = 1; s < 6; ++s)
      for (std::size_t j = 0; j < 3; ++j)
        for (std::size_t k = 1; k <= std::min<std::size_t>(2, s); ++k)
          rs.push_back(rec(i, LayerKind::FeedForward, j, s, k, static_cast<float>(rng.uniform())));
  const std::vector<LayerKind> kinds{LayerKind::FeedForward};
  const CurveSet ref = aggregate_curves(rs, kinds, 6, 2);
  for (int trial = 0; trial < 20; ++trial) {
    for (std::size_t i = rs.size() - 1; i > 0; --i)
      std::swap(rs[i], rs[static_cast<std::size_t>(rng.uniform() * static_cast<double>(i + 1))]);
    CHECK(aggregate_curves(rs, kinds, 6, 2) == ref);
  }
}

TEST_CASE("constant branch outputs give zero error") {
  ErrorTracker tracker(0, 3);
  std::vector<ErrorRecord> sink;
  const Tensor constant = Tensor::filled({4, 4}, 0.7f);
  for (std::size_t s = 0; s < 10; ++s) {
    for (std::size_t j = 0; j < 2; ++j) tracker.observe({{LayerKind::FeedForward, j}, s, constant}, sink);
  }
  CHECK(sink.size() == 2 * expected_cell_count(10, 3));
  for (const auto& r : sink) CHECK(r.err == 0.0f);
  const std::vector<LayerKind> kinds{LayerKind::FeedForward};
  const CurveSet cs = aggregate_curves(sink, kinds, 10, 3);
  CHECK(cs.at(LayerKind::FeedForward).cells.size() == expected_cell_count(10, 3));
  for (const auto& [sk, c] : cs.at(LayerKind::FeedForward).cells) CHECK(c.mean == 0.0f);
}

TEST_CASE("tracker flags zero-norm references") {
  ErrorTracker tracker(0, 2);
  std::vector<ErrorRecord> sink;
  tracker.observe({{LayerKind::SelfAttention, 0}, 0, Tensor::filled({2, 2}, 1.0f)}, sink);
  tracker.observe({{LayerKind::SelfAttention, 0}, 1, Tensor({2, 2})}, sink);
  REQUIRE(sink.size() == 1);
  CHECK(sink[0].degenerate);
  CHECK_THROWS_AS(tracker.observe({{LayerKind::SelfAttention, 0}, 1, Tensor({2, 2})}, sink), InvariantError);
}

TEST_CASE("cell count of the default layout") {
  CHECK(expected_cell_count(50, 3) == 144);
  CHECK(expected_cell_count(8, 1) == 7);
}

TEST_CASE("calibration curves cover every cell and repeat exactly") {
  const DiTModel model = DiTModel::build(tiny_model());
  CalibrationConfig cc;
  cc.n_samples = 3;
  cc.k_max = 3;
  const CalibrationResult a = calibrate(model, short_sampler(), cc);
  const CalibrationResult b = calibrate(model, short_sampler(), cc, {}, 3);
  CHECK(a.curves == b.curves);
  REQUIRE(a.records.size() == b.records.size());
  CHECK(a.degenerate_count == 0);
  REQUIRE(a.curves.size() == 3);
  for (const auto& [kind, curve] : a.curves) {
    CHECK(curve.cells.size() == expected_cell_count(12, 3));
    for (const auto& [sk, c] : curve.cells) {
      CHECK(c.n == 3);
      CHECK(c.mean > 0.0f);
    }
  }
  // records: samples * keys * cells
  CHECK(a.records.size() == 3 * 6 * expected_cell_count(12, 3));
  CHECK(std::is_sorted(a.records.begin(), a.records.end(), [](const ErrorRecord& x, const ErrorRecord& y) {
    return std::tie(x.sample, x.step, x.key, x.k) < std::tie(y.sample, y.step, y.key, y.k);
  }));
}

TEST_CASE("online curves equal offline recomputation from dumps") {
  const ModelConfig mc = tiny_model();
  const DiTModel model = DiTModel::build(mc);
  CalibrationConfig cc;
  cc.n_samples = 3;
  cc.k_max = 3;
  std::map<std::tuple<std::size_t, LayerKind, std::size_t>, std::vector<Tensor>> captured;
  const CalibrationResult res = calibrate(model, short_sampler(), cc, [&](std::size_t i, const BranchOutput& out) {
    captured[{i, out.key.kind, out.key.block}].push_back(out.value);
  });
  const auto dir = testing::scratch_dir("calib_dump");
  for (const auto& [key, seq] : captured)
    sctd::save_sequence(dir / oracle::dump_name(std::get<0>(key), std::get<1>(key), std::get<2>(key)), seq);

  const auto kinds = mc.kinds();
  const auto offline = oracle::offline_curves(dir, 3, kinds, mc.blocks, 3);
  std::size_t compared = 0;
  for (const auto& [kind, curve] : res.curves) {
    for (const auto& [sk, c] : curve.cells) {
      const auto& o = offline.at({kind, sk.first, sk.second});
      CHECK(std::abs(c.mean - o.mean) <= 1e-6 * o.mean);
      CHECK(c.std == doctest::Approx(o.std).epsilon(1e-5));
      CHECK(c.ci95 == doctest::Approx(1.96 * o.std / std::sqrt(3.0)).epsilon(1e-5));
      ++compared;
    }
  }
  CHECK(compared == offline.size());
  std::filesystem::remove_all(dir);
}

TEST_CASE("curves save and load") {
  const DiTModel model = DiTModel::build(tiny_model());
  CalibrationConfig cc;
  cc.n_samples = 2;
  const CalibrationResult res = calibrate(model, short_sampler(8), cc);
  const auto dir = testing::scratch_dir("curves_io");
  save_curves(res.curves, dir / "c.json");
  CHECK(load_curves(dir / "c.json") == res.curves);

  nlohmann::json j = curves_to_json(res.curves);
  j["kinds"]["ffn"]["cells"].erase(3);
  try {
    curves_from_json(j);
    FAIL("expected a coverage error");
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("missing cell") != std::string::npos);
    CHECK(msg.find("ffn") != std::string::npos);
  }

  nlohmann::json v = curves_to_json(res.curves);
  v["version"] = 2;
  try {
    curves_from_json(v);
    FAIL("expected a version error");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("version") != std::string::npos);
  }

  nlohmann::json neg = curves_to_json(res.curves);
  neg["kinds"]["ffn"]["cells"][0]["mean"] = "high";
  CHECK_THROWS_WITH_AS(curves_from_json(neg), doctest::Contains("kinds.ffn.cells[0].mean"), ValidationError);

  {
    std::ofstream bad(dir / "bad.json");
    bad << "{\n  \"version\": 1,\n  \"kinds\": [\n}";
  }
  CHECK_THROWS_WITH_AS(load_curves(dir / "bad.json"), doctest::Contains("line 4"), ValidationError);
  CHECK_THROWS_AS(load_curves(dir / "absent.json"), IoError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("csv export") {
  ErrorCurve c;
  c.kind = LayerKind::SelfAttention;
  c.steps = 2;
  c.k_max = 1;
  c.cells[{1, 1}] = CurveCell{0.5f, 0.1f, 0.25f, 2};
  const auto dir = testing::scratch_dir("csv");
  export_curve_csv(c, dir / "c.csv");
  std::ifstream in(dir / "c.csv");
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  CHECK(header == "step,k,mean,lo,hi");
  CHECK(row == "1,1,0.5,0.25,0.75");
  std::filesystem::remove_all(dir);
}

TEST_CASE("calibration config validation") {
  CalibrationConfig cc;
  cc.n_samples = 0;
  CHECK_THROWS_WITH_AS(cc.validate(), doctest::Contains("n_samples"), ConfigError);
  cc = CalibrationConfig{};
  cc.k_max = 0;
  CHECK_THROWS_AS(cc.validate(), ConfigError);
}

TEST_CASE("default seed set: sample spread is small next to the mean") {
  const ModelConfig mc;
  const DiTModel model = DiTModel::build(mc);
  const CalibrationResult res = calibrate(model, SamplerConfig{}, CalibrationConfig{}, {}, 4);
  std::size_t tight = 0, total = 0;
  for (const auto& [kind, curve] : res.curves) {
    for (const auto& [sk, c] : curve.cells) {
      tight += c.ci95 < c.mean ? 1 : 0;
      ++total;
    }
  }
  CHECK(total == 3 * 144);
  CHECK(static_cast<double>(tight) >= 0.9 * static_cast<double>(total));
}
