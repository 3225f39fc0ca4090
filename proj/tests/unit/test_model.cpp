#include <map>
#include <set>

#include <doctest.h>

#include "helpers.hpp"
#include "smoothcache/errors.hpp"
#include "smoothcache/model.hpp"
#include "smoothcache/ops.hpp"
#include "smoothcache/rng.hpp"

using namespace smoothcache;

namespace {

ModelConfig small_config(std::size_t blocks = 2, std::size_t context_tokens = 4) {
  ModelConfig cfg;
  cfg.blocks = blocks;
  cfg.dim = 16;
  cfg.heads = 2;
  cfg.tokens = 6;
  cfg.context_tokens = context_tokens;
  cfg.seed = 42;
  return cfg;
}

// Records every computed branch output keyed by (key, step).
struct RecordingPolicy : BranchPolicy {
  std::map<LayerKey, Tensor> seen;
  const Tensor* cached_branch(const LayerKey&, std::size_t) override { return nullptr; }
  void on_computed(const BranchOutput& out) override { seen[out.key] = out.value; }
};

// Hands back previously recorded branch outputs instead of computing.
struct ReplayPolicy : BranchPolicy {
  const std::map<LayerKey, Tensor>& outputs;
  explicit ReplayPolicy(const std::map<LayerKey, Tensor>& o) : outputs(o) {}
  const Tensor* cached_branch(const LayerKey& key, std::size_t) override { return &outputs.at(key); }
};

struct FixedPolicy : BranchPolicy {
  LayerKey target;
  Tensor value;
  const Tensor* cached_branch(const LayerKey& key, std::size_t) override { return key == target ? &value : nullptr; }
};

}  // namespace

TEST_CASE("layer kind names round trip") {
  for (LayerKind k : kAllLayerKinds) CHECK(parse_layer_kind(to_string(k)) == k);
  CHECK_THROWS_AS(parse_layer_kind("mlp"), ValidationError);
}

TEST_CASE("config validation") {
  ModelConfig cfg = small_config();
  cfg.heads = 3;
  CHECK_THROWS_AS(DiTModel::build(cfg), ConfigError);
  cfg = small_config();
  cfg.blocks = 0;
  CHECK_THROWS_AS(DiTModel::build(cfg), ConfigError);
  cfg = small_config();
  CHECK(model_config_from_json(to_json(cfg)) == cfg);
  CHECK_THROWS_AS(model_config_from_json(nlohmann::json{{"dim", "wide"}}), ConfigError);
}

TEST_CASE("weights are deterministic per seed") {
  const DiTModel a = DiTModel::build(small_config());
  const DiTModel b = DiTModel::build(small_config());
  ModelConfig other_cfg = small_config();
  other_cfg.seed = 43;
  const DiTModel c = DiTModel::build(other_cfg);
  const auto wa = a.named_weights(), wb = b.named_weights(), wc = c.named_weights();
  REQUIRE(wa.size() == wb.size());
  bool any_diff = false;
  for (std::size_t i = 0; i < wa.size(); ++i) {
    CHECK(wa[i].first == wb[i].first);
    CHECK(wa[i].second->checksum() == wb[i].second->checksum());
    any_diff |= wa[i].second->checksum() != wc[i].second->checksum();
  }
  CHECK(any_diff);
}

TEST_CASE("cacheable sublayer census") {
  CHECK(DiTModel::build(small_config(3, 0)).cacheable_keys().size() == 6);
  CHECK(DiTModel::build(small_config(3, 4)).cacheable_keys().size() == 9);
  const auto keys = DiTModel::build(small_config(2, 4)).cacheable_keys();
  CHECK(keys[0] == LayerKey{LayerKind::SelfAttention, 0});
  CHECK(keys[1] == LayerKey{LayerKind::CrossAttention, 0});
  CHECK(keys[2] == LayerKey{LayerKind::FeedForward, 0});
  CHECK(keys[3] == LayerKey{LayerKind::SelfAttention, 1});
}

TEST_CASE("forward visits every sublayer in order") {
  const DiTModel m = DiTModel::build(small_config(2, 4));
  SeededRng rng(1);
  const Tensor x = rng.normal_tensor({6, 16});
  ComputeAllPolicy all;
  const ForwardResult r = m.forward(x, 500.0, nullptr, all, 7);
  REQUIRE(r.visited.size() == 6);
  const auto keys = m.cacheable_keys();
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(r.visited[i].key == keys[i]);
    CHECK(r.visited[i].step == 7);
    CHECK(r.visited[i].value.shape() == Shape{6, 16});
  }
  CHECK(r.eps.shape() == Shape{6, 16});
  CHECK(m.forward(x, 500.0, nullptr, all, 7).eps.bitwise_equal(r.eps));
}

TEST_CASE("substituting exact branch outputs is the identity") {
  for (std::size_t lc : {std::size_t{0}, std::size_t{4}}) {
    const DiTModel m = DiTModel::build(small_config(2, lc));
    SeededRng rng(2);
    const Tensor x = rng.normal_tensor({6, 16});
    RecordingPolicy rec;
    const Tensor eps = m.forward(x, 300.0, nullptr, rec, 0).eps;
    ReplayPolicy replay(rec.seen);
    CHECK(m.forward(x, 300.0, nullptr, replay, 0).eps.bitwise_equal(eps));
  }
}

TEST_CASE("injecting a zero branch equals a zeroed gate") {
  // The gate multiplies the sublayer output, so zero gate columns make h = 0.
  const ModelConfig cfg = small_config(2, 4);
  const DiTModel m = DiTModel::build(cfg);
  DiTModel gated = DiTModel::build(cfg);
  const std::size_t d = cfg.dim;
  const std::size_t sub = 2;  // ffn is the third sublayer
  Tensor& mod = gated.mutable_weight("blocks.1.modulation");
  for (std::size_t r = 0; r < mod.rows(); ++r)
    for (std::size_t c = 0; c < d; ++c) mod.at(r, sub * 3 * d + 2 * d + c) = 0.0f;

  SeededRng rng(3);
  const Tensor x = rng.normal_tensor({6, 16});
  FixedPolicy zero;
  zero.target = {LayerKind::FeedForward, 1};
  zero.value = Tensor({6, 16});
  ComputeAllPolicy all;
  CHECK(m.forward(x, 250.0, nullptr, zero, 0).eps.bitwise_equal(gated.forward(x, 250.0, nullptr, all, 0).eps));
}

TEST_CASE("wrong-shape cached tensor is a cache-shape error") {
  const DiTModel m = DiTModel::build(small_config());
  FixedPolicy bad;
  bad.target = {LayerKind::SelfAttention, 0};
  bad.value = Tensor({5, 16});
  SeededRng rng(4);
  try {
    m.forward(rng.normal_tensor({6, 16}), 10.0, nullptr, bad, 0);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("cache-shape") != std::string::npos);
  }
  CHECK_THROWS_AS(m.forward(Tensor({5, 16}), 10.0, nullptr, bad, 0), ShapeError);
}

TEST_CASE("context handling") {
  const DiTModel m = DiTModel::build(small_config(2, 4));
  SeededRng rng(5);
  const Tensor x = rng.normal_tensor({6, 16});
  ComputeAllPolicy all;
  const Tensor none = m.forward(x, 100.0, nullptr, all, 0).eps;
  const Tensor null_ctx = m.forward(x, 100.0, &m.null_context(), all, 0).eps;
  CHECK(none.bitwise_equal(null_ctx));
  const Tensor ctx = rng.normal_tensor({4, 16});
  CHECK_FALSE(m.forward(x, 100.0, &ctx, all, 0).eps.bitwise_equal(none));
  const Tensor wrong = rng.normal_tensor({3, 16});
  CHECK_THROWS_AS(m.forward(x, 100.0, &wrong, all, 0), ShapeError);
  CHECK_THROWS_AS(DiTModel::build(small_config(2, 0)).null_context(), ConfigError);
}

TEST_CASE("batched forward matches per-sample forwards") {
  const DiTModel m = DiTModel::build(small_config(2, 4));
  SeededRng rng(6);
  const Tensor a = rng.normal_tensor({6, 16});
  const Tensor b = rng.normal_tensor({6, 16});
  std::vector<float> both(a.data().begin(), a.data().end());
  both.insert(both.end(), b.data().begin(), b.data().end());
  ComputeAllPolicy all;
  const Tensor eps = m.forward(Tensor({12, 16}, both), 400.0, nullptr, all, 0).eps;
  const Tensor ea = m.forward(a, 400.0, nullptr, all, 0).eps;
  const Tensor eb = m.forward(b, 400.0, nullptr, all, 0).eps;
  for (std::size_t i = 0; i < ea.numel(); ++i) {
    CHECK(eps[i] == ea[i]);
    CHECK(eps[ea.numel() + i] == eb[i]);
  }
}

TEST_CASE("embeddings are injective over the sampled timesteps") {
  std::vector<Tensor> embs;
  for (std::size_t s = 0; s < 50; ++s) embs.push_back(timestep_embedding(1000.0 - 20.0 * s, 64));
  for (std::size_t i = 0; i < embs.size(); ++i)
    for (std::size_t j = i + 1; j < embs.size(); ++j) CHECK(testing::max_abs_diff(embs[i], embs[j]) > 0.0);
  const Tensor p0 = sinusoidal_embedding(0.0, 8);
  CHECK(p0[0] == 0.0f);
  CHECK(p0[4] == 1.0f);
}

TEST_CASE("weights export and import") {
  const DiTModel m = DiTModel::build(small_config());
  const auto dir = testing::scratch_dir("weights");
  export_weights(m, dir);
  const DiTModel back = import_weights(dir);
  const auto wa = m.named_weights(), wb = back.named_weights();
  REQUIRE(wa.size() == wb.size());
  for (std::size_t i = 0; i < wa.size(); ++i) CHECK(wa[i].second->bitwise_equal(*wb[i].second));

  // corrupt one weight file: checksum must catch it
  Tensor tampered = *wa[0].second;
  tampered[0] += 1.0f;
  {
    DiTModel copy = DiTModel::build(small_config());
    copy.mutable_weight(wa[0].first) = tampered;
    const auto dir2 = testing::scratch_dir("weights_tampered");
    export_weights(copy, dir2);
    std::filesystem::copy_file(dir2 / (wa[0].first + ".sctd"), dir / (wa[0].first + ".sctd"),
                               std::filesystem::copy_options::overwrite_existing);
    std::filesystem::remove_all(dir2);
  }
  CHECK_THROWS_AS(import_weights(dir), ValidationError);
  std::filesystem::remove_all(dir);
  CHECK_THROWS_AS(import_weights(dir), IoError);
}
