#include "smoothcache/model.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "smoothcache/errors.hpp"
#include "smoothcache/ops.hpp"
#include "smoothcache/rng.hpp"
#include "smoothcache/sctd.hpp"

namespace smoothcache {

std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::SelfAttention:
      return "self_attn";
    case LayerKind::CrossAttention:
      return "cross_attn";
    case LayerKind::FeedForward:
      return "ffn";
  }
  return "?";
}

LayerKind parse_layer_kind(std::string_view name) {
  for (LayerKind k : kAllLayerKinds) {
    if (to_string(k) == name) return k;
  }
  throw ValidationError("unknown layer kind '" + std::string(name) + "'");
}

std::string to_string(const LayerKey& key) {
  return std::string(to_string(key.kind)) + "[" + std::to_string(key.block) + "]";
}

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* field) {
    if (v == 0) throw ConfigError(std::string("model.") + field + " must be positive");
  };
  positive(blocks, "blocks");
  positive(dim, "dim");
  positive(heads, "heads");
  positive(tokens, "tokens");
  positive(ffn_mult, "ffn_mult");
  if (dim < 2) throw ConfigError("model.dim must be at least 2");
  if (dim % heads != 0) throw ConfigError("model.heads must divide model.dim");
}

std::vector<LayerKind> ModelConfig::kinds() const {
  if (has_cross_attention()) return {kAllLayerKinds.begin(), kAllLayerKinds.end()};
  return {LayerKind::SelfAttention, LayerKind::FeedForward};
}

nlohmann::json to_json(const ModelConfig& cfg) {
  return {{"blocks", cfg.blocks},   {"dim", cfg.dim},         {"heads", cfg.heads},
          {"tokens", cfg.tokens},   {"context_tokens", cfg.context_tokens},
          {"ffn_mult", cfg.ffn_mult}, {"seed", cfg.seed}};
}

namespace {

template <typename T>
void read_field(const nlohmann::json& j, const char* prefix, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(std::string(prefix) + key + " has the wrong type");
  }
}

}  // namespace

ModelConfig model_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("model must be an object");
  ModelConfig cfg;
  read_field(j, "model.", "blocks", cfg.blocks);
  read_field(j, "model.", "dim", cfg.dim);
  read_field(j, "model.", "heads", cfg.heads);
  read_field(j, "model.", "tokens", cfg.tokens);
  read_field(j, "model.", "context_tokens", cfg.context_tokens);
  read_field(j, "model.", "ffn_mult", cfg.ffn_mult);
  read_field(j, "model.", "seed", cfg.seed);
  cfg.validate();
  return cfg;
}

namespace {

Tensor sinusoid(double position, std::size_t dim, double max_freq, double min_freq) {
  Tensor out({1, dim});
  const std::size_t half = dim / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double frac = half > 1 ? static_cast<double>(i) / static_cast<double>(half - 1) : 0.0;
    const double freq = max_freq * std::pow(min_freq / max_freq, frac);
    out[i] = static_cast<float>(std::sin(position * freq));
    out[half + i] = static_cast<float>(std::cos(position * freq));
  }
  return out;
}

}  // namespace

Tensor sinusoidal_embedding(double position, std::size_t dim) { return sinusoid(position, dim, 1.0, 1e-4); }

Tensor timestep_embedding(double timestep, std::size_t dim) { return sinusoid(timestep, dim, 1e-2, 1e-4); }

namespace {

Tensor slice(const Tensor& t, std::size_t row0, std::size_t nrows, std::size_t col0, std::size_t ncols) {
  Tensor out({nrows, ncols});
  for (std::size_t r = 0; r < nrows; ++r)
    for (std::size_t c = 0; c < ncols; ++c) out.at(r, c) = t.at(row0 + r, col0 + c);
  return out;
}

void paste(Tensor& dst, const Tensor& src, std::size_t row0, std::size_t col0) {
  for (std::size_t r = 0; r < src.rows(); ++r)
    for (std::size_t c = 0; c < src.cols(); ++c) dst.at(row0 + r, col0 + c) = src.at(r, c);
}

Tensor tile_rows(const Tensor& t, std::size_t times) {
  Tensor out({t.rows() * times, t.cols()});
  for (std::size_t b = 0; b < times; ++b) paste(out, t, b * t.rows(), 0);
  return out;
}

/// scale * normed + shift, per batch item; mod rows are batch items.
Tensor modulate(const Tensor& normed, const Tensor& mod, std::size_t shift_col, std::size_t scale_col,
                std::size_t rows_per_item) {
  const std::size_t d = normed.cols();
  Tensor out(normed.shape());
  for (std::size_t r = 0; r < normed.rows(); ++r) {
    const std::size_t b = r / rows_per_item;
    for (std::size_t c = 0; c < d; ++c)
      out.at(r, c) = mod.at(b, scale_col + c) * normed.at(r, c) + mod.at(b, shift_col + c);
  }
  return out;
}

Tensor attend(const Tensor& q, const Tensor& k, const Tensor& v, float inv_sqrt_dh) {
  Tensor scores = matmul(q, transpose(k));
  for (float& s : scores.data()) s *= inv_sqrt_dh;
  return matmul(softmax(scores, 1), v);
}

}  // namespace

DiTModel DiTModel::build(const ModelConfig& cfg) {
  cfg.validate();
  DiTModel m(cfg);
  const std::size_t d = cfg.dim;
  const std::size_t n_sub = cfg.kinds().size();

  m.time_fc1_ = Tensor({d, d});
  m.time_fc2_ = Tensor({d, d});
  m.blocks_.resize(cfg.blocks);
  for (auto& blk : m.blocks_) {
    blk.modulation = Tensor({d, 3 * n_sub * d});
    blk.qkv = Tensor({d, 3 * d});
    blk.attn_out = Tensor({d, d});
    if (cfg.has_cross_attention()) {
      blk.cross_q = Tensor({d, d});
      blk.cross_kv = Tensor({d, 2 * d});
      blk.cross_out = Tensor({d, d});
    }
    blk.ffn_up = Tensor({d, cfg.ffn_mult * d});
    blk.ffn_down = Tensor({cfg.ffn_mult * d, d});
  }
  m.final_modulation_ = Tensor({d, 2 * d});
  m.head_ = Tensor({d, d});
  if (cfg.has_cross_attention()) m.null_context_ = Tensor({cfg.context_tokens, d});

  SeededRng rng(cfg.seed);
  for (auto& [name, w] : m.weight_slots()) {
    // Projection matrices are scaled by 1/sqrt(fan_in); the null context is an
    // embedding and stays unit-variance.
    const float s = name == "null_context" ? 1.0f : 1.0f / std::sqrt(static_cast<float>(w->rows()));
    for (float& v : w->data()) v = rng.normal() * s;
  }

  m.positions_ = Tensor({cfg.tokens, d});
  for (std::size_t p = 0; p < cfg.tokens; ++p) paste(m.positions_, sinusoidal_embedding(static_cast<double>(p), d), p, 0);
  return m;
}

std::vector<std::pair<std::string, Tensor*>> DiTModel::weight_slots() {
  std::vector<std::pair<std::string, Tensor*>> out;
  out.emplace_back("time.fc1", &time_fc1_);
  out.emplace_back("time.fc2", &time_fc2_);
  for (std::size_t j = 0; j < blocks_.size(); ++j) {
    const std::string p = "blocks." + std::to_string(j) + ".";
    auto& b = blocks_[j];
    out.emplace_back(p + "modulation", &b.modulation);
    out.emplace_back(p + "self_attn.qkv", &b.qkv);
    out.emplace_back(p + "self_attn.out", &b.attn_out);
    if (cfg_.has_cross_attention()) {
      out.emplace_back(p + "cross_attn.q", &b.cross_q);
      out.emplace_back(p + "cross_attn.kv", &b.cross_kv);
      out.emplace_back(p + "cross_attn.out", &b.cross_out);
    }
    out.emplace_back(p + "ffn.up", &b.ffn_up);
    out.emplace_back(p + "ffn.down", &b.ffn_down);
  }
  out.emplace_back("final.modulation", &final_modulation_);
  out.emplace_back("final.head", &head_);
  if (cfg_.has_cross_attention()) out.emplace_back("null_context", &null_context_);
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> DiTModel::named_weights() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  for (auto& [name, w] : const_cast<DiTModel*>(this)->weight_slots()) out.emplace_back(name, w);
  return out;
}

Tensor& DiTModel::mutable_weight(std::string_view name) {
  for (auto& [n, w] : weight_slots()) {
    if (n == name) return *w;
  }
  throw ValidationError("no weight named '" + std::string(name) + "'");
}

std::vector<LayerKey> DiTModel::cacheable_keys() const {
  std::vector<LayerKey> keys;
  const auto kinds = cfg_.kinds();
  for (std::size_t j = 0; j < cfg_.blocks; ++j)
    for (LayerKind k : kinds) keys.push_back({k, j});
  return keys;
}

const Tensor& DiTModel::null_context() const {
  if (!cfg_.has_cross_attention()) throw ConfigError("model has no cross-attention, so no null context");
  return null_context_;
}

Tensor DiTModel::self_attention(const Block& blk, const Tensor& u, std::size_t batch) const {
  const std::size_t L = cfg_.tokens, d = cfg_.dim, H = cfg_.heads, dh = d / H;
  const float inv = 1.0f / std::sqrt(static_cast<float>(dh));
  const Tensor qkv = matmul(u, blk.qkv);
  Tensor mixed({batch * L, d});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      const Tensor q = slice(qkv, b * L, L, h * dh, dh);
      const Tensor k = slice(qkv, b * L, L, d + h * dh, dh);
      const Tensor v = slice(qkv, b * L, L, 2 * d + h * dh, dh);
      paste(mixed, attend(q, k, v, inv), b * L, h * dh);
    }
  }
  return matmul(mixed, blk.attn_out);
}

Tensor DiTModel::cross_attention(const Block& blk, const Tensor& u, const Tensor& ctx, std::size_t batch) const {
  const std::size_t L = cfg_.tokens, Lc = cfg_.context_tokens, d = cfg_.dim, H = cfg_.heads, dh = d / H;
  const float inv = 1.0f / std::sqrt(static_cast<float>(dh));
  const Tensor q_all = matmul(u, blk.cross_q);
  const Tensor kv = matmul(ctx, blk.cross_kv);
  Tensor mixed({batch * L, d});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      const Tensor q = slice(q_all, b * L, L, h * dh, dh);
      const Tensor k = slice(kv, b * Lc, Lc, h * dh, dh);
      const Tensor v = slice(kv, b * Lc, Lc, d + h * dh, dh);
      paste(mixed, attend(q, k, v, inv), b * L, h * dh);
    }
  }
  return matmul(mixed, blk.cross_out);
}

Tensor DiTModel::feed_forward(const Block& blk, const Tensor& u) const {
  return matmul(gelu(matmul(u, blk.ffn_up)), blk.ffn_down);
}

ForwardResult DiTModel::forward(const Tensor& x, double timestep, const Tensor* context, BranchPolicy& policy,
                                std::size_t step) const {
  const std::size_t L = cfg_.tokens, d = cfg_.dim;
  if (x.ndim() != 2 || x.cols() != d || x.rows() % L != 0) {
    throw ShapeError("forward: x must be [B*" + std::to_string(L) + " x " + std::to_string(d) + "], got " +
                     shape_to_string(x.shape()));
  }
  const std::size_t batch = x.rows() / L;

  Tensor ctx;
  if (cfg_.has_cross_attention()) {
    if (context == nullptr) {
      ctx = tile_rows(null_context_, batch);
    } else {
      if (context->shape() != Shape{batch * cfg_.context_tokens, d}) {
        throw ShapeError("forward: context must be [B*Lc x d], got " + shape_to_string(context->shape()));
      }
      ctx = *context;
    }
  }

  Tensor h_state = add(x, tile_rows(positions_, batch));

  const Tensor temb_in = tile_rows(timestep_embedding(timestep, d), batch);
  const Tensor temb = matmul(gelu(matmul(temb_in, time_fc1_)), time_fc2_);
  const Tensor cond = gelu(temb);

  ForwardResult result;
  const auto kinds = cfg_.kinds();
  const Shape branch_shape{batch * L, d};
  for (std::size_t j = 0; j < blocks_.size(); ++j) {
    const Block& blk = blocks_[j];
    const Tensor mod = matmul(cond, blk.modulation);
    for (std::size_t u = 0; u < kinds.size(); ++u) {
      const LayerKey key{kinds[u], j};
      if (const Tensor* cached = policy.cached_branch(key, step)) {
        if (cached->shape() != branch_shape) {
          throw ShapeError("cache-shape error for " + to_string(key) + ": expected " + shape_to_string(branch_shape) +
                           ", policy supplied " + shape_to_string(cached->shape()));
        }
        h_state = add(h_state, *cached);
        continue;
      }
      const std::size_t base = u * 3 * d;
      const Tensor in = modulate(layer_norm(h_state), mod, base, base + d, L);
      Tensor y;
      switch (key.kind) {
        case LayerKind::SelfAttention:
          y = self_attention(blk, in, batch);
          break;
        case LayerKind::CrossAttention:
          y = cross_attention(blk, in, ctx, batch);
          break;
        case LayerKind::FeedForward:
          y = feed_forward(blk, in);
          break;
      }
      for (std::size_t r = 0; r < y.rows(); ++r)
        for (std::size_t c = 0; c < d; ++c) y.at(r, c) *= mod.at(r / L, base + 2 * d + c);
      h_state = add(h_state, y);
      result.visited.push_back({key, step, std::move(y)});
      policy.on_computed(result.visited.back());
    }
  }

  const Tensor fmod = matmul(cond, final_modulation_);
  result.eps = matmul(modulate(layer_norm(h_state), fmod, 0, d, L), head_);
  return result;
}

namespace {

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

}  // namespace

void export_weights(const DiTModel& model, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  nlohmann::json manifest;
  manifest["version"] = 1;
  manifest["config"] = to_json(model.config());
  manifest["weights"] = nlohmann::json::array();
  for (const auto& [name, w] : model.named_weights()) {
    const std::string file = name + ".sctd";
    sctd::save(dir / file, *w);
    manifest["weights"].push_back({{"name", name}, {"file", file}, {"checksum", hex64(w->checksum())}});
  }
  std::ofstream out(dir / "manifest.json");
  if (!out) throw IoError("cannot write manifest in " + dir.string());
  out << manifest.dump(2) << '\n';
}

DiTModel import_weights(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw IoError("cannot read " + (dir / "manifest.json").string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(std::string("weights manifest: ") + e.what());
  }
  if (manifest.value("version", 0) != 1) throw ValidationError("weights manifest: unsupported version");
  DiTModel model = DiTModel::build(model_config_from_json(manifest.at("config")));
  std::size_t seen = 0;
  for (const auto& entry : manifest.at("weights")) {
    const auto name = entry.at("name").get<std::string>();
    Tensor loaded = sctd::load(dir / entry.at("file").get<std::string>());
    if (hex64(loaded.checksum()) != entry.at("checksum").get<std::string>()) {
      throw ValidationError("weights manifest: checksum mismatch for " + name);
    }
    Tensor& slot = model.mutable_weight(name);
    if (slot.shape() != loaded.shape()) throw ValidationError("weights manifest: shape mismatch for " + name);
    slot = std::move(loaded);
    ++seen;
  }
  if (seen != model.named_weights().size()) throw ValidationError("weights manifest: missing weights");
  return model;
}

}  // namespace smoothcache
