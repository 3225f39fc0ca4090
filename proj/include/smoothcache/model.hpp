#pragma once

#include <array>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "smoothcache/tensor.hpp"

namespace smoothcache {

/// The three cacheable sublayer kinds. Every cacheable sublayer carries one.
enum class LayerKind { SelfAttention, CrossAttention, FeedForward };

inline constexpr std::array<LayerKind, 3> kAllLayerKinds{LayerKind::SelfAttention, LayerKind::CrossAttention,
                                                         LayerKind::FeedForward};

/// "self_attn", "cross_attn", "ffn".
std::string_view to_string(LayerKind kind);
/// Throws ValidationError on unknown names.
LayerKind parse_layer_kind(std::string_view name);

/// Identity of one cacheable sublayer: kind plus block index.
struct LayerKey {
  LayerKind kind;
  std::size_t block;
  auto operator<=>(const LayerKey&) const = default;
};

std::string to_string(const LayerKey& key);

struct ModelConfig {
  std::size_t blocks = 4;
  std::size_t dim = 64;
  std::size_t heads = 4;
  std::size_t tokens = 16;
  /// 0 disables cross-attention.
  std::size_t context_tokens = 8;
  std::size_t ffn_mult = 4;
  std::uint64_t seed = 0;

  /// Throws ConfigError naming the offending field.
  void validate() const;
  bool has_cross_attention() const { return context_tokens > 0; }
  /// Sublayer kinds present in each block, in execution order.
  std::vector<LayerKind> kinds() const;
  bool operator==(const ModelConfig&) const = default;
};

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

/// A computed residual-branch output h (gate applied) for one sublayer.
struct BranchOutput {
  LayerKey key;
  std::size_t step;
  Tensor value;
};

/// Decides, per sublayer and execution step, whether the model computes the
/// branch or receives a tensor to use in its place.
class BranchPolicy {
 public:
  virtual ~BranchPolicy() = default;
  /// Tensor to add to the residual stream instead of evaluating the sublayer,
  /// or nullptr to compute it. The pointer must stay valid until the call
  /// returns to forward().
  virtual const Tensor* cached_branch(const LayerKey& key, std::size_t step) = 0;
  /// Invoked once for every branch output that was actually computed.
  virtual void on_computed(const BranchOutput& /*output*/) {}
};

class ComputeAllPolicy : public BranchPolicy {
 public:
  const Tensor* cached_branch(const LayerKey&, std::size_t) override { return nullptr; }
};

struct ForwardResult {
  Tensor eps;
  std::vector<BranchOutput> visited;
};

/// Sinusoidal embedding of a token position into `dim` channels
/// (frequencies 1 .. 1/10000).
Tensor sinusoidal_embedding(double position, std::size_t dim);

/// Sinusoidal timestep embedding with frequencies 1/100 .. 1/10000, so
/// neighbouring sampler steps (tens of timesteps apart) map to nearby vectors.
Tensor timestep_embedding(double timestep, std::size_t dim);

/// Toy diffusion transformer with adaLN-modulated, gated sublayers.
///
/// Per block, in order self-attention -> cross-attention (if enabled) ->
/// feed-forward:
///   h = gate * Sublayer(scale * layer_norm(x) + shift);  x <- x + h
/// where (shift, scale, gate) are a per-block linear map of the timestep
/// embedding. h is the cacheable unit.
///
/// Inputs may carry a batch of B samples stacked along rows ([B*L x d]); all
/// samples share the timestep. The cached unit is then the whole batched h.
class DiTModel {
 public:
  /// Draws all weights from SeededRng(cfg.seed); equal configs give bitwise
  /// equal weights.
  static DiTModel build(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }
  /// All cacheable sublayers in execution order (block-major).
  std::vector<LayerKey> cacheable_keys() const;
  /// Stand-in for the null-prompt embedding; used as the unconditional context.
  const Tensor& null_context() const;

  /// `context` must be [B*Lc x d] when cross-attention is enabled; nullptr
  /// means the null context for every sample. `step` is forwarded to the
  /// policy and recorded on every visited output.
  ForwardResult forward(const Tensor& x, double timestep, const Tensor* context, BranchPolicy& policy,
                        std::size_t step) const;

  /// Weights in their fixed draw order, with stable names such as
  /// "blocks.0.ffn.up".
  std::vector<std::pair<std::string, const Tensor*>> named_weights() const;
  Tensor& mutable_weight(std::string_view name);

 private:
  struct Block {
    Tensor modulation;  // [d x 3*S*d]: (shift, scale, gate) per sublayer
    Tensor qkv, attn_out;
    Tensor cross_q, cross_kv, cross_out;
    Tensor ffn_up, ffn_down;
  };

  explicit DiTModel(const ModelConfig& cfg) : cfg_(cfg) {}
  std::vector<std::pair<std::string, Tensor*>> weight_slots();

  Tensor self_attention(const Block& blk, const Tensor& u, std::size_t batch) const;
  Tensor cross_attention(const Block& blk, const Tensor& u, const Tensor& ctx, std::size_t batch) const;
  Tensor feed_forward(const Block& blk, const Tensor& u) const;

  ModelConfig cfg_;
  Tensor time_fc1_, time_fc2_;
  std::vector<Block> blocks_;
  Tensor final_modulation_, head_;
  Tensor null_context_;
  Tensor positions_;  // fixed sinusoidal token positions [L x d]
};

/// Writes one SCTD file per weight plus manifest.json {config, per-weight checksum}.
void export_weights(const DiTModel& model, const std::filesystem::path& dir);
/// Rebuilds a model from an exported directory, verifying every checksum.
DiTModel import_weights(const std::filesystem::path& dir);

}  // namespace smoothcache
