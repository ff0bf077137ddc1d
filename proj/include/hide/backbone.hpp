#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hide/numerics.hpp"

namespace hide {

struct BackboneConfig {
  /// Length of the raw ingested embedding. When it differs from tokens * token_dim a
  /// frozen seeded projection maps it onto the token grid.
  std::size_t input_dim = 64;
  std::size_t num_layers = 2;
  std::size_t tokens = 4;
  std::size_t token_dim = 16;
  std::size_t ffn_dim = 32;
  double layer_norm_eps = 1e-5;

  std::size_t token_grid_size() const noexcept { return tokens * token_dim; }
  /// Representation size D. Data tokens are mean-pooled after the final norm.
  std::size_t output_dim() const noexcept { return token_dim; }
  void validate() const;

  bool operator==(const BackboneConfig&) const = default;
};

struct LayerNormParams {
  Tensor2 gain;  // 1 x d
  Tensor2 bias;  // 1 x d
};

struct EncoderLayerWeights {
  LayerNormParams attn_norm;
  Tensor2 query, query_bias;
  Tensor2 key, key_bias;
  Tensor2 value, value_bias;
  Tensor2 out, out_bias;
  LayerNormParams ffn_norm;
  Tensor2 ffn_in, ffn_in_bias;
  Tensor2 ffn_out, ffn_out_bias;
};

struct BackboneWeights {
  /// Empty when input_dim == tokens * token_dim.
  Tensor2 input_projection;
  std::vector<EncoderLayerWeights> layers;
  LayerNormParams final_norm;
};

/// Frozen 2-layer (by default) pre-norm transformer encoder standing in for the
/// pre-trained model f_theta. Immutable after construction.
class BackboneSurrogate {
 public:
  BackboneSurrogate(BackboneConfig config, BackboneWeights weights, std::uint64_t seed);

  const BackboneConfig& config() const noexcept { return config_; }
  const BackboneWeights& weights() const noexcept { return weights_; }
  std::uint64_t seed() const noexcept { return seed_; }

 private:
  BackboneConfig config_;
  BackboneWeights weights_;
  std::uint64_t seed_;
};

BackboneSurrogate init_backbone(std::uint64_t seed, const BackboneConfig& config);

/// All linear maps zero, norms at identity (gain 1, bias 0).
BackboneWeights zero_backbone_weights(const BackboneConfig& config);

enum class PeftKind : std::uint8_t { Prompt = 0, LoRA = 1, FiLM = 2, Adapter = 3 };

std::string to_string(PeftKind kind);
PeftKind peft_kind_from_string(const std::string& name);

struct PeftConfig {
  PeftKind kind = PeftKind::Prompt;
  std::size_t prompt_len = 20;
  std::size_t lora_rank = 8;
  std::size_t adapter_bottleneck = 8;
  /// Recorded for reference; the adapter nonlinearity is tanh.
  std::string adapter_activation = "tanh";

  bool operator==(const PeftConfig&) const = default;
};

/// Task-specific parameters e_t. One tensor group per encoder layer:
///   Prompt:  [tokens (prompt_len x d)]
///   LoRA:    [a (d x r), b (r x d)]        on the value projection, scaled 1/r
///   FiLM:    [gamma (1 x d), beta (1 x d)] on the layer output
///   Adapter: [down (d x b), down_bias (1 x b), up (b x d), up_bias (1 x d)], residual, tanh
class PeftParams {
 public:
  PeftParams() = default;
  PeftParams(PeftConfig config, const BackboneConfig& backbone);

  PeftKind kind() const noexcept { return config_.kind; }
  const PeftConfig& config() const noexcept { return config_; }
  std::size_t num_layers() const noexcept { return num_layers_; }
  std::size_t token_dim() const noexcept { return token_dim_; }

  static std::size_t tensors_per_layer(PeftKind kind);

  Tensor2& tensor(std::size_t layer, std::size_t slot) {
    return tensors_[layer * tensors_per_layer(config_.kind) + slot];
  }
  const Tensor2& tensor(std::size_t layer, std::size_t slot) const {
    return tensors_[layer * tensors_per_layer(config_.kind) + slot];
  }

  std::vector<Tensor2*> tensors();
  std::vector<const Tensor2*> tensors() const;
  std::vector<Tensor2>& raw() noexcept { return tensors_; }
  const std::vector<Tensor2>& raw() const noexcept { return tensors_; }
  std::size_t parameter_count() const;

  /// Same kind and shapes with every entry zero, used as a gradient accumulator.
  PeftParams zeros_like() const;
  /// Throws ConfigError unless shapes are consistent with `backbone`.
  void check_compatible(const BackboneConfig& backbone) const;

  bool operator==(const PeftParams&) const = default;

 private:
  PeftConfig config_;
  std::size_t num_layers_ = 0;
  std::size_t token_dim_ = 0;
  std::vector<Tensor2> tensors_;
};

/// Parameters that make forward_adapted identical to forward_unadapted: zero LoRA
/// delta, identity FiLM, zero-output adapter, or an empty prompt.
PeftParams null_peft(const PeftConfig& config, const BackboneConfig& backbone);

/// e_t <- copy(e_{t-1}) when `previous` is given, otherwise a seeded fresh init
/// (LoRA b = 0, adapter up = 0, FiLM identity, prompts ~ N(0, 0.02^2)).
PeftParams init_peft(const PeftConfig& config, const BackboneConfig& backbone,
                     const PeftParams* previous, std::uint64_t seed);

/// Reshape a tokens*token_dim vector into tokens rows.
Tensor2 embed_tokens(const BackboneConfig& config, std::span<const double> x);
std::vector<double> flatten_tokens(const Tensor2& tokens);

struct LayerNormCache {
  Tensor2 normalized;
  std::vector<double> inv_std;
};

struct EncoderLayerCache {
  std::size_t prompt_rows = 0;
  Tensor2 input;
  LayerNormCache attn_norm;
  Tensor2 normed, q, k, v, probs, attended;
  Tensor2 lora_hidden;
  Tensor2 residual1;
  LayerNormCache ffn_norm;
  Tensor2 ffn_normed, ffn_pre, ffn_act;
  Tensor2 residual2;
  Tensor2 adapter_hidden;
  Tensor2 adapted;
};

struct ForwardCache {
  std::vector<EncoderLayerCache> layers;
  LayerNormCache final_norm;
};

/// f_theta(x). Deterministic and pure.
std::vector<double> forward_unadapted(const BackboneSurrogate& backbone, std::span<const double> x);

/// f_theta(x; e). Fills `cache` for a later backward_adapted call when non-null.
std::vector<double> forward_adapted(const BackboneSurrogate& backbone, std::span<const double> x,
                                    const PeftParams& peft, ForwardCache* cache = nullptr);

/// Accumulates d(loss)/d(e) into `grad` given d(loss)/d(output).
void backward_adapted(const BackboneSurrogate& backbone, const ForwardCache& cache,
                      const PeftParams& peft, std::span<const double> grad_output,
                      PeftParams& grad);

}  // namespace hide
