#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "sfformer/optim.hpp"
#include "sfformer/tensor.hpp"

namespace sff {

enum class FusionMode { kSelfBaseline, kCrossFusion };
enum class Readout { kCls, kMeanPool };

struct ModelConfig {
  std::size_t cluster_count = 953;
  std::size_t token_dim = 64;
  std::size_t n_layers = 1;
  std::size_t n_heads = 8;
  double dropout_attn = 0.0;
  double dropout_ffn = 0.0;
  double dropout_residual = 0.0;
  FusionMode fusion = FusionMode::kSelfBaseline;
  Readout readout = Readout::kCls;
  // Cross fusion only: run the helper sequence through each layer as well
  // instead of keeping K/V fixed at the tokenized helper.
  bool helper_evolves = false;
  std::uint64_t seed = 0;

  // ReGLU hidden width: 4d/3 rounded to the nearest even integer.
  std::size_t ffn_hidden() const;
  std::size_t head_dim() const { return token_dim / n_heads; }
  void validate() const;
};

std::string write_model_config(const ModelConfig& config);
ModelConfig parse_model_config(std::string_view text);
std::string_view fusion_name(FusionMode mode) noexcept;

struct StreamTokenizer {
  ad::Tensor weight;  // [C, d]
  ad::Tensor bias;    // [C, d]
};

struct LayerNormParams {
  ad::Tensor gain;
  ad::Tensor shift;
};

struct LinearParams {
  ad::Tensor weight;  // [in, out]
  ad::Tensor bias;    // [out]
};

struct EncoderLayerParams {
  LayerNormParams norm_attn;  // applied to the query stream (and to K/V in self-attention)
  LayerNormParams norm_kv;    // applied to the helper stream in cross fusion
  LinearParams query, key, value, output;
  LayerNormParams norm_ffn;
  LinearParams ffn_in;   // d -> 2f
  LinearParams ffn_out;  // f -> d
};

struct ModelParams {
  StreamTokenizer primary;
  StreamTokenizer helper;  // defined only for cross fusion
  ad::Tensor cls;          // [d]
  std::vector<EncoderLayerParams> layers;
  LayerNormParams head_norm;
  LinearParams head;  // d -> 1

  std::vector<ad::NamedTensor> named() const;
};

// He-normal weights (variance 2/fan_in), zero biases, uniform tokenizer
// biases in +-1/sqrt(d), CLS ~ N(0, 2/d). Fully determined by config.seed.
ModelParams init_params(const ModelConfig& config);

// x[B, C] -> tokens[B, C+1, d] with CLS at position 0.
ad::Tensor tokenize_stream(const ad::Tensor& x, const StreamTokenizer& tokenizer, const ad::Tensor& cls);

// Scaled dot-product attention over already-normalized inputs. When
// `probabilities` is non-null, the per-head probability matrices (after
// softmax, before dropout) are appended to it.
ad::Tensor multi_head_attention(const ad::Tensor& queries, const ad::Tensor& keys_values,
                                const EncoderLayerParams& layer, const ModelConfig& config, bool train,
                                ad::Rng& rng, std::vector<ad::Tensor>* probabilities = nullptr);

// Pre-norm block: u = q + drop(MHA(LN(q), LN'(kv))); out = u + drop(drop(FFN(LN(u)))).
// With kv undefined the layer self-attends and LN' = LN.
ad::Tensor encoder_layer(const ad::Tensor& q_tokens, const ad::Tensor& kv_tokens, const EncoderLayerParams& layer,
                         const ModelConfig& config, bool train, ad::Rng& rng);

// Returns predictions [B, 1]. `helper` is required iff fusion is cross.
ad::Tensor forward(const ModelParams& params, const ModelConfig& config, const ad::Tensor& primary,
                   const ad::Tensor* helper, bool train, ad::Rng& rng);

}  // namespace sff
