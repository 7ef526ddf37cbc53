#pragma once

// L-layer pre-LN transformer over the packed sequence, followed by the
// bidirectional vision-language hybrid-attention layer.
//
//   H_hybrid_t = LN(Attn_tt + Attn_vt) * M_t    text queries, text / visual keys
//   H_hybrid_v = LN(Attn_vv + Attn_tv) * M_v    visual queries, visual / text keys
//   H_hybrid   = LN(H_hybrid_t + H_hybrid_v)

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "bivl/embedding.hpp"
#include "bivl/parameter.hpp"

namespace bivl {

struct EncoderConfig {
  int layers = 1;
  int heads = 4;
  Index d = 64;
  Index d_ff = 128;
  double dropout = 0.0;
  /// Cross-modal branches of the hybrid layer. Off leaves only per-modality self-attention.
  bool bvlha = true;
  /// Softmax over every non-pad key (modality masks applied only to the outputs),
  /// instead of restricting each branch to its own key modality.
  bool literal_eq_masking = false;
  /// Adds each side's own encoder rows inside its hybrid layer norm: LN(H_t + Attn_tt + Attn_vt).
  bool hybrid_residual = true;

  void validate() const {
    if (layers < 0) throw ValidationError("layers must be >= 0");
    if (heads <= 0 || d <= 0 || d % heads != 0) throw ValidationError("d must be divisible by heads");
    if (d_ff <= 0) throw ValidationError("d_ff must be positive");
    if (dropout < 0.0 || dropout >= 1.0) throw ValidationError("dropout must be in [0, 1)");
  }
  Index head_dim() const { return d / heads; }
};

template <typename Scalar>
struct AttentionProjections {
  Linear<Scalar> query, key, value;

  static AttentionProjections create(ParameterSet<Scalar>& params, const std::string& prefix, Index d);
};

template <typename Scalar>
struct EncoderLayerWeights {
  LayerNormParams<Scalar> ln_attn;
  AttentionProjections<Scalar> attn;
  Linear<Scalar> attn_output;
  LayerNormParams<Scalar> ln_ffn;
  Linear<Scalar> ffn_in, ffn_out;
};

template <typename Scalar>
struct HybridWeights {
  AttentionProjections<Scalar> text_self;     // t->t
  AttentionProjections<Scalar> text_cross;    // text queries over visual keys
  AttentionProjections<Scalar> vision_self;   // v->v
  AttentionProjections<Scalar> vision_cross;  // visual queries over text keys
  LayerNormParams<Scalar> ln_text, ln_vision, ln_out;
};

template <typename Scalar>
struct EncoderWeights {
  std::vector<EncoderLayerWeights<Scalar>> layers;
  LayerNormParams<Scalar> final_ln;
  HybridWeights<Scalar> hybrid;

  static EncoderWeights create(ParameterSet<Scalar>& params, const EncoderConfig& cfg);
};

/// Attention probabilities of one head, [queries, keys] over the packed sequence.
template <typename Scalar>
struct AttentionMap {
  std::string kind;  // "self", "text_to_text", "text_to_visual", "visual_to_visual", "visual_to_text"
  int layer = 0;     // encoder layer, or -1 for the hybrid layer
  int head = 0;
  Tensor<Scalar> probs;
  /// Query rows belonging to the map's query modality.
  std::vector<std::uint8_t> query_rows;
};

template <typename Scalar>
using AttentionTrace = std::vector<AttentionMap<Scalar>>;

/// Row masks of the packed sequence.
template <typename Scalar>
struct ModalityMasks {
  std::vector<Scalar> visual;       // M_v
  std::vector<Scalar> text;         // M_t
  std::vector<std::uint8_t> valid;  // non-pad

  static ModalityMasks from(const PackedSequence<Scalar>& packed) {
    return {packed.visual_mask, packed.text_mask, packed.valid};
  }
  std::vector<std::uint8_t> visual_keys() const;
  std::vector<std::uint8_t> text_keys() const;
};

template <typename Scalar>
struct HybridOutputs {
  Tensor<Scalar> encoded;   // H_vt^L
  Tensor<Scalar> hybrid_t;  // zero outside text rows
  Tensor<Scalar> hybrid_v;  // zero outside visual rows
  Tensor<Scalar> hybrid;    // H_hybrid
  Index num_visual = 0;
  AttentionTrace<Scalar> attention;
};

/// Multi-head scaled dot-product attention without an output projection.
/// Returns the concatenated heads, [queries, d].
template <typename Scalar>
Tensor<Scalar> multi_head_attention(const Tensor<Scalar>& queries, const Tensor<Scalar>& keys_values,
                                    const AttentionProjections<Scalar>& proj, int heads,
                                    std::span<const std::uint8_t> key_mask, AttentionTrace<Scalar>* trace,
                                    const std::string& kind, int layer);

/// Pre-LN stack; padded keys are masked. `rng` drives dropout when the rate is nonzero.
template <typename Scalar>
Tensor<Scalar> encode_vlt(const Tensor<Scalar>& packed, std::span<const std::uint8_t> valid,
                          const EncoderWeights<Scalar>& weights, const EncoderConfig& cfg,
                          AttentionTrace<Scalar>* trace = nullptr, std::mt19937_64* rng = nullptr);

template <typename Scalar>
std::pair<Tensor<Scalar>, Tensor<Scalar>> split_modalities(const Tensor<Scalar>& encoded,
                                                           const ModalityMasks<Scalar>& masks);

template <typename Scalar>
Tensor<Scalar> hybrid_text(const Tensor<Scalar>& text_rows, const Tensor<Scalar>& visual_rows,
                           const ModalityMasks<Scalar>& masks, const HybridWeights<Scalar>& weights,
                           const EncoderConfig& cfg, AttentionTrace<Scalar>* trace = nullptr);

template <typename Scalar>
Tensor<Scalar> hybrid_vision(const Tensor<Scalar>& visual_rows, const Tensor<Scalar>& text_rows,
                             const ModalityMasks<Scalar>& masks, const HybridWeights<Scalar>& weights,
                             const EncoderConfig& cfg, AttentionTrace<Scalar>* trace = nullptr);

template <typename Scalar>
Tensor<Scalar> combine(const Tensor<Scalar>& hybrid_t, const Tensor<Scalar>& hybrid_v,
                       const HybridWeights<Scalar>& weights);

/// Split, both hybrid sides and combine, starting from an encoder output.
template <typename Scalar>
HybridOutputs<Scalar> hybrid_layer(const Tensor<Scalar>& encoded, const ModalityMasks<Scalar>& masks,
                                   const HybridWeights<Scalar>& weights, const EncoderConfig& cfg,
                                   bool retain_attention = false);

/// Full encoder: stack then hybrid layer.
template <typename Scalar>
HybridOutputs<Scalar> bivl_encode(const PackedSequence<Scalar>& packed, const EncoderWeights<Scalar>& weights,
                                  const EncoderConfig& cfg, bool retain_attention = false,
                                  std::mt19937_64* rng = nullptr);

/// One CSV per map: header "query_index,key_0,...,key_{K-1}", one row per query
/// of the map's modality. Returns the written paths.
template <typename Scalar>
std::vector<std::filesystem::path> dump_attention(const AttentionTrace<Scalar>& trace,
                                                  const std::filesystem::path& directory);

}  // namespace bivl
