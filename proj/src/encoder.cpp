#include "bivl/encoder.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace bivl {

template <typename Scalar>
std::vector<std::uint8_t> ModalityMasks<Scalar>::visual_keys() const {
  std::vector<std::uint8_t> k(visual.size());
  for (std::size_t i = 0; i < visual.size(); ++i) k[i] = visual[i] != Scalar(0) && valid[i];
  return k;
}

template <typename Scalar>
std::vector<std::uint8_t> ModalityMasks<Scalar>::text_keys() const {
  std::vector<std::uint8_t> k(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) k[i] = text[i] != Scalar(0) && valid[i];
  return k;
}

template <typename Scalar>
AttentionProjections<Scalar> AttentionProjections<Scalar>::create(ParameterSet<Scalar>& params,
                                                                  const std::string& prefix, Index d) {
  return {Linear<Scalar>::create(params, prefix + ".query", d, d),
          Linear<Scalar>::create(params, prefix + ".key", d, d),
          Linear<Scalar>::create(params, prefix + ".value", d, d)};
}

template <typename Scalar>
EncoderWeights<Scalar> EncoderWeights<Scalar>::create(ParameterSet<Scalar>& params, const EncoderConfig& cfg) {
  cfg.validate();
  EncoderWeights w;
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string p = "encoder.layer" + std::to_string(l);
    EncoderLayerWeights<Scalar> layer;
    layer.ln_attn = LayerNormParams<Scalar>::create(params, p + ".ln_attn", cfg.d);
    layer.attn = AttentionProjections<Scalar>::create(params, p + ".attn", cfg.d);
    layer.attn_output = Linear<Scalar>::create(params, p + ".attn.output", cfg.d, cfg.d);
    layer.ln_ffn = LayerNormParams<Scalar>::create(params, p + ".ln_ffn", cfg.d);
    layer.ffn_in = Linear<Scalar>::create(params, p + ".ffn.in", cfg.d, cfg.d_ff);
    layer.ffn_out = Linear<Scalar>::create(params, p + ".ffn.out", cfg.d_ff, cfg.d);
    w.layers.push_back(std::move(layer));
  }
  w.final_ln = LayerNormParams<Scalar>::create(params, "encoder.final_ln", cfg.d);
  auto& h = w.hybrid;
  h.text_self = AttentionProjections<Scalar>::create(params, "hybrid.text_self", cfg.d);
  h.text_cross = AttentionProjections<Scalar>::create(params, "hybrid.text_cross", cfg.d);
  h.vision_self = AttentionProjections<Scalar>::create(params, "hybrid.vision_self", cfg.d);
  h.vision_cross = AttentionProjections<Scalar>::create(params, "hybrid.vision_cross", cfg.d);
  h.ln_text = LayerNormParams<Scalar>::create(params, "hybrid.ln_text", cfg.d);
  h.ln_vision = LayerNormParams<Scalar>::create(params, "hybrid.ln_vision", cfg.d);
  h.ln_out = LayerNormParams<Scalar>::create(params, "hybrid.ln_out", cfg.d);
  return w;
}

template <typename Scalar>
Tensor<Scalar> multi_head_attention(const Tensor<Scalar>& queries, const Tensor<Scalar>& keys_values,
                                    const AttentionProjections<Scalar>& proj, int heads,
                                    std::span<const std::uint8_t> key_mask, AttentionTrace<Scalar>* trace,
                                    const std::string& kind, int layer) {
  const Index d = proj.query.weight.dim(1);
  const Index dk = d / heads;
  const std::vector<Index> sizes(static_cast<std::size_t>(heads), dk);
  const auto q = split(proj.query(queries), -1, sizes);
  const auto k = split(proj.key(keys_values), -1, sizes);
  const auto v = split(proj.value(keys_values), -1, sizes);
  const Scalar inv_sqrt = Scalar(1) / std::sqrt(static_cast<Scalar>(dk));

  std::vector<Tensor<Scalar>> outs;
  outs.reserve(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Tensor<Scalar> scores = scale(matmul(q[h], transpose(k[h])), inv_sqrt);
    Tensor<Scalar> probs = masked_softmax(scores, key_mask);
    if (trace) trace->push_back({kind, layer, h, probs, {}});
    outs.push_back(matmul(probs, v[h]));
  }
  return heads == 1 ? outs.front() : concat(outs, -1);
}

template <typename Scalar>
Tensor<Scalar> encode_vlt(const Tensor<Scalar>& packed, std::span<const std::uint8_t> valid,
                          const EncoderWeights<Scalar>& weights, const EncoderConfig& cfg,
                          AttentionTrace<Scalar>* trace, std::mt19937_64* rng) {
  if (packed.rank() != 2 || packed.dim(0) != static_cast<Index>(valid.size())) {
    throw DimensionError("encoder input " + shape_string(packed.shape()) + " does not match mask length");
  }
  if (std::none_of(valid.begin(), valid.end(), [](std::uint8_t v) { return v != 0; })) {
    throw DegenerateMaskError("every position of the packed sequence is padding");
  }
  if (weights.layers.empty()) return packed;

  auto drop = [&](const Tensor<Scalar>& x) {
    return (cfg.dropout > 0.0 && rng) ? dropout(x, cfg.dropout, *rng) : x;
  };
  Tensor<Scalar> x = packed;
  for (std::size_t l = 0; l < weights.layers.size(); ++l) {
    const auto& w = weights.layers[l];
    Tensor<Scalar> h = w.ln_attn(x);
    Tensor<Scalar> a = multi_head_attention(h, h, w.attn, cfg.heads, valid, trace, "self", static_cast<int>(l));
    x = add(x, drop(w.attn_output(a)));
    Tensor<Scalar> f = w.ffn_out(gelu(w.ffn_in(w.ln_ffn(x))));
    x = add(x, drop(f));
  }
  return weights.final_ln(x);
}

template <typename Scalar>
std::pair<Tensor<Scalar>, Tensor<Scalar>> split_modalities(const Tensor<Scalar>& encoded,
                                                           const ModalityMasks<Scalar>& masks) {
  return {mask_rows<Scalar>(encoded, masks.visual), mask_rows<Scalar>(encoded, masks.text)};
}

namespace {

template <typename Scalar>
void tag_queries(AttentionTrace<Scalar>* trace, std::size_t from, const std::vector<Scalar>& query_mask) {
  if (!trace) return;
  std::vector<std::uint8_t> rows(query_mask.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = query_mask[i] != Scalar(0);
  for (std::size_t i = from; i < trace->size(); ++i) (*trace)[i].query_rows = rows;
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> hybrid_text(const Tensor<Scalar>& text_rows, const Tensor<Scalar>& visual_rows,
                           const ModalityMasks<Scalar>& masks, const HybridWeights<Scalar>& weights,
                           const EncoderConfig& cfg, AttentionTrace<Scalar>* trace) {
  const auto text_keys = cfg.literal_eq_masking ? masks.valid : masks.text_keys();
  const auto visual_keys = cfg.literal_eq_masking ? masks.valid : masks.visual_keys();
  const std::size_t mark = trace ? trace->size() : 0;

  Tensor<Scalar> sum = multi_head_attention(text_rows, text_rows, weights.text_self, cfg.heads, text_keys, trace,
                                            "text_to_text", -1);
  if (cfg.bvlha) {
    sum = add(sum, multi_head_attention(text_rows, visual_rows, weights.text_cross, cfg.heads, visual_keys, trace,
                                        "text_to_visual", -1));
  }
  if (cfg.hybrid_residual) sum = add(sum, text_rows);
  tag_queries(trace, mark, masks.text);
  return mask_rows<Scalar>(weights.ln_text(sum), masks.text);
}

template <typename Scalar>
Tensor<Scalar> hybrid_vision(const Tensor<Scalar>& visual_rows, const Tensor<Scalar>& text_rows,
                             const ModalityMasks<Scalar>& masks, const HybridWeights<Scalar>& weights,
                             const EncoderConfig& cfg, AttentionTrace<Scalar>* trace) {
  const auto text_keys = cfg.literal_eq_masking ? masks.valid : masks.text_keys();
  const auto visual_keys = cfg.literal_eq_masking ? masks.valid : masks.visual_keys();
  const std::size_t mark = trace ? trace->size() : 0;

  Tensor<Scalar> sum = multi_head_attention(visual_rows, visual_rows, weights.vision_self, cfg.heads, visual_keys,
                                            trace, "visual_to_visual", -1);
  if (cfg.bvlha) {
    sum = add(sum, multi_head_attention(visual_rows, text_rows, weights.vision_cross, cfg.heads, text_keys, trace,
                                        "visual_to_text", -1));
  }
  if (cfg.hybrid_residual) sum = add(sum, visual_rows);
  tag_queries(trace, mark, masks.visual);
  return mask_rows<Scalar>(weights.ln_vision(sum), masks.visual);
}

template <typename Scalar>
Tensor<Scalar> combine(const Tensor<Scalar>& hybrid_t, const Tensor<Scalar>& hybrid_v,
                       const HybridWeights<Scalar>& weights) {
  return weights.ln_out(add(hybrid_t, hybrid_v));
}

template <typename Scalar>
HybridOutputs<Scalar> hybrid_layer(const Tensor<Scalar>& encoded, const ModalityMasks<Scalar>& masks,
                                   const HybridWeights<Scalar>& weights, const EncoderConfig& cfg,
                                   bool retain_attention) {
  HybridOutputs<Scalar> out;
  out.encoded = encoded;
  out.num_visual = static_cast<Index>(std::count_if(masks.visual.begin(), masks.visual.end(),
                                                    [](Scalar v) { return v != Scalar(0); }));
  AttentionTrace<Scalar>* trace = retain_attention ? &out.attention : nullptr;
  auto [visual_rows, text_rows] = split_modalities(encoded, masks);
  out.hybrid_t = hybrid_text(text_rows, visual_rows, masks, weights, cfg, trace);
  out.hybrid_v = hybrid_vision(visual_rows, text_rows, masks, weights, cfg, trace);
  out.hybrid = combine(out.hybrid_t, out.hybrid_v, weights);
  return out;
}

template <typename Scalar>
HybridOutputs<Scalar> bivl_encode(const PackedSequence<Scalar>& packed, const EncoderWeights<Scalar>& weights,
                                  const EncoderConfig& cfg, bool retain_attention, std::mt19937_64* rng) {
  AttentionTrace<Scalar> stack_trace;
  Tensor<Scalar> encoded =
      encode_vlt(packed.hidden, packed.valid, weights, cfg, retain_attention ? &stack_trace : nullptr, rng);
  const auto masks = ModalityMasks<Scalar>::from(packed);
  HybridOutputs<Scalar> out = hybrid_layer(encoded, masks, weights.hybrid, cfg, retain_attention);
  out.num_visual = packed.num_visual;
  if (retain_attention) {
    for (auto& map : stack_trace) map.query_rows = packed.valid;
    out.attention.insert(out.attention.begin(), stack_trace.begin(), stack_trace.end());
  }
  return out;
}

template <typename Scalar>
std::vector<std::filesystem::path> dump_attention(const AttentionTrace<Scalar>& trace,
                                                  const std::filesystem::path& directory) {
  std::filesystem::create_directories(directory);
  std::vector<std::filesystem::path> written;
  for (const auto& map : trace) {
    std::ostringstream name;
    name << (map.layer < 0 ? std::string("hybrid") : "layer" + std::to_string(map.layer)) << "_head" << map.head
         << '_' << map.kind << ".csv";
    const auto path = directory / name.str();
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    const auto p = map.probs.matrix();
    out << "query_index";
    for (Index k = 0; k < p.cols(); ++k) out << ",key_" << k;
    out << '\n';
    out << std::setprecision(9);
    for (Index q = 0; q < p.rows(); ++q) {
      if (!map.query_rows.empty() && !map.query_rows[q]) continue;
      out << q;
      for (Index k = 0; k < p.cols(); ++k) out << ',' << static_cast<double>(p(q, k));
      out << '\n';
    }
    written.push_back(path);
  }
  return written;
}

#define BIVL_INSTANTIATE(S)                                                                                         \
  template struct ModalityMasks<S>;                                                                                \
  template struct AttentionProjections<S>;                                                                         \
  template struct EncoderWeights<S>;                                                                               \
  template Tensor<S> multi_head_attention(const Tensor<S>&, const Tensor<S>&, const AttentionProjections<S>&, int, \
                                          std::span<const std::uint8_t>, AttentionTrace<S>*, const std::string&,   \
                                          int);                                                                    \
  template Tensor<S> encode_vlt(const Tensor<S>&, std::span<const std::uint8_t>, const EncoderWeights<S>&,         \
                                const EncoderConfig&, AttentionTrace<S>*, std::mt19937_64*);                       \
  template std::pair<Tensor<S>, Tensor<S>> split_modalities(const Tensor<S>&, const ModalityMasks<S>&);           \
  template Tensor<S> hybrid_text(const Tensor<S>&, const Tensor<S>&, const ModalityMasks<S>&,                      \
                                 const HybridWeights<S>&, const EncoderConfig&, AttentionTrace<S>*);               \
  template Tensor<S> hybrid_vision(const Tensor<S>&, const Tensor<S>&, const ModalityMasks<S>&,                    \
                                   const HybridWeights<S>&, const EncoderConfig&, AttentionTrace<S>*);             \
  template Tensor<S> combine(const Tensor<S>&, const Tensor<S>&, const HybridWeights<S>&);                         \
  template HybridOutputs<S> hybrid_layer(const Tensor<S>&, const ModalityMasks<S>&, const HybridWeights<S>&,       \
                                         const EncoderConfig&, bool);                                              \
  template HybridOutputs<S> bivl_encode(const PackedSequence<S>&, const EncoderWeights<S>&, const EncoderConfig&,  \
                                        bool, std::mt19937_64*);                                                   \
  template std::vector<std::filesystem::path> dump_attention(const AttentionTrace<S>&, const std::filesystem::path&);

BIVL_INSTANTIATE(float)
BIVL_INSTANTIATE(double)

#undef BIVL_INSTANTIATE

}  // namespace bivl
