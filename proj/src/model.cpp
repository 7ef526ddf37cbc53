#include "bivl/model.hpp"

namespace bivl {

void ModelConfig::validate() const {
  if (vocab < 8) throw ValidationError("vocab must be at least 8");
  if (max_len < 3) throw ValidationError("max_len must be at least 3");
  if (grid <= 0 || pool <= 0) throw ValidationError("grid and pool must be positive");
  if (tipa_hidden <= 0 || rwtp_hidden <= 0) throw ValidationError("head widths must be positive");
  if (num_classes <= 0) throw ValidationError("num_classes must be positive");
  if (!(init_scale >= 0)) throw ValidationError("init_scale must be non-negative");
  encoder.validate();
}

std::string_view bio_label_name(int label) {
  static constexpr std::array<std::string_view, kNumBioLabels> names{
      "O", "B-HEADER", "I-HEADER", "B-QUESTION", "I-QUESTION", "B-ANSWER", "I-ANSWER"};
  if (label < 0 || label >= kNumBioLabels) throw ValidationError("BIO label out of range");
  return names[static_cast<std::size_t>(label)];
}

std::vector<Index> bio_labels(const TokenizedDoc& td, const SyntheticDocument& doc) {
  std::vector<Index> labels(static_cast<std::size_t>(td.length()), kIgnoreIndex);
  for (Index i = 0; i < td.length(); ++i) {
    const int b = td.block_index[i];
    if (b < 0) continue;
    const EntityRole role = doc.blocks.at(static_cast<std::size_t>(b)).role;
    if (role == EntityRole::Other) {
      labels[i] = 0;
      continue;
    }
    labels[i] = 1 + 2 * static_cast<int>(role) + (td.lp_ids[i] == kLpBegin ? 0 : 1);
  }
  return labels;
}

template <typename Scalar>
Tensor<Scalar> patch_tensor(const Image& image, const ModelConfig& cfg, bool requires_grad) {
  return Tensor<Scalar>::from_matrix(pool_patches(image, cfg.grid, cfg.pool).cast<Scalar>(), requires_grad);
}

template <typename Scalar>
BivlModel<Scalar>::BivlModel(const ModelConfig& cfg) : cfg_(cfg), params_(cfg.seed, cfg.init_scale) {
  cfg_.validate();
  const Index d = cfg_.encoder.d;
  tables_ = EmbeddingTables<Scalar>::create(params_, cfg_.vocab, cfg_.max_len, cfg_.regions(), cfg_.patch_features(), d);
  encoder_ = EncoderWeights<Scalar>::create(params_, cfg_.encoder);
  heads_ = PretrainHeads<Scalar>::create(params_, d, cfg_.vocab, cfg_.tipa_hidden, cfg_.rwtp_hidden);
  seqlabel_ = Linear<Scalar>::create(params_, "heads.seqlabel", d, kNumBioLabels);
  classify_ = Linear<Scalar>::create(params_, "heads.classify", d, cfg_.num_classes);
}

template <typename Scalar>
HybridOutputs<Scalar> BivlModel<Scalar>::encode(const TokenizedDoc& td, const Tensor<Scalar>& patches,
                                                bool retain_attention, std::mt19937_64* rng) const {
  if (td.length() > cfg_.max_len) throw DimensionError("sequence longer than the model's max_len");
  if (td.num_regions() != cfg_.regions()) throw DimensionError("document was tokenized for another grid");
  Tensor<Scalar> text = embed_text(td, tables_);
  Tensor<Scalar> visual = embed_visual(patches, td.visual_region_boxes, tables_);
  return bivl_encode(pack(visual, text, td.pad_mask), encoder_, cfg_.encoder, retain_attention, rng);
}

template <typename Scalar>
Tensor<Scalar> BivlModel<Scalar>::seqlabel_logits(const HybridOutputs<Scalar>& out) const {
  const Index n = out.hybrid.dim(0) - out.num_visual;
  auto parts = split(out.hybrid, 0, {out.num_visual, n});
  return seqlabel_(parts[1]);
}

template <typename Scalar>
Tensor<Scalar> BivlModel<Scalar>::classify_logits(const HybridOutputs<Scalar>& out) const {
  const std::vector<Index> cls{out.num_visual};
  return classify_(embedding_lookup<Scalar>(out.hybrid, cls));
}

template <typename Scalar>
PretrainLosses<Scalar> pretrain_losses(const BivlModel<Scalar>& model, const SyntheticDocument& doc,
                                       const TokenizedDoc& td, const PretrainPlan& plan, const TaskFlags& tasks,
                                       std::mt19937_64* rng) {
  TokenizedDoc input = td;
  input.token_ids = plan.mvlm.corrupted_ids;
  if (tasks.tipa) input = apply_tipa(std::move(input), plan.tipa);
  const Image& image = tasks.btia ? plan.btia.covered_image : doc.image;
  const auto out = model.encode(input, patch_tensor<Scalar>(image, model.config()), false, rng);

  const auto& heads = model.heads();
  PretrainLosses<Scalar> losses;
  losses.mvlm = mvlm_loss(out.hybrid, out.num_visual, plan.mvlm, heads, model.tables().word);
  if (tasks.tipa) {
    losses.tipa = diou_loss(tipa_predict(out.hybrid, out.num_visual, td, plan.tipa.masked_blocks, heads),
                            plan.tipa.gt_boxes);
  }
  if (tasks.rwtp) losses.rwtp = rwtp_loss(rwtp_probabilities(out.hybrid, out.num_visual, heads), plan.rwtp);
  if (tasks.btia) losses.btia = btia_loss(btia_probabilities(out.hybrid, heads), plan.btia);
  return losses;
}

#define BIVL_INSTANTIATE(S)                                                                                  \
  template class BivlModel<S>;                                                                               \
  template Tensor<S> patch_tensor(const Image&, const ModelConfig&, bool);                                  \
  template PretrainLosses<S> pretrain_losses(const BivlModel<S>&, const SyntheticDocument&, const TokenizedDoc&, \
                                             const PretrainPlan&, const TaskFlags&, std::mt19937_64*);

BIVL_INSTANTIATE(float)
BIVL_INSTANTIATE(double)

#undef BIVL_INSTANTIATE

}  // namespace bivl
