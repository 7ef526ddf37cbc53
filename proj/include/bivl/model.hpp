#pragma once

// The full network: embeddings, encoder + hybrid layer, pre-training heads
// and the two downstream heads, all registered in one ParameterSet.

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "bivl/encoder.hpp"
#include "bivl/objectives.hpp"

namespace bivl {

struct ModelConfig {
  Index vocab = 64;
  Index max_len = 128;
  int grid = 4;
  int pool = 4;
  EncoderConfig encoder;
  Index tipa_hidden = 128;
  Index rwtp_hidden = 32;
  int num_classes = 4;
  double init_scale = 0.1;
  std::uint64_t seed = 1;

  Index regions() const { return Index(grid) * grid; }
  Index patch_features() const { return Index(pool) * pool; }
  void validate() const;
};

/// O, then B-/I- for header, question and answer. OTHER blocks are O.
inline constexpr int kNumBioLabels = 7;
std::string_view bio_label_name(int label);

/// Per text position; kIgnoreIndex at specials and padding. B- where the
/// token's local position is "begin".
std::vector<Index> bio_labels(const TokenizedDoc& td, const SyntheticDocument& doc);

/// Pooled patch features of `image` for the model's grid.
template <typename Scalar>
Tensor<Scalar> patch_tensor(const Image& image, const ModelConfig& cfg, bool requires_grad = false);

template <typename Scalar>
class BivlModel {
 public:
  explicit BivlModel(const ModelConfig& cfg);
  BivlModel(const BivlModel&) = delete;
  BivlModel& operator=(const BivlModel&) = delete;

  const ModelConfig& config() const { return cfg_; }
  /// Switches the cross-modal branches without touching the weights.
  void set_bvlha(bool on) { cfg_.encoder.bvlha = on; }
  void set_literal_eq_masking(bool on) { cfg_.encoder.literal_eq_masking = on; }

  ParameterSet<Scalar>& params() { return params_; }
  const ParameterSet<Scalar>& params() const { return params_; }
  const EmbeddingTables<Scalar>& tables() const { return tables_; }
  const EncoderWeights<Scalar>& encoder() const { return encoder_; }
  const PretrainHeads<Scalar>& heads() const { return heads_; }
  const Linear<Scalar>& seqlabel_head() const { return seqlabel_; }
  const Linear<Scalar>& classify_head() const { return classify_; }

  HybridOutputs<Scalar> encode(const TokenizedDoc& td, const Tensor<Scalar>& patches, bool retain_attention = false,
                               std::mt19937_64* rng = nullptr) const;

  /// [n, 7] BIO logits over the text rows of H_hybrid.
  Tensor<Scalar> seqlabel_logits(const HybridOutputs<Scalar>& out) const;
  /// [1, C] from the [CLS] row of H_hybrid.
  Tensor<Scalar> classify_logits(const HybridOutputs<Scalar>& out) const;

 private:
  ModelConfig cfg_;
  ParameterSet<Scalar> params_;
  EmbeddingTables<Scalar> tables_;
  EncoderWeights<Scalar> encoder_;
  PretrainHeads<Scalar> heads_;
  Linear<Scalar> seqlabel_;
  Linear<Scalar> classify_;
};

struct TaskFlags {
  bool bvlha = true;
  bool btia = true;
  bool rwtp = true;
  bool tipa = true;

  bool operator==(const TaskFlags&) const = default;
};

/// Corrupted inputs of one pre-training example and the losses of the enabled tasks.
template <typename Scalar>
PretrainLosses<Scalar> pretrain_losses(const BivlModel<Scalar>& model, const SyntheticDocument& doc,
                                       const TokenizedDoc& td, const PretrainPlan& plan, const TaskFlags& tasks,
                                       std::mt19937_64* rng = nullptr);

}  // namespace bivl
