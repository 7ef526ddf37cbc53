#pragma once

// Pre-training objectives: masked visual-language modeling (MVLM), text
// image position awareness (TIPA), region-wise text prediction (RWTP) and
// bidirectional text-image alignment (BTIA), with their masking plans and
// label generators.

#include <filesystem>
#include <optional>
#include <random>
#include <string_view>
#include <vector>

#include "bivl/doc_synth.hpp"
#include "bivl/embedding.hpp"
#include "bivl/parameter.hpp"

namespace bivl {

// ---------------------------------------------------------------------------
// geometry

/// Box in normalized page coordinates.
struct BoxF {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  double area() const { return (x1 - x0) * (y1 - y0); }
  bool operator==(const BoxF&) const = default;
};

BoxF normalize(const Box& box);

/// g x g equal cells tiling the unit square, row-major.
std::vector<BoxF> region_boxes(int grid);

enum class CoverageMode { Containment, StrictIou };

std::string_view coverage_mode_name(CoverageMode mode);
CoverageMode coverage_mode_from_name(std::string_view name);

/// Containment: |region ∩ token| / |token|. StrictIou: |∩| / |∪|.
double coverage_measure(const Box& region, const Box& token, CoverageMode mode);
inline constexpr double kCoverageThreshold = 0.5;
inline bool covers(const Box& region, const Box& token, CoverageMode mode) {
  return coverage_measure(region, token, mode) > kCoverageThreshold;
}

double iou(const BoxF& a, const BoxF& b);
/// 1 - IoU + squared center distance over squared enclosing-box diagonal.
/// Throws ValidationError on a zero-area ground-truth box.
double diou(const BoxF& pred, const BoxF& gt);

// ---------------------------------------------------------------------------
// masking plans and labels

/// round(0.15 * count) with halves rounded up, at least 1 when count > 0.
int masked_count(int count);

enum class Replacement : std::uint8_t { Mask = 0, Random = 1, Unchanged = 2 };

struct MvlmPlan {
  std::vector<Index> positions;  // ascending
  std::vector<Replacement> replacement;
  std::vector<Index> targets;  // original ids
  std::vector<Index> corrupted_ids;

  bool is_masked(Index position) const;
};

/// 15% of content tokens; each replaced by [MASK] (80%), a random content id (10%) or kept (10%).
MvlmPlan plan_mvlm(const TokenizedDoc& td, Index vocab_size, std::mt19937_64& rng);

struct TipaPlan {
  std::vector<int> masked_blocks;  // ascending
  std::vector<BoxF> gt_boxes;
};

/// 15% of the visible blocks have their positions masked.
TipaPlan plan_tipa(const TokenizedDoc& td, const SyntheticDocument& doc, std::mt19937_64& rng);
/// Marks the tokens of the plan's blocks for index-0 spatial embeddings.
TokenizedDoc apply_tipa(TokenizedDoc td, const TipaPlan& plan);

struct RwtpLabels {
  Index regions = 0;
  Index tokens = 0;
  std::vector<std::uint8_t> y;      // [regions x tokens], row-major
  std::vector<std::uint8_t> valid;  // 0 at specials and padding

  std::uint8_t at(Index region, Index token) const { return y[static_cast<std::size_t>(region * tokens + token)]; }
};

RwtpLabels rwtp_labels(const TokenizedDoc& td, CoverageMode mode);

struct BtiaPlan {
  std::vector<int> covered_blocks;
  std::vector<std::uint8_t> tia_labels;  // per text position, 1 = covered
  std::vector<std::uint8_t> ita_labels;  // per region, 1 = has masked text
  std::vector<std::uint8_t> loss_mask;   // per packed position (regions, then text)
  Image covered_image;
};

/// Labels for a given covered set (no randomness).
BtiaPlan btia_labels(const TokenizedDoc& td, const MvlmPlan& mvlm, std::vector<int> covered_blocks,
                     CoverageMode mode);
/// 15% of visible blocks covered in the image, then labels.
BtiaPlan plan_btia(const SyntheticDocument& doc, const TokenizedDoc& td, const MvlmPlan& mvlm, CoverageMode mode,
                   std::mt19937_64& rng);

struct PretrainPlan {
  MvlmPlan mvlm;
  TipaPlan tipa;
  BtiaPlan btia;
  RwtpLabels rwtp;
};

/// MVLM, then TIPA, then BTIA, all from `rng`.
PretrainPlan make_pretrain_plan(const SyntheticDocument& doc, const TokenizedDoc& td, Index vocab_size,
                                CoverageMode mode, std::mt19937_64& rng);

inline constexpr std::string_view kLabelDumpHeader = "bivl-labels-v1";

struct LabelDumpEntry {
  std::string doc_id;
  PretrainPlan plan;
};
void save_label_dump(const std::vector<LabelDumpEntry>& entries, const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// heads and losses

template <typename Scalar>
struct PretrainHeads {
  // MVLM: transform, then decoder tied to the word embedding table.
  Linear<Scalar> mvlm_transform;
  LayerNormParams<Scalar> mvlm_ln;
  Tensor<Scalar> mvlm_bias;
  // TIPA: two-layer MLP to (cx, cy, w, h).
  Linear<Scalar> tipa_hidden, tipa_out;
  // RWTP: MLP over concat(h_visual, h_text); the first layer is split into
  // a visual and a text block so the m x n pair tensor is never materialized twice.
  Linear<Scalar> rwtp_visual, rwtp_text, rwtp_out;
  // BTIA: one classifier shared by every packed position.
  Linear<Scalar> btia;

  static PretrainHeads create(ParameterSet<Scalar>& params, Index d, Index vocab, Index tipa_hidden,
                              Index rwtp_hidden);
};

template <typename Scalar>
Tensor<Scalar> mvlm_logits(const Tensor<Scalar>& hybrid, Index num_visual, std::span<const Index> text_positions,
                           const PretrainHeads<Scalar>& heads, const Tensor<Scalar>& word_table);

/// Mean cross-entropy over the plan's masked positions.
template <typename Scalar>
Tensor<Scalar> mvlm_loss(const Tensor<Scalar>& hybrid, Index num_visual, const MvlmPlan& plan,
                         const PretrainHeads<Scalar>& heads, const Tensor<Scalar>& word_table);

/// One corner-form box per masked block, [k, 4], from the mean of its text rows.
template <typename Scalar>
Tensor<Scalar> tipa_predict(const Tensor<Scalar>& hybrid, Index num_visual, const TokenizedDoc& td,
                            std::span<const int> blocks, const PretrainHeads<Scalar>& heads);

/// Mean DIoU loss of [k, 4] corner boxes against ground truth.
template <typename Scalar>
Tensor<Scalar> diou_loss(const Tensor<Scalar>& pred, const std::vector<BoxF>& gt);

/// Probability that text token j lies in region i, [m, n].
template <typename Scalar>
Tensor<Scalar> rwtp_probabilities(const Tensor<Scalar>& hybrid, Index num_visual, const PretrainHeads<Scalar>& heads);

template <typename Scalar>
Tensor<Scalar> rwtp_loss(const Tensor<Scalar>& probabilities, const RwtpLabels& labels);

/// Shared classifier over all m+n packed rows, [m+n].
template <typename Scalar>
Tensor<Scalar> btia_probabilities(const Tensor<Scalar>& hybrid, const PretrainHeads<Scalar>& heads);

/// Regions scored against ITA labels, text rows against TIA labels.
template <typename Scalar>
Tensor<Scalar> btia_loss(const Tensor<Scalar>& probabilities, const BtiaPlan& plan);

struct TaskWeights {
  double mvlm = 1.0;
  double tipa = 1.0;
  double rwtp = 1.0;
  double btia = 1.0;
};

template <typename Scalar>
struct PretrainLosses {
  std::optional<Tensor<Scalar>> mvlm, tipa, rwtp, btia;
};

/// Weighted sum of the losses that are present.
template <typename Scalar>
Tensor<Scalar> total_pretrain_loss(const PretrainLosses<Scalar>& losses, const TaskWeights& weights);

}  // namespace bivl
