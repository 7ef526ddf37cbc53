#pragma once

// Text and visual input embeddings and their packing into one sequence
// (visual tokens first, then text tokens).

#include <cstdint>
#include <vector>

#include "bivl/doc_synth.hpp"
#include "bivl/parameter.hpp"
#include "bivl/tensor.hpp"

namespace bivl {

struct VocabSpec {
  static constexpr Index kPad = 0;
  static constexpr Index kCls = 1;
  static constexpr Index kSep = 2;
  static constexpr Index kMask = 3;
  static constexpr Index kUnk = 4;
  static constexpr Index kNumSpecial = 5;

  Index size = 64;

  void validate() const {
    if (size < 8) throw ValidationError("vocabulary needs at least 8 ids");
  }
  static bool is_special(Index id) { return id < kNumSpecial; }
};

/// Local position of a token inside its block: 1 begin, 2 middle, 3 end; 0 for specials and padding.
enum LocalPosition : int { kLpNone = 0, kLpBegin = 1, kLpMiddle = 2, kLpEnd = 3 };

inline constexpr Box kFullPageBox{0, 0, kPageExtent, kPageExtent};

struct TokenizedDoc {
  std::vector<Index> token_ids;
  std::vector<Box> token_boxes;
  std::vector<int> lp_ids;
  std::vector<int> segment_ids;
  /// 1 for real tokens ([CLS], content, [SEP]), 0 for padding.
  std::vector<std::uint8_t> pad_mask;
  /// Source block of each token, -1 for specials and padding.
  std::vector<int> block_index;
  /// Tokens whose spatial embeddings are replaced by the index-0 mask embedding.
  std::vector<std::uint8_t> box_masked;
  std::vector<Box> visual_region_boxes;

  Index length() const { return static_cast<Index>(token_ids.size()); }
  Index num_regions() const { return static_cast<Index>(visual_region_boxes.size()); }
  /// Positions holding block tokens, in order.
  std::vector<Index> content_positions() const;
  /// Ids of blocks with at least one token in the sequence, ascending.
  std::vector<int> visible_blocks() const;
};

/// Page boxes of a g x g grid, row-major.
std::vector<Box> grid_page_boxes(int grid);

/// [CLS] + block tokens in reading order + [SEP] + padding to `max_len`.
/// Overlong documents keep the first ceil((max_len-2)/2) and the last
/// floor((max_len-2)/2) content tokens.
TokenizedDoc tokenize(const SyntheticDocument& doc, Index max_len, int grid = 4);

/// Average-pools each of the g x g patches down to pool x pool cells, giving
/// [g*g, pool*pool]. The image is padded with background to a multiple of g*pool.
RowMatrix<double> pool_patches(const Image& image, int grid, int pool);

template <typename Scalar>
struct EmbeddingTables {
  Tensor<Scalar> word;        // [V, d]
  Tensor<Scalar> seq_pos;     // [n_max, d]
  Tensor<Scalar> x0, y0, x1, y1, width, height;  // [1001, d]
  Tensor<Scalar> local_pos;   // [4, d]
  Tensor<Scalar> segment;     // [3, d]
  Tensor<Scalar> visual_pos;  // [m, d]
  Linear<Scalar> patch_projection;  // [pool*pool, d]

  static EmbeddingTables create(ParameterSet<Scalar>& params, Index vocab, Index max_len, Index regions,
                                Index patch_features, Index d);
  Index dim() const { return word.dim(1); }
};

/// H_t: word + sequence position + six spatial lookups + local position + segment 0.
template <typename Scalar>
Tensor<Scalar> embed_text(const TokenizedDoc& td, const EmbeddingTables<Scalar>& tables);

/// H_v: projected patch features + visual position + segment 1 + spatial lookups of each region's box.
template <typename Scalar>
Tensor<Scalar> embed_visual(const Tensor<Scalar>& patch_features, const std::vector<Box>& region_boxes,
                            const EmbeddingTables<Scalar>& tables);

template <typename Scalar>
struct PackedSequence {
  Tensor<Scalar> hidden;             // [m+n, d]
  std::vector<Scalar> visual_mask;   // M_v
  std::vector<Scalar> text_mask;     // M_t, 1 only on non-pad text slots
  std::vector<std::uint8_t> valid;   // non-pad slots
  Index num_visual = 0;
  Index num_text = 0;

  Index length() const { return num_visual + num_text; }
};

template <typename Scalar>
PackedSequence<Scalar> pack(const Tensor<Scalar>& visual, const Tensor<Scalar>& text,
                            std::span<const std::uint8_t> text_pad_mask);

}  // namespace bivl
