#pragma once

// Synthetic visually-rich documents: text blocks on a 0..1000 page grid, a
// rendered intensity image, and downstream labels (entity roles, document
// class).

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "bivl/tensor.hpp"

namespace bivl {

inline constexpr int kPageExtent = 1000;

/// Axis-aligned box on the integer page grid, half-open in spirit: area is (x1-x0)*(y1-y0).
struct Box {
  int x0 = 0;
  int y0 = 0;
  int x1 = 0;
  int y1 = 0;

  int width() const { return x1 - x0; }
  int height() const { return y1 - y0; }
  std::int64_t area() const { return std::int64_t(width()) * height(); }
  bool valid() const { return 0 <= x0 && x0 < x1 && x1 <= kPageExtent && 0 <= y0 && y0 < y1 && y1 <= kPageExtent; }
  bool operator==(const Box&) const = default;
};

std::int64_t intersection_area(const Box& a, const Box& b);

enum class EntityRole : std::uint8_t { Header = 0, Question = 1, Answer = 2, Other = 3 };
inline constexpr int kNumRoles = 4;

std::string_view role_name(EntityRole role);
EntityRole role_from_name(std::string_view name);

struct TextBlock {
  std::vector<int> tokens;
  Box box;
  EntityRole role = EntityRole::Other;

  bool operator==(const TextBlock&) const = default;
};

using Image = RowMatrix<float>;

struct SyntheticDocument {
  std::string doc_id;
  std::vector<TextBlock> blocks;
  Image image;
  int doc_class = 0;

  bool operator==(const SyntheticDocument& other) const {
    return doc_id == other.doc_id && blocks == other.blocks && doc_class == other.doc_class &&
           image.rows() == other.image.rows() && image.cols() == other.image.cols() && image == other.image;
  }
};

/// Ids 0..4 are specials; 5 and 6 mark header and field (question/answer) blocks.
inline constexpr int kHeaderMarker = 5;
inline constexpr int kFieldMarker = 6;
inline constexpr int kFirstContentId = 7;

struct CorpusConfig {
  int num_docs = 2000;
  int vocab_size = 64;
  int min_blocks = 2;
  int max_blocks = 9;
  int min_tokens = 1;
  int max_tokens = 6;
  int image_height = 64;
  int image_width = 64;
  int num_classes = 4;
  std::uint64_t seed = 1;
  /// Header, question, answer, other.
  std::array<double, kNumRoles> role_priors{0.1, 0.3, 0.3, 0.3};

  void validate() const;
};

/// Throws ValidationError on any broken invariant (box bounds, empty
/// blocks, overlapping boxes, image values outside [0,1]).
void validate_document(const SyntheticDocument& doc);

/// Document `index` of the corpus described by `cfg`. Depends only on (seed, index).
SyntheticDocument generate_document(const CorpusConfig& cfg, int index);
std::vector<SyntheticDocument> generate_corpus(const CorpusConfig& cfg);

/// Half-open pixel ranges [row_begin, row_end) x [col_begin, col_end) whose
/// centers fall inside `box` when the page is mapped onto a height x width grid.
struct PixelSpan {
  int row_begin, row_end, col_begin, col_end;
};
PixelSpan pixel_span(const Box& box, int height, int width);

/// Block interiors get (1 + mean token id) / (V + 1); background is 0.
Image render_image(const SyntheticDocument& doc, int vocab_size, int height, int width);
float block_intensity(const TextBlock& block, int vocab_size);

/// Copy of `image` with the pixels of every listed block set to background.
Image cover_regions(const Image& image, const std::vector<TextBlock>& blocks_to_cover);

inline constexpr std::string_view kCorpusHeader = "bivl-corpus-v1";

void save_corpus(const std::vector<SyntheticDocument>& corpus, const std::filesystem::path& path);
std::vector<SyntheticDocument> load_corpus(const std::filesystem::path& path);

std::string encode_base64(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> decode_base64(std::string_view text);

}  // namespace bivl
