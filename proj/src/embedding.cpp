#include "bivl/embedding.hpp"

#include <numeric>

namespace bivl {

std::vector<Index> TokenizedDoc::content_positions() const {
  std::vector<Index> out;
  for (Index i = 0; i < length(); ++i) {
    if (block_index[i] >= 0) out.push_back(i);
  }
  return out;
}

std::vector<int> TokenizedDoc::visible_blocks() const {
  std::vector<int> out;
  for (int b : block_index) {
    if (b >= 0 && (out.empty() || out.back() != b)) out.push_back(b);
  }
  return out;
}

std::vector<Box> grid_page_boxes(int grid) {
  if (grid <= 0) throw ValidationError("grid must be positive");
  std::vector<Box> boxes;
  boxes.reserve(static_cast<std::size_t>(grid) * grid);
  for (int r = 0; r < grid; ++r) {
    for (int c = 0; c < grid; ++c) {
      boxes.push_back({c * kPageExtent / grid, r * kPageExtent / grid, (c + 1) * kPageExtent / grid,
                       (r + 1) * kPageExtent / grid});
    }
  }
  return boxes;
}

TokenizedDoc tokenize(const SyntheticDocument& doc, Index max_len, int grid) {
  if (max_len < 3) throw ValidationError("sequence length must be at least 3");

  struct Content {
    Index id;
    Box box;
    int lp;
    int block;
  };
  std::vector<Content> content;
  for (std::size_t b = 0; b < doc.blocks.size(); ++b) {
    const auto& block = doc.blocks[b];
    const std::size_t k = block.tokens.size();
    for (std::size_t i = 0; i < k; ++i) {
      int lp = kLpMiddle;
      if (i == 0) {
        lp = kLpBegin;
      } else if (i + 1 == k) {
        lp = kLpEnd;
      }
      content.push_back({block.tokens[i], block.box, lp, static_cast<int>(b)});
    }
  }

  const std::size_t budget = static_cast<std::size_t>(max_len - 2);
  if (content.size() > budget) {
    const std::size_t head = (budget + 1) / 2;
    const std::size_t tail = budget / 2;
    std::vector<Content> kept(content.begin(), content.begin() + static_cast<std::ptrdiff_t>(head));
    kept.insert(kept.end(), content.end() - static_cast<std::ptrdiff_t>(tail), content.end());
    content = std::move(kept);
  }

  TokenizedDoc td;
  const auto n = static_cast<std::size_t>(max_len);
  td.token_ids.assign(n, VocabSpec::kPad);
  td.token_boxes.assign(n, kFullPageBox);
  td.lp_ids.assign(n, kLpNone);
  td.segment_ids.assign(n, 0);
  td.pad_mask.assign(n, 0);
  td.block_index.assign(n, -1);
  td.box_masked.assign(n, 0);

  td.token_ids[0] = VocabSpec::kCls;
  td.pad_mask[0] = 1;
  for (std::size_t i = 0; i < content.size(); ++i) {
    td.token_ids[i + 1] = content[i].id;
    td.token_boxes[i + 1] = content[i].box;
    td.lp_ids[i + 1] = content[i].lp;
    td.block_index[i + 1] = content[i].block;
    td.pad_mask[i + 1] = 1;
  }
  td.token_ids[content.size() + 1] = VocabSpec::kSep;
  td.pad_mask[content.size() + 1] = 1;
  td.visual_region_boxes = grid_page_boxes(grid);
  return td;
}

RowMatrix<double> pool_patches(const Image& image, int grid, int pool) {
  if (grid <= 0 || pool <= 0) throw ValidationError("grid and pool must be positive");
  const Index cell = grid * pool;
  const Index h = (image.rows() + cell - 1) / cell * cell;
  const Index w = (image.cols() + cell - 1) / cell * cell;
  RowMatrix<double> padded = RowMatrix<double>::Zero(std::max<Index>(h, cell), std::max<Index>(w, cell));
  padded.topLeftCorner(image.rows(), image.cols()) = image.cast<double>();

  const Index ch = padded.rows() / cell;  // pixels per pooled cell
  const Index cw = padded.cols() / cell;
  RowMatrix<double> out(grid * grid, pool * pool);
  for (Index gr = 0; gr < grid; ++gr) {
    for (Index gc = 0; gc < grid; ++gc) {
      for (Index pr = 0; pr < pool; ++pr) {
        for (Index pc = 0; pc < pool; ++pc) {
          out(gr * grid + gc, pr * pool + pc) =
              padded.block((gr * pool + pr) * ch, (gc * pool + pc) * cw, ch, cw).mean();
        }
      }
    }
  }
  return out;
}

template <typename Scalar>
EmbeddingTables<Scalar> EmbeddingTables<Scalar>::create(ParameterSet<Scalar>& params, Index vocab, Index max_len,
                                                        Index regions, Index patch_features, Index d) {
  EmbeddingTables t;
  const Index coords = kPageExtent + 1;
  t.word = params.uniform("embeddings.word", {vocab, d});
  // Position and coordinate tables start from sinusoids so nearby indices begin with similar rows.
  const double a = params.init_scale();
  t.seq_pos = params.sinusoidal("embeddings.seq_pos", max_len, d, a);
  t.x0 = params.sinusoidal("embeddings.spatial.x0", coords, d, a);
  t.y0 = params.sinusoidal("embeddings.spatial.y0", coords, d, a);
  t.x1 = params.sinusoidal("embeddings.spatial.x1", coords, d, a);
  t.y1 = params.sinusoidal("embeddings.spatial.y1", coords, d, a);
  t.width = params.sinusoidal("embeddings.spatial.width", coords, d, a);
  t.height = params.sinusoidal("embeddings.spatial.height", coords, d, a);
  t.local_pos = params.uniform("embeddings.local_pos", {4, d});
  t.segment = params.uniform("embeddings.segment", {3, d});
  t.visual_pos = params.uniform("embeddings.visual_pos", {regions, d});
  t.patch_projection = Linear<Scalar>::create(params, "embeddings.patch_projection", patch_features, d);
  return t;
}

namespace {

struct SpatialIds {
  std::vector<Index> x0, y0, x1, y1, w, h;

  void push(const Box& b, bool masked) {
    if (masked) {
      x0.push_back(0), y0.push_back(0), x1.push_back(0), y1.push_back(0), w.push_back(0), h.push_back(0);
      return;
    }
    x0.push_back(b.x0), y0.push_back(b.y0), x1.push_back(b.x1), y1.push_back(b.y1);
    w.push_back(b.x1 - b.x0), h.push_back(b.y1 - b.y0);
  }
};

template <typename Scalar>
Tensor<Scalar> spatial_sum(const SpatialIds& ids, const EmbeddingTables<Scalar>& t) {
  Tensor<Scalar> s = add(embedding_lookup<Scalar>(t.x0, ids.x0), embedding_lookup<Scalar>(t.y0, ids.y0));
  s = add(s, embedding_lookup<Scalar>(t.x1, ids.x1));
  s = add(s, embedding_lookup<Scalar>(t.y1, ids.y1));
  s = add(s, embedding_lookup<Scalar>(t.width, ids.w));
  return add(s, embedding_lookup<Scalar>(t.height, ids.h));
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> embed_text(const TokenizedDoc& td, const EmbeddingTables<Scalar>& tables) {
  const Index n = td.length();
  if (n > tables.seq_pos.dim(0)) throw DimensionError("sequence longer than the position table");
  std::vector<Index> positions(static_cast<std::size_t>(n));
  std::iota(positions.begin(), positions.end(), Index{0});
  std::vector<Index> lp(td.lp_ids.begin(), td.lp_ids.end());
  std::vector<Index> seg(td.segment_ids.begin(), td.segment_ids.end());
  SpatialIds spatial;
  for (Index i = 0; i < n; ++i) spatial.push(td.token_boxes[i], td.box_masked[i] != 0);

  Tensor<Scalar> h = add(embedding_lookup<Scalar>(tables.word, td.token_ids),
                         embedding_lookup<Scalar>(tables.seq_pos, positions));
  h = add(h, spatial_sum(spatial, tables));
  h = add(h, embedding_lookup<Scalar>(tables.local_pos, lp));
  return add(h, embedding_lookup<Scalar>(tables.segment, seg));
}

template <typename Scalar>
Tensor<Scalar> embed_visual(const Tensor<Scalar>& patch_features, const std::vector<Box>& region_boxes,
                            const EmbeddingTables<Scalar>& tables) {
  const Index m = static_cast<Index>(region_boxes.size());
  if (patch_features.rank() != 2 || patch_features.dim(0) != m) {
    throw DimensionError("patch features " + shape_string(patch_features.shape()) + " do not match " +
                         std::to_string(m) + " regions");
  }
  std::vector<Index> positions(static_cast<std::size_t>(m));
  std::iota(positions.begin(), positions.end(), Index{0});
  std::vector<Index> seg(static_cast<std::size_t>(m), 1);
  SpatialIds spatial;
  for (const Box& b : region_boxes) spatial.push(b, false);

  Tensor<Scalar> h = tables.patch_projection(patch_features);
  h = add(h, embedding_lookup<Scalar>(tables.visual_pos, positions));
  h = add(h, embedding_lookup<Scalar>(tables.segment, seg));
  return add(h, spatial_sum(spatial, tables));
}

template <typename Scalar>
PackedSequence<Scalar> pack(const Tensor<Scalar>& visual, const Tensor<Scalar>& text,
                            std::span<const std::uint8_t> text_pad_mask) {
  if (visual.rank() != 2 || text.rank() != 2 || visual.dim(1) != text.dim(1)) {
    throw DimensionError("pack needs [m,d] and [n,d] with the same d");
  }
  if (static_cast<Index>(text_pad_mask.size()) != text.dim(0)) throw DimensionError("pad mask length mismatch");
  PackedSequence<Scalar> p;
  p.num_visual = visual.dim(0);
  p.num_text = text.dim(0);
  p.hidden = concat<Scalar>({visual, text}, 0);
  const auto total = static_cast<std::size_t>(p.length());
  p.visual_mask.assign(total, Scalar(0));
  p.text_mask.assign(total, Scalar(0));
  p.valid.assign(total, 0);
  for (Index i = 0; i < p.num_visual; ++i) {
    p.visual_mask[i] = Scalar(1);
    p.valid[i] = 1;
  }
  for (Index j = 0; j < p.num_text; ++j) {
    if (text_pad_mask[j]) {
      p.text_mask[p.num_visual + j] = Scalar(1);
      p.valid[p.num_visual + j] = 1;
    }
  }
  return p;
}

#define BIVL_INSTANTIATE(S)                                                                                  \
  template struct EmbeddingTables<S>;                                                                        \
  template Tensor<S> embed_text(const TokenizedDoc&, const EmbeddingTables<S>&);                           \
  template Tensor<S> embed_visual(const Tensor<S>&, const std::vector<Box>&, const EmbeddingTables<S>&);  \
  template PackedSequence<S> pack(const Tensor<S>&, const Tensor<S>&, std::span<const std::uint8_t>);

BIVL_INSTANTIATE(float)
BIVL_INSTANTIATE(double)

#undef BIVL_INSTANTIATE

}  // namespace bivl
