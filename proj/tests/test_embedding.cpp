#include <random>

#include "doctest.h"

#include "bivl/model.hpp"
#include "support.hpp"

using namespace bivl;

namespace {

SyntheticDocument doc_with_lengths(const std::vector<int>& lengths) {
  SyntheticDocument doc;
  int y = 10;
  int id = kFirstContentId;
  for (int k : lengths) {
    TextBlock b;
    for (int i = 0; i < k; ++i) b.tokens.push_back(id++);
    b.box = {50, y, 400, y + 60};
    y += 80;
    doc.blocks.push_back(b);
  }
  doc.image = render_image(doc, 64, 16, 16);
  return doc;
}

ModelConfig small_model(double init_scale) {
  ModelConfig m;
  m.max_len = 24;
  m.grid = 2;
  m.pool = 2;
  m.encoder.d = 8;
  m.encoder.heads = 2;
  m.encoder.d_ff = 8;
  m.init_scale = init_scale;
  return m;
}

}  // namespace

TEST_SUITE("embedding") {

TEST_CASE("local positions follow begin, middle, end") {
  const auto td = tokenize(doc_with_lengths({1, 2, 3}), 16, 2);
  const std::vector<int> content(td.lp_ids.begin() + 1, td.lp_ids.begin() + 7);
  CHECK(content == std::vector<int>{1, 1, 3, 1, 2, 3});
  CHECK(td.lp_ids[0] == kLpNone);
  CHECK(td.lp_ids[7] == kLpNone);
  CHECK(td.token_ids[0] == VocabSpec::kCls);
  CHECK(td.token_ids[7] == VocabSpec::kSep);
  CHECK(td.token_boxes[0] == kFullPageBox);
  CHECK(td.token_boxes[7] == kFullPageBox);
  CHECK(td.block_index[3] == 1);
  CHECK(td.token_boxes[3] == Box{50, 90, 400, 150});
  for (int s : td.segment_ids) CHECK(s == 0);
}

TEST_CASE("empty document") {
  const auto td = tokenize(SyntheticDocument{}, 8, 2);
  CHECK(td.length() == 8);
  CHECK(td.token_ids[0] == VocabSpec::kCls);
  CHECK(td.token_ids[1] == VocabSpec::kSep);
  CHECK(std::count(td.pad_mask.begin(), td.pad_mask.end(), 1) == 2);
  CHECK(td.visible_blocks().empty());
  CHECK_THROWS_AS(tokenize(SyntheticDocument{}, 2, 2), ValidationError);
}

TEST_CASE("head and tail truncation") {
  const auto doc = doc_with_lengths({4, 5, 6, 3});  // 18 content tokens
  std::vector<int> all;
  for (const auto& b : doc.blocks) all.insert(all.end(), b.tokens.begin(), b.tokens.end());
  for (Index n : {9, 10, 12}) {
    CAPTURE(n);
    const auto td = tokenize(doc, n, 2);
    REQUIRE(td.length() == n);
    const auto budget = static_cast<std::size_t>(n - 2);
    std::vector<int> expect(all.begin(), all.begin() + static_cast<std::ptrdiff_t>((budget + 1) / 2));
    expect.insert(expect.end(), all.end() - static_cast<std::ptrdiff_t>(budget / 2), all.end());
    const std::vector<int> got(td.token_ids.begin() + 1, td.token_ids.end() - 1);
    CHECK(got == expect);
    CHECK(td.token_ids.back() == VocabSpec::kSep);
    CHECK(std::count(td.pad_mask.begin(), td.pad_mask.end(), 1) == n);
  }
}

TEST_CASE("region boxes tile the page") {
  CHECK(grid_page_boxes(1) == std::vector<Box>{kFullPageBox});
  const auto q = grid_page_boxes(2);
  CHECK(q == std::vector<Box>{{0, 0, 500, 500}, {500, 0, 1000, 500}, {0, 500, 500, 1000}, {500, 500, 1000, 1000}});
  std::int64_t area = 0;
  for (const auto& b : grid_page_boxes(4)) area += b.area();
  CHECK(area == std::int64_t(kPageExtent) * kPageExtent);
}

TEST_CASE("patch pooling equals quadrant means") {
  Image img(4, 4);
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<float> u;
  for (Index r = 0; r < 4; ++r) {
    for (Index c = 0; c < 4; ++c) img(r, c) = u(rng);
  }
  const auto pooled = pool_patches(img, 2, 1);
  REQUIRE(pooled.rows() == 4);
  REQUIRE(pooled.cols() == 1);
  for (int q = 0; q < 4; ++q) {
    const Index r0 = (q / 2) * 2, c0 = (q % 2) * 2;
    const double mean = (double(img(r0, c0)) + img(r0, c0 + 1) + img(r0 + 1, c0) + img(r0 + 1, c0 + 1)) / 4;
    CHECK(pooled(q, 0) == doctest::Approx(mean).epsilon(1e-12));
  }
  // Non-divisible images are padded with background.
  const auto padded = pool_patches(Image::Ones(3, 3), 2, 1);
  CHECK(padded(0, 0) == 1.0);
  CHECK(padded(3, 0) == doctest::Approx(0.25));
}

TEST_CASE("zero tables give zero embeddings") {
  const BivlModel<double> model(small_model(0.0));
  const auto doc = doc_with_lengths({2, 3});
  const auto td = tokenize(doc, model.config().max_len, model.config().grid);
  CHECK(embed_text(td, model.tables()).data().isZero());
  const auto patches = Tensor<double>::zeros({4, 4});
  CHECK(embed_visual(patches, td.visual_region_boxes, model.tables()).data().isZero());
}

TEST_CASE("embeddings equal a sum of lookups") {
  // With no encoder layers the forward oracle hands back the packed embeddings.
  ModelConfig cfg = small_model(0.5);
  cfg.encoder.layers = 0;
  const BivlModel<double> model(cfg);
  const auto doc = doc_with_lengths({2, 1, 4});
  auto td = tokenize(doc, cfg.max_len, cfg.grid);
  td.box_masked[4] = 1;
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u;
  oracle::Mat patches = oracle::zeros(4, 4);
  RowMatrix<double> pm(4, 4);
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 4; ++j) pm(i, j) = patches[i][j] = u(rng);
  }
  const auto ht = embed_text(td, model.tables());
  const auto hv = embed_visual(Tensor<double>::from_matrix(pm), td.visual_region_boxes, model.tables());
  CHECK(ht.shape() == Shape{td.length(), 8});
  CHECK(hv.shape() == Shape{4, 8});

  const auto o = oracle::model_forward(model, td, patches);
  const oracle::Mat v(o.encoded.begin(), o.encoded.begin() + 4), t(o.encoded.begin() + 4, o.encoded.end());
  CHECK(oracle::max_abs_diff(v, hv) <= 1e-12);
  CHECK(oracle::max_abs_diff(t, ht) <= 1e-12);
}

TEST_CASE("a word row only moves the positions holding that id") {
  BivlModel<double> model(small_model(0.5));
  const auto doc = doc_with_lengths({3, 3});
  auto td = tokenize(doc, model.config().max_len, model.config().grid);
  td.token_ids[2] = td.token_ids[5];  // the id now occurs twice
  const Index t = td.token_ids[5];
  const auto before = embed_text(td, model.tables()).matrix().eval();
  Tensor<double> word = model.tables().word;
  word.data_mut()[t * 8 + 3] += 1.0;
  const auto after = embed_text(td, model.tables()).matrix().eval();
  for (Index i = 0; i < td.length(); ++i) {
    const bool changed = (after.row(i) - before.row(i)).cwiseAbs().maxCoeff() > 0;
    CHECK(changed == (td.token_ids[i] == t));
  }
}

TEST_CASE("packing") {
  const auto v = Tensor<double>::filled({2, 4}, 1.0);
  const auto t = Tensor<double>::filled({3, 4}, 2.0);
  const std::vector<std::uint8_t> pad{1, 1, 0};
  const auto p = pack(v, t, pad);
  CHECK(p.length() == 5);
  CHECK(p.visual_mask == std::vector<double>{1, 1, 0, 0, 0});
  CHECK(p.text_mask == std::vector<double>{0, 0, 1, 1, 0});
  for (Index i = 0; i < 5; ++i) CHECK(p.visual_mask[i] + p.text_mask[i] + (p.valid[i] ? 0 : 1) == 1);
  const auto parts = split(p.hidden, 0, {2, 3});
  CHECK((parts[0].data().array() == v.data().array()).all());
  CHECK((parts[1].data().array() == t.data().array()).all());
  CHECK_THROWS_AS(pack(v, Tensor<double>::zeros({3, 5}), pad), DimensionError);
}

}  // TEST_SUITE
