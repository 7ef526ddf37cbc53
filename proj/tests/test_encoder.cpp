#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "doctest.h"

#include "bivl/diagnostics.hpp"
#include "bivl/train.hpp"
#include "support.hpp"

using namespace bivl;

namespace {

using T = Tensor<double>;

T random_tensor(Shape shape, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> n(0.0, sd);
  Vec<double> v(shape_numel(shape));
  for (Index i = 0; i < v.size(); ++i) v[i] = n(rng);
  return T(std::move(shape), std::move(v));
}

EncoderConfig tiny_encoder(int layers, int heads, Index d) {
  EncoderConfig c;
  c.layers = layers;
  c.heads = heads;
  c.d = d;
  c.d_ff = 2 * d;
  return c;
}

struct Fixture {
  ParameterSet<double> params{17, 0.5};
  EncoderConfig cfg;
  EncoderWeights<double> weights;
  PackedSequence<double> packed;

  Fixture(EncoderConfig c, Index m, std::vector<std::uint8_t> text_pad, std::uint64_t seed = 1) : cfg(c) {
    weights = EncoderWeights<double>::create(params, cfg);
    std::mt19937_64 rng(seed);
    const auto n = static_cast<Index>(text_pad.size());
    packed = pack(random_tensor({m, cfg.d}, rng), random_tensor({n, cfg.d}, rng), text_pad);
  }
  ModalityMasks<double> masks() const { return ModalityMasks<double>::from(packed); }
};

oracle::Mat hybrid_oracle(const Fixture& f, const T& encoded, const EncoderConfig& cfg) {
  return oracle::hybrid_forward(oracle::to_mat(encoded), f.packed.visual_mask, f.packed.text_mask, f.packed.valid,
                                f.weights.hybrid, cfg)
      .hybrid;
}

double row_max_abs(const RowMatrix<double>& a, Index r) { return a.row(r).cwiseAbs().maxCoeff(); }

}  // namespace

TEST_SUITE("encoder") {

TEST_CASE("no layers passes the input through") {
  Fixture f(tiny_encoder(0, 2, 4), 2, {1, 1, 0});
  const T out = encode_vlt(f.packed.hidden, f.packed.valid, f.weights, f.cfg);
  CHECK((out.data().array() == f.packed.hidden.data().array()).all());
  const std::vector<std::uint8_t> none(5, 0);
  CHECK_THROWS_AS(encode_vlt(f.packed.hidden, none, f.weights, f.cfg), DegenerateMaskError);
}

TEST_CASE("one layer, one head, d = 4 against a straight-line forward") {
  for (bool residual : {false, true}) {
    CAPTURE(residual);
    EncoderConfig cfg = tiny_encoder(1, 1, 4);
    cfg.hybrid_residual = residual;
    Fixture f(cfg, 2, {1, 1, 1, 0});
    const auto out = bivl_encode(f.packed, f.weights, cfg);

    oracle::Mat x = oracle::to_mat(f.packed.hidden);
    const auto& l = f.weights.layers[0];
    const auto h = oracle::layer_norm(x, l.ln_attn);
    x = oracle::add(x, oracle::linear(oracle::attention(h, h, l.attn, 1, f.packed.valid), l.attn_output));
    x = oracle::add(x, oracle::linear(oracle::gelu(oracle::linear(oracle::layer_norm(x, l.ln_ffn), l.ffn_in)), l.ffn_out));
    x = oracle::layer_norm(x, f.weights.final_ln);
    CHECK(oracle::max_abs_diff(x, out.encoded) <= 1e-12);

    const auto o = oracle::hybrid_forward(x, f.packed.visual_mask, f.packed.text_mask, f.packed.valid, f.weights.hybrid, cfg);
    CHECK(oracle::max_abs_diff(o.hybrid_t, out.hybrid_t) <= 1e-12);
    CHECK(oracle::max_abs_diff(o.hybrid_v, out.hybrid_v) <= 1e-12);
    CHECK(oracle::max_abs_diff(o.hybrid, out.hybrid) <= 1e-12);
  }
}

TEST_CASE("hybrid layer variants against the oracle") {
  for (int variant = 0; variant < 4; ++variant) {
    CAPTURE(variant);
    EncoderConfig cfg = tiny_encoder(2, 2, 8);
    cfg.bvlha = variant != 1;
    cfg.literal_eq_masking = variant == 2;
    cfg.hybrid_residual = variant == 3;
    Fixture f(cfg, 4, {1, 1, 1, 1, 1, 0, 0}, 3);
    const auto out = bivl_encode(f.packed, f.weights, cfg);
    CHECK(oracle::max_abs_diff(hybrid_oracle(f, out.encoded, cfg), out.hybrid) <= 1e-12);
  }
}

TEST_CASE("full model against the end-to-end oracle") {
  auto cfg = tiny_model_config();
  cfg.max_len = 20;
  const BivlModel<double> model(cfg);
  const auto doc = generate_corpus(tiny_corpus_config())[1];
  auto td = tokenize(doc, cfg.max_len, cfg.grid);
  td.box_masked[2] = 1;
  const auto pooled = pool_patches(doc.image, cfg.grid, cfg.pool);
  oracle::Mat patches = oracle::zeros(pooled.rows(), pooled.cols());
  for (Index i = 0; i < pooled.rows(); ++i) {
    for (Index j = 0; j < pooled.cols(); ++j) patches[i][j] = pooled(i, j);
  }
  const auto out = model.encode(td, patch_tensor<double>(doc.image, cfg));
  const auto o = oracle::model_forward(model, td, patches);
  CHECK(oracle::max_abs_diff(o.encoded, out.encoded) <= 1e-12);
  CHECK(oracle::max_abs_diff(o.hybrid, out.hybrid) <= 1e-12);
}

TEST_CASE("splitting by modality") {
  const T ones = T::filled({4, 3}, 1.0);
  ModalityMasks<double> m{{1, 1, 0, 0}, {0, 0, 1, 1}, {1, 1, 1, 1}};
  auto [v, t] = split_modalities(ones, m);
  for (Index r = 0; r < 4; ++r) {
    for (Index c = 0; c < 3; ++c) {
      CHECK(v.at(r, c) == (r < 2 ? 1.0 : 0.0));
      CHECK(t.at(r, c) == (r < 2 ? 0.0 : 1.0));
    }
  }
  Fixture f(tiny_encoder(1, 2, 4), 2, {1, 1, 0, 0});
  auto [hv, ht] = split_modalities(f.packed.hidden, f.masks());
  const T both = add(hv, ht);
  const auto sum = both.matrix();
  const auto x = f.packed.hidden.matrix();
  for (Index r = 0; r < 6; ++r) {
    if (f.packed.valid[r]) {
      CHECK(row_max_abs(sum - x, r) == 0.0);
    } else {
      CHECK(row_max_abs(hv.matrix(), r) == 0.0);
      CHECK(row_max_abs(ht.matrix(), r) == 0.0);
    }
  }
}

TEST_CASE("a null visual stream leaves only text self-attention") {
  EncoderConfig cfg = tiny_encoder(1, 2, 4);
  cfg.hybrid_residual = false;
  Fixture f(cfg, 3, {1, 1, 1, 0});
  const auto masks = f.masks();
  auto [hv, ht] = split_modalities(f.packed.hidden, masks);
  const T zero_v = T::zeros(hv.shape());
  const T with_cross = hybrid_text(ht, zero_v, masks, f.weights.hybrid, cfg);
  EncoderConfig self_only = cfg;
  self_only.bvlha = false;
  const T self = hybrid_text(ht, zero_v, masks, f.weights.hybrid, self_only);
  CHECK((with_cross.data() - self.data()).cwiseAbs().maxCoeff() == 0.0);

  const T zero_t = T::zeros(ht.shape());
  const T v_cross = hybrid_vision(hv, zero_t, masks, f.weights.hybrid, cfg);
  const T v_self = hybrid_vision(hv, zero_t, masks, f.weights.hybrid, self_only);
  CHECK((v_cross.data() - v_self.data()).cwiseAbs().maxCoeff() == 0.0);

  const auto ht_rows = hybrid_text(ht, hv, masks, f.weights.hybrid, cfg).matrix().eval();
  const auto hv_rows = hybrid_vision(hv, ht, masks, f.weights.hybrid, cfg).matrix().eval();
  for (Index r = 0; r < 7; ++r) {
    if (masks.text[r] == 0) CHECK(row_max_abs(ht_rows, r) == 0.0);
    if (masks.visual[r] == 0) CHECK(row_max_abs(hv_rows, r) == 0.0);
  }
}

TEST_CASE("combine sees one side per row") {
  Fixture f(tiny_encoder(1, 2, 4), 2, {1, 1, 0});
  const auto out = hybrid_layer(f.packed.hidden, f.masks(), f.weights.hybrid, f.cfg);
  CHECK(out.hybrid.shape() == f.packed.hidden.shape());
  const auto t = out.hybrid_t.matrix(), v = out.hybrid_v.matrix();
  const T pre = add(out.hybrid_t, out.hybrid_v);
  for (Index r = 0; r < 5; ++r) {
    const RowMatrix<double> expect = f.packed.visual_mask[r] != 0 ? RowMatrix<double>(v.row(r)) : RowMatrix<double>(t.row(r));
    CHECK((pre.matrix().row(r) - expect).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("attention maps: masking and row sums") {
  Fixture f(tiny_encoder(2, 2, 8), 4, {1, 1, 1, 0, 0});
  const auto out = bivl_encode(f.packed, f.weights, f.cfg, true);
  REQUIRE(out.attention.size() == 2 * 2 + 4 * 2);
  for (const auto& map : out.attention) {
    CAPTURE(map.kind);
    const auto p = map.probs.matrix();
    for (Index q = 0; q < p.rows(); ++q) {
      CHECK(std::abs(p.row(q).sum() - 1.0) <= 1e-5);
      for (Index k = 0; k < p.cols(); ++k) {
        if (!f.packed.valid[k]) CHECK(p(q, k) == 0.0);
        if (map.kind == "text_to_visual" || map.kind == "visual_to_visual") {
          if (f.packed.visual_mask[k] == 0) CHECK(p(q, k) == 0.0);
        }
        if (map.kind == "text_to_text" || map.kind == "visual_to_text") {
          if (f.packed.text_mask[k] == 0) CHECK(p(q, k) == 0.0);
        }
      }
    }
  }
}

TEST_CASE("attention dump with uniform scores") {
  // Zero query and key weights make every score equal.
  ParameterSet<double> zero(1, 0.0);
  EncoderConfig cfg = tiny_encoder(1, 2, 4);
  const auto weights = EncoderWeights<double>::create(zero, cfg);
  std::mt19937_64 rng(5);
  const std::vector<std::uint8_t> pad{1, 1, 1, 0};
  const auto packed = pack(random_tensor({2, 4}, rng), random_tensor({4, 4}, rng), pad);
  const auto out = bivl_encode(packed, weights, cfg, true);
  const auto dir = std::filesystem::path(BIVL_TEST_TMP) / "attention";
  std::filesystem::remove_all(dir);
  const auto files = dump_attention(out.attention, dir);
  CHECK(files.size() == out.attention.size());
  for (const auto& path : files) {
    CAPTURE(path.string());
    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    CHECK(line == "query_index,key_0,key_1,key_2,key_3,key_4,key_5");
    const std::string name = path.filename().string();
    int keys = 5;  // non-pad keys for the encoder stack
    if (name.find("to_visual") != std::string::npos) keys = 2;
    if (name.find("to_text") != std::string::npos) keys = 3;
    int rows = 0;
    while (std::getline(in, line)) {
      std::stringstream s(line);
      std::string cell;
      std::getline(s, cell, ',');
      double total = 0;
      while (std::getline(s, cell, ',')) {
        const double p = std::stod(cell);
        total += p;
        CHECK((p == 0.0 || std::abs(p - 1.0 / keys) <= 1e-7));
      }
      CHECK(std::abs(total - 1.0) <= 1e-5);
      ++rows;
    }
    CHECK(rows == (name.find("hybrid_head") == 0 ? (name.find("_text_to") != std::string::npos ? 3 : 2) : 5));
  }
}

TEST_CASE("cross-modal influence") {
  EncoderConfig cfg = tiny_encoder(0, 2, 8);
  Fixture f(cfg, 4, {1, 1, 1, 1, 0}, 9);
  auto perturbed_row = [&](Index row, const EncoderConfig& c) {
    T base = f.packed.hidden;
    Vec<double> v = base.data();
    for (Index k = 0; k < 8; ++k) v[row * 8 + k] += 0.5;
    PackedSequence<double> p = f.packed;
    p.hidden = T(base.shape(), v);
    const auto a = bivl_encode(f.packed, f.weights, c).hybrid.matrix().eval();
    const auto b = bivl_encode(p, f.weights, c).hybrid.matrix().eval();
    return (a - b).eval();
  };
  auto changed = [](const RowMatrix<double>& diff, Index from, Index to) {
    bool any = false;
    for (Index r = from; r < to; ++r) any = any || row_max_abs(diff, r) > 0;
    return any;
  };
  // Visual row 1 reaches text rows, text row 5 reaches visual rows.
  CHECK(changed(perturbed_row(1, cfg), 4, 8));
  CHECK(changed(perturbed_row(5, cfg), 0, 4));
  EncoderConfig off = cfg;
  off.bvlha = false;
  CHECK_FALSE(changed(perturbed_row(1, off), 4, 9));
  CHECK_FALSE(changed(perturbed_row(5, off), 0, 4));
}

TEST_CASE("text permutation permutes the text rows") {
  Fixture f(tiny_encoder(0, 2, 8), 3, {1, 1, 1, 1}, 4);
  const std::vector<Index> perm{3, 0, 2, 1};
  const auto x = f.packed.hidden.matrix();
  RowMatrix<double> y = x;
  for (Index j = 0; j < 4; ++j) y.row(3 + j) = x.row(3 + perm[j]);
  PackedSequence<double> p = f.packed;
  p.hidden = T::from_matrix(y);
  const auto a = bivl_encode(f.packed, f.weights, f.cfg).hybrid.matrix().eval();
  const auto b = bivl_encode(p, f.weights, f.cfg).hybrid.matrix().eval();
  for (Index j = 0; j < 4; ++j) CHECK((b.row(3 + j) - a.row(3 + perm[j])).cwiseAbs().maxCoeff() <= 1e-12);
  for (Index r = 0; r < 3; ++r) CHECK((b.row(r) - a.row(r)).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("a text-side loss reaches the visual input") {
  const auto cfg = tiny_model_config();
  const BivlModel<double> model(cfg);
  const auto doc = generate_corpus(tiny_corpus_config())[0];
  const auto td = tokenize(doc, cfg.max_len, cfg.grid);
  std::mt19937_64 rng(2);
  const auto plan = plan_mvlm(td, cfg.vocab, rng);
  T patches = patch_tensor<double>(doc.image, cfg, true);
  auto input = td;
  input.token_ids = plan.corrupted_ids;
  const auto out = model.encode(input, patches);
  mvlm_loss(out.hybrid, out.num_visual, plan, model.heads(), model.tables().word).backward();
  CHECK(patches.grad().cwiseAbs().maxCoeff() > 0);
}

TEST_CASE("text-to-visual attention is spread after training") {
  CorpusConfig cc = tiny_corpus_config();
  cc.num_docs = 24;
  const auto docs = generate_corpus(cc);
  ModelConfig mc = tiny_model_config();
  mc.init_scale = 0.1;
  BivlModel<float> model(mc);
  const PreparedCorpus corpus(docs, mc);
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 4;
  TrainLoop<float> loop(model, corpus.size(), tc, pretrain_objective(model, corpus, tc));
  loop.run();
  const auto out = model.encode(corpus.tokenized[0], patch_tensor<float>(docs[0].image, mc), true);
  int maps = 0;
  for (const auto& map : out.attention) {
    if (map.kind != "text_to_visual") continue;
    ++maps;
    const auto p = map.probs.matrix();
    for (Index q = 0; q < p.rows(); ++q) {
      if (!map.query_rows[q]) continue;
      double entropy = 0;
      for (Index k = 0; k < p.cols(); ++k) {
        if (p(q, k) > 0) entropy -= double(p(q, k)) * std::log(double(p(q, k)));
      }
      CHECK(entropy > 0);
    }
  }
  CHECK(maps == mc.encoder.heads);
}

}  // TEST_SUITE
