#include "bivl/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "json.hpp"

namespace bivl {

BoxF normalize(const Box& box) {
  const double s = kPageExtent;
  return {box.x0 / s, box.y0 / s, box.x1 / s, box.y1 / s};
}

std::vector<BoxF> region_boxes(int grid) {
  if (grid <= 0) throw ValidationError("grid must be positive");
  std::vector<BoxF> out;
  for (int r = 0; r < grid; ++r) {
    for (int c = 0; c < grid; ++c) {
      out.push_back({double(c) / grid, double(r) / grid, double(c + 1) / grid, double(r + 1) / grid});
    }
  }
  return out;
}

std::string_view coverage_mode_name(CoverageMode mode) {
  return mode == CoverageMode::Containment ? "containment" : "strict-iou";
}

CoverageMode coverage_mode_from_name(std::string_view name) {
  if (name == "containment") return CoverageMode::Containment;
  if (name == "strict-iou") return CoverageMode::StrictIou;
  throw ValidationError("unknown coverage mode '" + std::string(name) + "'");
}

double coverage_measure(const Box& region, const Box& token, CoverageMode mode) {
  const auto inter = static_cast<double>(intersection_area(region, token));
  if (mode == CoverageMode::Containment) {
    const auto a = static_cast<double>(token.area());
    return a > 0 ? inter / a : 0.0;
  }
  const double uni = static_cast<double>(region.area() + token.area()) - inter;
  return uni > 0 ? inter / uni : 0.0;
}

double iou(const BoxF& a, const BoxF& b) {
  const double iw = std::max(0.0, std::min(a.x1, b.x1) - std::max(a.x0, b.x0));
  const double ih = std::max(0.0, std::min(a.y1, b.y1) - std::max(a.y0, b.y0));
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

namespace {

void check_gt(const BoxF& gt) {
  if (!(gt.x1 > gt.x0 && gt.y1 > gt.y0)) throw ValidationError("ground-truth box has zero area");
}

}  // namespace

double diou(const BoxF& pred, const BoxF& gt) {
  check_gt(gt);
  if (!(pred.x1 > pred.x0 && pred.y1 > pred.y0)) throw ValidationError("predicted box is not in corner form");
  const double dx = ((pred.x0 - gt.x0) + (pred.x1 - gt.x1)) / 2;
  const double dy = ((pred.y0 - gt.y0) + (pred.y1 - gt.y1)) / 2;
  const double cw = std::max(pred.x1, gt.x1) - std::min(pred.x0, gt.x0);
  const double ch = std::max(pred.y1, gt.y1) - std::min(pred.y0, gt.y0);
  return 1.0 - iou(pred, gt) + (dx * dx + dy * dy) / (cw * cw + ch * ch);
}

// ---------------------------------------------------------------------------
// plans

int masked_count(int count) {
  if (count <= 0) return 0;
  return std::max(1, (15 * count + 50) / 100);
}

bool MvlmPlan::is_masked(Index position) const {
  return std::binary_search(positions.begin(), positions.end(), position);
}

namespace {

template <typename T>
std::vector<T> sample_sorted(std::vector<T> pool, int k, std::mt19937_64& rng) {
  std::shuffle(pool.begin(), pool.end(), rng);
  pool.resize(static_cast<std::size_t>(k));
  std::sort(pool.begin(), pool.end());
  return pool;
}

}  // namespace

MvlmPlan plan_mvlm(const TokenizedDoc& td, Index vocab_size, std::mt19937_64& rng) {
  const auto content = td.content_positions();
  if (content.empty()) throw ValidationError("MVLM needs at least one content token");
  MvlmPlan plan;
  plan.positions = sample_sorted(content, masked_count(static_cast<int>(content.size())), rng);
  plan.corrupted_ids = td.token_ids;
  std::discrete_distribution<int> kind({0.8, 0.1, 0.1});
  std::uniform_int_distribution<Index> random_id(VocabSpec::kNumSpecial, vocab_size - 1);
  for (Index p : plan.positions) {
    const auto r = static_cast<Replacement>(kind(rng));
    plan.replacement.push_back(r);
    plan.targets.push_back(td.token_ids[p]);
    if (r == Replacement::Mask) plan.corrupted_ids[p] = VocabSpec::kMask;
    if (r == Replacement::Random) plan.corrupted_ids[p] = random_id(rng);
  }
  return plan;
}

TipaPlan plan_tipa(const TokenizedDoc& td, const SyntheticDocument& doc, std::mt19937_64& rng) {
  const auto blocks = td.visible_blocks();
  TipaPlan plan;
  plan.masked_blocks = sample_sorted(blocks, masked_count(static_cast<int>(blocks.size())), rng);
  for (int b : plan.masked_blocks) plan.gt_boxes.push_back(normalize(doc.blocks[static_cast<std::size_t>(b)].box));
  return plan;
}

TokenizedDoc apply_tipa(TokenizedDoc td, const TipaPlan& plan) {
  for (Index i = 0; i < td.length(); ++i) {
    const int b = td.block_index[i];
    if (b >= 0 && std::binary_search(plan.masked_blocks.begin(), plan.masked_blocks.end(), b)) td.box_masked[i] = 1;
  }
  return td;
}

RwtpLabels rwtp_labels(const TokenizedDoc& td, CoverageMode mode) {
  RwtpLabels labels;
  labels.regions = td.num_regions();
  labels.tokens = td.length();
  const auto total = static_cast<std::size_t>(labels.regions * labels.tokens);
  labels.y.assign(total, 0);
  labels.valid.assign(total, 0);
  for (Index j = 0; j < labels.tokens; ++j) {
    if (td.block_index[j] < 0) continue;
    for (Index i = 0; i < labels.regions; ++i) {
      const auto k = static_cast<std::size_t>(i * labels.tokens + j);
      labels.valid[k] = 1;
      labels.y[k] = covers(td.visual_region_boxes[i], td.token_boxes[j], mode);
    }
  }
  return labels;
}

BtiaPlan btia_labels(const TokenizedDoc& td, const MvlmPlan& mvlm, std::vector<int> covered_blocks,
                     CoverageMode mode) {
  std::sort(covered_blocks.begin(), covered_blocks.end());
  BtiaPlan plan;
  plan.covered_blocks = std::move(covered_blocks);
  const Index m = td.num_regions();
  const Index n = td.length();
  plan.tia_labels.assign(static_cast<std::size_t>(n), 0);
  plan.ita_labels.assign(static_cast<std::size_t>(m), 0);
  plan.loss_mask.assign(static_cast<std::size_t>(m + n), 0);
  for (Index i = 0; i < m; ++i) {
    plan.loss_mask[i] = 1;
    for (Index p : mvlm.positions) {
      if (covers(td.visual_region_boxes[i], td.token_boxes[p], mode)) {
        plan.ita_labels[i] = 1;
        break;
      }
    }
  }
  for (Index j = 0; j < n; ++j) {
    const int b = td.block_index[j];
    if (b < 0) continue;
    plan.tia_labels[j] = std::binary_search(plan.covered_blocks.begin(), plan.covered_blocks.end(), b);
    plan.loss_mask[m + j] = !mvlm.is_masked(j);
  }
  return plan;
}

BtiaPlan plan_btia(const SyntheticDocument& doc, const TokenizedDoc& td, const MvlmPlan& mvlm, CoverageMode mode,
                   std::mt19937_64& rng) {
  const auto blocks = td.visible_blocks();
  BtiaPlan plan = btia_labels(td, mvlm, sample_sorted(blocks, masked_count(static_cast<int>(blocks.size())), rng), mode);
  std::vector<TextBlock> covered;
  for (int b : plan.covered_blocks) covered.push_back(doc.blocks[static_cast<std::size_t>(b)]);
  plan.covered_image = cover_regions(doc.image, covered);
  return plan;
}

PretrainPlan make_pretrain_plan(const SyntheticDocument& doc, const TokenizedDoc& td, Index vocab_size,
                                CoverageMode mode, std::mt19937_64& rng) {
  PretrainPlan plan;
  plan.mvlm = plan_mvlm(td, vocab_size, rng);
  plan.tipa = plan_tipa(td, doc, rng);
  plan.btia = plan_btia(doc, td, plan.mvlm, mode, rng);
  plan.rwtp = rwtp_labels(td, mode);
  return plan;
}

void save_label_dump(const std::vector<LabelDumpEntry>& entries, const std::filesystem::path& path) {
  using nlohmann::json;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << kLabelDumpHeader << '\n';
  for (const auto& e : entries) {
    const auto& p = e.plan;
    std::vector<int> replacement;
    for (auto r : p.mvlm.replacement) replacement.push_back(static_cast<int>(r));
    json boxes = json::array();
    for (const auto& b : p.tipa.gt_boxes) boxes.push_back({b.x0, b.y0, b.x1, b.y1});
    json record = {
        {"doc_id", e.doc_id},
        {"mvlm", {{"positions", p.mvlm.positions}, {"replacement", replacement}, {"targets", p.mvlm.targets}}},
        {"tipa", {{"masked_blocks", p.tipa.masked_blocks}, {"gt_boxes", boxes}}},
        {"btia",
         {{"covered_blocks", p.btia.covered_blocks},
          {"tia_labels", p.btia.tia_labels},
          {"ita_labels", p.btia.ita_labels},
          {"loss_mask", p.btia.loss_mask}}},
        {"rwtp", {{"regions", p.rwtp.regions}, {"tokens", p.rwtp.tokens}, {"y", p.rwtp.y}, {"valid", p.rwtp.valid}}}};
    out << record.dump() << '\n';
  }
}

// ---------------------------------------------------------------------------
// heads

template <typename Scalar>
PretrainHeads<Scalar> PretrainHeads<Scalar>::create(ParameterSet<Scalar>& params, Index d, Index vocab,
                                                    Index tipa_hidden, Index rwtp_hidden) {
  PretrainHeads h;
  h.mvlm_transform = Linear<Scalar>::create(params, "heads.mvlm.transform", d, d);
  h.mvlm_ln = LayerNormParams<Scalar>::create(params, "heads.mvlm.ln", d);
  h.mvlm_bias = params.zeros("heads.mvlm.bias", {vocab});
  h.tipa_hidden = Linear<Scalar>::create(params, "heads.tipa.hidden", d, tipa_hidden);
  h.tipa_out = Linear<Scalar>::create(params, "heads.tipa.out", tipa_hidden, 4);
  h.rwtp_visual = Linear<Scalar>::create(params, "heads.rwtp.visual", d, rwtp_hidden);
  h.rwtp_text = Linear<Scalar>::create(params, "heads.rwtp.text", d, rwtp_hidden, false);
  h.rwtp_out = Linear<Scalar>::create(params, "heads.rwtp.out", rwtp_hidden, 1);
  h.btia = Linear<Scalar>::create(params, "heads.btia", d, 1);
  return h;
}

namespace {

template <typename Scalar>
std::pair<Tensor<Scalar>, Tensor<Scalar>> split_rows(const Tensor<Scalar>& hybrid, Index num_visual) {
  auto parts = split(hybrid, 0, {num_visual, hybrid.dim(0) - num_visual});
  return {parts[0], parts[1]};
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> mvlm_logits(const Tensor<Scalar>& hybrid, Index num_visual, std::span<const Index> text_positions,
                           const PretrainHeads<Scalar>& heads, const Tensor<Scalar>& word_table) {
  std::vector<Index> rows;
  for (Index p : text_positions) rows.push_back(num_visual + p);
  Tensor<Scalar> h = embedding_lookup<Scalar>(hybrid, rows);
  h = heads.mvlm_ln(gelu(heads.mvlm_transform(h)));
  return add(matmul(h, transpose(word_table)), heads.mvlm_bias);
}

template <typename Scalar>
Tensor<Scalar> mvlm_loss(const Tensor<Scalar>& hybrid, Index num_visual, const MvlmPlan& plan,
                         const PretrainHeads<Scalar>& heads, const Tensor<Scalar>& word_table) {
  if (plan.positions.empty()) throw ValidationError("MVLM plan has no masked positions");
  Tensor<Scalar> logits = mvlm_logits(hybrid, num_visual, plan.positions, heads, word_table);
  return cross_entropy_from_logits<Scalar>(logits, plan.targets);
}

template <typename Scalar>
Tensor<Scalar> tipa_predict(const Tensor<Scalar>& hybrid, Index num_visual, const TokenizedDoc& td,
                            std::span<const int> blocks, const PretrainHeads<Scalar>& heads) {
  const auto k = static_cast<Index>(blocks.size());
  if (k == 0) throw ValidationError("TIPA needs at least one masked block");
  // Mean-pooling as a constant [k, m+n] matrix.
  RowMatrix<Scalar> pool = RowMatrix<Scalar>::Zero(k, hybrid.dim(0));
  for (Index b = 0; b < k; ++b) {
    Index count = 0;
    for (Index j = 0; j < td.length(); ++j) count += td.block_index[j] == blocks[b];
    if (count == 0) throw ValidationError("TIPA block " + std::to_string(blocks[b]) + " has no tokens in sequence");
    for (Index j = 0; j < td.length(); ++j) {
      if (td.block_index[j] == blocks[b]) pool(b, num_visual + j) = Scalar(1) / Scalar(count);
    }
  }
  Tensor<Scalar> pooled = matmul(Tensor<Scalar>::from_matrix(pool), hybrid);
  Tensor<Scalar> raw = sigmoid(heads.tipa_out(gelu(heads.tipa_hidden(pooled))));
  auto c = split(raw, 1, {1, 1, 1, 1});
  // Center and relative size per axis: the half-extent is a fraction of the
  // room left on the nearer side, so boxes stay on the page without clamping.
  auto axis = [](const Tensor<Scalar>& center, const Tensor<Scalar>& size) {
    const Tensor<Scalar> room = minimum(center, add_scalar(scale(center, Scalar(-1)), Scalar(1)));
    const Tensor<Scalar> half = mul(room, add_scalar(scale(size, Scalar(1) - Scalar(1e-4)), Scalar(1e-4)));
    return std::pair{sub(center, half), add(center, half)};
  };
  const auto [x0, x1] = axis(c[0], c[2]);
  const auto [y0, y1] = axis(c[1], c[3]);
  return concat<Scalar>({x0, y0, x1, y1}, 1);
}

template <typename Scalar>
Tensor<Scalar> diou_loss(const Tensor<Scalar>& pred, const std::vector<BoxF>& gt) {
  if (pred.rank() != 2 || pred.dim(1) != 4 || pred.dim(0) != static_cast<Index>(gt.size())) {
    throw DimensionError("diou_loss expects [k,4] predictions matching k ground-truth boxes");
  }
  for (const auto& g : gt) check_gt(g);
  const Index k = pred.dim(0);
  const auto p = pred.matrix();
  // Per box: loss and gradient with respect to (x0, y0, x1, y1).
  RowMatrix<Scalar> grads(k, 4);
  Scalar total = 0;
  for (Index i = 0; i < k; ++i) {
    const double px0 = p(i, 0), py0 = p(i, 1), px1 = p(i, 2), py1 = p(i, 3);
    const auto& g = gt[static_cast<std::size_t>(i)];

    const double ix0 = std::max(px0, g.x0), iy0 = std::max(py0, g.y0);
    const double ix1 = std::min(px1, g.x1), iy1 = std::min(py1, g.y1);
    const double iw = std::max(0.0, ix1 - ix0), ih = std::max(0.0, iy1 - iy0);
    const double inter = iw * ih;
    const double pw = px1 - px0, ph = py1 - py0;
    const double uni = pw * ph + g.area() - inter;
    const double io = inter / uni;

    // Pairwise differences so that identical boxes cancel exactly.
    const double dx = ((px0 - g.x0) + (px1 - g.x1)) / 2, dy = ((py0 - g.y0) + (py1 - g.y1)) / 2;
    const double rho2 = dx * dx + dy * dy;
    const double cw = std::max(px1, g.x1) - std::min(px0, g.x0);
    const double ch = std::max(py1, g.y1) - std::min(py0, g.y0);
    const double c2 = cw * cw + ch * ch;
    total += static_cast<Scalar>(1.0 - io + rho2 / c2);

    // d(inter)
    const bool overlap = iw > 0 && ih > 0;
    const double di[4] = {overlap && px0 > g.x0 ? -ih : 0.0, overlap && py0 > g.y0 ? -iw : 0.0,
                          overlap && px1 < g.x1 ? ih : 0.0, overlap && py1 < g.y1 ? iw : 0.0};
    const double darea[4] = {-ph, -pw, ph, pw};
    const double drho[4] = {dx, dy, dx, dy};
    const double dc[4] = {px0 < g.x0 ? -2 * cw : 0.0, py0 < g.y0 ? -2 * ch : 0.0, px1 > g.x1 ? 2 * cw : 0.0,
                          py1 > g.y1 ? 2 * ch : 0.0};
    for (int c = 0; c < 4; ++c) {
      const double du = darea[c] - di[c];
      const double diou_dc = (di[c] * uni - inter * du) / (uni * uni);
      const double dpen = (drho[c] * c2 - rho2 * dc[c]) / (c2 * c2);
      grads(i, c) = static_cast<Scalar>(-diou_dc + dpen);
    }
  }
  Vec<Scalar> flat(k * 4);
  Eigen::Map<RowMatrix<Scalar>>(flat.data(), k, 4) = grads / Scalar(k);
  return make_op<Scalar>(Shape{}, Vec<Scalar>::Constant(1, total / Scalar(k)), {pred},
                         [flat = std::move(flat)](Node<Scalar>& n) { n.parents[0]->accumulate(flat * (*n.grad)[0]); });
}

template <typename Scalar>
Tensor<Scalar> rwtp_probabilities(const Tensor<Scalar>& hybrid, Index num_visual, const PretrainHeads<Scalar>& heads) {
  auto [visual, text] = split_rows(hybrid, num_visual);
  const Index n = text.dim(0);
  Tensor<Scalar> pairs = gelu(pair_sum(heads.rwtp_visual(visual), heads.rwtp_text(text)));
  Tensor<Scalar> logits = heads.rwtp_out(pairs);  // [m, n, 1]
  return sigmoid(reshape(logits, {num_visual, n}));
}

template <typename Scalar>
Tensor<Scalar> rwtp_loss(const Tensor<Scalar>& probabilities, const RwtpLabels& labels) {
  if (probabilities.dim(0) != labels.regions || probabilities.dim(1) != labels.tokens) {
    throw DimensionError("RWTP probabilities do not match the label matrix");
  }
  std::vector<Scalar> y(labels.y.begin(), labels.y.end());
  return binary_cross_entropy<Scalar>(probabilities, y, labels.valid);
}

template <typename Scalar>
Tensor<Scalar> btia_probabilities(const Tensor<Scalar>& hybrid, const PretrainHeads<Scalar>& heads) {
  return sigmoid(reshape(heads.btia(hybrid), {hybrid.dim(0)}));
}

template <typename Scalar>
Tensor<Scalar> btia_loss(const Tensor<Scalar>& probabilities, const BtiaPlan& plan) {
  const Index m = static_cast<Index>(plan.ita_labels.size());
  const Index n = static_cast<Index>(plan.tia_labels.size());
  if (probabilities.numel() != m + n) throw DimensionError("BTIA probabilities do not match the packed length");
  std::vector<Scalar> y;
  y.reserve(static_cast<std::size_t>(m + n));
  for (auto v : plan.ita_labels) y.push_back(Scalar(v));
  for (auto v : plan.tia_labels) y.push_back(Scalar(v));
  return binary_cross_entropy<Scalar>(probabilities, y, plan.loss_mask);
}

template <typename Scalar>
Tensor<Scalar> total_pretrain_loss(const PretrainLosses<Scalar>& losses, const TaskWeights& weights) {
  Tensor<Scalar> total;
  auto accumulate = [&](const std::optional<Tensor<Scalar>>& l, double w) {
    if (!l) return;
    Tensor<Scalar> term = scale(*l, static_cast<Scalar>(w));
    total = total.defined() ? add(total, term) : term;
  };
  accumulate(losses.mvlm, weights.mvlm);
  accumulate(losses.tipa, weights.tipa);
  accumulate(losses.rwtp, weights.rwtp);
  accumulate(losses.btia, weights.btia);
  return total.defined() ? total : Tensor<Scalar>::scalar(Scalar(0));
}

#define BIVL_INSTANTIATE(S)                                                                                       \
  template struct PretrainHeads<S>;                                                                              \
  template Tensor<S> mvlm_logits(const Tensor<S>&, Index, std::span<const Index>, const PretrainHeads<S>&,       \
                                 const Tensor<S>&);                                                              \
  template Tensor<S> mvlm_loss(const Tensor<S>&, Index, const MvlmPlan&, const PretrainHeads<S>&,                \
                               const Tensor<S>&);                                                                \
  template Tensor<S> tipa_predict(const Tensor<S>&, Index, const TokenizedDoc&, std::span<const int>,            \
                                  const PretrainHeads<S>&);                                                      \
  template Tensor<S> diou_loss(const Tensor<S>&, const std::vector<BoxF>&);                                      \
  template Tensor<S> rwtp_probabilities(const Tensor<S>&, Index, const PretrainHeads<S>&);                       \
  template Tensor<S> rwtp_loss(const Tensor<S>&, const RwtpLabels&);                                             \
  template Tensor<S> btia_probabilities(const Tensor<S>&, const PretrainHeads<S>&);                              \
  template Tensor<S> btia_loss(const Tensor<S>&, const BtiaPlan&);                                               \
  template Tensor<S> total_pretrain_loss(const PretrainLosses<S>&, const TaskWeights&);

BIVL_INSTANTIATE(float)
BIVL_INSTANTIATE(double)

#undef BIVL_INSTANTIATE

}  // namespace bivl
