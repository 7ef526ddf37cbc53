#pragma once

// Independent oracles shared by the unit tests and the acceptance runner.
// Nothing here calls the library code it is used to check: geometry is done
// by counting unit cells, the forward pass is plain loops over std::vector.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "bivl/model.hpp"

namespace bivl::oracle {

// ---------------------------------------------------------------------------
// pixel counting on the 0..1000 page grid

/// Unit cells [x, x+1) x [y, y+1) covered by a box.
inline std::int64_t cell_count(const Box& b) {
  std::int64_t n = 0;
  for (int y = b.y0; y < b.y1; ++y) {
    for (int x = b.x0; x < b.x1; ++x) ++n;
  }
  return n;
}

/// Owner of every page cell for a set of disjoint boxes (-1 = none).
class Raster {
 public:
  explicit Raster(const std::vector<Box>& boxes)
      : owner_(static_cast<std::size_t>(kPageExtent) * kPageExtent, -1), area_(boxes.size(), 0) {
    for (std::size_t k = 0; k < boxes.size(); ++k) {
      for (int y = boxes[k].y0; y < boxes[k].y1; ++y) {
        for (int x = boxes[k].x0; x < boxes[k].x1; ++x) {
          owner_[static_cast<std::size_t>(y) * kPageExtent + x] = static_cast<int>(k);
          ++area_[k];
        }
      }
    }
  }

  /// Cells of `b` owned by each box.
  std::vector<std::int64_t> overlaps(const Box& b) const {
    std::vector<std::int64_t> out(area_.size(), 0);
    for (int y = b.y0; y < b.y1; ++y) {
      for (int x = b.x0; x < b.x1; ++x) {
        const int o = owner_[static_cast<std::size_t>(y) * kPageExtent + x];
        if (o >= 0) ++out[static_cast<std::size_t>(o)];
      }
    }
    return out;
  }
  std::int64_t area(std::size_t k) const { return area_[k]; }

 private:
  std::vector<int> owner_;
  std::vector<std::int64_t> area_;
};

/// Coverage of `token` by each region, from cell counts.
inline std::vector<double> pixel_coverage(const Raster& regions, std::size_t num_regions, const Box& token,
                                          bool strict_iou) {
  const auto inter = regions.overlaps(token);
  const std::int64_t token_cells = cell_count(token);
  std::vector<double> out(num_regions, 0.0);
  for (std::size_t i = 0; i < num_regions; ++i) {
    const double denom = strict_iou ? double(regions.area(i) + token_cells - inter[i]) : double(token_cells);
    out[i] = denom > 0 ? double(inter[i]) / denom : 0.0;
  }
  return out;
}

/// Brute-force RWTP / TIA / ITA labels of one tokenized document.
struct LabelOracle {
  std::vector<std::uint8_t> rwtp;  // [regions x tokens]
  std::vector<std::uint8_t> tia;   // per text position
  std::vector<std::uint8_t> ita;   // per region
};

/// TIA is read off the covered image: a token is covered when the pixel at
/// its block's center went to background.
inline LabelOracle label_oracle(const SyntheticDocument& doc, const TokenizedDoc& td,
                                const std::vector<Index>& mvlm_positions, const Image& covered_image,
                                bool strict_iou) {
  const auto& regions = td.visual_region_boxes;
  const Raster raster(regions);
  const std::size_t m = regions.size();
  const auto n = static_cast<std::size_t>(td.length());
  LabelOracle o;
  o.rwtp.assign(m * n, 0);
  o.tia.assign(n, 0);
  o.ita.assign(m, 0);
  for (std::size_t j = 0; j < n; ++j) {
    const int b = td.block_index[j];
    if (b < 0) continue;
    const Box& box = doc.blocks[static_cast<std::size_t>(b)].box;
    const auto cov = pixel_coverage(raster, m, box, strict_iou);
    for (std::size_t i = 0; i < m; ++i) o.rwtp[i * n + j] = cov[i] > 0.5;
    const bool masked = std::find(mvlm_positions.begin(), mvlm_positions.end(), Index(j)) != mvlm_positions.end();
    if (masked) {
      for (std::size_t i = 0; i < m; ++i) o.ita[i] |= cov[i] > 0.5;
    }
    const double cx = (box.x0 + box.x1) / 2.0, cy = (box.y0 + box.y1) / 2.0;
    const auto row = static_cast<Index>(cy * double(covered_image.rows()) / kPageExtent);
    const auto col = static_cast<Index>(cx * double(covered_image.cols()) / kPageExtent);
    o.tia[j] = covered_image(row, col) == 0.0f;
  }
  return o;
}

// ---------------------------------------------------------------------------
// DIoU by Monte-Carlo areas

/// Intersection estimated by sampling the smaller box; the two box areas and
/// the center / enclosing terms are exact.
inline double diou_monte_carlo(const BoxF& p, const BoxF& g, int samples, std::mt19937_64& rng) {
  const bool p_small = p.area() <= g.area();
  const BoxF& s = p_small ? p : g;
  const BoxF& other = p_small ? g : p;
  std::uniform_real_distribution<double> ux(s.x0, s.x1), uy(s.y0, s.y1);
  int inside = 0;
  for (int k = 0; k < samples; ++k) {
    const double x = ux(rng), y = uy(rng);
    inside += x >= other.x0 && x < other.x1 && y >= other.y0 && y < other.y1;
  }
  const double inter = s.area() * double(inside) / samples;
  const double iou = inter / (p.area() + g.area() - inter);
  const double dx = (p.x0 + p.x1) / 2 - (g.x0 + g.x1) / 2;
  const double dy = (p.y0 + p.y1) / 2 - (g.y0 + g.y1) / 2;
  const double cw = std::max(p.x1, g.x1) - std::min(p.x0, g.x0);
  const double ch = std::max(p.y1, g.y1) - std::min(p.y0, g.y0);
  return 1 - iou + (dx * dx + dy * dy) / (cw * cw + ch * ch);
}

/// A box with both sides in [min_side, 1].
inline BoxF random_box(std::mt19937_64& rng, double min_side = 0.01) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double w = min_side + (1 - min_side) * u(rng), h = min_side + (1 - min_side) * u(rng);
  const double x = (1 - w) * u(rng), y = (1 - h) * u(rng);
  return {x, y, x + w, y + h};
}

// ---------------------------------------------------------------------------
// straight-line forward pass

using Mat = std::vector<std::vector<double>>;

inline Mat zeros(std::size_t r, std::size_t c) { return Mat(r, std::vector<double>(c, 0.0)); }

inline Mat to_mat(const Tensor<double>& t) {
  const Index cols = t.dim(-1);
  const Index rows = t.numel() / cols;
  Mat m = zeros(static_cast<std::size_t>(rows), static_cast<std::size_t>(cols));
  for (Index i = 0; i < rows; ++i) {
    for (Index j = 0; j < cols; ++j) m[i][j] = t.data()[i * cols + j];
  }
  return m;
}

inline std::vector<double> to_vec(const Tensor<double>& t) {
  return std::vector<double>(t.data().data(), t.data().data() + t.numel());
}

inline Mat matmul(const Mat& a, const Mat& b) {
  Mat c = zeros(a.size(), b[0].size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t k = 0; k < b.size(); ++k) {
      for (std::size_t j = 0; j < b[0].size(); ++j) c[i][j] += a[i][k] * b[k][j];
    }
  }
  return c;
}

inline Mat add(Mat a, const Mat& b) {
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < a[i].size(); ++j) a[i][j] += b[i][j];
  }
  return a;
}

inline Mat add_row(Mat a, const std::vector<double>& bias) {
  for (auto& row : a) {
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += bias[j];
  }
  return a;
}

inline Mat linear(const Mat& x, const Linear<double>& l) {
  Mat y = matmul(x, to_mat(l.weight));
  return l.bias.defined() ? add_row(std::move(y), to_vec(l.bias)) : y;
}

inline Mat layer_norm(const Mat& x, const LayerNormParams<double>& p, double eps = 1e-5) {
  const auto g = to_vec(p.gain), b = to_vec(p.bias);
  Mat y = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double mu = 0;
    for (double v : x[i]) mu += v;
    mu /= double(x[i].size());
    double var = 0;
    for (double v : x[i]) var += (v - mu) * (v - mu);
    var /= double(x[i].size());
    for (std::size_t j = 0; j < x[i].size(); ++j) y[i][j] = (x[i][j] - mu) / std::sqrt(var + eps) * g[j] + b[j];
  }
  return y;
}

inline Mat gelu(Mat x) {
  for (auto& row : x) {
    for (double& v : row) v = 0.5 * v * (1 + std::tanh(std::sqrt(2 / M_PI) * (v + 0.044715 * v * v * v)));
  }
  return x;
}

inline Mat scale_rows(Mat x, const std::vector<double>& w) {
  for (std::size_t i = 0; i < x.size(); ++i) {
    for (double& v : x[i]) v *= w[i];
  }
  return x;
}

/// Softmax attention probabilities of every head, one [q, k] matrix each.
inline std::vector<Mat> attention_probs(const Mat& q_in, const Mat& kv_in, const AttentionProjections<double>& p,
                                        int heads, const std::vector<std::uint8_t>& key_mask) {
  const Mat q = linear(q_in, p.query), k = linear(kv_in, p.key);
  const std::size_t d = q[0].size(), dk = d / static_cast<std::size_t>(heads);
  std::vector<Mat> out;
  for (int h = 0; h < heads; ++h) {
    Mat probs = zeros(q.size(), k.size());
    for (std::size_t i = 0; i < q.size(); ++i) {
      double top = -INFINITY;
      std::vector<double> s(k.size(), 0.0);
      for (std::size_t j = 0; j < k.size(); ++j) {
        if (!key_mask[j]) continue;
        for (std::size_t c = h * dk; c < (h + 1) * dk; ++c) s[j] += q[i][c] * k[j][c];
        s[j] /= std::sqrt(double(dk));
        top = std::max(top, s[j]);
      }
      double z = 0;
      for (std::size_t j = 0; j < k.size(); ++j) {
        if (key_mask[j]) z += std::exp(s[j] - top);
      }
      for (std::size_t j = 0; j < k.size(); ++j) probs[i][j] = key_mask[j] ? std::exp(s[j] - top) / z : 0.0;
    }
    out.push_back(std::move(probs));
  }
  return out;
}

inline Mat attention(const Mat& q_in, const Mat& kv_in, const AttentionProjections<double>& p, int heads,
                     const std::vector<std::uint8_t>& key_mask) {
  const auto probs = attention_probs(q_in, kv_in, p, heads, key_mask);
  const Mat v = linear(kv_in, p.value);
  const std::size_t d = v[0].size(), dk = d / static_cast<std::size_t>(heads);
  Mat out = zeros(q_in.size(), d);
  for (int h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < q_in.size(); ++i) {
      for (std::size_t j = 0; j < kv_in.size(); ++j) {
        for (std::size_t c = h * dk; c < (h + 1) * dk; ++c) out[i][c] += probs[h][i][j] * v[j][c];
      }
    }
  }
  return out;
}

struct ForwardOracle {
  Mat encoded, hybrid_t, hybrid_v, hybrid;
};

/// Hybrid layer from an encoder output.
inline ForwardOracle hybrid_forward(const Mat& enc, const std::vector<double>& mv, const std::vector<double>& mt,
                                    const std::vector<std::uint8_t>& valid, const HybridWeights<double>& w,
                                    const EncoderConfig& cfg) {
  const std::size_t len = enc.size();
  std::vector<std::uint8_t> vkeys(len), tkeys(len);
  for (std::size_t i = 0; i < len; ++i) {
    vkeys[i] = cfg.literal_eq_masking ? valid[i] : mv[i] != 0 && valid[i];
    tkeys[i] = cfg.literal_eq_masking ? valid[i] : mt[i] != 0 && valid[i];
  }
  const Mat hv = scale_rows(enc, mv), ht = scale_rows(enc, mt);
  Mat st = attention(ht, ht, w.text_self, cfg.heads, tkeys);
  Mat sv = attention(hv, hv, w.vision_self, cfg.heads, vkeys);
  if (cfg.bvlha) {
    st = add(st, attention(ht, hv, w.text_cross, cfg.heads, vkeys));
    sv = add(sv, attention(hv, ht, w.vision_cross, cfg.heads, tkeys));
  }
  if (cfg.hybrid_residual) {
    st = add(st, ht);
    sv = add(sv, hv);
  }
  ForwardOracle o;
  o.encoded = enc;
  o.hybrid_t = scale_rows(layer_norm(st, w.ln_text), mt);
  o.hybrid_v = scale_rows(layer_norm(sv, w.ln_vision), mv);
  o.hybrid = layer_norm(add(o.hybrid_t, o.hybrid_v), w.ln_out);
  return o;
}

/// Embeddings, the pre-LN stack and the hybrid layer of `model` on one document.
inline ForwardOracle model_forward(const BivlModel<double>& model, const TokenizedDoc& td, const Mat& patches) {
  const auto& t = model.tables();
  const auto& cfg = model.config();
  auto row = [](const Tensor<double>& table, Index r) {
    const Index d = table.dim(1);
    return std::vector<double>(table.data().data() + r * d, table.data().data() + (r + 1) * d);
  };
  auto acc = [](std::vector<double>& into, const std::vector<double>& v) {
    for (std::size_t k = 0; k < v.size(); ++k) into[k] += v[k];
  };
  auto spatial = [&](std::vector<double>& into, const Box& b, bool masked) {
    const int z = 0;
    acc(into, row(t.x0, masked ? z : b.x0));
    acc(into, row(t.y0, masked ? z : b.y0));
    acc(into, row(t.x1, masked ? z : b.x1));
    acc(into, row(t.y1, masked ? z : b.y1));
    acc(into, row(t.width, masked ? z : b.x1 - b.x0));
    acc(into, row(t.height, masked ? z : b.y1 - b.y0));
  };

  const std::size_t m = td.visual_region_boxes.size();
  const auto n = static_cast<std::size_t>(td.length());
  Mat packed;
  const Mat projected = linear(patches, t.patch_projection);
  for (std::size_t i = 0; i < m; ++i) {
    std::vector<double> h = projected[i];
    acc(h, row(t.visual_pos, Index(i)));
    acc(h, row(t.segment, 1));
    spatial(h, td.visual_region_boxes[i], false);
    packed.push_back(h);
  }
  for (std::size_t j = 0; j < n; ++j) {
    std::vector<double> h = row(t.word, td.token_ids[j]);
    acc(h, row(t.seq_pos, Index(j)));
    spatial(h, td.token_boxes[j], td.box_masked[j] != 0);
    acc(h, row(t.local_pos, td.lp_ids[j]));
    acc(h, row(t.segment, td.segment_ids[j]));
    packed.push_back(h);
  }
  std::vector<double> mv(m + n, 0.0), mt(m + n, 0.0);
  std::vector<std::uint8_t> valid(m + n, 0);
  for (std::size_t i = 0; i < m; ++i) mv[i] = 1, valid[i] = 1;
  for (std::size_t j = 0; j < n; ++j) {
    if (td.pad_mask[j]) mt[m + j] = 1, valid[m + j] = 1;
  }

  const auto& enc_w = model.encoder();
  Mat x = packed;
  for (const auto& l : enc_w.layers) {
    const Mat a = attention(layer_norm(x, l.ln_attn), layer_norm(x, l.ln_attn), l.attn, cfg.encoder.heads, valid);
    x = add(x, linear(a, l.attn_output));
    x = add(x, linear(gelu(linear(layer_norm(x, l.ln_ffn), l.ffn_in)), l.ffn_out));
  }
  if (!enc_w.layers.empty()) x = layer_norm(x, enc_w.final_ln);
  return hybrid_forward(x, mv, mt, valid, enc_w.hybrid, cfg.encoder);
}

inline double max_abs_diff(const Mat& a, const Tensor<double>& b) {
  const Mat bm = to_mat(b);
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < a[i].size(); ++j) worst = std::max(worst, std::abs(a[i][j] - bm[i][j]));
  }
  return worst;
}

}  // namespace bivl::oracle
