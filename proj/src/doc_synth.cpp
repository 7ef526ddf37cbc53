#include "bivl/doc_synth.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "json.hpp"

#include "bivl/errors.hpp"

namespace bivl {

using nlohmann::json;

std::int64_t intersection_area(const Box& a, const Box& b) {
  const std::int64_t w = std::max(0, std::min(a.x1, b.x1) - std::max(a.x0, b.x0));
  const std::int64_t h = std::max(0, std::min(a.y1, b.y1) - std::max(a.y0, b.y0));
  return w * h;
}

std::string_view role_name(EntityRole role) {
  switch (role) {
    case EntityRole::Header: return "HEADER";
    case EntityRole::Question: return "QUESTION";
    case EntityRole::Answer: return "ANSWER";
    case EntityRole::Other: return "OTHER";
  }
  return "OTHER";
}

EntityRole role_from_name(std::string_view name) {
  for (int r = 0; r < kNumRoles; ++r) {
    if (role_name(static_cast<EntityRole>(r)) == name) return static_cast<EntityRole>(r);
  }
  throw ValidationError("unknown entity role '" + std::string(name) + "'");
}

void CorpusConfig::validate() const {
  if (num_docs <= 0 || vocab_size <= 0 || min_blocks <= 0 || max_blocks <= 0 || min_tokens <= 0 ||
      max_tokens <= 0 || image_height <= 0 || image_width <= 0 || num_classes <= 0) {
    throw ValidationError("corpus config values must be positive");
  }
  if (vocab_size < kFirstContentId + 1) {
    throw ValidationError("vocab_size must be at least 8 (5 specials, 2 markers, 1 content id)");
  }
  if (min_blocks > max_blocks || min_tokens > max_tokens) throw ValidationError("inverted range in corpus config");
  if (num_classes > max_blocks - min_blocks + 1) {
    throw ValidationError("num_classes exceeds the number of distinct block counts");
  }
  if (std::any_of(role_priors.begin(), role_priors.end(), [](double p) { return !(p >= 0.0); }) ||
      std::accumulate(role_priors.begin(), role_priors.end(), 0.0) <= 0.0) {
    throw ValidationError("role priors must be non-negative and not all zero");
  }
}

void validate_document(const SyntheticDocument& doc) {
  for (std::size_t i = 0; i < doc.blocks.size(); ++i) {
    const auto& b = doc.blocks[i];
    if (b.tokens.empty()) throw ValidationError("block " + std::to_string(i) + " has no tokens");
    if (!b.box.valid()) {
      throw ValidationError("block " + std::to_string(i) + " box (" + std::to_string(b.box.x0) + "," +
                            std::to_string(b.box.y0) + "," + std::to_string(b.box.x1) + "," +
                            std::to_string(b.box.y1) + ") is not a valid page box");
    }
    for (int t : b.tokens) {
      if (t < 0) throw ValidationError("negative token id in block " + std::to_string(i));
    }
    for (std::size_t j = 0; j < i; ++j) {
      if (intersection_area(b.box, doc.blocks[j].box) > 0) {
        throw ValidationError("blocks " + std::to_string(j) + " and " + std::to_string(i) + " overlap");
      }
    }
  }
  if (doc.doc_class < 0) throw ValidationError("negative doc_class");
  if (doc.image.size() > 0 && !((doc.image.array() >= 0.0f).all() && (doc.image.array() <= 1.0f).all())) {
    throw ValidationError("image values outside [0,1]");
  }
}

// ---------------------------------------------------------------------------
// generation

namespace {

constexpr std::uint64_t kPhraseBankSeed = 0x6269766c70687261ULL;
// Phrases are indexed by (role, row slot, variant): a block's wording tells
// where on the form it sits.
constexpr int kRowSlots = 10;
constexpr int kVariants = 2;
constexpr int kPhrasesInBank = kNumRoles * kRowSlots * kVariants;
constexpr int kRowPitch = 95;
// Jitter is snapped to a coarse grid so each coordinate value recurs often.

// Shared by every corpus with the same vocabulary so held-out corpora use
// the same phrases.
std::vector<std::vector<int>> phrase_bank(int vocab_size, int length) {
  std::mt19937_64 rng(kPhraseBankSeed);
  std::uniform_int_distribution<int> id(kFirstContentId, vocab_size - 1);
  std::vector<std::vector<int>> bank(kPhrasesInBank, std::vector<int>(static_cast<std::size_t>(length)));
  const int content_ids = vocab_size - kFirstContentId;
  for (std::size_t p = 0; p < bank.size(); ++p) {
    // The slot's own token at even places, a variant token at odd ones.
    const int lead = kFirstContentId + static_cast<int>(p / kVariants) % content_ids;
    const int filler = id(rng);
    for (std::size_t i = 0; i < bank[p].size(); ++i) bank[p][i] = i % 2 == 0 ? lead : filler;
  }
  return bank;
}

struct ClassBand {
  int lo, hi;
};

ClassBand class_band(const CorpusConfig& cfg, int cls) {
  const int span = cfg.max_blocks - cfg.min_blocks + 1;
  const int lo = cfg.min_blocks + cls * span / cfg.num_classes;
  const int hi = cfg.min_blocks + (cls + 1) * span / cfg.num_classes - 1;
  return {lo, hi};
}

}  // namespace

SyntheticDocument generate_document(const CorpusConfig& cfg, int index) {
  cfg.validate();
  std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32),
                    static_cast<std::uint32_t>(index)};
  std::mt19937_64 rng(seq);
  auto uniform = [&rng](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };

  SyntheticDocument doc;
  std::ostringstream id;
  id << "doc-" << cfg.seed << '-' << index;
  doc.doc_id = id.str();
  doc.doc_class = uniform(0, cfg.num_classes - 1);
  const ClassBand band = class_band(cfg, doc.doc_class);
  const int num_blocks = uniform(band.lo, band.hi);

  static thread_local std::vector<std::vector<int>> bank;
  static thread_local std::pair<int, int> bank_key{-1, -1};
  if (bank_key != std::make_pair(cfg.vocab_size, cfg.max_tokens)) {
    bank = phrase_bank(cfg.vocab_size, cfg.max_tokens);
    bank_key = {cfg.vocab_size, cfg.max_tokens};
  }

  std::discrete_distribution<int> role_dist(cfg.role_priors.begin(), cfg.role_priors.end());
  int row = -1;
  int row_top = 0, row_bottom = 0;
  bool row_has_question = false;
  auto new_row = [&]() {
    ++row;
    row_top = 30 + kRowPitch * row + 5 * uniform(0, 2);
    row_bottom = row_top + 5 * uniform(15, 16);
    row_has_question = false;
  };

  for (int b = 0; b < num_blocks; ++b) {
    TextBlock block;
    block.role = static_cast<EntityRole>(role_dist(rng));
    int k = uniform(cfg.min_tokens, cfg.max_tokens);
    // A marker alone says nothing about the slot, so marked blocks get a content token when allowed.
    if (block.role != EntityRole::Other && cfg.max_tokens >= 2) k = std::max(k, 2);
    const int width = 80 + 60 * k;
    switch (block.role) {
      case EntityRole::Header: {
        new_row();
        const int w = std::min(width, 600);
        const int cx = 500 + 10 * uniform(-2, 2);
        block.box = {cx - w / 2, row_top, cx - w / 2 + w, row_bottom};
        break;
      }
      case EntityRole::Question: {
        new_row();
        const int x0 = 40 + 10 * uniform(0, 2);
        block.box = {x0, row_top, std::min(x0 + width, 500), row_bottom};
        row_has_question = true;
        break;
      }
      case EntityRole::Answer: {
        if (!row_has_question) new_row();
        const int x0 = 520 + 10 * uniform(0, 2);
        block.box = {x0, row_top, std::min(x0 + width, 1000), row_bottom};
        row_has_question = false;
        break;
      }
      case EntityRole::Other: {
        new_row();
        const int x0 = 40 + 10 * uniform(0, 2);
        block.box = {x0, row_top, std::min(x0 + 120 + 100 * k, 960), row_bottom};
        break;
      }
    }
    const int slot = (static_cast<int>(block.role) * kRowSlots + std::min(row, kRowSlots - 1)) * kVariants;
    const auto& phrase = bank[static_cast<std::size_t>(slot + uniform(0, kVariants - 1))];
    int marker = -1;
    if (block.role == EntityRole::Header) marker = kHeaderMarker;
    if (block.role == EntityRole::Question || block.role == EntityRole::Answer) marker = kFieldMarker;
    if (marker >= 0) block.tokens.push_back(marker);
    for (int i = 0; block.tokens.size() < static_cast<std::size_t>(k); ++i) block.tokens.push_back(phrase[i]);

    if (block.box.y1 > kPageExtent) {
      throw GenerationError("document " + std::to_string(index) + ": " + std::to_string(num_blocks) +
                            " blocks do not fit on the page (row " + std::to_string(b) + " ends at y=" +
                            std::to_string(block.box.y1) + ")");
    }
    doc.blocks.push_back(std::move(block));
  }
  std::stable_sort(doc.blocks.begin(), doc.blocks.end(), [](const TextBlock& a, const TextBlock& b) {
    return a.box.y0 != b.box.y0 ? a.box.y0 < b.box.y0 : a.box.x0 < b.box.x0;
  });
  doc.image = render_image(doc, cfg.vocab_size, cfg.image_height, cfg.image_width);
  return doc;
}

std::vector<SyntheticDocument> generate_corpus(const CorpusConfig& cfg) {
  cfg.validate();
  std::vector<SyntheticDocument> corpus;
  corpus.reserve(static_cast<std::size_t>(cfg.num_docs));
  for (int i = 0; i < cfg.num_docs; ++i) corpus.push_back(generate_document(cfg, i));
  return corpus;
}

// ---------------------------------------------------------------------------
// rendering

namespace {

// ceil(num / den) for den > 0 and any sign of num.
long ceil_div(long num, long den) { return num >= 0 ? (num + den - 1) / den : -((-num) / den); }

int pixel_bound(int page_coord, int pixels) {
  // First pixel index c with center (c + 0.5) * 1000 / pixels >= page_coord.
  const long c = ceil_div(2L * page_coord * pixels - kPageExtent, 2L * kPageExtent);
  return static_cast<int>(std::clamp<long>(c, 0, pixels));
}

}  // namespace

PixelSpan pixel_span(const Box& box, int height, int width) {
  return {pixel_bound(box.y0, height), pixel_bound(box.y1, height), pixel_bound(box.x0, width),
          pixel_bound(box.x1, width)};
}

float block_intensity(const TextBlock& block, int vocab_size) {
  const double mean_id = std::accumulate(block.tokens.begin(), block.tokens.end(), 0.0) /
                         static_cast<double>(block.tokens.size());
  return static_cast<float>((1.0 + mean_id) / (vocab_size + 1.0));
}

Image render_image(const SyntheticDocument& doc, int vocab_size, int height, int width) {
  Image image = Image::Zero(height, width);
  for (const auto& block : doc.blocks) {
    if (!block.box.valid() || block.tokens.empty()) throw ValidationError("cannot render an invalid block");
    const PixelSpan s = pixel_span(block.box, height, width);
    if (s.row_end > s.row_begin && s.col_end > s.col_begin) {
      image.block(s.row_begin, s.col_begin, s.row_end - s.row_begin, s.col_end - s.col_begin)
          .setConstant(block_intensity(block, vocab_size));
    }
  }
  return image;
}

Image cover_regions(const Image& image, const std::vector<TextBlock>& blocks_to_cover) {
  Image out = image;
  for (const auto& block : blocks_to_cover) {
    if (!block.box.valid()) throw ValidationError("cannot cover an invalid box");
    const PixelSpan s = pixel_span(block.box, static_cast<int>(image.rows()), static_cast<int>(image.cols()));
    if (s.row_end > s.row_begin && s.col_end > s.col_begin) {
      out.block(s.row_begin, s.col_begin, s.row_end - s.row_begin, s.col_end - s.col_begin).setZero();
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// serialization

namespace {

constexpr char kBase64Alphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

}  // namespace

std::string encode_base64(std::span<const std::uint8_t> bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
    out += kBase64Alphabet[(v >> 18) & 63];
    out += kBase64Alphabet[(v >> 12) & 63];
    out += kBase64Alphabet[(v >> 6) & 63];
    out += kBase64Alphabet[v & 63];
  }
  const std::size_t rest = bytes.size() - i;
  if (rest == 1) {
    const std::uint32_t v = bytes[i] << 16;
    out += kBase64Alphabet[(v >> 18) & 63];
    out += kBase64Alphabet[(v >> 12) & 63];
    out += "==";
  } else if (rest == 2) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8);
    out += kBase64Alphabet[(v >> 18) & 63];
    out += kBase64Alphabet[(v >> 12) & 63];
    out += kBase64Alphabet[(v >> 6) & 63];
    out += '=';
  }
  return out;
}

std::vector<std::uint8_t> decode_base64(std::string_view text) {
  if (text.size() % 4 != 0) throw std::invalid_argument("base64 length is not a multiple of 4");
  auto value = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
  };
  std::vector<std::uint8_t> out;
  out.reserve(text.size() / 4 * 3);
  for (std::size_t i = 0; i < text.size(); i += 4) {
    int v[4];
    int pad = 0;
    for (int k = 0; k < 4; ++k) {
      const char c = text[i + k];
      if (c == '=' && i + 4 == text.size() && k >= 2) {
        v[k] = 0;
        ++pad;
      } else {
        if (pad) throw std::invalid_argument("base64 padding in the middle of a quantum");
        v[k] = value(c);
        if (v[k] < 0) throw std::invalid_argument("invalid base64 character");
      }
    }
    const std::uint32_t n = (v[0] << 18) | (v[1] << 12) | (v[2] << 6) | v[3];
    out.push_back(static_cast<std::uint8_t>(n >> 16));
    if (pad < 2) out.push_back(static_cast<std::uint8_t>((n >> 8) & 0xff));
    if (pad < 1) out.push_back(static_cast<std::uint8_t>(n & 0xff));
  }
  return out;
}

namespace {

std::string encode_image(const Image& image) {
  std::vector<std::uint8_t> bytes;
  bytes.reserve(static_cast<std::size_t>(image.size()) * 4);
  for (Index r = 0; r < image.rows(); ++r) {
    for (Index c = 0; c < image.cols(); ++c) {
      const auto bits = std::bit_cast<std::uint32_t>(image(r, c));
      for (int k = 0; k < 4; ++k) bytes.push_back(static_cast<std::uint8_t>(bits >> (8 * k)));
    }
  }
  return encode_base64(bytes);
}

Image decode_image(const std::string& data, int height, int width) {
  const auto bytes = decode_base64(data);
  if (height < 0 || width < 0 || bytes.size() != static_cast<std::size_t>(height) * width * 4) {
    throw std::invalid_argument("image data holds " + std::to_string(bytes.size()) + " bytes, expected " +
                                std::to_string(std::size_t(height) * width * 4));
  }
  Image image(height, width);
  std::size_t k = 0;
  for (Index r = 0; r < height; ++r) {
    for (Index c = 0; c < width; ++c, k += 4) {
      const std::uint32_t bits = bytes[k] | (bytes[k + 1] << 8) | (bytes[k + 2] << 16) |
                                 (std::uint32_t(bytes[k + 3]) << 24);
      image(r, c) = std::bit_cast<float>(bits);
    }
  }
  return image;
}

json to_json(const SyntheticDocument& doc) {
  json blocks = json::array();
  for (const auto& b : doc.blocks) {
    blocks.push_back({{"tokens", b.tokens},
                      {"box", {b.box.x0, b.box.y0, b.box.x1, b.box.y1}},
                      {"entity_role", role_name(b.role)}});
  }
  return {{"doc_id", doc.doc_id},
          {"doc_class", doc.doc_class},
          {"blocks", std::move(blocks)},
          {"image", {{"height", doc.image.rows()}, {"width", doc.image.cols()}, {"data", encode_image(doc.image)}}}};
}

SyntheticDocument from_json(const json& j) {
  SyntheticDocument doc;
  doc.doc_id = j.at("doc_id").get<std::string>();
  doc.doc_class = j.at("doc_class").get<int>();
  for (const auto& jb : j.at("blocks")) {
    TextBlock b;
    b.tokens = jb.at("tokens").get<std::vector<int>>();
    const auto box = jb.at("box").get<std::vector<int>>();
    if (box.size() != 4) throw std::invalid_argument("box must have 4 coordinates");
    b.box = {box[0], box[1], box[2], box[3]};
    b.role = role_from_name(jb.at("entity_role").get<std::string>());
    doc.blocks.push_back(std::move(b));
  }
  const auto& img = j.at("image");
  doc.image = decode_image(img.at("data").get<std::string>(), img.at("height").get<int>(), img.at("width").get<int>());
  return doc;
}

}  // namespace

void save_corpus(const std::vector<SyntheticDocument>& corpus, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << kCorpusHeader << '\n';
  for (const auto& doc : corpus) out << to_json(doc).dump() << '\n';
  if (!out) throw std::runtime_error("write to " + path.string() + " failed");
}

std::vector<SyntheticDocument> load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kCorpusHeader) {
    throw ParseError(1, "missing corpus header '" + std::string(kCorpusHeader) + "'");
  }
  std::vector<SyntheticDocument> corpus;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    SyntheticDocument doc;
    try {
      doc = from_json(json::parse(line));
    } catch (const ValidationError& e) {
      throw ValidationError("line " + std::to_string(line_no) + ": " + e.what());
    } catch (const std::exception& e) {
      throw ParseError(line_no, e.what());
    }
    try {
      validate_document(doc);
    } catch (const ValidationError& e) {
      throw ValidationError("line " + std::to_string(line_no) + ": " + e.what());
    }
    corpus.push_back(std::move(doc));
  }
  return corpus;
}

}  // namespace bivl
