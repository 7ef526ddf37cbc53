#include "bivl/train.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cstdio>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>

namespace bivl {

using nlohmann::json;

// ---------------------------------------------------------------------------
// configuration of a run

void TrainConfig::validate() const {
  if (!(learning_rate >= 0) || !std::isfinite(learning_rate)) throw ValidationError("learning rate must be >= 0");
  if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
  if (epochs < 1) throw ValidationError("epochs must be >= 1");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ValidationError("Adam betas must be in [0, 1)");
  if (!(adam_eps > 0)) throw ValidationError("Adam eps must be positive");
  if (!(warmup_fraction >= 0 && warmup_fraction < 1)) throw ValidationError("warmup fraction must be in [0, 1)");
  if (precision != 32 && precision != 64) throw ValidationError("precision must be 32 or 64");
  if (max_steps < 0) throw ValidationError("max_steps must be >= 0");
  if (!is_ablation_row(tasks)) {
    throw ValidationError("task flags with the hybrid cross branches off must disable every auxiliary task");
  }
}

Index TrainConfig::steps_per_epoch(std::size_t num_docs) const {
  return (static_cast<Index>(num_docs) + batch_size - 1) / batch_size;
}

Index TrainConfig::total_steps(std::size_t num_docs) const { return steps_per_epoch(num_docs) * epochs; }

Index TrainConfig::warmup_steps(std::size_t num_docs) const {
  return static_cast<Index>(std::floor(warmup_fraction * double(total_steps(num_docs))));
}

const std::vector<AblationRow>& ablation_rows() {
  static const std::vector<AblationRow> rows{
      {"1", {false, false, false, false}}, {"2", {true, false, false, false}},
      {"3a", {true, true, false, false}},  {"3b", {true, false, true, false}},
      {"3c", {true, false, false, true}},  {"3d", {true, true, true, false}},
      {"3e", {true, true, false, true}},   {"3f", {true, false, true, true}},
      {"4", {true, true, true, true}},
  };
  return rows;
}

bool is_ablation_row(const TaskFlags& flags) { return flags.bvlha || (!flags.btia && !flags.rwtp && !flags.tipa); }

double learning_rate_at(Index step, Index total, Index warmup, double base) {
  if (step >= total) return 0.0;
  if (step < warmup) return base * double(step + 1) / double(warmup + 1);
  return base * double(total - step) / double(total - warmup);
}

// ---------------------------------------------------------------------------
// Adam

template <typename Scalar>
Adam<Scalar>::Adam(const ParameterSet<Scalar>& params, double beta1, double beta2, double eps)
    : beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params.all()) {
    state_.m.push_back(Vec<Scalar>::Zero(p.tensor.numel()));
    state_.v.push_back(Vec<Scalar>::Zero(p.tensor.numel()));
  }
}

template <typename Scalar>
void Adam<Scalar>::set_state(AdamState<Scalar> s) {
  if (s.m.size() != state_.m.size() || s.v.size() != state_.v.size()) {
    throw ManifestMismatchError("optimizer state does not match the parameter list");
  }
  for (std::size_t i = 0; i < s.m.size(); ++i) {
    if (s.m[i].size() != state_.m[i].size() || s.v[i].size() != state_.v[i].size()) {
      throw ManifestMismatchError("optimizer moment " + std::to_string(i) + " has the wrong size");
    }
  }
  state_ = std::move(s);
}

template <typename Scalar>
void Adam<Scalar>::step(ParameterSet<Scalar>& params, double lr) {
  ++state_.t;
  const double c1 = 1.0 - std::pow(beta1_, double(state_.t));
  const double c2 = 1.0 - std::pow(beta2_, double(state_.t));
  const auto b1 = static_cast<Scalar>(beta1_), b2 = static_cast<Scalar>(beta2_);
  const auto step_size = static_cast<Scalar>(lr / c1);
  const auto root_c2 = static_cast<Scalar>(std::sqrt(c2));
  const auto eps = static_cast<Scalar>(eps_);
  const auto& all = params.all();
  for (std::size_t i = 0; i < all.size(); ++i) {
    Tensor<Scalar> t = all[i].tensor;
    if (!t.has_grad()) continue;
    const Vec<Scalar>& g = t.grad();
    auto& m = state_.m[i];
    auto& v = state_.v[i];
    m = b1 * m + (Scalar(1) - b1) * g;
    v = b2 * v + (Scalar(1) - b2) * g.square();
    if (lr == 0.0) continue;
    t.data_mut() -= step_size * m / (v.sqrt() / root_c2 + eps);
  }
}

// ---------------------------------------------------------------------------
// training loop

std::mt19937_64 document_rng(std::uint64_t seed, Index epoch, std::size_t doc) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(doc), 0x646f63u};
  return std::mt19937_64(seq);
}

namespace {

std::mt19937_64 order_rng(std::uint64_t seed, Index epoch) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), 0x6f7264u};
  return std::mt19937_64(seq);
}

}  // namespace

template <typename Scalar>
TrainLoop<Scalar>::TrainLoop(BivlModel<Scalar>& model, std::size_t num_docs, const TrainConfig& cfg,
                             DocLossFn<Scalar> loss)
    : model_(model),
      num_docs_(num_docs),
      cfg_(cfg),
      loss_(std::move(loss)),
      adam_(model.params(), cfg.beta1, cfg.beta2, cfg.adam_eps) {
  cfg_.validate();
  if (num_docs == 0) throw TrainingError("training corpus is empty");
  per_epoch_ = cfg_.steps_per_epoch(num_docs);
  total_ = cfg_.total_steps(num_docs);
  warmup_ = cfg_.warmup_steps(num_docs);
}

template <typename Scalar>
bool TrainLoop<Scalar>::done() const {
  return step_ >= total_ || (cfg_.max_steps > 0 && step_ >= cfg_.max_steps);
}

template <typename Scalar>
std::vector<std::size_t> TrainLoop<Scalar>::epoch_order(Index epoch) const {
  std::vector<std::size_t> order(num_docs_);
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto rng = order_rng(cfg_.seed, epoch);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

template <typename Scalar>
void TrainLoop<Scalar>::resume(Index step, AdamState<Scalar> state) {
  if (step < 0 || step > total_) throw TrainingError("resume step outside the schedule");
  adam_.set_state(std::move(state));
  step_ = step;
}

template <typename Scalar>
StepRecord TrainLoop<Scalar>::step() {
  if (done()) throw TrainingError("training schedule already finished");
  StepRecord rec;
  rec.step = step_;
  rec.epoch = step_ / per_epoch_;
  rec.learning_rate = learning_rate_at(step_, total_, warmup_, cfg_.learning_rate);

  const auto order = epoch_order(rec.epoch);
  const auto first = static_cast<std::size_t>((step_ % per_epoch_) * cfg_.batch_size);
  const auto last = std::min(order.size(), first + static_cast<std::size_t>(cfg_.batch_size));

  model_.params().zero_grad();
  Tensor<Scalar> total;
  std::map<std::string, double> sums;
  for (std::size_t k = first; k < last; ++k) {
    auto rng = document_rng(cfg_.seed, rec.epoch, order[k]);
    DocLoss<Scalar> doc = loss_(order[k], rec.epoch, rng);
    total = total.defined() ? add(total, doc.total) : doc.total;
    for (const auto& [name, value] : doc.parts) sums[name] += value;
  }
  const double count = double(last - first);
  Tensor<Scalar> loss = scale(total, static_cast<Scalar>(1.0 / count));
  rec.loss = static_cast<double>(loss.item());
  for (const auto& [name, value] : sums) rec.tasks[name] = value / count;
  if (!std::isfinite(rec.loss)) {
    throw TrainingError("non-finite loss at step " + std::to_string(step_) + " (epoch " + std::to_string(rec.epoch) +
                        ")");
  }
  loss.backward();
  adam_.step(model_.params(), rec.learning_rate);
  ++step_;
  return rec;
}

template <typename Scalar>
std::vector<StepRecord> TrainLoop<Scalar>::run(const std::function<void(const StepRecord&)>& on_step) {
  std::vector<StepRecord> trace;
  while (!done()) {
    trace.push_back(step());
    if (on_step) on_step(trace.back());
  }
  return trace;
}

PreparedCorpus::PreparedCorpus(std::span<const SyntheticDocument> d, const ModelConfig& cfg) : docs(d) {
  tokenized.reserve(d.size());
  for (const auto& doc : d) tokenized.push_back(tokenize(doc, cfg.max_len, cfg.grid));
}

namespace {

constexpr double kAbsent = std::numeric_limits<double>::quiet_NaN();

template <typename Scalar>
void record(std::map<std::string, double>& parts, const char* name, const std::optional<Tensor<Scalar>>& loss) {
  parts[name] = loss ? static_cast<double>(loss->item()) : kAbsent;
}

}  // namespace

template <typename Scalar>
DocLossFn<Scalar> pretrain_objective(const BivlModel<Scalar>& model, const PreparedCorpus& corpus,
                                     const TrainConfig& cfg) {
  if (model.config().encoder.bvlha != cfg.tasks.bvlha) {
    throw ValidationError("model hybrid-attention setting disagrees with the task flags");
  }
  return [&model, &corpus, cfg](std::size_t i, Index, std::mt19937_64& rng) {
    const auto& doc = corpus.docs[i];
    const auto& td = corpus.tokenized[i];
    const PretrainPlan plan = make_pretrain_plan(doc, td, model.config().vocab, cfg.coverage, rng);
    const PretrainLosses<Scalar> losses = pretrain_losses(model, doc, td, plan, cfg.tasks, &rng);
    DocLoss<Scalar> out{total_pretrain_loss(losses, cfg.weights), {}};
    record(out.parts, "mvlm", losses.mvlm);
    record(out.parts, "tipa", losses.tipa);
    record(out.parts, "rwtp", losses.rwtp);
    record(out.parts, "btia", losses.btia);
    return out;
  };
}

std::string_view finetune_task_name(FinetuneTask task) {
  return task == FinetuneTask::SequenceLabeling ? "seqlabel" : "classify";
}

FinetuneTask finetune_task_from_name(std::string_view name) {
  if (name == "seqlabel") return FinetuneTask::SequenceLabeling;
  if (name == "classify") return FinetuneTask::Classification;
  throw ValidationError("unknown task '" + std::string(name) + "' (expected seqlabel or classify)");
}

template <typename Scalar>
DocLossFn<Scalar> finetune_objective(const BivlModel<Scalar>& model, const PreparedCorpus& corpus,
                                     FinetuneTask task) {
  return [&model, &corpus, task](std::size_t i, Index, std::mt19937_64& rng) {
    const auto& doc = corpus.docs[i];
    const auto& td = corpus.tokenized[i];
    const auto out = model.encode(td, patch_tensor<Scalar>(doc.image, model.config()), false, &rng);
    DocLoss<Scalar> result;
    if (task == FinetuneTask::SequenceLabeling) {
      result.total = cross_entropy_from_logits<Scalar>(model.seqlabel_logits(out), bio_labels(td, doc));
    } else {
      const std::vector<Index> target{doc.doc_class};
      result.total = cross_entropy_from_logits<Scalar>(model.classify_logits(out), target);
    }
    result.parts[std::string(finetune_task_name(task))] = static_cast<double>(result.total.item());
    return result;
  };
}

// ---------------------------------------------------------------------------
// metrics

PrfCounts token_counts(std::span<const Index> gold, std::span<const Index> pred) {
  if (gold.size() != pred.size()) throw DimensionError("gold and predicted label sequences differ in length");
  PrfCounts c;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    if (gold[i] == kIgnoreIndex) continue;
    if (pred[i] == gold[i]) {
      if (gold[i] != 0) ++c.tp;
      continue;
    }
    if (pred[i] != 0) ++c.fp;
    if (gold[i] != 0) ++c.fn;
  }
  return c;
}

std::vector<Span> bio_spans(std::span<const Index> labels) {
  std::vector<Span> spans;
  std::optional<Span> open;
  auto close = [&](Index at) {
    if (open) {
      open->end = at;
      spans.push_back(*open);
      open.reset();
    }
  };
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const Index l = labels[i];
    const auto at = static_cast<Index>(i);
    if (l <= 0) {
      close(at);
      continue;
    }
    const int type = static_cast<int>((l - 1) / 2);
    const bool begin = (l - 1) % 2 == 0;
    if (begin || !open || open->type != type) {
      close(at);
      open = Span{type, at, at};
    }
  }
  close(static_cast<Index>(labels.size()));
  return spans;
}

PrfCounts entity_counts(std::span<const Index> gold, std::span<const Index> pred) {
  if (gold.size() != pred.size()) throw DimensionError("gold and predicted label sequences differ in length");
  // Ignored positions are dropped from both sequences.
  std::vector<Index> g, p;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    if (gold[i] == kIgnoreIndex) continue;
    g.push_back(gold[i]);
    p.push_back(pred[i]);
  }
  auto gs = bio_spans(g);
  auto ps = bio_spans(p);
  std::sort(gs.begin(), gs.end());
  std::sort(ps.begin(), ps.end());
  std::vector<Span> common;
  std::set_intersection(gs.begin(), gs.end(), ps.begin(), ps.end(), std::back_inserter(common));
  PrfCounts c;
  c.tp = static_cast<Index>(common.size());
  c.fp = static_cast<Index>(ps.size()) - c.tp;
  c.fn = static_cast<Index>(gs.size()) - c.tp;
  return c;
}

namespace {

template <typename Scalar>
std::vector<Index> row_argmax(const Tensor<Scalar>& logits) {
  const auto m = logits.matrix();
  std::vector<Index> out(static_cast<std::size_t>(m.rows()));
  for (Index r = 0; r < m.rows(); ++r) m.row(r).maxCoeff(&out[static_cast<std::size_t>(r)]);
  return out;
}

BoxF box_row(const RowMatrix<double>& boxes, Index r) {
  return {boxes(r, 0), boxes(r, 1), boxes(r, 2), boxes(r, 3)};
}

}  // namespace

template <typename Scalar>
Metrics evaluate_sequence_labeling(const BivlModel<Scalar>& model, const PreparedCorpus& corpus) {
  PrfCounts tokens, entities;
  Index correct = 0, total = 0;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto& doc = corpus.docs[i];
    const auto& td = corpus.tokenized[i];
    const auto out = model.encode(td, patch_tensor<Scalar>(doc.image, model.config()));
    const auto gold = bio_labels(td, doc);
    const auto pred = row_argmax(model.seqlabel_logits(out));
    const PrfCounts t = token_counts(gold, pred);
    const PrfCounts e = entity_counts(gold, pred);
    tokens.tp += t.tp, tokens.fp += t.fp, tokens.fn += t.fn;
    entities.tp += e.tp, entities.fp += e.fp, entities.fn += e.fn;
    for (std::size_t j = 0; j < gold.size(); ++j) {
      if (gold[j] == kIgnoreIndex) continue;
      ++total;
      correct += gold[j] == pred[j];
    }
  }
  return {{"token_f1", tokens.f1()},
          {"entity_f1", entities.f1()},
          {"token_accuracy", total ? double(correct) / double(total) : 1.0}};
}

template <typename Scalar>
Metrics evaluate_classification(const BivlModel<Scalar>& model, const PreparedCorpus& corpus) {
  Index correct = 0;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto& doc = corpus.docs[i];
    const auto out = model.encode(corpus.tokenized[i], patch_tensor<Scalar>(doc.image, model.config()));
    correct += row_argmax(model.classify_logits(out))[0] == doc.doc_class;
  }
  return {{"accuracy", corpus.size() ? double(correct) / double(corpus.size()) : 1.0}};
}

template <typename Scalar>
Metrics evaluate_pretraining(const BivlModel<Scalar>& model, const PreparedCorpus& corpus, const TrainConfig& cfg) {
  // Position masking is always applied so the box metric is measured on blocks the model cannot see.
  TaskFlags flags = cfg.tasks;
  flags.tipa = true;
  flags.rwtp = true;
  Index masked = 0, masked_correct = 0, boxes = 0;
  double iou_sum = 0;
  std::map<std::string, double> loss_sums;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto& doc = corpus.docs[i];
    const auto& td = corpus.tokenized[i];
    auto rng = document_rng(cfg.seed, -1, i);
    const PretrainPlan plan = make_pretrain_plan(doc, td, model.config().vocab, cfg.coverage, rng);
    TokenizedDoc input = apply_tipa(td, plan.tipa);
    input.token_ids = plan.mvlm.corrupted_ids;
    const Image& image = flags.btia ? plan.btia.covered_image : doc.image;
    const auto out = model.encode(input, patch_tensor<Scalar>(image, model.config()));
    const auto& heads = model.heads();

    const auto logits = mvlm_logits(out.hybrid, out.num_visual, plan.mvlm.positions, heads, model.tables().word);
    const auto predicted = row_argmax(logits);
    for (std::size_t k = 0; k < predicted.size(); ++k) masked_correct += predicted[k] == plan.mvlm.targets[k];
    masked += static_cast<Index>(predicted.size());
    loss_sums["mvlm_loss"] += static_cast<double>(cross_entropy_from_logits<Scalar>(logits, plan.mvlm.targets).item());

    const auto pred_boxes = tipa_predict(out.hybrid, out.num_visual, td, plan.tipa.masked_blocks, heads);
    const RowMatrix<double> pb = pred_boxes.matrix().template cast<double>();
    for (Index b = 0; b < pb.rows(); ++b) iou_sum += iou(box_row(pb, b), plan.tipa.gt_boxes[static_cast<std::size_t>(b)]);
    boxes += pb.rows();
    loss_sums["tipa_loss"] += static_cast<double>(diou_loss(pred_boxes, plan.tipa.gt_boxes).item());
    loss_sums["rwtp_loss"] +=
        static_cast<double>(rwtp_loss(rwtp_probabilities(out.hybrid, out.num_visual, heads), plan.rwtp).item());
    loss_sums["btia_loss"] += static_cast<double>(btia_loss(btia_probabilities(out.hybrid, heads), plan.btia).item());
  }
  Metrics m;
  m["masked_token_accuracy"] = masked ? double(masked_correct) / double(masked) : 0.0;
  m["tipa_miou"] = boxes ? iou_sum / double(boxes) : 0.0;
  for (const auto& [name, sum] : loss_sums) m[name] = sum / double(corpus.size());
  return m;
}

// ---------------------------------------------------------------------------
// json

json to_json(const ModelConfig& c) {
  return {{"vocab", c.vocab},
          {"max_len", c.max_len},
          {"grid", c.grid},
          {"pool", c.pool},
          {"layers", c.encoder.layers},
          {"heads", c.encoder.heads},
          {"d", c.encoder.d},
          {"d_ff", c.encoder.d_ff},
          {"dropout", c.encoder.dropout},
          {"bvlha", c.encoder.bvlha},
          {"literal_eq_masking", c.encoder.literal_eq_masking},
          {"hybrid_residual", c.encoder.hybrid_residual},
          {"tipa_hidden", c.tipa_hidden},
          {"rwtp_hidden", c.rwtp_hidden},
          {"num_classes", c.num_classes},
          {"init_scale", c.init_scale},
          {"seed", c.seed}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  c.vocab = j.at("vocab");
  c.max_len = j.at("max_len");
  c.grid = j.at("grid");
  c.pool = j.at("pool");
  c.encoder.layers = j.at("layers");
  c.encoder.heads = j.at("heads");
  c.encoder.d = j.at("d");
  c.encoder.d_ff = j.at("d_ff");
  c.encoder.dropout = j.at("dropout");
  c.encoder.bvlha = j.at("bvlha");
  c.encoder.literal_eq_masking = j.at("literal_eq_masking");
  c.encoder.hybrid_residual = j.at("hybrid_residual");
  c.tipa_hidden = j.at("tipa_hidden");
  c.rwtp_hidden = j.at("rwtp_hidden");
  c.num_classes = j.at("num_classes");
  c.init_scale = j.at("init_scale");
  c.seed = j.at("seed");
  return c;
}

json to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"adam_eps", c.adam_eps},
          {"warmup_fraction", c.warmup_fraction},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"seed", c.seed},
          {"weights", {{"mvlm", c.weights.mvlm}, {"tipa", c.weights.tipa}, {"rwtp", c.weights.rwtp}, {"btia", c.weights.btia}}},
          {"tasks", {{"bvlha", c.tasks.bvlha}, {"btia", c.tasks.btia}, {"rwtp", c.tasks.rwtp}, {"tipa", c.tasks.tipa}}},
          {"coverage_mode", coverage_mode_name(c.coverage)},
          {"precision", c.precision},
          {"max_steps", c.max_steps}};
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  c.learning_rate = j.at("learning_rate");
  c.beta1 = j.at("beta1");
  c.beta2 = j.at("beta2");
  c.adam_eps = j.at("adam_eps");
  c.warmup_fraction = j.at("warmup_fraction");
  c.batch_size = j.at("batch_size");
  c.epochs = j.at("epochs");
  c.seed = j.at("seed");
  const auto& w = j.at("weights");
  c.weights = {w.at("mvlm"), w.at("tipa"), w.at("rwtp"), w.at("btia")};
  const auto& t = j.at("tasks");
  c.tasks = {t.at("bvlha"), t.at("btia"), t.at("rwtp"), t.at("tipa")};
  c.coverage = coverage_mode_from_name(j.at("coverage_mode").get<std::string>());
  c.precision = j.at("precision");
  c.max_steps = j.at("max_steps");
  return c;
}

json to_json(const StepRecord& r) {
  json j = {{"step", r.step}, {"epoch", r.epoch}, {"lr", r.learning_rate}, {"loss", r.loss}};
  for (const auto& [name, value] : r.tasks) j[name] = std::isfinite(value) ? json(value) : json(nullptr);
  return j;
}

// ---------------------------------------------------------------------------
// checkpoints

namespace {

template <typename Scalar>
constexpr std::string_view dtype_name() {
  return sizeof(Scalar) == 4 ? "float32" : "float64";
}

template <typename Scalar>
using Bits = std::conditional_t<sizeof(Scalar) == 4, std::uint32_t, std::uint64_t>;

template <typename Scalar>
void append_le(std::string& blob, const Vec<Scalar>& values) {
  for (Index i = 0; i < values.size(); ++i) {
    auto bits = std::bit_cast<Bits<Scalar>>(values[i]);
    for (std::size_t b = 0; b < sizeof(Scalar); ++b) {
      blob.push_back(static_cast<char>(bits & 0xffu));
      bits >>= 8;
    }
  }
}

template <typename Scalar>
void read_le(const std::string& blob, std::size_t offset, Vec<Scalar>& values) {
  for (Index i = 0; i < values.size(); ++i) {
    Bits<Scalar> bits = 0;
    for (std::size_t b = 0; b < sizeof(Scalar); ++b) {
      const auto byte = static_cast<unsigned char>(blob[offset + static_cast<std::size_t>(i) * sizeof(Scalar) + b]);
      bits |= Bits<Scalar>(byte) << (8 * b);
    }
    values[i] = std::bit_cast<Scalar>(bits);
  }
}

json meta_json(const CheckpointMeta& meta) {
  return {{"phase", meta.phase}, {"step", meta.step}, {"model", to_json(meta.model)}, {"train", to_json(meta.train)}};
}

struct RawCheckpoint {
  json manifest;
  std::string blob;
};

RawCheckpoint read_raw(const std::filesystem::path& path, bool with_blob) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::string magic, header;
  std::getline(in, magic);
  if (magic != kCheckpointMagic) throw ManifestMismatchError(path.string() + " is not a checkpoint");
  std::getline(in, header);
  RawCheckpoint raw;
  try {
    raw.manifest = json::parse(header);
  } catch (const json::exception& e) {
    throw ManifestMismatchError("unreadable checkpoint manifest: " + std::string(e.what()));
  }
  if (with_blob) raw.blob.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  return raw;
}

CheckpointMeta meta_from_json(const json& j) {
  CheckpointMeta meta;
  meta.phase = j.at("phase");
  meta.step = j.at("step");
  meta.model = model_config_from_json(j.at("model"));
  meta.train = train_config_from_json(j.at("train"));
  return meta;
}

}  // namespace

template <typename Scalar>
void save_checkpoint(const std::filesystem::path& path, const BivlModel<Scalar>& model, const CheckpointMeta& meta,
                     const AdamState<Scalar>* adam) {
  std::string blob;
  json tensors = json::array();
  auto add_tensor = [&](const std::string& name, const Shape& shape, const Vec<Scalar>& values) {
    tensors.push_back({{"name", name}, {"shape", shape}, {"offset", blob.size()}, {"count", values.size()}});
    append_le(blob, values);
  };
  const auto& params = model.params().all();
  for (const auto& p : params) add_tensor(p.name, p.tensor.shape(), p.tensor.data());
  if (adam) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      add_tensor("adam.m/" + params[i].name, params[i].tensor.shape(), adam->m[i]);
      add_tensor("adam.v/" + params[i].name, params[i].tensor.shape(), adam->v[i]);
    }
  }
  json manifest = meta_json(meta);
  manifest["dtype"] = dtype_name<Scalar>();
  manifest["tensors"] = std::move(tensors);
  manifest["blob_bytes"] = blob.size();
  if (adam) manifest["adam_t"] = adam->t;

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << kCheckpointMagic << '\n' << manifest.dump() << '\n';
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
}

CheckpointHeader read_checkpoint_header(const std::filesystem::path& path) {
  const RawCheckpoint raw = read_raw(path, false);
  try {
    return {meta_from_json(raw.manifest), raw.manifest.at("dtype").get<std::string>()};
  } catch (const json::exception& e) {
    throw ManifestMismatchError("incomplete checkpoint manifest: " + std::string(e.what()));
  }
}

template <typename Scalar>
LoadedCheckpoint<Scalar> load_checkpoint(const std::filesystem::path& path) {
  const RawCheckpoint raw = read_raw(path, true);
  const json& man = raw.manifest;
  LoadedCheckpoint<Scalar> loaded;
  std::vector<json> tensors;
  std::size_t blob_bytes = 0;
  try {
    if (man.at("dtype").get<std::string>() != dtype_name<Scalar>()) {
      throw ManifestMismatchError("checkpoint holds " + man.at("dtype").get<std::string>() + " values, expected " +
                                  std::string(dtype_name<Scalar>()));
    }
    loaded.meta = meta_from_json(man);
    tensors = man.at("tensors").get<std::vector<json>>();
    blob_bytes = man.at("blob_bytes");
  } catch (const json::exception& e) {
    throw ManifestMismatchError("incomplete checkpoint manifest: " + std::string(e.what()));
  }
  if (raw.blob.size() != blob_bytes) {
    throw ManifestMismatchError("checkpoint blob has " + std::to_string(raw.blob.size()) + " bytes, manifest declares " +
                                std::to_string(blob_bytes));
  }

  loaded.model = std::make_unique<BivlModel<Scalar>>(loaded.meta.model);
  const auto& params = loaded.model->params().all();
  const bool has_adam = man.contains("adam_t");
  const std::size_t expected = params.size() * (has_adam ? 3 : 1);
  if (tensors.size() != expected) {
    throw ManifestMismatchError("manifest lists " + std::to_string(tensors.size()) + " tensors, model needs " +
                                std::to_string(expected));
  }
  auto fill = [&](const json& entry, const std::string& name, const Shape& shape, Vec<Scalar>& values) {
    if (entry.at("name").get<std::string>() != name || entry.at("shape").get<Shape>() != shape) {
      throw ManifestMismatchError("manifest entry " + entry.at("name").get<std::string>() + " does not match " +
                                  name + " " + shape_string(shape));
    }
    const std::size_t offset = entry.at("offset");
    const std::size_t count = entry.at("count");
    if (count != static_cast<std::size_t>(values.size()) || offset + count * sizeof(Scalar) > raw.blob.size()) {
      throw ManifestMismatchError("tensor " + name + " lies outside the blob");
    }
    read_le(raw.blob, offset, values);
  };
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<Scalar> t = params[i].tensor;
    fill(tensors[i], params[i].name, t.shape(), t.data_mut());
  }
  if (has_adam) {
    AdamState<Scalar> state;
    state.t = man.at("adam_t");
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& p = params[i];
      state.m.push_back(Vec<Scalar>(p.tensor.numel()));
      state.v.push_back(Vec<Scalar>(p.tensor.numel()));
      fill(tensors[params.size() + 2 * i], "adam.m/" + p.name, p.tensor.shape(), state.m.back());
      fill(tensors[params.size() + 2 * i + 1], "adam.v/" + p.name, p.tensor.shape(), state.v.back());
    }
    loaded.adam = std::move(state);
  }
  return loaded;
}

// ---------------------------------------------------------------------------
// key=value configuration

std::map<std::string, std::string> parse_config_text(std::string_view text) {
  std::map<std::string, std::string> out;
  std::size_t line_no = 0;
  auto trim = [](std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return std::string_view{};
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
  };
  while (!text.empty()) {
    ++line_no;
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ParseError(line_no, "expected key=value");
    const auto key = trim(line.substr(0, eq));
    if (key.empty()) throw ParseError(line_no, "empty key");
    out[std::string(key)] = std::string(trim(line.substr(eq + 1)));
  }
  return out;
}

std::map<std::string, std::string> read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

namespace {

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const char* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end) throw ValidationError("bad value '" + value + "' for " + key);
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "on") return true;
  if (value == "false" || value == "0" || value == "off") return false;
  throw ValidationError("bad boolean '" + value + "' for " + key);
}

}  // namespace

void RunConfig::apply(const std::string& key, const std::string& value) {
  auto integer = [&] { return parse_number<long long>(key, value); };
  auto real = [&] { return parse_number<double>(key, value); };
  auto both = [&](auto setter) {
    setter(pretrain);
    setter(finetune);
  };

  if (key == "seed") {
    const auto s = parse_number<std::uint64_t>(key, value);
    corpus.seed = s;
    model.seed = s;
    both([&](TrainConfig& t) { t.seed = s; });
  } else if (key == "corpus-seed") {
    corpus.seed = parse_number<std::uint64_t>(key, value);
  } else if (key == "num-docs") {
    corpus.num_docs = static_cast<int>(integer());
  } else if (key == "vocab") {
    corpus.vocab_size = static_cast<int>(integer());
    model.vocab = corpus.vocab_size;
  } else if (key == "min-blocks") {
    corpus.min_blocks = static_cast<int>(integer());
  } else if (key == "max-blocks") {
    corpus.max_blocks = static_cast<int>(integer());
  } else if (key == "min-tokens") {
    corpus.min_tokens = static_cast<int>(integer());
  } else if (key == "max-tokens") {
    corpus.max_tokens = static_cast<int>(integer());
  } else if (key == "image-size") {
    corpus.image_height = corpus.image_width = static_cast<int>(integer());
  } else if (key == "num-classes") {
    corpus.num_classes = static_cast<int>(integer());
    model.num_classes = corpus.num_classes;
  } else if (key == "max-len") {
    model.max_len = integer();
  } else if (key == "grid") {
    model.grid = static_cast<int>(integer());
  } else if (key == "pool") {
    model.pool = static_cast<int>(integer());
  } else if (key == "layers") {
    model.encoder.layers = static_cast<int>(integer());
  } else if (key == "heads") {
    model.encoder.heads = static_cast<int>(integer());
  } else if (key == "d") {
    model.encoder.d = integer();
  } else if (key == "d-ff") {
    model.encoder.d_ff = integer();
  } else if (key == "dropout") {
    model.encoder.dropout = real();
  } else if (key == "tipa-hidden") {
    model.tipa_hidden = integer();
  } else if (key == "rwtp-hidden") {
    model.rwtp_hidden = integer();
  } else if (key == "init-scale") {
    model.init_scale = real();
  } else if (key == "literal-eq-masking") {
    model.encoder.literal_eq_masking = parse_bool(key, value);
  } else if (key == "hybrid-residual") {
    model.encoder.hybrid_residual = parse_bool(key, value);
  } else if (key == "bvlha") {
    const bool on = parse_bool(key, value);
    model.encoder.bvlha = on;
    both([&](TrainConfig& t) { t.tasks.bvlha = on; });
  } else if (key == "btia") {
    pretrain.tasks.btia = parse_bool(key, value);
  } else if (key == "rwtp") {
    pretrain.tasks.rwtp = parse_bool(key, value);
  } else if (key == "tipa") {
    pretrain.tasks.tipa = parse_bool(key, value);
  } else if (key == "mvlm-weight") {
    pretrain.weights.mvlm = real();
  } else if (key == "tipa-weight") {
    pretrain.weights.tipa = real();
  } else if (key == "rwtp-weight") {
    pretrain.weights.rwtp = real();
  } else if (key == "btia-weight") {
    pretrain.weights.btia = real();
  } else if (key == "coverage-mode") {
    const auto mode = coverage_mode_from_name(value);
    both([&](TrainConfig& t) { t.coverage = mode; });
  } else if (key == "precision") {
    const auto p = static_cast<int>(integer());
    both([&](TrainConfig& t) { t.precision = p; });
  } else if (key == "lr") {
    pretrain.learning_rate = real();
  } else if (key == "batch-size") {
    pretrain.batch_size = static_cast<int>(integer());
  } else if (key == "epochs") {
    pretrain.epochs = static_cast<int>(integer());
  } else if (key == "warmup-fraction") {
    const double w = real();
    both([&](TrainConfig& t) { t.warmup_fraction = w; });
  } else if (key == "max-steps") {
    pretrain.max_steps = integer();
  } else if (key == "finetune-lr") {
    finetune.learning_rate = real();
  } else if (key == "finetune-batch-size") {
    finetune.batch_size = static_cast<int>(integer());
  } else if (key == "finetune-epochs") {
    finetune.epochs = static_cast<int>(integer());
  } else if (key == "finetune-max-steps") {
    finetune.max_steps = integer();
  } else if (key == "finetune-docs") {
    finetune_docs = static_cast<int>(integer());
  } else if (key == "eval-fraction") {
    eval_fraction = real();
  } else {
    throw ValidationError("unknown config key '" + key + "'");
  }
}

void RunConfig::apply(const std::map<std::string, std::string>& settings) {
  for (const auto& [k, v] : settings) apply(k, v);
}

// ---------------------------------------------------------------------------
// ablation

template <typename Scalar>
std::vector<AblationResult> run_ablation(std::span<const SyntheticDocument> train,
                                         std::span<const SyntheticDocument> held_out, const RunConfig& cfg,
                                         const std::vector<AblationRow>& rows) {
  std::vector<AblationResult> results;
  for (const auto& row : rows) {
    ModelConfig mc = cfg.model;
    mc.encoder.bvlha = row.flags.bvlha;
    BivlModel<Scalar> model(mc);

    TrainConfig pre = cfg.pretrain;
    pre.tasks = row.flags;
    const PreparedCorpus train_corpus(train, mc);
    const PreparedCorpus eval_corpus(held_out, mc);
    TrainLoop<Scalar> loop(model, train_corpus.size(), pre, pretrain_objective(model, train_corpus, pre));
    const auto trace = loop.run();

    AblationResult r{row, {}};
    r.metrics["final_pretrain_loss"] = trace.empty() ? kAbsent : trace.back().loss;
    r.metrics["final_mvlm_loss"] = trace.empty() ? kAbsent : trace.back().tasks.at("mvlm");
    const Metrics pm = evaluate_pretraining(model, eval_corpus, pre);
    r.metrics["masked_token_accuracy"] = pm.at("masked_token_accuracy");
    r.metrics["tipa_miou"] = pm.at("tipa_miou");

    TrainConfig fine = cfg.finetune;
    fine.tasks = TaskFlags{row.flags.bvlha, false, false, false};
    const std::size_t n = cfg.finetune_docs > 0 ? std::min(train.size(), std::size_t(cfg.finetune_docs)) : train.size();
    const PreparedCorpus fine_corpus(train.first(n), mc);
    TrainLoop<Scalar> fine_loop(model, fine_corpus.size(), fine,
                                finetune_objective(model, fine_corpus, FinetuneTask::SequenceLabeling));
    fine_loop.run();
    const Metrics fm = evaluate_sequence_labeling(model, eval_corpus);
    r.metrics["token_f1"] = fm.at("token_f1");
    r.metrics["entity_f1"] = fm.at("entity_f1");
    results.push_back(std::move(r));
  }
  return results;
}

void write_ablation_csv(const std::vector<AblationResult>& results, std::ostream& out) {
  static const std::vector<std::string> columns{"final_pretrain_loss", "final_mvlm_loss", "masked_token_accuracy",
                                                "tipa_miou", "token_f1", "entity_f1"};
  out << "row,bvlha,btia,rwtp,tipa";
  for (const auto& c : columns) out << ',' << c;
  out << '\n';
  auto mark = [](bool on) { return on ? "1" : "0"; };
  for (const auto& r : results) {
    const auto& f = r.row.flags;
    out << r.row.label << ',' << mark(f.bvlha) << ',' << mark(f.btia) << ',' << mark(f.rwtp) << ',' << mark(f.tipa);
    for (const auto& c : columns) {
      char buf[32];
      const auto it = r.metrics.find(c);
      const double v = it == r.metrics.end() ? kAbsent : it->second;
      std::snprintf(buf, sizeof buf, "%.6f", v);
      out << ',' << buf;
    }
    out << '\n';
  }
}

#define BIVL_INSTANTIATE(S)                                                                                   \
  template class Adam<S>;                                                                                     \
  template class TrainLoop<S>;                                                                                \
  template DocLossFn<S> pretrain_objective(const BivlModel<S>&, const PreparedCorpus&, const TrainConfig&);  \
  template DocLossFn<S> finetune_objective(const BivlModel<S>&, const PreparedCorpus&, FinetuneTask);        \
  template Metrics evaluate_sequence_labeling(const BivlModel<S>&, const PreparedCorpus&);                   \
  template Metrics evaluate_classification(const BivlModel<S>&, const PreparedCorpus&);                      \
  template Metrics evaluate_pretraining(const BivlModel<S>&, const PreparedCorpus&, const TrainConfig&);     \
  template void save_checkpoint(const std::filesystem::path&, const BivlModel<S>&, const CheckpointMeta&,     \
                                const AdamState<S>*);                                                         \
  template LoadedCheckpoint<S> load_checkpoint(const std::filesystem::path&);                                 \
  template std::vector<AblationResult> run_ablation<S>(std::span<const SyntheticDocument>,                   \
                                                       std::span<const SyntheticDocument>, const RunConfig&,  \
                                                       const std::vector<AblationRow>&);

BIVL_INSTANTIATE(float)
BIVL_INSTANTIATE(double)

#undef BIVL_INSTANTIATE

}  // namespace bivl
