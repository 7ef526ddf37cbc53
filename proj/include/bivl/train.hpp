#pragma once

// Optimizer, schedules, the pre-training and fine-tuning loops, metrics,
// checkpoints and the ablation runner.

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "bivl/model.hpp"

namespace bivl {

/// Toy-scale defaults, calibrated on the reference corpus.
struct TrainConfig {
  double learning_rate = 1.5e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double warmup_fraction = 0.05;
  int batch_size = 2;
  int epochs = 3;
  std::uint64_t seed = 1;
  /// Box regression gives far smaller gradients than the cross-entropies, so it counts three times.
  TaskWeights weights{.mvlm = 1.0, .tipa = 3.0, .rwtp = 1.0, .btia = 1.0};
  TaskFlags tasks;
  CoverageMode coverage = CoverageMode::Containment;
  int precision = 32;
  /// Stop after this many steps (0 = the whole schedule). The schedule itself still spans every epoch.
  Index max_steps = 0;

  void validate() const;
  Index steps_per_epoch(std::size_t num_docs) const;
  Index total_steps(std::size_t num_docs) const;
  Index warmup_steps(std::size_t num_docs) const;
};

/// The nine configurations of the ablation table: 1, 2, 3a-3f, 4.
struct AblationRow {
  std::string label;
  TaskFlags flags;
};
const std::vector<AblationRow>& ablation_rows();
/// Row 1 (nothing on) or any row with the hybrid cross branches on.
bool is_ablation_row(const TaskFlags& flags);

/// Linear warmup to `base`, then linear decay reaching 0 at `total`.
double learning_rate_at(Index step, Index total, Index warmup, double base);

template <typename Scalar>
struct AdamState {
  Index t = 0;
  std::vector<Vec<Scalar>> m, v;  // per parameter, registration order
};

template <typename Scalar>
class Adam {
 public:
  Adam(const ParameterSet<Scalar>& params, double beta1, double beta2, double eps);

  /// Parameters without a gradient (not reached by the loss) are left alone.
  void step(ParameterSet<Scalar>& params, double lr);

  const AdamState<Scalar>& state() const { return state_; }
  void set_state(AdamState<Scalar> s);

 private:
  double beta1_, beta2_, eps_;
  AdamState<Scalar> state_;
};

/// Batch means of the per-task losses; NaN where a task is off.
struct StepRecord {
  Index step = 0;
  Index epoch = 0;
  double learning_rate = 0;
  double loss = 0;
  std::map<std::string, double> tasks;
};

/// Loss of one document at a given epoch, plus its per-task parts for logging.
template <typename Scalar>
struct DocLoss {
  Tensor<Scalar> total;
  std::map<std::string, double> parts;
};

template <typename Scalar>
using DocLossFn = std::function<DocLoss<Scalar>(std::size_t doc, Index epoch, std::mt19937_64& rng)>;

/// Shuffled mini-batches under Adam + linear decay. One graph per batch; the
/// batch loss is the mean of the document losses.
template <typename Scalar>
class TrainLoop {
 public:
  TrainLoop(BivlModel<Scalar>& model, std::size_t num_docs, const TrainConfig& cfg, DocLossFn<Scalar> loss);

  bool done() const;
  /// Throws TrainingError (naming the step) on a non-finite loss.
  StepRecord step();
  std::vector<StepRecord> run(const std::function<void(const StepRecord&)>& on_step = {});

  Index current_step() const { return step_; }
  Index total_steps() const { return total_; }
  const Adam<Scalar>& optimizer() const { return adam_; }
  /// Restores the position and optimizer moments of an interrupted run.
  void resume(Index step, AdamState<Scalar> state);

  /// Document order of an epoch.
  std::vector<std::size_t> epoch_order(Index epoch) const;

 private:
  BivlModel<Scalar>& model_;
  std::size_t num_docs_;
  TrainConfig cfg_;
  DocLossFn<Scalar> loss_;
  Adam<Scalar> adam_;
  Index step_ = 0;
  Index total_ = 0;
  Index warmup_ = 0;
  Index per_epoch_ = 0;
};

/// RNG of document `doc` at `epoch`, independent of batch order.
std::mt19937_64 document_rng(std::uint64_t seed, Index epoch, std::size_t doc);

/// Corpus tokenized once for a model.
struct PreparedCorpus {
  std::span<const SyntheticDocument> docs;
  std::vector<TokenizedDoc> tokenized;

  PreparedCorpus(std::span<const SyntheticDocument> docs, const ModelConfig& cfg);
  std::size_t size() const { return docs.size(); }
};

template <typename Scalar>
DocLossFn<Scalar> pretrain_objective(const BivlModel<Scalar>& model, const PreparedCorpus& corpus,
                                     const TrainConfig& cfg);

enum class FinetuneTask { SequenceLabeling, Classification };
std::string_view finetune_task_name(FinetuneTask task);
FinetuneTask finetune_task_from_name(std::string_view name);

template <typename Scalar>
DocLossFn<Scalar> finetune_objective(const BivlModel<Scalar>& model, const PreparedCorpus& corpus, FinetuneTask task);

// ---------------------------------------------------------------------------
// metrics

using Metrics = std::map<std::string, double>;

struct PrfCounts {
  Index tp = 0, fp = 0, fn = 0;

  /// 1 when there is nothing to find and nothing was predicted.
  double f1() const {
    const Index denom = 2 * tp + fp + fn;
    return denom == 0 ? 1.0 : 2.0 * double(tp) / double(denom);
  }
};

/// Micro-averaged over the non-O labels; positions with kIgnoreIndex in gold are skipped.
PrfCounts token_counts(std::span<const Index> gold, std::span<const Index> pred);

struct Span {
  int type;  // entity role
  Index begin, end;  // [begin, end)
  bool operator==(const Span&) const = default;
  auto operator<=>(const Span&) const = default;
};
/// BIO spans; an I- tag not continuing a span of its type opens a new one.
std::vector<Span> bio_spans(std::span<const Index> labels);
PrfCounts entity_counts(std::span<const Index> gold, std::span<const Index> pred);

template <typename Scalar>
Metrics evaluate_sequence_labeling(const BivlModel<Scalar>& model, const PreparedCorpus& corpus);
template <typename Scalar>
Metrics evaluate_classification(const BivlModel<Scalar>& model, const PreparedCorpus& corpus);
/// Masked-token accuracy, TIPA mean IoU and the per-task losses under plans drawn from `seed`.
template <typename Scalar>
Metrics evaluate_pretraining(const BivlModel<Scalar>& model, const PreparedCorpus& corpus, const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// checkpoints

inline constexpr std::string_view kCheckpointMagic = "bivl-checkpoint-v1";

struct CheckpointMeta {
  std::string phase;  // "init", "pretrain", "finetune"
  Index step = 0;
  ModelConfig model;
  TrainConfig train;
};

/// Magic line, one JSON manifest line, then little-endian parameter (and
/// optimizer moment) arrays back to back.
template <typename Scalar>
void save_checkpoint(const std::filesystem::path& path, const BivlModel<Scalar>& model, const CheckpointMeta& meta,
                     const AdamState<Scalar>* adam = nullptr);

struct CheckpointHeader {
  CheckpointMeta meta;
  std::string dtype;  // "float32" or "float64"
};
CheckpointHeader read_checkpoint_header(const std::filesystem::path& path);

template <typename Scalar>
struct LoadedCheckpoint {
  CheckpointMeta meta;
  std::unique_ptr<BivlModel<Scalar>> model;
  std::optional<AdamState<Scalar>> adam;
};

/// Throws ManifestMismatchError when the blob, dtype or parameter list disagree with the manifest.
template <typename Scalar>
LoadedCheckpoint<Scalar> load_checkpoint(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// configuration

/// Flat key=value lines; '#' starts a comment. Keys mirror the CLI flag names.
std::map<std::string, std::string> parse_config_text(std::string_view text);
std::map<std::string, std::string> read_config_file(const std::filesystem::path& path);

inline TrainConfig default_finetune_config() {
  TrainConfig t;
  t.learning_rate = 1e-3;
  t.batch_size = 8;
  t.epochs = 1;
  return t;
}

struct RunConfig {
  CorpusConfig corpus;
  ModelConfig model;
  TrainConfig pretrain;
  TrainConfig finetune = default_finetune_config();
  /// Documents held out from the end of the corpus for evaluation.
  double eval_fraction = 0.1;
  /// Documents used for fine-tuning (0 = all training documents). A small
  /// budget is where pre-training shows.
  int finetune_docs = 400;

  /// Throws ValidationError on an unknown key or a malformed value.
  void apply(const std::string& key, const std::string& value);
  void apply(const std::map<std::string, std::string>& settings);
};

nlohmann::json to_json(const ModelConfig& cfg);
nlohmann::json to_json(const TrainConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);
TrainConfig train_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const StepRecord& r);

// ---------------------------------------------------------------------------
// ablation

struct AblationResult {
  AblationRow row;
  Metrics metrics;
};

/// Pre-trains each row from the same initialization, fine-tunes sequence
/// labeling, and evaluates on the held-out documents.
template <typename Scalar>
std::vector<AblationResult> run_ablation(std::span<const SyntheticDocument> train,
                                         std::span<const SyntheticDocument> held_out, const RunConfig& cfg,
                                         const std::vector<AblationRow>& rows = ablation_rows());

void write_ablation_csv(const std::vector<AblationResult>& results, std::ostream& out);

}  // namespace bivl
