#include "cli.hpp"

#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "bivl/diagnostics.hpp"
#include "bivl/train.hpp"

namespace bivl {
namespace {

using nlohmann::json;

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string corpus;
  std::string checkpoint;
  std::string task;
  std::optional<int> precision;
  std::vector<std::string> enable, disable;
  std::string coverage_mode;
  bool literal_eq_masking = false;
  std::vector<std::string> set;
  int doc = 0;
};

void add_common(CLI::App* cmd, Options& o) {
  cmd->add_option("--config", o.config, "key=value configuration file")->check(CLI::ExistingFile);
  cmd->add_option("--seed", o.seed, "seed for corpus, initialization and training");
  cmd->add_option("--precision", o.precision, "32 or 64")->check(CLI::IsMember({32, 64}));
  cmd->add_option("--enable", o.enable, "turn on bvlha, btia, rwtp or tipa")
      ->check(CLI::IsMember({"bvlha", "btia", "rwtp", "tipa"}));
  cmd->add_option("--disable", o.disable, "turn off bvlha, btia, rwtp or tipa")
      ->check(CLI::IsMember({"bvlha", "btia", "rwtp", "tipa"}));
  cmd->add_option("--coverage-mode", o.coverage_mode, "containment or strict-iou")
      ->check(CLI::IsMember({"containment", "strict-iou"}));
  cmd->add_flag("--literal-eq-masking", o.literal_eq_masking, "hybrid branches attend over every non-pad key");
  cmd->add_option("--set", o.set, "extra key=value override (repeatable)");
}

RunConfig resolve(const Options& o) {
  RunConfig cfg;
  if (!o.config.empty()) cfg.apply(read_config_file(o.config));
  for (const auto& kv : o.set) cfg.apply(parse_config_text(kv));
  if (o.seed) cfg.apply("seed", std::to_string(*o.seed));
  if (o.precision) cfg.apply("precision", std::to_string(*o.precision));
  for (const auto& t : o.enable) cfg.apply(t, "true");
  for (const auto& t : o.disable) cfg.apply(t, "false");
  if (!o.coverage_mode.empty()) cfg.apply("coverage-mode", o.coverage_mode);
  if (o.literal_eq_masking) cfg.apply("literal-eq-masking", "true");
  return cfg;
}

struct Split {
  std::vector<SyntheticDocument> docs;
  std::span<const SyntheticDocument> train, held_out;
};

Split load_split(const std::string& path, double eval_fraction) {
  if (path.empty()) throw ValidationError("--corpus is required");
  if (!(eval_fraction >= 0 && eval_fraction < 1)) throw ValidationError("eval-fraction must be in [0, 1)");
  Split s;
  s.docs = load_corpus(path);
  if (s.docs.empty()) throw ValidationError("corpus " + path + " is empty");
  const auto held = static_cast<std::size_t>(double(s.docs.size()) * eval_fraction);
  const std::span<const SyntheticDocument> all(s.docs);
  s.train = all.first(s.docs.size() - held);
  s.held_out = held ? all.last(held) : all;
  return s;
}

void require(const std::string& value, const char* flag) {
  if (value.empty()) throw ValidationError(std::string(flag) + " is required");
}

json metrics_json(const Metrics& m) {
  json j = json::object();
  for (const auto& [k, v] : m) j[k] = v;
  return j;
}

template <typename Scalar>
std::unique_ptr<BivlModel<Scalar>> model_from(const RunConfig& cfg, const std::string& checkpoint,
                                             CheckpointMeta* meta = nullptr) {
  if (checkpoint.empty()) return std::make_unique<BivlModel<Scalar>>(cfg.model);
  auto loaded = load_checkpoint<Scalar>(checkpoint);
  if (meta) *meta = loaded.meta;
  return std::move(loaded.model);
}

int precision_of(const RunConfig& cfg, const std::string& checkpoint) {
  if (checkpoint.empty()) return cfg.pretrain.precision;
  return read_checkpoint_header(checkpoint).dtype == "float64" ? 64 : 32;
}

template <typename Scalar>
int run_pretrain(const Options& o, RunConfig cfg, std::ostream& out) {
  require(o.out, "--out");
  const Split split = load_split(o.corpus, cfg.eval_fraction);
  std::unique_ptr<BivlModel<Scalar>> model;
  std::optional<AdamState<Scalar>> adam;
  Index start = 0;
  if (!o.checkpoint.empty()) {
    auto loaded = load_checkpoint<Scalar>(o.checkpoint);
    if (loaded.meta.phase != "pretrain") throw ValidationError("--checkpoint is not a pre-training checkpoint");
    // The interrupted run's configuration wins; only the stopping point may change.
    const Index max_steps = cfg.pretrain.max_steps;
    cfg.model = loaded.meta.model;
    cfg.pretrain = loaded.meta.train;
    cfg.pretrain.max_steps = max_steps;
    model = std::move(loaded.model);
    adam = std::move(loaded.adam);
    start = loaded.meta.step;
  } else {
    cfg.model.encoder.bvlha = cfg.pretrain.tasks.bvlha;
    model = std::make_unique<BivlModel<Scalar>>(cfg.model);
  }
  const PreparedCorpus train(split.train, cfg.model);
  const PreparedCorpus held_out(split.held_out, cfg.model);
  TrainLoop<Scalar> loop(*model, train.size(), cfg.pretrain, pretrain_objective(*model, train, cfg.pretrain));
  if (adam) loop.resume(start, std::move(*adam));
  loop.run([&](const StepRecord& r) { out << to_json(r).dump() << '\n'; });

  save_checkpoint<Scalar>(o.out, *model, {"pretrain", loop.current_step(), cfg.model, cfg.pretrain},
                          &loop.optimizer().state());
  json summary = metrics_json(evaluate_pretraining(*model, held_out, cfg.pretrain));
  summary["summary"] = true;
  summary["steps"] = loop.current_step();
  out << summary.dump() << '\n';
  return 0;
}

template <typename Scalar>
int run_finetune(const Options& o, RunConfig cfg, std::ostream& out) {
  require(o.out, "--out");
  require(o.task, "--task");
  const FinetuneTask task = finetune_task_from_name(o.task);
  const Split split = load_split(o.corpus, cfg.eval_fraction);
  CheckpointMeta meta;
  auto model = model_from<Scalar>(cfg, o.checkpoint, &meta);
  if (!o.checkpoint.empty()) cfg.model = meta.model;
  cfg.finetune.tasks = TaskFlags{cfg.model.encoder.bvlha, false, false, false};

  const std::size_t n = cfg.finetune_docs > 0 ? std::min(split.train.size(), std::size_t(cfg.finetune_docs))
                                              : split.train.size();
  const PreparedCorpus train(split.train.first(n), cfg.model);
  const PreparedCorpus held_out(split.held_out, cfg.model);
  TrainLoop<Scalar> loop(*model, train.size(), cfg.finetune, finetune_objective(*model, train, task));
  loop.run([&](const StepRecord& r) { out << to_json(r).dump() << '\n'; });
  save_checkpoint<Scalar>(o.out, *model, {"finetune", loop.current_step(), cfg.model, cfg.finetune});

  const Metrics m = task == FinetuneTask::SequenceLabeling ? evaluate_sequence_labeling(*model, held_out)
                                                           : evaluate_classification(*model, held_out);
  json summary = metrics_json(m);
  summary["summary"] = true;
  summary["task"] = o.task;
  out << summary.dump() << '\n';
  return 0;
}

template <typename Scalar>
int run_eval(const Options& o, RunConfig cfg, std::ostream& out) {
  require(o.checkpoint, "--checkpoint");
  CheckpointMeta meta;
  auto model = model_from<Scalar>(cfg, o.checkpoint, &meta);
  const Split split = load_split(o.corpus, cfg.eval_fraction);
  const PreparedCorpus held_out(split.held_out, meta.model);
  json summary;
  if (o.task.empty()) {
    TrainConfig tc = meta.train;
    tc.seed = cfg.pretrain.seed;
    summary = metrics_json(evaluate_pretraining(*model, held_out, tc));
  } else if (finetune_task_from_name(o.task) == FinetuneTask::SequenceLabeling) {
    summary = metrics_json(evaluate_sequence_labeling(*model, held_out));
  } else {
    summary = metrics_json(evaluate_classification(*model, held_out));
  }
  summary["summary"] = true;
  summary["documents"] = held_out.size();
  out << summary.dump() << '\n';
  return 0;
}

template <typename Scalar>
int run_ablate(const Options& o, const RunConfig& cfg, std::ostream& out) {
  const Split split = load_split(o.corpus, cfg.eval_fraction);
  const auto results = run_ablation<Scalar>(split.train, split.held_out, cfg);
  if (!o.out.empty()) {
    std::ofstream f(o.out);
    if (!f) throw std::runtime_error("cannot open " + o.out + " for writing");
    write_ablation_csv(results, f);
  }
  write_ablation_csv(results, out);
  return 0;
}

template <typename Scalar>
int run_dump_attention(const Options& o, const RunConfig& cfg, std::ostream& out) {
  require(o.out, "--out");
  CheckpointMeta meta;
  meta.model = cfg.model;
  auto model = model_from<Scalar>(cfg, o.checkpoint, &meta);
  const auto docs = load_corpus(o.corpus.empty() ? throw ValidationError("--corpus is required") : o.corpus);
  if (o.doc < 0 || static_cast<std::size_t>(o.doc) >= docs.size()) throw ValidationError("--doc out of range");
  const auto& doc = docs[static_cast<std::size_t>(o.doc)];
  const auto td = tokenize(doc, meta.model.max_len, meta.model.grid);
  const auto result = model->encode(td, patch_tensor<Scalar>(doc.image, meta.model), true);
  std::filesystem::create_directories(o.out);
  for (const auto& p : dump_attention(result.attention, o.out)) out << p.string() << '\n';
  return 0;
}

int run_gradcheck(const Options& o, const RunConfig& cfg, std::ostream& out) {
  if (o.precision && *o.precision != 64) throw ValidationError("gradcheck runs at --precision 64");
  GradCheckOptions opts;
  opts.tolerance = 1e-4;
  opts.seed = cfg.pretrain.seed;
  const auto entries = gradient_suite(opts);
  json report = {{"tolerance", opts.tolerance}, {"losses", json::array()}};
  double worst = 0;
  bool ok = true;
  for (const auto& e : entries) {
    report["losses"].push_back({{"name", e.name},
                                {"max_rel_err", e.report.max_rel_err},
                                {"coordinates", e.report.coordinates},
                                {"tensors", e.inputs.size()},
                                {"failures", e.report.failures.size()}});
    worst = std::max(worst, e.report.max_rel_err);
    ok = ok && e.report.passed();
  }
  report["max_rel_err"] = worst;
  report["passed"] = ok;
  if (!o.out.empty()) std::ofstream(o.out) << report.dump(2) << '\n';
  out << report.dump() << '\n';
  return ok ? 0 : 1;
}

}  // namespace

int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Bidirectional vision-language document encoder: data, training, evaluation"};
  app.require_subcommand(1);
  Options o;

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic corpus");
  auto* pre = app.add_subcommand("pretrain", "pre-train with MVLM, TIPA, RWTP and BTIA");
  auto* fine = app.add_subcommand("finetune", "fine-tune sequence labeling or classification");
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the held-out documents");
  auto* ablate = app.add_subcommand("ablate", "run the ablation table");
  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every loss");
  auto* dump = app.add_subcommand("dump-attention", "write attention maps of one document as CSV");
  for (auto* cmd : {gen, pre, fine, eval, ablate, grad, dump}) add_common(cmd, o);
  for (auto* cmd : {gen, pre, fine, ablate, grad, dump}) cmd->add_option("--out", o.out, "output path");
  for (auto* cmd : {pre, fine, eval, ablate, dump}) cmd->add_option("--corpus", o.corpus, "corpus file");
  for (auto* cmd : {pre, fine, eval, dump}) cmd->add_option("--checkpoint", o.checkpoint, "checkpoint file");
  for (auto* cmd : {fine, eval}) {
    cmd->add_option("--task", o.task, "seqlabel or classify")->check(CLI::IsMember({"seqlabel", "classify"}));
  }
  dump->add_option("--doc", o.doc, "document index");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    const RunConfig cfg = resolve(o);
    if (gen->parsed()) {
      require(o.out, "--out");
      save_corpus(generate_corpus(cfg.corpus), o.out);
      return 0;
    }
    if (grad->parsed()) return run_gradcheck(o, cfg, out);
    const int precision = pre->parsed() || ablate->parsed() ? cfg.pretrain.precision : precision_of(cfg, o.checkpoint);
    const bool wide = precision == 64;
    if (pre->parsed()) return wide ? run_pretrain<double>(o, cfg, out) : run_pretrain<float>(o, cfg, out);
    if (fine->parsed()) return wide ? run_finetune<double>(o, cfg, out) : run_finetune<float>(o, cfg, out);
    if (eval->parsed()) return wide ? run_eval<double>(o, cfg, out) : run_eval<float>(o, cfg, out);
    if (ablate->parsed()) return wide ? run_ablate<double>(o, cfg, out) : run_ablate<float>(o, cfg, out);
    if (dump->parsed()) return wide ? run_dump_attention<double>(o, cfg, out) : run_dump_attention<float>(o, cfg, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace bivl
