#include "bivl/diagnostics.hpp"

namespace bivl {

CorpusConfig tiny_corpus_config() {
  CorpusConfig c;
  c.num_docs = 2;
  c.vocab_size = 16;
  c.min_blocks = 3;
  c.max_blocks = 5;
  c.min_tokens = 1;
  c.max_tokens = 3;
  c.image_height = 16;
  c.image_width = 16;
  c.num_classes = 2;
  c.seed = 11;
  return c;
}

ModelConfig tiny_model_config() {
  ModelConfig m;
  m.vocab = 16;
  m.max_len = 14;
  m.grid = 2;
  m.pool = 2;
  m.encoder.layers = 1;
  m.encoder.heads = 2;
  m.encoder.d = 8;
  m.encoder.d_ff = 16;
  m.tipa_hidden = 8;
  m.rwtp_hidden = 4;
  m.num_classes = 2;
  m.init_scale = 0.3;
  m.seed = 5;
  return m;
}

std::vector<GradSuiteEntry> gradient_suite(const GradCheckOptions& options, const ModelConfig& model_cfg,
                                           const CorpusConfig& corpus_cfg) {
  const auto docs = generate_corpus(corpus_cfg);
  BivlModel<double> model(model_cfg);
  std::vector<TokenizedDoc> tds;
  std::vector<PretrainPlan> plans;
  for (std::size_t i = 0; i < docs.size(); ++i) {
    tds.push_back(tokenize(docs[i], model_cfg.max_len, model_cfg.grid));
    std::mt19937_64 rng(options.seed + i);
    plans.push_back(make_pretrain_plan(docs[i], tds.back(), model_cfg.vocab, CoverageMode::Containment, rng));
  }

  std::normal_distribution<double> normal;

  const TaskFlags all_tasks;
  auto batch_loss = [&](const std::string& name) {
    return [&, name]() {
      Tensor<double> total;
      for (std::size_t i = 0; i < docs.size(); ++i) {
        Tensor<double> l;
        if (name == "bvlha_forward") {
          const auto out = model.encode(tds[i], patch_tensor<double>(docs[i].image, model_cfg));
          // Fixed random readout of H_hybrid.
          Vec<double> w(out.hybrid.numel());
          std::mt19937_64 r(options.seed + 100 + i);
          for (Index k = 0; k < w.size(); ++k) w[k] = normal(r);
          l = sum(mul(out.hybrid, Tensor<double>(out.hybrid.shape(), w)));
        } else {
          const auto losses = pretrain_losses(model, docs[i], tds[i], plans[i], all_tasks);
          if (name == "mvlm") l = *losses.mvlm;
          if (name == "tipa") l = *losses.tipa;
          if (name == "rwtp") l = *losses.rwtp;
          if (name == "btia") l = *losses.btia;
          if (name == "total") l = total_pretrain_loss(losses, TaskWeights{});
        }
        total = total.defined() ? add(total, l) : l;
      }
      return scale(total, 1.0 / double(docs.size()));
    };
  };

  std::vector<GradSuiteEntry> entries;
  for (const std::string name : {"mvlm", "tipa", "rwtp", "btia", "total", "bvlha_forward"}) {
    const auto f = batch_loss(name);
    model.params().zero_grad();
    f().backward();
    GradSuiteEntry entry{name, {}, {}};
    std::vector<Tensor<double>> inputs;
    for (const auto& p : model.params().all()) {
      if (p.tensor.has_grad()) {
        inputs.push_back(p.tensor);
        entry.inputs.push_back(p.name);
      }
    }
    model.params().zero_grad();
    entry.report = grad_check<double>(f, inputs, options);
    entries.push_back(std::move(entry));
  }
  return entries;
}

}  // namespace bivl
