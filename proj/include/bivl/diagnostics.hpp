#pragma once

// Fixed tiny configurations and the end-to-end gradient check of every loss.

#include <string>
#include <vector>

#include "bivl/grad_check.hpp"
#include "bivl/model.hpp"

namespace bivl {

/// A few short documents on a small page grid.
CorpusConfig tiny_corpus_config();
/// One layer, d = 8, a 2 x 2 visual grid; weights large enough that every path carries signal.
ModelConfig tiny_model_config();

struct GradSuiteEntry {
  std::string name;  // "mvlm", "tipa", "rwtp", "btia", "total", "bvlha_forward"
  GradCheckReport report;
  /// Parameter tensors reached by this loss, in registration order.
  std::vector<std::string> inputs;
};

/// Checks each loss of a two-document batch at 64-bit precision against central differences.
std::vector<GradSuiteEntry> gradient_suite(const GradCheckOptions& options = {.tolerance = 1e-4},
                                           const ModelConfig& model_cfg = tiny_model_config(),
                                           const CorpusConfig& corpus_cfg = tiny_corpus_config());

}  // namespace bivl
