#pragma once

// Central finite-difference verification of the reverse-mode gradients.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <vector>

#include "bivl/tensor.hpp"

namespace bivl {

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-5;
  /// Coordinates sampled per input tensor; smaller tensors are checked exhaustively.
  Index samples_per_tensor = 64;
  /// |analytic - numeric| / max(|analytic|, |numeric|, floor, noise / tolerance),
  /// where noise = 8 eps max(1, |f|) / step bounds the rounding error of the
  /// difference quotient. Both keep round-off on near-zero gradients from
  /// reading as a relative error.
  double denominator_floor = 1e-6;
  std::uint64_t seed = 0;
};

struct GradCheckFailure {
  std::size_t input = 0;
  Index coordinate = 0;
  double analytic = 0;
  double numeric = 0;
  double rel_err = 0;
};

struct GradCheckReport {
  double max_rel_err = 0;
  std::size_t coordinates = 0;
  std::vector<GradCheckFailure> failures;
  /// Worst relative error per input tensor.
  std::vector<double> per_input_max;

  bool passed() const { return failures.empty(); }
};

namespace detail {

inline std::vector<Index> sample_coordinates(const Eigen::Array<double, Eigen::Dynamic, 1>& grad, Index budget,
                                             std::mt19937_64& rng) {
  const Index n = grad.size();
  std::vector<Index> all(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) all[i] = i;
  if (n <= budget) return all;

  // Half the budget goes to coordinates that actually carry gradient, so
  // sparse tensors (embedding tables) are not checked only at zeros.
  std::vector<Index> nonzero;
  for (Index i = 0; i < n; ++i) {
    if (grad[i] != 0.0) nonzero.push_back(i);
  }
  std::vector<Index> picked;
  std::shuffle(nonzero.begin(), nonzero.end(), rng);
  const Index from_nonzero = std::min<Index>(budget / 2, static_cast<Index>(nonzero.size()));
  picked.assign(nonzero.begin(), nonzero.begin() + from_nonzero);

  std::vector<char> used(static_cast<std::size_t>(n), 0);
  for (Index i : picked) used[i] = 1;
  std::shuffle(all.begin(), all.end(), rng);
  for (Index i : all) {
    if (static_cast<Index>(picked.size()) >= budget) break;
    if (!used[i]) picked.push_back(i);
  }
  std::sort(picked.begin(), picked.end());
  return picked;
}

}  // namespace detail

/// Compares reverse-mode gradients of `f` with respect to `inputs` against
/// central differences. `f` must rebuild its graph from the current values of
/// `inputs` on every call; it is evaluated twice at the base point and a
/// DeterminismError is thrown if the results differ.
template <typename Scalar>
GradCheckReport grad_check(const std::function<Tensor<Scalar>()>& f, std::vector<Tensor<Scalar>> inputs,
                           const GradCheckOptions& options = {}) {
  for (auto& t : inputs) {
    if (!t.is_leaf() || !t.requires_grad()) throw GradientError("grad_check inputs must be leaves requiring grad");
    t.zero_grad();
  }
  Tensor<Scalar> loss = f();
  const Scalar base = loss.item();
  if (f().item() != base) throw DeterminismError("function under check is not deterministic");
  loss.backward();

  const double noise = 8.0 * std::numeric_limits<Scalar>::epsilon() * std::max(1.0, std::abs(double(base))) / options.step;
  const double floor = std::max(options.denominator_floor, noise / options.tolerance);

  std::mt19937_64 rng(options.seed);
  GradCheckReport report;
  report.per_input_max.assign(inputs.size(), 0.0);
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Tensor<Scalar>& x = inputs[k];
    const Eigen::Array<double, Eigen::Dynamic, 1> analytic = x.grad().template cast<double>();
    for (Index i : detail::sample_coordinates(analytic, options.samples_per_tensor, rng)) {
      const Scalar orig = x.data()[i];
      x.data_mut()[i] = orig + Scalar(options.step);
      const double plus = static_cast<double>(f().item());
      x.data_mut()[i] = orig - Scalar(options.step);
      const double minus = static_cast<double>(f().item());
      x.data_mut()[i] = orig;

      const double numeric = (plus - minus) / (2.0 * options.step);
      const double a = analytic[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), floor});
      const double rel = std::abs(a - numeric) / denom;
      report.max_rel_err = std::max(report.max_rel_err, rel);
      report.per_input_max[k] = std::max(report.per_input_max[k], rel);
      ++report.coordinates;
      if (!(rel <= options.tolerance)) report.failures.push_back({k, i, a, numeric, rel});
    }
  }
  for (auto& t : inputs) t.zero_grad();
  return report;
}

}  // namespace bivl
