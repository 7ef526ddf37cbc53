#pragma once

#include <cmath>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "bivl/tensor.hpp"

namespace bivl {

/// A trainable tensor with a dotted hierarchical name ("encoder.layer0.attn.query.weight").
template <typename Scalar>
struct Parameter {
  std::string name;
  Tensor<Scalar> tensor;
};

/// Owns every trainable tensor of a model, in registration order.
template <typename Scalar>
class ParameterSet {
 public:
  ParameterSet(std::uint64_t seed, double init_scale) : rng_(seed), init_scale_(init_scale) {}

  /// Uniform(-init_scale, init_scale).
  Tensor<Scalar> uniform(const std::string& name, Shape shape) {
    std::uniform_real_distribution<double> dist(-init_scale_, init_scale_);
    Vec<Scalar> v(shape_numel(shape));
    for (Index i = 0; i < v.size(); ++i) v[i] = static_cast<Scalar>(dist(rng_));
    return add(name, Tensor<Scalar>(std::move(shape), std::move(v), true));
  }
  Tensor<Scalar> ones(const std::string& name, Shape shape) {
    return add(name, Tensor<Scalar>::filled(std::move(shape), Scalar(1), true));
  }
  Tensor<Scalar> zeros(const std::string& name, Shape shape) {
    return add(name, Tensor<Scalar>::zeros(std::move(shape), true));
  }
  /// Rows r = 0.. of a [rows, d] table get amplitude * (sin, cos)(r / 10000^(2i/d)).
  Tensor<Scalar> sinusoidal(const std::string& name, Index rows, Index d, double amplitude) {
    Vec<Scalar> v(rows * d);
    for (Index r = 0; r < rows; ++r) {
      for (Index i = 0; i < d; ++i) {
        const double angle = double(r) / std::pow(10000.0, double(i - i % 2) / double(d));
        v[r * d + i] = static_cast<Scalar>(amplitude * (i % 2 == 0 ? std::sin(angle) : std::cos(angle)));
      }
    }
    return add(name, Tensor<Scalar>({rows, d}, std::move(v), true));
  }
  double init_scale() const { return init_scale_; }

  const std::vector<Parameter<Scalar>>& all() const { return params_; }
  std::size_t size() const { return params_.size(); }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Tensor<Scalar> at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
    return params_[it->second].tensor;
  }
  Index total_elements() const {
    Index n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

 private:
  Tensor<Scalar> add(const std::string& name, Tensor<Scalar> t) {
    if (!index_.emplace(name, params_.size()).second) throw std::invalid_argument("duplicate parameter " + name);
    params_.push_back({name, t});
    return t;
  }

  std::vector<Parameter<Scalar>> params_;
  std::unordered_map<std::string, std::size_t> index_;
  std::mt19937_64 rng_;
  double init_scale_;
};

template <typename Scalar>
struct Linear {
  Tensor<Scalar> weight;  // [in, out]
  Tensor<Scalar> bias;    // [out], may be undefined

  static Linear create(ParameterSet<Scalar>& params, const std::string& prefix, Index in, Index out,
                       bool with_bias = true) {
    Linear l;
    l.weight = params.uniform(prefix + ".weight", {in, out});
    if (with_bias) l.bias = params.zeros(prefix + ".bias", {out});
    return l;
  }

  Tensor<Scalar> operator()(const Tensor<Scalar>& x) const {
    Tensor<Scalar> y = matmul(x, weight);
    return bias.defined() ? add(y, bias) : y;
  }
};

template <typename Scalar>
struct LayerNormParams {
  Tensor<Scalar> gain;
  Tensor<Scalar> bias;

  static LayerNormParams create(ParameterSet<Scalar>& params, const std::string& prefix, Index d) {
    return {params.ones(prefix + ".gain", {d}), params.zeros(prefix + ".bias", {d})};
  }

  Tensor<Scalar> operator()(const Tensor<Scalar>& x) const { return layer_norm(x, gain, bias); }
};

}  // namespace bivl
