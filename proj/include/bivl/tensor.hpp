#pragma once

// Dense tensors with a reverse-mode tape. Values live in flat Eigen arrays
// (row-major); every op records a closure that pushes its output gradient
// back to the operands that require one.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "bivl/errors.hpp"

namespace bivl {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename Scalar>
using Vec = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Index shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

template <typename Scalar>
struct Node {
  Shape shape;
  Vec<Scalar> value;
  std::optional<Vec<Scalar>> grad;
  bool requires_grad = false;
  bool backpropagated = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this->grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward_fn;

  void accumulate(const Vec<Scalar>& g) {
    if (!requires_grad) return;
    if (grad) {
      *grad += g;
    } else {
      grad = g;
    }
  }
};

/// Shared handle to a node of the tape. Copies alias the same storage.
template <typename Scalar>
class Tensor {
 public:
  using Storage = Vec<Scalar>;
  using MatrixMap = Eigen::Map<const RowMatrix<Scalar>>;

  Tensor() = default;
  Tensor(Shape shape, Storage data, bool requires_grad = false);
  explicit Tensor(std::shared_ptr<Node<Scalar>> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor filled(Shape shape, Scalar value, bool requires_grad = false);
  static Tensor scalar(Scalar value, bool requires_grad = false);
  static Tensor from_matrix(const RowMatrix<Scalar>& m, bool requires_grad = false);
  static Tensor from_vector(const std::vector<Scalar>& v, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  Index rank() const { return static_cast<Index>(node_->shape.size()); }
  /// Size of `axis`; negative values count from the back.
  Index dim(Index axis) const;
  Index numel() const { return node_->value.size(); }

  const Storage& data() const { return node_->value; }
  /// Mutable access for leaves only (optimizers, finite differences).
  Storage& data_mut();
  Scalar item() const;
  /// View as a (numel / last_dim) x last_dim matrix.
  MatrixMap matrix() const;
  Scalar at(Index row, Index col) const { return matrix()(row, col); }

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return !node_->backward_fn; }
  bool has_grad() const { return node_->grad.has_value(); }
  const Storage& grad() const;
  void zero_grad() { node_->grad.reset(); }

  /// Copy of the value with no history.
  Tensor detach() const;

  /// Reverse pass from this scalar. Throws GradientError if any reachable
  /// tensor already holds a gradient (call zero_grad between passes).
  void backward() const;

  const std::shared_ptr<Node<Scalar>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<Scalar>> node_;
};

/// Registers a custom op. `backward_fn` receives the output node; it should
/// call `parents[i]->accumulate(...)` for each operand.
template <typename Scalar>
Tensor<Scalar> make_op(Shape shape, Vec<Scalar> value, std::vector<Tensor<Scalar>> parents,
                       std::function<void(Node<Scalar>&)> backward_fn);

// Elementwise binary ops accept identical shapes, or `b` whose shape is a
// suffix of `a`'s (e.g. a bias row added to every row).
template <typename Scalar> Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar> Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar> Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar> Tensor<Scalar> scale(const Tensor<Scalar>& a, Scalar s);
template <typename Scalar> Tensor<Scalar> add_scalar(const Tensor<Scalar>& a, Scalar s);

/// [.., p, q] x [.., q, r]. `b` may be rank 2 and is then shared across the batch.
template <typename Scalar> Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
/// Swaps the last two axes.
template <typename Scalar> Tensor<Scalar> transpose(const Tensor<Scalar>& a);
template <typename Scalar> Tensor<Scalar> reshape(const Tensor<Scalar>& a, Shape shape);

template <typename Scalar>
Tensor<Scalar> concat(const std::vector<Tensor<Scalar>>& parts, Index axis);
template <typename Scalar>
std::vector<Tensor<Scalar>> split(const Tensor<Scalar>& a, Index axis, const std::vector<Index>& sizes);

/// Rows of `table` ([V, d]) at `ids`, giving [ids.size(), d]. Also serves as a row gather.
template <typename Scalar>
Tensor<Scalar> embedding_lookup(const Tensor<Scalar>& table, std::span<const Index> ids);

template <typename Scalar> Tensor<Scalar> sigmoid(const Tensor<Scalar>& a);
template <typename Scalar> Tensor<Scalar> relu(const Tensor<Scalar>& a);
/// tanh approximation.
template <typename Scalar> Tensor<Scalar> gelu(const Tensor<Scalar>& a);
/// Gradient passes only where lo < a < hi.
template <typename Scalar> Tensor<Scalar> clamp(const Tensor<Scalar>& a, Scalar lo, Scalar hi);
/// Elementwise min of same-shape tensors; ties send the gradient to `a`.
template <typename Scalar> Tensor<Scalar> minimum(const Tensor<Scalar>& a, const Tensor<Scalar>& b);

template <typename Scalar> Tensor<Scalar> sum(const Tensor<Scalar>& a);
template <typename Scalar> Tensor<Scalar> mean(const Tensor<Scalar>& a);

/// Softmax over the last axis. Keys with mask 0 get exactly zero weight.
/// Throws DegenerateMaskError if the mask has no ones.
template <typename Scalar>
Tensor<Scalar> masked_softmax(const Tensor<Scalar>& scores, std::span<const std::uint8_t> key_mask);

template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gain, const Tensor<Scalar>& bias,
                          Scalar eps = Scalar(1e-5));

/// Multiplies each last-axis vector by a constant weight (modality and padding masks).
template <typename Scalar>
Tensor<Scalar> mask_rows(const Tensor<Scalar>& x, std::span<const Scalar> row_weights);

/// [m, h] and [n, h] -> [m, n, h] with out[i, j] = a[i] + b[j].
template <typename Scalar>
Tensor<Scalar> pair_sum(const Tensor<Scalar>& a, const Tensor<Scalar>& b);

/// Inverted dropout; identity when rate == 0.
template <typename Scalar>
Tensor<Scalar> dropout(const Tensor<Scalar>& x, double rate, std::mt19937_64& rng);

inline constexpr Index kIgnoreIndex = -100;

/// Mean cross-entropy over rows whose target != ignore_index. Zero when every row is ignored.
template <typename Scalar>
Tensor<Scalar> cross_entropy_from_logits(const Tensor<Scalar>& logits, std::span<const Index> targets,
                                         Index ignore_index = kIgnoreIndex);

inline constexpr double kProbabilityClip = 1e-7;

/// Mean BCE over elements with element_mask = 1; probabilities are clipped to
/// [1e-7, 1 - 1e-7] before the log.
template <typename Scalar>
Tensor<Scalar> binary_cross_entropy(const Tensor<Scalar>& probabilities, std::span<const Scalar> labels,
                                    std::span<const std::uint8_t> element_mask);

}  // namespace bivl
