#include "bivl/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace bivl {

Index shape_numel(const Shape& shape) {
  Index n = 1;
  for (Index s : shape) n *= s;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

template <typename Scalar>
using MatMap = Eigen::Map<RowMatrix<Scalar>>;
template <typename Scalar>
using CMatMap = Eigen::Map<const RowMatrix<Scalar>>;

template <typename Scalar>
CMatMap<Scalar> as_matrix(const Vec<Scalar>& v, Index rows, Index cols) {
  return CMatMap<Scalar>(v.data(), rows, cols);
}

template <typename Scalar>
MatMap<Scalar> as_matrix(Vec<Scalar>& v, Index rows, Index cols) {
  return MatMap<Scalar>(v.data(), rows, cols);
}

Index normalize_axis(Index axis, Index rank) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw DimensionError("axis out of range");
  return axis;
}

// b broadcasts over a when its shape is a suffix of a's shape.
bool is_suffix(const Shape& a, const Shape& b) {
  if (b.size() > a.size()) return false;
  return std::equal(b.rbegin(), b.rend(), a.rbegin());
}

template <typename Scalar>
void check_broadcast(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const char* op) {
  if (!is_suffix(a.shape(), b.shape())) {
    throw DimensionError(std::string(op) + ": cannot broadcast " + shape_string(b.shape()) + " onto " +
                         shape_string(a.shape()));
  }
}

// Sums a flat gradient of a's shape down to b's (suffix) shape.
template <typename Scalar>
Vec<Scalar> reduce_to(const Vec<Scalar>& g, Index b_numel) {
  if (g.size() == b_numel) return g;
  const Index rows = g.size() / b_numel;
  Vec<Scalar> out = as_matrix(g, rows, b_numel).colwise().sum().transpose().array();
  return out;
}

template <typename Scalar>
Vec<Scalar> broadcast_to(const Vec<Scalar>& b, Index a_numel) {
  if (b.size() == a_numel) return b;
  return b.replicate(a_numel / b.size(), 1);
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape, Storage data, bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("shape " + shape_string(shape) + " does not match " + std::to_string(data.size()) +
                         " elements");
  }
  for (Index s : shape) {
    if (s <= 0) throw DimensionError("shape " + shape_string(shape) + " has a non-positive extent");
  }
  node_ = std::make_shared<Node<Scalar>>();
  node_->shape = std::move(shape);
  node_->value = std::move(data);
  node_->requires_grad = requires_grad;
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::zeros(Shape shape, bool requires_grad) {
  const Index n = shape_numel(shape);
  return Tensor(std::move(shape), Storage::Zero(n), requires_grad);
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::filled(Shape shape, Scalar value, bool requires_grad) {
  const Index n = shape_numel(shape);
  return Tensor(std::move(shape), Storage::Constant(n, value), requires_grad);
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::scalar(Scalar value, bool requires_grad) {
  return Tensor(Shape{}, Storage::Constant(1, value), requires_grad);
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::from_matrix(const RowMatrix<Scalar>& m, bool requires_grad) {
  Storage data(m.size());
  as_matrix(data, m.rows(), m.cols()) = m;
  return Tensor(Shape{m.rows(), m.cols()}, std::move(data), requires_grad);
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::from_vector(const std::vector<Scalar>& v, bool requires_grad) {
  Storage data = Eigen::Map<const Storage>(v.data(), static_cast<Index>(v.size()));
  return Tensor(Shape{static_cast<Index>(v.size())}, std::move(data), requires_grad);
}

template <typename Scalar>
Index Tensor<Scalar>::dim(Index axis) const {
  return node_->shape[static_cast<std::size_t>(normalize_axis(axis, rank()))];
}

template <typename Scalar>
typename Tensor<Scalar>::Storage& Tensor<Scalar>::data_mut() {
  if (!is_leaf()) throw GradientError("data_mut() on a non-leaf tensor");
  return node_->value;
}

template <typename Scalar>
Scalar Tensor<Scalar>::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_string(shape()));
  return node_->value[0];
}

template <typename Scalar>
typename Tensor<Scalar>::MatrixMap Tensor<Scalar>::matrix() const {
  const Index cols = rank() == 0 ? 1 : shape().back();
  return MatrixMap(node_->value.data(), numel() / cols, cols);
}

template <typename Scalar>
const typename Tensor<Scalar>::Storage& Tensor<Scalar>::grad() const {
  if (!node_->grad) throw GradientError("tensor has no gradient");
  return *node_->grad;
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::detach() const {
  return Tensor(shape(), data(), false);
}

template <typename Scalar>
void Tensor<Scalar>::backward() const {
  if (numel() != 1) throw GradientError("backward() needs a scalar loss, got " + shape_string(shape()));
  if (!std::isfinite(static_cast<double>(item()))) throw GradientError("backward() on a non-finite loss");
  if (!requires_grad()) throw GradientError("loss does not depend on any tensor requiring grad");
  if (node_->backpropagated) throw GradientError("backward() called twice on the same graph");

  // Iterative post-order DFS; reversed it is a valid reverse-topological order.
  std::vector<Node<Scalar>*> order;
  std::unordered_set<Node<Scalar>*> seen;
  std::vector<std::pair<Node<Scalar>*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<Scalar>* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (Node<Scalar>* n : order) {
    if (n->grad) {
      throw GradientError("gradient already populated on a reachable tensor; call zero_grad() first");
    }
  }

  node_->grad = Storage::Ones(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<Scalar>* n = *it;
    if (n->backward_fn) {
      if (!n->grad) n->grad = Storage::Zero(n->value.size());
      n->backward_fn(*n);
    }
    n->backpropagated = true;
  }
  // Tensors that received no contribution still get a (zero) gradient.
  for (Node<Scalar>* n : order) {
    if (!n->grad) n->grad = Storage::Zero(n->value.size());
  }
}

// ---------------------------------------------------------------------------
// op construction

template <typename Scalar>
Tensor<Scalar> make_op(Shape shape, Vec<Scalar> value, std::vector<Tensor<Scalar>> parents,
                       std::function<void(Node<Scalar>&)> backward_fn) {
  Tensor<Scalar> out(std::move(shape), std::move(value), false);
  auto& node = *out.node();
  for (const auto& p : parents) {
    if (p.requires_grad()) {
      node.requires_grad = true;
      break;
    }
  }
  if (node.requires_grad) {
    node.parents.reserve(parents.size());
    for (const auto& p : parents) node.parents.push_back(p.node());
    node.backward_fn = std::move(backward_fn);
  }
  return out;
}

// ---------------------------------------------------------------------------
// elementwise

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  check_broadcast(a, b, "add");
  Vec<Scalar> v = a.data() + broadcast_to(b.data(), a.numel());
  const Index bn = b.numel();
  return make_op<Scalar>(a.shape(), std::move(v), {a, b}, [bn](Node<Scalar>& n) {
    n.parents[0]->accumulate(*n.grad);
    if (n.parents[1]->requires_grad) n.parents[1]->accumulate(reduce_to(*n.grad, bn));
  });
}

template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  check_broadcast(a, b, "sub");
  Vec<Scalar> v = a.data() - broadcast_to(b.data(), a.numel());
  const Index bn = b.numel();
  return make_op<Scalar>(a.shape(), std::move(v), {a, b}, [bn](Node<Scalar>& n) {
    n.parents[0]->accumulate(*n.grad);
    if (n.parents[1]->requires_grad) n.parents[1]->accumulate(-reduce_to(*n.grad, bn));
  });
}

template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  check_broadcast(a, b, "mul");
  Vec<Scalar> bb = broadcast_to(b.data(), a.numel());
  Vec<Scalar> v = a.data() * bb;
  const Index bn = b.numel();
  return make_op<Scalar>(a.shape(), std::move(v), {a, b}, [bn, bb = std::move(bb)](Node<Scalar>& n) {
    const auto& g = *n.grad;
    if (n.parents[0]->requires_grad) n.parents[0]->accumulate(g * bb);
    if (n.parents[1]->requires_grad) n.parents[1]->accumulate(reduce_to<Scalar>(g * n.parents[0]->value, bn));
  });
}

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& a, Scalar s) {
  return make_op<Scalar>(a.shape(), a.data() * s, {a},
                         [s](Node<Scalar>& n) { n.parents[0]->accumulate(*n.grad * s); });
}

template <typename Scalar>
Tensor<Scalar> add_scalar(const Tensor<Scalar>& a, Scalar s) {
  return make_op<Scalar>(a.shape(), a.data() + s, {a},
                         [](Node<Scalar>& n) { n.parents[0]->accumulate(*n.grad); });
}

// ---------------------------------------------------------------------------
// linear algebra

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.rank() < 2 || b.rank() < 2) throw DimensionError("matmul needs rank >= 2 operands");
  const Index p = a.dim(-2), q = a.dim(-1), r = b.dim(-1);
  if (b.dim(-2) != q) {
    throw DimensionError("matmul inner dimensions differ: " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  Shape out_shape = a.shape();
  out_shape.back() = r;

  if (b.rank() == 2) {
    // Shared right operand: one GEMM over all batch rows.
    const Index rows = a.numel() / q;
    Vec<Scalar> v(rows * r);
    as_matrix(v, rows, r).noalias() = as_matrix(a.data(), rows, q) * as_matrix(b.data(), q, r);
    return make_op<Scalar>(std::move(out_shape), std::move(v), {a, b}, [rows, q, r](Node<Scalar>& n) {
      auto g = as_matrix(*n.grad, rows, r);
      auto& pa = *n.parents[0];
      auto& pb = *n.parents[1];
      if (pa.requires_grad) {
        Vec<Scalar> ga(rows * q);
        as_matrix(ga, rows, q).noalias() = g * as_matrix(pb.value, q, r).transpose();
        pa.accumulate(ga);
      }
      if (pb.requires_grad) {
        Vec<Scalar> gb(q * r);
        as_matrix(gb, q, r).noalias() = as_matrix(pa.value, rows, q).transpose() * g;
        pb.accumulate(gb);
      }
    });
  }

  if (!std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin(), b.shape().end() - 2) ||
      a.rank() != b.rank()) {
    throw DimensionError("matmul batch dimensions differ: " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  const Index batch = a.numel() / (p * q);
  Vec<Scalar> v(batch * p * r);
  for (Index i = 0; i < batch; ++i) {
    MatMap<Scalar>(v.data() + i * p * r, p, r).noalias() =
        CMatMap<Scalar>(a.data().data() + i * p * q, p, q) * CMatMap<Scalar>(b.data().data() + i * q * r, q, r);
  }
  return make_op<Scalar>(std::move(out_shape), std::move(v), {a, b}, [batch, p, q, r](Node<Scalar>& n) {
    auto& pa = *n.parents[0];
    auto& pb = *n.parents[1];
    Vec<Scalar> ga = pa.requires_grad ? Vec<Scalar>(batch * p * q) : Vec<Scalar>();
    Vec<Scalar> gb = pb.requires_grad ? Vec<Scalar>(batch * q * r) : Vec<Scalar>();
    for (Index i = 0; i < batch; ++i) {
      CMatMap<Scalar> g(n.grad->data() + i * p * r, p, r);
      if (pa.requires_grad) {
        MatMap<Scalar>(ga.data() + i * p * q, p, q).noalias() =
            g * CMatMap<Scalar>(pb.value.data() + i * q * r, q, r).transpose();
      }
      if (pb.requires_grad) {
        MatMap<Scalar>(gb.data() + i * q * r, q, r).noalias() =
            CMatMap<Scalar>(pa.value.data() + i * p * q, p, q).transpose() * g;
      }
    }
    if (pa.requires_grad) pa.accumulate(ga);
    if (pb.requires_grad) pb.accumulate(gb);
  });
}

template <typename Scalar>
Tensor<Scalar> transpose(const Tensor<Scalar>& a) {
  if (a.rank() < 2) throw DimensionError("transpose needs rank >= 2");
  const Index p = a.dim(-2), q = a.dim(-1);
  const Index batch = a.numel() / (p * q);
  auto swap = [batch](const Vec<Scalar>& src, Index rows, Index cols) {
    Vec<Scalar> dst(src.size());
    for (Index i = 0; i < batch; ++i) {
      MatMap<Scalar>(dst.data() + i * rows * cols, cols, rows) =
          CMatMap<Scalar>(src.data() + i * rows * cols, rows, cols).transpose();
    }
    return dst;
  };
  Shape out_shape = a.shape();
  std::swap(out_shape[out_shape.size() - 1], out_shape[out_shape.size() - 2]);
  return make_op<Scalar>(std::move(out_shape), swap(a.data(), p, q), {a},
                         [swap, p, q](Node<Scalar>& n) { n.parents[0]->accumulate(swap(*n.grad, q, p)); });
}

template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("cannot reshape " + shape_string(a.shape()) + " to " + shape_string(shape));
  }
  return make_op<Scalar>(std::move(shape), a.data(), {a},
                         [](Node<Scalar>& n) { n.parents[0]->accumulate(*n.grad); });
}

// ---------------------------------------------------------------------------
// structural

template <typename Scalar>
Tensor<Scalar> concat(const std::vector<Tensor<Scalar>>& parts, Index axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  const Index rank = parts.front().rank();
  axis = normalize_axis(axis, rank);
  Shape out_shape = parts.front().shape();
  out_shape[axis] = 0;
  std::vector<Index> widths;
  for (const auto& t : parts) {
    if (t.rank() != rank) throw DimensionError("concat rank mismatch");
    for (Index d = 0; d < rank; ++d) {
      if (d != axis && t.shape()[d] != parts.front().shape()[d]) {
        throw DimensionError("concat shape mismatch: " + shape_string(t.shape()) + " vs " +
                             shape_string(parts.front().shape()));
      }
    }
    out_shape[axis] += t.shape()[axis];
  }
  Index inner = 1;
  for (Index d = axis + 1; d < rank; ++d) inner *= out_shape[d];
  const Index outer = shape_numel(out_shape) / (out_shape[axis] * inner);
  const Index total = out_shape[axis] * inner;
  for (const auto& t : parts) widths.push_back(t.shape()[axis] * inner);

  Vec<Scalar> v(shape_numel(out_shape));
  Index offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Index w = widths[k];
    as_matrix(v, outer, total).middleCols(offset, w) = as_matrix(parts[k].data(), outer, w);
    offset += w;
  }
  return make_op<Scalar>(std::move(out_shape), std::move(v), parts, [widths, outer, total](Node<Scalar>& n) {
    Index off = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      const Index w = widths[k];
      if (n.parents[k]->requires_grad) {
        Vec<Scalar> g(outer * w);
        as_matrix(g, outer, w) = as_matrix(*n.grad, outer, total).middleCols(off, w);
        n.parents[k]->accumulate(g);
      }
      off += w;
    }
  });
}

template <typename Scalar>
std::vector<Tensor<Scalar>> split(const Tensor<Scalar>& a, Index axis, const std::vector<Index>& sizes) {
  axis = normalize_axis(axis, a.rank());
  const Index extent = a.shape()[axis];
  if (std::accumulate(sizes.begin(), sizes.end(), Index{0}) != extent) {
    throw DimensionError("split sizes do not sum to axis extent " + std::to_string(extent));
  }
  Index inner = 1;
  for (Index d = axis + 1; d < a.rank(); ++d) inner *= a.shape()[d];
  const Index outer = a.numel() / (extent * inner);
  const Index total = extent * inner;

  std::vector<Tensor<Scalar>> out;
  Index offset = 0;
  for (Index s : sizes) {
    if (s <= 0) throw DimensionError("split sizes must be positive");
    const Index w = s * inner;
    Shape shape = a.shape();
    shape[axis] = s;
    Vec<Scalar> v(outer * w);
    as_matrix(v, outer, w) = as_matrix(a.data(), outer, total).middleCols(offset, w);
    out.push_back(make_op<Scalar>(std::move(shape), std::move(v), {a}, [offset, w, outer, total](Node<Scalar>& n) {
      Vec<Scalar> g = Vec<Scalar>::Zero(outer * total);
      as_matrix(g, outer, total).middleCols(offset, w) = as_matrix(*n.grad, outer, w);
      n.parents[0]->accumulate(g);
    }));
    offset += w;
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> embedding_lookup(const Tensor<Scalar>& table, std::span<const Index> ids) {
  if (table.rank() != 2) throw DimensionError("embedding table must be rank 2");
  if (ids.empty()) throw DimensionError("embedding_lookup with no ids");
  const Index rows = table.dim(0), d = table.dim(1);
  const Index k = static_cast<Index>(ids.size());
  std::vector<Index> idx(ids.begin(), ids.end());
  Vec<Scalar> v(k * d);
  auto src = as_matrix(table.data(), rows, d);
  auto dst = as_matrix(v, k, d);
  for (Index i = 0; i < k; ++i) {
    if (idx[i] < 0 || idx[i] >= rows) {
      throw DimensionError("embedding id " + std::to_string(idx[i]) + " outside table of " +
                           std::to_string(rows) + " rows");
    }
    dst.row(i) = src.row(idx[i]);
  }
  return make_op<Scalar>(Shape{k, d}, std::move(v), {table}, [idx = std::move(idx), rows, d](Node<Scalar>& n) {
    Vec<Scalar> g = Vec<Scalar>::Zero(rows * d);
    auto gm = as_matrix(g, rows, d);
    auto go = as_matrix(*n.grad, static_cast<Index>(idx.size()), d);
    for (std::size_t i = 0; i < idx.size(); ++i) gm.row(idx[i]) += go.row(static_cast<Index>(i));
    n.parents[0]->accumulate(g);
  });
}

// ---------------------------------------------------------------------------
// pointwise nonlinearities

template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& a) {
  Vec<Scalar> y = (Scalar(1) + (-a.data()).exp()).inverse();
  return make_op<Scalar>(a.shape(), y, {a}, [y](Node<Scalar>& n) {
    n.parents[0]->accumulate(*n.grad * y * (Scalar(1) - y));
  });
}

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& a) {
  Vec<Scalar> y = a.data().max(Scalar(0));
  return make_op<Scalar>(a.shape(), std::move(y), {a}, [](Node<Scalar>& n) {
    n.parents[0]->accumulate((n.parents[0]->value > Scalar(0)).select(*n.grad, Scalar(0)));
  });
}

template <typename Scalar>
Tensor<Scalar> gelu(const Tensor<Scalar>& a) {
  const Scalar c = Scalar(0.7978845608028654);  // sqrt(2/pi)
  const Scalar k = Scalar(0.044715);
  const Vec<Scalar>& x = a.data();
  Vec<Scalar> t = (c * (x + k * x.cube())).tanh();
  Vec<Scalar> y = Scalar(0.5) * x * (Scalar(1) + t);
  return make_op<Scalar>(a.shape(), std::move(y), {a}, [t, c, k](Node<Scalar>& n) {
    const Vec<Scalar>& x = n.parents[0]->value;
    Vec<Scalar> dt = (Scalar(1) - t.square()) * c * (Scalar(1) + Scalar(3) * k * x.square());
    n.parents[0]->accumulate(*n.grad * (Scalar(0.5) * (Scalar(1) + t) + Scalar(0.5) * x * dt));
  });
}

template <typename Scalar>
Tensor<Scalar> clamp(const Tensor<Scalar>& a, Scalar lo, Scalar hi) {
  Vec<Scalar> y = a.data().max(lo).min(hi);
  return make_op<Scalar>(a.shape(), std::move(y), {a}, [lo, hi](Node<Scalar>& n) {
    const Vec<Scalar>& x = n.parents[0]->value;
    n.parents[0]->accumulate(((x > lo) && (x < hi)).select(*n.grad, Scalar(0)));
  });
}

template <typename Scalar>
Tensor<Scalar> minimum(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("minimum of " + shape_string(a.shape()) + " and " + shape_string(b.shape()));
  }
  Vec<Scalar> y = a.data().min(b.data());
  return make_op<Scalar>(a.shape(), std::move(y), {a, b}, [](Node<Scalar>& n) {
    const auto take_a = n.parents[0]->value <= n.parents[1]->value;
    n.parents[0]->accumulate(take_a.select(*n.grad, Scalar(0)));
    n.parents[1]->accumulate(take_a.select(Scalar(0), *n.grad));
  });
}

// ---------------------------------------------------------------------------
// reductions

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& a) {
  const Index k = a.numel();
  return make_op<Scalar>(Shape{}, Vec<Scalar>::Constant(1, a.data().sum()), {a}, [k](Node<Scalar>& n) {
    n.parents[0]->accumulate(Vec<Scalar>::Constant(k, (*n.grad)[0]));
  });
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& a) {
  const Index k = a.numel();
  return make_op<Scalar>(Shape{}, Vec<Scalar>::Constant(1, a.data().mean()), {a}, [k](Node<Scalar>& n) {
    n.parents[0]->accumulate(Vec<Scalar>::Constant(k, (*n.grad)[0] / Scalar(k)));
  });
}

// ---------------------------------------------------------------------------
// attention and normalization

template <typename Scalar>
Tensor<Scalar> masked_softmax(const Tensor<Scalar>& scores, std::span<const std::uint8_t> key_mask) {
  const Index keys = scores.dim(-1);
  if (static_cast<Index>(key_mask.size()) != keys) {
    throw DimensionError("key mask length " + std::to_string(key_mask.size()) + " != " + std::to_string(keys));
  }
  if (std::none_of(key_mask.begin(), key_mask.end(), [](std::uint8_t m) { return m != 0; })) {
    throw DegenerateMaskError("softmax key mask has no unmasked key");
  }
  const Index rows = scores.numel() / keys;
  Eigen::Array<bool, 1, Eigen::Dynamic> keep(keys);
  for (Index j = 0; j < keys; ++j) keep[j] = key_mask[j] != 0;

  Vec<Scalar> y(scores.numel());
  auto s = as_matrix(scores.data(), rows, keys);
  auto out = as_matrix(y, rows, keys);
  const Scalar lowest = std::numeric_limits<Scalar>::lowest();
  for (Index i = 0; i < rows; ++i) {
    Scalar mx = lowest;
    for (Index j = 0; j < keys; ++j) {
      if (keep[j]) mx = std::max(mx, s(i, j));
    }
    Scalar total = 0;
    for (Index j = 0; j < keys; ++j) {
      const Scalar e = keep[j] ? std::exp(s(i, j) - mx) : Scalar(0);
      out(i, j) = e;
      total += e;
    }
    out.row(i) /= total;
  }
  return make_op<Scalar>(scores.shape(), y, {scores}, [y, rows, keys](Node<Scalar>& n) {
    auto p = as_matrix(y, rows, keys);
    auto g = as_matrix(*n.grad, rows, keys);
    Vec<Scalar> gx(rows * keys);
    auto gm = as_matrix(gx, rows, keys);
    // dx = p * (g - <g, p>)
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> dots = (g.array() * p.array()).rowwise().sum();
    gm = (p.array() * (g.array().colwise() - dots.array())).matrix();
    n.parents[0]->accumulate(gx);
  });
}

template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gain, const Tensor<Scalar>& bias,
                          Scalar eps) {
  const Index d = x.dim(-1);
  if (d < 2) throw DimensionError("layer_norm needs a last axis of at least 2");
  if (gain.numel() != d || bias.numel() != d) throw DimensionError("layer_norm gain/bias size mismatch");
  const Index rows = x.numel() / d;
  auto xm = as_matrix(x.data(), rows, d);

  Vec<Scalar> xhat(x.numel());
  Vec<Scalar> inv_std(rows);
  auto xh = as_matrix(xhat, rows, d);
  for (Index i = 0; i < rows; ++i) {
    const Scalar mu = xm.row(i).mean();
    const Scalar var = (xm.row(i).array() - mu).square().mean();
    inv_std[i] = Scalar(1) / std::sqrt(var + eps);
    xh.row(i) = (xm.row(i).array() - mu) * inv_std[i];
  }
  Vec<Scalar> y(x.numel());
  as_matrix(y, rows, d) = (xh.array().rowwise() * gain.data().transpose()).rowwise() + bias.data().transpose();

  return make_op<Scalar>(x.shape(), std::move(y), {x, gain, bias},
                         [xhat = std::move(xhat), inv_std = std::move(inv_std), rows, d](Node<Scalar>& n) {
                           auto g = as_matrix(*n.grad, rows, d);
                           auto xh = as_matrix(xhat, rows, d);
                           auto& px = *n.parents[0];
                           auto& pg = *n.parents[1];
                           auto& pb = *n.parents[2];
                           if (pg.requires_grad) {
                             Vec<Scalar> gg = (g.array() * xh.array()).colwise().sum().transpose();
                             pg.accumulate(gg);
                           }
                           if (pb.requires_grad) {
                             Vec<Scalar> gb = g.array().colwise().sum().transpose();
                             pb.accumulate(gb);
                           }
                           if (px.requires_grad) {
                             Vec<Scalar> gx(rows * d);
                             auto gxm = as_matrix(gx, rows, d);
                             for (Index i = 0; i < rows; ++i) {
                               Eigen::Array<Scalar, 1, Eigen::Dynamic> gy = g.row(i).array() * pg.value.transpose();
                               const Scalar m1 = gy.mean();
                               const Scalar m2 = (gy * xh.row(i).array()).mean();
                               gxm.row(i) = (inv_std[i] * (gy - m1 - xh.row(i).array() * m2)).matrix();
                             }
                             px.accumulate(gx);
                           }
                         });
}

template <typename Scalar>
Tensor<Scalar> mask_rows(const Tensor<Scalar>& x, std::span<const Scalar> row_weights) {
  const Index d = x.dim(-1);
  const Index rows = x.numel() / d;
  if (static_cast<Index>(row_weights.size()) != rows) throw DimensionError("mask_rows weight count mismatch");
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> w =
      Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(row_weights.data(), rows);
  Vec<Scalar> y(x.numel());
  as_matrix(y, rows, d) = w.asDiagonal() * as_matrix(x.data(), rows, d);
  return make_op<Scalar>(x.shape(), std::move(y), {x}, [w, rows, d](Node<Scalar>& n) {
    Vec<Scalar> g(rows * d);
    as_matrix(g, rows, d) = w.asDiagonal() * as_matrix(*n.grad, rows, d);
    n.parents[0]->accumulate(g);
  });
}

template <typename Scalar>
Tensor<Scalar> pair_sum(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
    throw DimensionError("pair_sum needs [m,h] and [n,h]");
  }
  const Index m = a.dim(0), nn = b.dim(0), h = a.dim(1);
  Vec<Scalar> v(m * nn * h);
  auto am = as_matrix(a.data(), m, h);
  auto bm = as_matrix(b.data(), nn, h);
  for (Index i = 0; i < m; ++i) {
    MatMap<Scalar>(v.data() + i * nn * h, nn, h) = bm.rowwise() + am.row(i);
  }
  return make_op<Scalar>(Shape{m, nn, h}, std::move(v), {a, b}, [m, nn, h](Node<Scalar>& n) {
    Vec<Scalar> ga = Vec<Scalar>::Zero(m * h);
    Vec<Scalar> gb = Vec<Scalar>::Zero(nn * h);
    auto gam = as_matrix(ga, m, h);
    auto gbm = as_matrix(gb, nn, h);
    for (Index i = 0; i < m; ++i) {
      CMatMap<Scalar> g(n.grad->data() + i * nn * h, nn, h);
      gam.row(i) = g.colwise().sum();
      gbm += g;
    }
    n.parents[0]->accumulate(ga);
    n.parents[1]->accumulate(gb);
  });
}

template <typename Scalar>
Tensor<Scalar> dropout(const Tensor<Scalar>& x, double rate, std::mt19937_64& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw DimensionError("dropout rate must be < 1");
  std::bernoulli_distribution keep(1.0 - rate);
  Vec<Scalar> m(x.numel());
  const Scalar s = Scalar(1.0 / (1.0 - rate));
  for (Index i = 0; i < m.size(); ++i) m[i] = keep(rng) ? s : Scalar(0);
  Vec<Scalar> y = x.data() * m;
  return make_op<Scalar>(x.shape(), std::move(y), {x},
                         [m](Node<Scalar>& n) { n.parents[0]->accumulate(*n.grad * m); });
}

// ---------------------------------------------------------------------------
// losses

template <typename Scalar>
Tensor<Scalar> cross_entropy_from_logits(const Tensor<Scalar>& logits, std::span<const Index> targets,
                                         Index ignore_index) {
  if (logits.rank() != 2) throw DimensionError("cross_entropy expects [N, C] logits");
  const Index rows = logits.dim(0), classes = logits.dim(1);
  if (static_cast<Index>(targets.size()) != rows) throw DimensionError("cross_entropy target count mismatch");
  std::vector<Index> tgt(targets.begin(), targets.end());
  auto lm = as_matrix(logits.data(), rows, classes);

  RowMatrix<Scalar> probs(rows, classes);
  Scalar total = 0;
  Index counted = 0;
  for (Index i = 0; i < rows; ++i) {
    const Scalar mx = lm.row(i).maxCoeff();
    probs.row(i) = (lm.row(i).array() - mx).exp().matrix();
    const Scalar z = probs.row(i).sum();
    probs.row(i) /= z;
    if (tgt[i] == ignore_index) continue;
    if (tgt[i] < 0 || tgt[i] >= classes) throw DimensionError("cross_entropy target out of range");
    total += -(lm(i, tgt[i]) - mx - std::log(z));
    ++counted;
  }
  const Scalar loss = counted ? total / Scalar(counted) : Scalar(0);
  return make_op<Scalar>(Shape{}, Vec<Scalar>::Constant(1, loss), {logits},
                         [probs = std::move(probs), tgt = std::move(tgt), counted, ignore_index, rows,
                          classes](Node<Scalar>& n) {
                           Vec<Scalar> g = Vec<Scalar>::Zero(rows * classes);
                           if (counted) {
                             auto gm = as_matrix(g, rows, classes);
                             const Scalar s = (*n.grad)[0] / Scalar(counted);
                             for (Index i = 0; i < rows; ++i) {
                               if (tgt[i] == ignore_index) continue;
                               gm.row(i) = probs.row(i) * s;
                               gm(i, tgt[i]) -= s;
                             }
                           }
                           n.parents[0]->accumulate(g);
                         });
}

template <typename Scalar>
Tensor<Scalar> binary_cross_entropy(const Tensor<Scalar>& probabilities, std::span<const Scalar> labels,
                                    std::span<const std::uint8_t> element_mask) {
  const Index k = probabilities.numel();
  if (static_cast<Index>(labels.size()) != k || static_cast<Index>(element_mask.size()) != k) {
    throw DimensionError("binary_cross_entropy label/mask size mismatch");
  }
  const Scalar lo = Scalar(kProbabilityClip);
  const Scalar hi = Scalar(1) - lo;
  std::vector<Scalar> y(labels.begin(), labels.end());
  std::vector<std::uint8_t> mask(element_mask.begin(), element_mask.end());
  Index counted = 0;
  Scalar total = 0;
  const auto& p = probabilities.data();
  for (Index i = 0; i < k; ++i) {
    if (!mask[i]) continue;
    const Scalar pc = std::clamp(p[i], lo, hi);
    total += -(y[i] * std::log(pc) + (Scalar(1) - y[i]) * std::log(Scalar(1) - pc));
    ++counted;
  }
  const Scalar loss = counted ? total / Scalar(counted) : Scalar(0);
  return make_op<Scalar>(Shape{}, Vec<Scalar>::Constant(1, loss), {probabilities},
                         [y = std::move(y), mask = std::move(mask), counted, lo, hi, k](Node<Scalar>& n) {
                           Vec<Scalar> g = Vec<Scalar>::Zero(k);
                           if (counted) {
                             const auto& p = n.parents[0]->value;
                             const Scalar s = (*n.grad)[0] / Scalar(counted);
                             for (Index i = 0; i < k; ++i) {
                               if (!mask[i] || p[i] <= lo || p[i] >= hi) continue;
                               g[i] = s * (-y[i] / p[i] + (Scalar(1) - y[i]) / (Scalar(1) - p[i]));
                             }
                           }
                           n.parents[0]->accumulate(g);
                         });
}

// ---------------------------------------------------------------------------

#define BIVL_INSTANTIATE(S)                                                                                    \
  template class Tensor<S>;                                                                                    \
  template Tensor<S> make_op(Shape, Vec<S>, std::vector<Tensor<S>>, std::function<void(Node<S>&)>);         \
  template Tensor<S> add(const Tensor<S>&, const Tensor<S>&);                                                 \
  template Tensor<S> sub(const Tensor<S>&, const Tensor<S>&);                                                 \
  template Tensor<S> mul(const Tensor<S>&, const Tensor<S>&);                                                 \
  template Tensor<S> scale(const Tensor<S>&, S);                                                              \
  template Tensor<S> add_scalar(const Tensor<S>&, S);                                                         \
  template Tensor<S> matmul(const Tensor<S>&, const Tensor<S>&);                                              \
  template Tensor<S> transpose(const Tensor<S>&);                                                             \
  template Tensor<S> reshape(const Tensor<S>&, Shape);                                                        \
  template Tensor<S> concat(const std::vector<Tensor<S>>&, Index);                                            \
  template std::vector<Tensor<S>> split(const Tensor<S>&, Index, const std::vector<Index>&);                  \
  template Tensor<S> embedding_lookup(const Tensor<S>&, std::span<const Index>);                              \
  template Tensor<S> sigmoid(const Tensor<S>&);                                                               \
  template Tensor<S> relu(const Tensor<S>&);                                                                  \
  template Tensor<S> gelu(const Tensor<S>&);                                                                  \
  template Tensor<S> clamp(const Tensor<S>&, S, S);                                                           \
  template Tensor<S> minimum(const Tensor<S>&, const Tensor<S>&);                                                           \
  template Tensor<S> sum(const Tensor<S>&);                                                                   \
  template Tensor<S> mean(const Tensor<S>&);                                                                  \
  template Tensor<S> masked_softmax(const Tensor<S>&, std::span<const std::uint8_t>);                         \
  template Tensor<S> layer_norm(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, S);                    \
  template Tensor<S> mask_rows(const Tensor<S>&, std::span<const S>);                                         \
  template Tensor<S> pair_sum(const Tensor<S>&, const Tensor<S>&);                                            \
  template Tensor<S> dropout(const Tensor<S>&, double, std::mt19937_64&);                                     \
  template Tensor<S> cross_entropy_from_logits(const Tensor<S>&, std::span<const Index>, Index);             \
  template Tensor<S> binary_cross_entropy(const Tensor<S>&, std::span<const S>, std::span<const std::uint8_t>);

BIVL_INSTANTIATE(float)
BIVL_INSTANTIATE(double)

#undef BIVL_INSTANTIATE

}  // namespace bivl
