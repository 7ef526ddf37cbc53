#include <cmath>
#include <random>

#include "doctest.h"

#include "bivl/grad_check.hpp"
#include "bivl/tensor.hpp"

using namespace bivl;

namespace {

using T = Tensor<double>;

T matrix(Index r, Index c, std::vector<double> v, bool grad = false) { return T({r, c}, Vec<double>::Map(v.data(), Index(v.size())), grad); }

T random_tensor(Shape shape, std::mt19937_64& rng, bool grad = true) {
  std::normal_distribution<double> n;
  Vec<double> v(shape_numel(shape));
  for (Index i = 0; i < v.size(); ++i) v[i] = n(rng);
  return T(std::move(shape), std::move(v), grad);
}

}  // namespace

TEST_SUITE("tensor") {

TEST_CASE("matmul hand cases") {
  const T eye = matrix(2, 2, {1, 0, 0, 1});
  const T b = matrix(2, 2, {3, 4, 5, 6});
  const T c = matmul(eye, b);
  CHECK(c.shape() == Shape{2, 2});
  CHECK(c.data()[0] == 3);
  CHECK(c.data()[1] == 4);
  CHECK(c.data()[2] == 5);
  CHECK(c.data()[3] == 6);
  CHECK(matmul(matrix(1, 2, {1, 2}), matrix(2, 1, {3, 4})).item() == 11);
  CHECK_THROWS_AS(matmul(matrix(1, 2, {1, 2}), matrix(1, 2, {3, 4})), DimensionError);
}

TEST_CASE("gradient of sum(AB) wrt A is ones times B transposed") {
  std::mt19937_64 rng(3);
  T a = random_tensor({3, 4}, rng), b = random_tensor({4, 2}, rng, false);
  sum(matmul(a, b)).backward();
  const auto bm = b.matrix();
  for (Index i = 0; i < 3; ++i) {
    for (Index k = 0; k < 4; ++k) CHECK(a.grad()[i * 4 + k] == doctest::Approx(bm.row(k).sum()).epsilon(1e-12));
  }
  a.zero_grad();
  const auto report = grad_check<double>([&] { return sum(matmul(a, b)); }, {a}, {.step = 1e-5, .tolerance = 1e-6});
  CHECK(report.passed());
}

TEST_CASE("masked softmax") {
  const std::vector<std::uint8_t> both{1, 1}, first{1, 0}, all3{1, 1, 1}, none{0, 0};
  auto p = masked_softmax(matrix(1, 2, {0, 0}), both);
  CHECK(p.data()[0] == 0.5);
  CHECK(p.data()[1] == 0.5);
  p = masked_softmax(matrix(1, 2, {5, -3}), first);
  CHECK(p.data()[0] == 1.0);
  CHECK(p.data()[1] == 0.0);

  p = masked_softmax(matrix(1, 3, {1, 2, 3}), all3);
  const long double z = std::exp(1.0L) + std::exp(2.0L) + std::exp(3.0L);
  for (int k = 0; k < 3; ++k) CHECK(p.data()[k] == doctest::Approx(double(std::exp(k + 1.0L) / z)).epsilon(1e-14));

  CHECK_THROWS_AS(masked_softmax(matrix(1, 2, {0, 0}), none), DegenerateMaskError);

  std::mt19937_64 rng(9);
  const std::vector<std::uint8_t> mask{1, 0, 1, 1, 0};
  const T scores = random_tensor({4, 5}, rng, false);
  const auto probs = masked_softmax(scores, mask).matrix().eval();
  for (Index r = 0; r < 4; ++r) {
    CHECK(std::abs(probs.row(r).sum() - 1.0) <= 1e-6);
    CHECK(probs(r, 1) == 0.0);
    CHECK(probs(r, 4) == 0.0);
  }
}

TEST_CASE("layer norm") {
  const T gain = T::filled({4}, 1.0), bias = T::zeros({4});
  const auto flat = layer_norm(matrix(1, 4, {1, 1, 1, 1}), gain, bias);
  for (int k = 0; k < 4; ++k) CHECK(flat.data()[k] == 0.0);

  const double a = 3.0, eps = 1e-5;
  const auto sym = layer_norm(matrix(1, 2, {-a, a}), T::filled({2}, 1.0), T::zeros({2}), eps);
  const double expect = a / std::sqrt(a * a + eps);
  CHECK(sym.data()[0] == doctest::Approx(-expect).epsilon(1e-14));
  CHECK(sym.data()[1] == doctest::Approx(expect).epsilon(1e-14));

  // Two-pass oracle.
  std::mt19937_64 rng(4);
  const T x = random_tensor({5, 7}, rng, false);
  const auto y = layer_norm(x, T::filled({7}, 1.0), T::zeros({7}), 0.0).matrix().eval();
  const auto xm = x.matrix();
  for (Index r = 0; r < 5; ++r) {
    double mu = 0;
    for (Index c = 0; c < 7; ++c) mu += xm(r, c);
    mu /= 7;
    double var = 0;
    for (Index c = 0; c < 7; ++c) var += (xm(r, c) - mu) * (xm(r, c) - mu);
    var /= 7;
    for (Index c = 0; c < 7; ++c) CHECK(y(r, c) == doctest::Approx((xm(r, c) - mu) / std::sqrt(var)).epsilon(1e-12));
    CHECK(std::abs(y.row(r).mean()) < 1e-12);
  }
  CHECK_THROWS_AS(layer_norm(matrix(1, 1, {2}), T::filled({1}, 1.0), T::zeros({1})), DimensionError);
}

TEST_CASE("backward basics") {
  T x = T::from_vector({1.5, -2.0, 0.25}, true);
  sum(x).backward();
  for (int k = 0; k < 3; ++k) CHECK(x.grad()[k] == 1.0);

  x.zero_grad();
  sum(mul(x, x)).backward();
  for (int k = 0; k < 3; ++k) CHECK(x.grad()[k] == 2 * x.data()[k]);

  // Second pass without a reset is refused.
  CHECK_THROWS_AS(sum(x).backward(), GradientError);
  x.zero_grad();
  CHECK_THROWS_AS(mul(x, x).backward(), GradientError);
}

TEST_CASE("backward is linear in the loss") {
  std::mt19937_64 rng(5);
  T x = random_tensor({3, 3}, rng);
  auto l1 = [&] { return sum(mul(sigmoid(x), x)); };
  auto l2 = [&] { return mean(gelu(matmul(x, x))); };
  l1().backward();
  const Vec<double> g1 = x.grad();
  x.zero_grad();
  l2().backward();
  const Vec<double> g2 = x.grad();
  x.zero_grad();
  add(scale(l1(), 0.7), scale(l2(), -1.3)).backward();
  CHECK(((x.grad() - (0.7 * g1 - 1.3 * g2)).abs().maxCoeff()) <= 1e-10);
}

TEST_CASE("repeated runs are bit-identical") {
  auto run = [] {
    std::mt19937_64 rng(21);
    T a = random_tensor({4, 6}, rng);
    T w = random_tensor({6, 3}, rng);
    const std::vector<std::uint8_t> mask{1, 1, 0};
    T out = sum(layer_norm(masked_softmax(matmul(a, w), mask), T::filled({3}, 1.0), T::zeros({3})));
    out.backward();
    return std::pair{out.item(), Vec<double>(a.grad())};
  };
  const auto first = run(), second = run();
  CHECK(first.first == second.first);
  CHECK((first.second.array() == second.second.array()).all());
}

TEST_CASE("every op agrees with finite differences") {
  std::mt19937_64 rng(12);
  T a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng), row = random_tensor({4}, rng);
  T sq = random_tensor({4, 4}, rng);
  T gain = random_tensor({4}, rng), bias = random_tensor({4}, rng);
  const std::vector<std::uint8_t> keys{1, 0, 1, 1};
  const std::vector<Index> ids{2, 0, 2, 3, 1};
  const std::vector<Index> targets{1, kIgnoreIndex, 3};
  const std::vector<double> labels{1, 0, 1, 0, 0, 1, 1, 0, 1, 1, 0, 0};
  const std::vector<std::uint8_t> element_mask{1, 1, 1, 0, 1, 1, 1, 1, 0, 1, 1, 1};
  const std::vector<double> row_w{1.0, 0.0, 2.0};

  struct Op {
    const char* name;
    std::function<T()> f;
    std::vector<T> inputs;
  };
  const std::vector<Op> ops{
      {"add", [&] { return sum(mul(add(a, b), a)); }, {a, b}},
      {"add broadcast", [&] { return sum(mul(add(a, row), a)); }, {a, row}},
      {"sub", [&] { return sum(mul(sub(a, b), b)); }, {a, b}},
      {"mul", [&] { return sum(mul(mul(a, b), a)); }, {a, b}},
      {"scale", [&] { return sum(mul(scale(a, 1.7), b)); }, {a, b}},
      {"matmul", [&] { return sum(mul(matmul(a, sq), b)); }, {a, sq, b}},
      {"transpose", [&] { return sum(matmul(transpose(a), b)); }, {a, b}},
      {"reshape", [&] { return sum(mul(reshape(a, {4, 3}), reshape(b, {4, 3}))); }, {a, b}},
      {"concat", [&] { return sum(mul(concat<double>({a, b}, 1), concat<double>({b, a}, 1))); }, {a, b}},
      {"split", [&] { auto p = split(a, 1, {1, 3}); return add(sum(mul(p[0], p[0])), sum(p[1])); }, {a}},
      {"embedding", [&] { return sum(mul(embedding_lookup<double>(sq, ids), embedding_lookup<double>(sq, ids))); }, {sq}},
      {"sigmoid", [&] { return sum(mul(sigmoid(a), b)); }, {a, b}},
      {"relu", [&] { return sum(mul(relu(a), b)); }, {a, b}},
      {"gelu", [&] { return sum(mul(gelu(a), b)); }, {a, b}},
      {"minimum", [&] { return sum(mul(minimum(a, b), a)); }, {a, b}},
      {"mean", [&] { return mean(mul(a, b)); }, {a, b}},
      {"softmax", [&] { auto p = masked_softmax(matmul(a, sq), keys); return sum(mul(p, p)); }, {a, sq}},
      {"layer norm", [&] { return sum(mul(layer_norm(a, gain, bias), b)); }, {a, gain, bias, b}},
      {"mask rows", [&] { return sum(mul(mask_rows<double>(a, row_w), b)); }, {a, b}},
      {"pair sum", [&] { auto p = pair_sum(a, b); return sum(mul(p, p)); }, {a, b}},
      {"cross entropy", [&] { return cross_entropy_from_logits<double>(a, targets); }, {a}},
      {"bce", [&] { return binary_cross_entropy<double>(reshape(sigmoid(a), {12}), labels, element_mask); }, {a}},
  };
  for (const auto& op : ops) {
    CAPTURE(op.name);
    const auto report = grad_check<double>(op.f, op.inputs, {.tolerance = 1e-5, .seed = 1});
    CHECK(report.passed());
    CHECK(report.max_rel_err <= 1e-5);
  }
}

TEST_CASE("minimum sends the gradient to the smaller operand") {
  T a = T::from_vector({1.0, 5.0, 2.0}, true), b = T::from_vector({3.0, 4.0, 2.0}, true);
  const T m = minimum(a, b);
  CHECK(m.data()[0] == 1.0);
  CHECK(m.data()[1] == 4.0);
  sum(m).backward();
  CHECK(a.grad()[0] == 1.0);
  CHECK(b.grad()[0] == 0.0);
  CHECK(a.grad()[1] == 0.0);
  CHECK(b.grad()[1] == 1.0);
  // Ties go to the first operand.
  CHECK(a.grad()[2] == 1.0);
  CHECK(b.grad()[2] == 0.0);
  CHECK_THROWS_AS(minimum(a, T::from_vector({1.0, 2.0})), DimensionError);
}

TEST_CASE("losses on fixtures") {
  const std::vector<Index> all_ignored{kIgnoreIndex, kIgnoreIndex};
  CHECK(cross_entropy_from_logits<double>(T::zeros({2, 5}), all_ignored).item() == 0.0);
  const std::vector<Index> t{0, 4};
  CHECK(cross_entropy_from_logits<double>(T::zeros({2, 5}), t).item() == doctest::Approx(std::log(5.0)));

  const std::vector<double> y{1, 0};
  const std::vector<std::uint8_t> keep{1, 1};
  CHECK(binary_cross_entropy<double>(T::from_vector({0.5, 0.5}), y, keep).item() == doctest::Approx(std::log(2.0)));
  // Clipping keeps a confidently wrong prediction finite.
  const double clipped = binary_cross_entropy<double>(T::from_vector({0.0, 1.0}), y, keep).item();
  CHECK(std::isfinite(clipped));
  CHECK(clipped == doctest::Approx(-std::log(kProbabilityClip)).epsilon(1e-6));
}

TEST_CASE("grad_check harness") {
  T x = T::from_vector({0.3, -1.2, 2.0}, true);
  auto report = grad_check<double>([&] { return sum(x); }, {x});
  CHECK(report.max_rel_err <= 1e-9);  // central differences round at the last bits
  CHECK(report.coordinates == 3);

  const std::vector<std::uint8_t> mask{1, 1, 0};
  T s = T({2, 3}, Vec<double>::LinSpaced(6, -1.0, 1.5), true);
  report = grad_check<double>([&] { auto p = masked_softmax(s, mask); return sum(mul(p, p)); }, {s},
                              {.tolerance = 1e-5});
  CHECK(report.passed());

  // Wrong by a factor of two.
  auto broken = [&] {
    Vec<double> v(1);
    v[0] = x.data().square().sum();
    return make_op<double>(Shape{}, v, {x}, [](Node<double>& n) {
      n.parents[0]->accumulate(4.0 * n.parents[0]->value * (*n.grad)[0]);
    });
  };
  report = grad_check<double>(broken, {x});
  CHECK_FALSE(report.passed());
  CHECK(report.failures.size() == 3);

  int calls = 0;
  auto flaky = [&] { return scale(sum(x), double(++calls)); };
  CHECK_THROWS_AS(grad_check<double>(flaky, {x}), DeterminismError);
}

}  // TEST_SUITE
