#include <doctest.h>

#include "prima/autograd.hpp"
#include "prima/errors.hpp"
#include "prima/gradcheck.hpp"

using namespace prima;

namespace {

void expect_gradients(const GraphFunction& f, std::vector<Matrix> inputs, double tol = 1e-6) {
  const auto cmp = compare_gradients(f, inputs);
  INFO("max rel error " << cmp.max_rel_error);
  CHECK(cmp.max_rel_error < tol);
}

// Contracts an arbitrary matrix to a scalar with fixed random weights so
// every output entry receives a distinct upstream gradient.
ag::Var contract(const ag::Var& x, std::uint64_t seed = 99) {
  Rng rng(seed);
  return ag::weighted_sum(x, rng.normal_matrix(x.rows(), x.cols(), 1.0));
}

}  // namespace

TEST_CASE("elementwise and linear ops match finite differences") {
  Rng rng(1);
  const Matrix a = rng.normal_matrix(3, 4, 1.0);
  const Matrix b = rng.normal_matrix(4, 2, 1.0);
  const Matrix c = rng.normal_matrix(3, 4, 1.0);
  const Matrix bias = rng.normal_matrix(1, 4, 1.0);

  expect_gradients([](auto& v) { return contract(ag::matmul(v[0], v[1])); }, {a, b});
  expect_gradients([](auto& v) { return contract(ag::matmul_nt(v[0], v[1])); }, {a, c});
  expect_gradients([](auto& v) { return contract(ag::transpose(v[0])); }, {a});
  expect_gradients([](auto& v) { return contract(ag::add(v[0], v[1])); }, {a, c});
  expect_gradients([](auto& v) { return contract(ag::sub(v[0], v[1])); }, {a, c});
  expect_gradients([](auto& v) { return contract(ag::mul(v[0], v[1])); }, {a, c});
  expect_gradients([](auto& v) { return contract(ag::scale(v[0], -2.5)); }, {a});
  expect_gradients([](auto& v) { return contract(ag::add_row(v[0], v[1])); }, {a, bias});
  expect_gradients([](auto& v) { return contract(ag::gelu(v[0])); }, {a});
  expect_gradients([](auto& v) { return contract(ag::tanh(v[0])); }, {a});
}

TEST_CASE("normalizations and softmax variants match finite differences") {
  Rng rng(2);
  const Matrix a = rng.normal_matrix(4, 5, 1.0);
  expect_gradients([](auto& v) { return contract(ag::l2_normalize_rows(v[0])); }, {a});
  expect_gradients([](auto& v) { return contract(ag::layer_norm_rows(v[0])); }, {a});
  expect_gradients([](auto& v) { return contract(ag::softmax_rows(v[0])); }, {a});
  expect_gradients([](auto& v) { return contract(ag::log_softmax_rows(v[0])); }, {a});
  expect_gradients([](auto& v) { return contract(ag::log_softmax_cols(v[0])); }, {a});
  ag::Mask mask = ag::Mask::Constant(4, 5, true);
  mask(0, 1) = mask(2, 4) = mask(3, 0) = false;
  Matrix w = Rng(3).normal_matrix(4, 5, 1.0);
  w(0, 1) = w(2, 4) = w(3, 0) = 0.0;
  expect_gradients(
      [&](auto& v) { return ag::weighted_sum(ag::log_softmax_rows(v[0], mask), w); }, {a});
}

TEST_CASE("structural ops match finite differences") {
  Rng rng(4);
  const Matrix a = rng.normal_matrix(6, 3, 1.0);
  const Matrix b = rng.normal_matrix(2, 3, 1.0);
  const std::vector<Eigen::Index> idx = {5, 0, 0, 3};
  expect_gradients([](auto& v) { return contract(ag::rows(v[0], 1, 3)); }, {a});
  expect_gradients([&](auto& v) { return contract(ag::gather_rows(v[0], idx)); }, {a});
  const std::vector<Eigen::Index> cidx = {2, 2, 0};
  expect_gradients([&](auto& v) { return contract(ag::gather_cols(v[0], cidx)); }, {a});
  expect_gradients([](auto& v) { return contract(ag::concat_rows(std::vector{v[0], v[1], v[0]})); },
                   {a, b});
  expect_gradients([](auto& v) {
    return contract(ag::concat_cols(std::vector{v[0], ag::transpose(v[0])}), 5);
  }, {Matrix(rng.normal_matrix(3, 3, 1.0))});
  expect_gradients([](auto& v) { return contract(ag::reshape(v[0], 9, 2)); }, {a});
  expect_gradients([](auto& v) { return contract(ag::pad_rows(v[0], 2)); }, {a});
  expect_gradients([](auto& v) { return ag::sum(ag::mul(v[0], v[0])); }, {a});
}

TEST_CASE("block attention matches finite differences with masks") {
  Rng rng(6);
  const Matrix q = rng.normal_matrix(8, 3, 1.0);
  const Matrix k = rng.normal_matrix(8, 3, 1.0);
  const Matrix v = rng.normal_matrix(8, 2, 1.0);
  const std::vector<bool> valid = {true, true, true, false, true, true, false, false};
  for (bool causal : {false, true}) {
    expect_gradients(
        [&](auto& x) { return contract(ag::block_attention(x[0], x[1], x[2], 4, valid, causal)); },
        {q, k, v});
    expect_gradients(
        [&](auto& x) { return contract(ag::block_attention(x[0], x[1], x[2], 2, {}, causal)); },
        {q, k, v});
  }
}

TEST_CASE("block attention rows are convex combinations of visible values") {
  Matrix q = Matrix::Zero(3, 2), k = Matrix::Zero(3, 2);
  Matrix v(3, 1);
  v << 1.0, 2.0, 30.0;
  auto out = ag::block_attention(ag::constant(q), ag::constant(k), ag::constant(v), 3,
                                 {true, true, false}, false);
  for (int r = 0; r < 3; ++r) CHECK(out.value()(r, 0) == doctest::Approx(1.5));
  auto causal = ag::block_attention(ag::constant(q), ag::constant(k), ag::constant(v), 3, {}, true);
  CHECK(causal.value()(0, 0) == doctest::Approx(1.0));
  CHECK(causal.value()(2, 0) == doctest::Approx(11.0));
}

TEST_CASE("gradients accumulate on shared leaves and skip constants") {
  ag::Var x(Matrix::Constant(1, 1, 3.0), true);
  ag::Var c = ag::constant(Matrix::Constant(1, 1, 2.0));
  ag::Var y = ag::add(ag::mul(x, x), ag::mul(x, c));
  ag::backward(y);
  CHECK(x.grad()(0, 0) == doctest::Approx(8.0));
  CHECK_FALSE(c.requires_grad());
}

TEST_CASE("shape errors") {
  ag::Var a(Matrix::Zero(2, 3)), b(Matrix::Zero(2, 2));
  CHECK_THROWS_AS(ag::matmul(a, a), ShapeError);
  CHECK_THROWS_AS(ag::add(a, b), ShapeError);
  CHECK_THROWS_AS(ag::l2_normalize_rows(a), DomainError);
  CHECK_THROWS_AS(ag::backward(a), ShapeError);
}
