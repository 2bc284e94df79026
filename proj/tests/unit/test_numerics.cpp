#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "prima/errors.hpp"
#include "prima/numerics.hpp"

using namespace prima;

namespace {
Vector vec(std::initializer_list<double> v) {
  Vector out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out[i++] = x;
  return out;
}
}  // namespace

TEST_CASE("similarity of a vector with itself is 1/tau") {
  CHECK(temperature_scaled_similarity(vec({3, 4}), vec({3, 4}), {0.07}) ==
        doctest::Approx(1.0 / 0.07).epsilon(1e-12));
}

TEST_CASE("orthogonal vectors have zero similarity") {
  CHECK(temperature_scaled_similarity(vec({1, 0}), vec({0, 1}), {1.0}) == 0.0);
}

TEST_CASE("similarity matches the scalar oracle") {
  const double got = temperature_scaled_similarity(vec({1, 0}), vec({1, 1}), {0.5});
  CHECK(got == doctest::Approx(oracle::sim(vec({1, 0}), vec({1, 1}), 0.5)).epsilon(1e-14));
  CHECK(got == doctest::Approx(1.414214).epsilon(1e-6));
}

TEST_CASE("similarity errors") {
  CHECK_THROWS_AS(temperature_scaled_similarity(vec({0, 0}), vec({1, 1}), {1.0}), DomainError);
  CHECK_THROWS_WITH_AS(temperature_scaled_similarity(vec({1, 1}), vec({0, 0}), {1.0}),
                       doctest::Contains("x2"), DomainError);
  CHECK_THROWS_AS(temperature_scaled_similarity(vec({1, 1}), vec({1, 1, 1}), {1.0}), ShapeError);
  CHECK_THROWS_AS(temperature_scaled_similarity(vec({1, 1}), vec({1, 1}), {0.0}), DomainError);
}

TEST_CASE("similarity properties on random vectors") {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const Eigen::Index d = 1 + static_cast<Eigen::Index>(rng.index(8));
    Vector a(d), b(d);
    for (Eigen::Index t = 0; t < d; ++t) {
      a[t] = rng.normal();
      b[t] = rng.normal();
    }
    const double tau = rng.uniform(0.05, 2.0);
    const double ab = temperature_scaled_similarity(a, b, {tau});
    CHECK(ab == doctest::Approx(temperature_scaled_similarity(b, a, {tau})).epsilon(1e-12));
    const double scale = rng.uniform(0.01, 100.0);
    CHECK(temperature_scaled_similarity(a * scale, b, {tau}) == doctest::Approx(ab).epsilon(1e-12));
    CHECK(std::abs(ab) <= 1.0 / tau + 1e-12);
  }
}

TEST_CASE("log_softmax examples") {
  Vector z = log_softmax(vec({0, 0}));
  CHECK(z[0] == doctest::Approx(-std::log(2.0)));
  CHECK(z[1] == doctest::Approx(-std::log(2.0)));

  Vector big = log_softmax(vec({1000, 0}));
  CHECK(std::isfinite(big[0]));
  CHECK(big[0] == doctest::Approx(0.0));
  CHECK(big[1] == doctest::Approx(-1000.0));

  Vector small = log_softmax(vec({1, 2, 3}));
  const double naive_den = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  for (int i = 0; i < 3; ++i) {
    CHECK(std::abs(small[i] - std::log(std::exp(i + 1.0) / naive_den)) < 1e-12);
  }
  CHECK_THROWS_AS(log_softmax(Vector()), ShapeError);
}

TEST_CASE("log_softmax normalizes for arbitrary finite logits") {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    Vector z(1 + static_cast<Eigen::Index>(rng.index(20)));
    for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = rng.uniform(-1e4, 1e4);
    CHECK(std::abs(log_softmax(z).array().exp().sum() - 1.0) < 1e-9);
  }
}

TEST_CASE("matrix log_softmax along each axis") {
  Matrix m(2, 3);
  m << 1, 2, 3, -1, 0, 4;
  Matrix by_row = log_softmax(m, Axis::Cols);
  Matrix by_col = log_softmax(m, Axis::Rows);
  for (int r = 0; r < 2; ++r) CHECK(by_row.row(r).array().exp().sum() == doctest::Approx(1.0));
  for (int c = 0; c < 3; ++c) CHECK(by_col.col(c).array().exp().sum() == doctest::Approx(1.0));
}

TEST_CASE("seeded streams are reproducible") {
  Rng a(0), b(0), c(1);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next();
    CHECK(x == b.next());
    differs |= x != c.next();
  }
  CHECK(differs);
  CHECK(Rng::derive(7, {1, 2}) == Rng::derive(7, {1, 2}));
  CHECK(Rng::derive(7, {1, 2}) != Rng::derive(7, {2, 1}));
}
