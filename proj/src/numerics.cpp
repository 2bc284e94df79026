#include "prima/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "prima/errors.hpp"

namespace prima {

void SimilarityConfig::validate() const {
  if (!(tau > 0.0) || !std::isfinite(tau)) {
    throw DomainError("temperature tau must be positive and finite, got " + std::to_string(tau));
  }
}

double temperature_scaled_similarity(const Vector& x1, const Vector& x2,
                                     const SimilarityConfig& cfg) {
  cfg.validate();
  if (x1.size() != x2.size()) {
    throw ShapeError("similarity operands differ in length: " + std::to_string(x1.size()) +
                     " vs " + std::to_string(x2.size()));
  }
  if (x1.size() == 0) throw ShapeError("similarity operands are empty");
  const double n1 = x1.norm();
  const double n2 = x2.norm();
  if (n1 == 0.0) throw DomainError("similarity operand x1 has zero norm");
  if (n2 == 0.0) throw DomainError("similarity operand x2 has zero norm");
  return x1.dot(x2) / (n1 * n2) / cfg.tau;
}

double log_sum_exp(std::span<const double> values) {
  if (values.empty()) throw ShapeError("log_sum_exp over an empty range");
  const double peak = *std::max_element(values.begin(), values.end());
  if (!std::isfinite(peak)) return peak;
  double acc = 0.0;
  for (double v : values) acc += std::exp(v - peak);
  return peak + std::log(acc);
}

Vector log_softmax(const Vector& logits) {
  if (logits.size() == 0) throw ShapeError("log_softmax over an empty axis");
  const double lse = log_sum_exp(std::span<const double>(logits.data(), logits.size()));
  return logits.array() - lse;
}

Matrix log_softmax(const Matrix& logits, Axis axis) {
  if (logits.size() == 0) throw ShapeError("log_softmax over an empty axis");
  Matrix out(logits.rows(), logits.cols());
  if (axis == Axis::Cols) {
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
      const double peak = logits.row(r).maxCoeff();
      const double lse = peak + std::log((logits.row(r).array() - peak).exp().sum());
      out.row(r) = logits.row(r).array() - lse;
    }
  } else {
    for (Eigen::Index c = 0; c < logits.cols(); ++c) {
      const double peak = logits.col(c).maxCoeff();
      const double lse = peak + std::log((logits.col(c).array() - peak).exp().sum());
      out.col(c) = logits.col(c).array() - lse;
    }
  }
  return out;
}

std::uint64_t Rng::derive(std::uint64_t root, std::initializer_list<std::uint64_t> tags) {
  // splitmix64 chaining
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  std::uint64_t h = mix(root);
  for (auto t : tags) h = mix(h ^ mix(t));
  return h;
}

Matrix Rng::normal_matrix(Eigen::Index rows, Eigen::Index cols, double stddev) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(0.0, stddev);
  return m;
}

}  // namespace prima
