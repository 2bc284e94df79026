#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <span>
#include <vector>

namespace prima {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

inline constexpr double kDefaultTau = 0.07;

struct SimilarityConfig {
  double tau = kDefaultTau;

  void validate() const;
};

/// Cosine similarity divided by the temperature. Throws DomainError naming
/// the zero-norm operand ("x1" or "x2") and ShapeError on length mismatch.
double temperature_scaled_similarity(const Vector& x1, const Vector& x2,
                                     const SimilarityConfig& cfg);

/// Max-shifted log-sum-exp over a non-empty range.
double log_sum_exp(std::span<const double> values);

/// Stable log-softmax of a 1-D array.
Vector log_softmax(const Vector& logits);

enum class Axis { Rows = 0, Cols = 1 };

/// Log-softmax of a matrix along `axis`: Axis::Cols normalizes each row
/// (softmax over the column index), Axis::Rows normalizes each column.
Matrix log_softmax(const Matrix& logits, Axis axis);

/// Seedable random stream. Streams are deterministic for a given seed on a
/// given build; a stream must not be shared between threads.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  /// Derive an independent child seed from a root seed and a path of tags.
  static std::uint64_t derive(std::uint64_t root, std::initializer_list<std::uint64_t> tags);

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  double uniform(double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }
  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }
  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
  }
  bool bernoulli(double p) { return uniform() < p; }
  std::uint64_t next() { return engine_(); }

  template <typename T>
  void shuffle(std::vector<T>& items) {
    // Fisher-Yates with our own index draws so the permutation does not
    // depend on the standard library's shuffle implementation.
    for (std::size_t i = items.size(); i > 1; --i) {
      std::swap(items[i - 1], items[index(i)]);
    }
  }

  Matrix normal_matrix(Eigen::Index rows, Eigen::Index cols, double stddev);

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace prima
