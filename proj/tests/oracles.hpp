#pragma once

// Scalar-loop reference implementations used as test oracles. Each one
// follows the defining sums index by index, with no vectorization and no
// shared code with the library's graph implementation.

#include <cmath>
#include <vector>

#include "prima/alignment_losses.hpp"
#include "prima/numerics.hpp"

namespace oracle {

using prima::AlignmentBatch;
using prima::Matrix;
using prima::Vector;

inline double dot(const double* a, const double* b, long d) {
  double s = 0.0;
  for (long t = 0; t < d; ++t) s += a[t] * b[t];
  return s;
}

inline double sim(const Vector& a, const Vector& b, double tau) {
  const long d = a.size();
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (long t = 0; t < d; ++t) {
    ab += a[t] * b[t];
    aa += a[t] * a[t];
    bb += b[t] * b[t];
  }
  return ab / (std::sqrt(aa) * std::sqrt(bb)) / tau;
}

inline Vector row(const Matrix& m, long r) { return m.row(r).transpose(); }

inline double image_consistency(const AlignmentBatch& b, double tau) {
  const long n = static_cast<long>(b.size());
  double total = 0.0;
  for (long i = 0; i < n; ++i) {
    const Vector& anchor = b.image_view1[i].cls;
    const double num = std::exp(sim(anchor, b.image_view2[i].cls, tau));
    double den = 0.0;
    for (long k = 0; k < n; ++k) {
      den += std::exp(sim(anchor, b.image_view2[k].cls, tau));
      if (k != i) den += std::exp(sim(anchor, b.image_view1[k].cls, tau));
    }
    total += std::log(num / den);
  }
  return -total / static_cast<double>(n);
}

inline const Vector& view_cls(const AlignmentBatch& b, long i, int j) {
  return j == 0 ? b.image_view1[i].cls : b.image_view2[i].cls;
}

inline double global_semantic(const AlignmentBatch& b, double tau) {
  const long n = static_cast<long>(b.size());
  double total = 0.0;
  for (long i = 0; i < n; ++i) {
    for (int j = 0; j < 2; ++j) {
      const Vector& p = view_cls(b, i, j);
      const Vector& q = b.text[i].cls;
      double den1 = 0.0, den2 = 0.0;
      for (long k = 0; k < n; ++k) {
        den1 += std::exp(sim(p, b.text[k].cls, tau));
        den2 += std::exp(sim(q, view_cls(b, k, j), tau));
      }
      total += std::log(std::exp(sim(p, q, tau)) / den1);
      total += std::log(std::exp(sim(q, p, tau)) / den2);
    }
  }
  return -total / (4.0 * static_cast<double>(n));
}

/// Visual words and attention weights, one (l, k) pair at a time.
inline Matrix attention_pool(const Matrix& text, const Matrix& image, Matrix* weights = nullptr) {
  const long L = text.rows(), K = image.rows(), d = text.cols();
  Matrix alpha(L, K);
  Matrix words = Matrix::Zero(L, d);
  for (long l = 0; l < L; ++l) {
    double den = 0.0;
    for (long r = 0; r < K; ++r) {
      den += std::exp(dot(&text(l, 0), &image(r, 0), d) / std::sqrt(static_cast<double>(d)));
    }
    for (long k = 0; k < K; ++k) {
      alpha(l, k) =
          std::exp(dot(&text(l, 0), &image(k, 0), d) / std::sqrt(static_cast<double>(d))) / den;
      for (long t = 0; t < d; ++t) words(l, t) += alpha(l, k) * image(k, t);
    }
  }
  if (weights) *weights = alpha;
  return words;
}

/// Segment-mean pooling: token l takes the mean of patches
/// [floor(lK/L), max(start+1, floor((l+1)K/L))).
inline Matrix direct_pool(const Matrix& image, long tokens) {
  const long K = image.rows(), d = image.cols();
  Matrix words = Matrix::Zero(tokens, d);
  for (long l = 0; l < tokens; ++l) {
    const long begin = l * K / tokens;
    long end = (l + 1) * K / tokens;
    if (end < begin + 1) end = begin + 1;
    for (long k = begin; k < end; ++k) {
      for (long t = 0; t < d; ++t) words(l, t) += image(k, t) / static_cast<double>(end - begin);
    }
  }
  return words;
}

inline Matrix real_rows(const prima::TokenBundle& t) {
  if (t.valid.empty()) return t.seq;
  std::vector<long> keep;
  for (std::size_t r = 0; r < t.valid.size(); ++r) {
    if (t.valid[r]) keep.push_back(static_cast<long>(r));
  }
  Matrix out(static_cast<long>(keep.size()), t.seq.cols());
  for (std::size_t r = 0; r < keep.size(); ++r) out.row(static_cast<long>(r)) = t.seq.row(keep[r]);
  return out;
}

template <typename Pool>
double local_semantic_impl(const AlignmentBatch& b, double tau, Pool pool) {
  const long n = static_cast<long>(b.size());
  double total = 0.0;
  for (long i = 0; i < n; ++i) {
    const Matrix q = real_rows(b.text[i]);
    const long L = q.rows();
    double patient = 0.0;
    for (int j = 0; j < 2; ++j) {
      const Matrix& patches = j == 0 ? b.image_view1[i].seq : b.image_view2[i].seq;
      const Matrix words = pool(q, patches);
      for (long l = 0; l < L; ++l) {
        double den1 = 0.0, den2 = 0.0;
        for (long m = 0; m < L; ++m) {
          den1 += std::exp(sim(row(q, l), row(words, m), tau));
          den2 += std::exp(sim(row(words, m), row(q, l), tau));
        }
        patient += std::log(std::exp(sim(row(q, l), row(words, l), tau)) / den1);
        patient += std::log(std::exp(sim(row(words, l), row(q, l), tau)) / den2);
      }
    }
    total += patient / (4.0 * static_cast<double>(L));
  }
  return -total / static_cast<double>(n);
}

inline double local_semantic(const AlignmentBatch& b, double tau) {
  return local_semantic_impl(
      b, tau, [](const Matrix& q, const Matrix& p) { return attention_pool(q, p); });
}

inline double local_semantic_direct(const AlignmentBatch& b, double tau) {
  return local_semantic_impl(
      b, tau, [](const Matrix& q, const Matrix& p) { return direct_pool(p, q.rows()); });
}

inline double soft_semantic(const AlignmentBatch& b, const Matrix& s, double tau) {
  const long n = static_cast<long>(b.size());
  double total = 0.0;
  for (long i = 0; i < n; ++i) {
    for (long j = 0; j < n; ++j) {
      for (int k = 0; k < 2; ++k) {
        const Vector& p = view_cls(b, i, k);
        const Vector& q = b.text[j].cls;
        double den1 = 0.0, den2 = 0.0;
        for (long l = 0; l < n; ++l) {
          den1 += std::exp(sim(p, b.text[l].cls, tau));
          den2 += std::exp(sim(q, view_cls(b, l, k), tau));
        }
        total += s(i, j) * (std::log(std::exp(sim(p, q, tau)) / den1) +
                            std::log(std::exp(sim(q, p, tau)) / den2));
      }
    }
  }
  return -total / (4.0 * static_cast<double>(n * n));
}

/// Sharpened soft targets straight from the definition.
inline Matrix soft_targets(const std::vector<Vector>& y, double tau_label) {
  const long n = static_cast<long>(y.size());
  Matrix s(n, n);
  for (long i = 0; i < n; ++i) {
    double den = 0.0;
    for (long j = 0; j < n; ++j) den += std::exp(y[i].dot(y[j]) / tau_label);
    for (long j = 0; j < n; ++j) s(i, j) = std::exp(y[i].dot(y[j]) / tau_label) / den;
  }
  return s;
}

}  // namespace oracle
