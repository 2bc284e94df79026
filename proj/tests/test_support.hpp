#pragma once

#include <cmath>
#include <vector>

#include "prima/alignment_losses.hpp"
#include "prima/numerics.hpp"

namespace testing_support {

using prima::AlignmentBatch;
using prima::Matrix;
using prima::TokenBundle;
using prima::Vector;

inline TokenBundle random_bundle(prima::Rng& rng, long tokens, long d) {
  TokenBundle b;
  b.cls = Vector(d);
  for (long t = 0; t < d; ++t) b.cls[t] = rng.normal();
  b.seq = rng.normal_matrix(tokens, d, 1.0);
  return b;
}

inline AlignmentBatch random_batch(prima::Rng& rng, long n, long L, long K, long d) {
  AlignmentBatch batch;
  for (long i = 0; i < n; ++i) {
    batch.image_view1.push_back(random_bundle(rng, K, d));
    batch.image_view2.push_back(random_bundle(rng, K, d));
    batch.text.push_back(random_bundle(rng, L, d));
  }
  return batch;
}

/// Every token (class and local, all views and texts) equal to `v`.
inline AlignmentBatch constant_batch(long n, long L, long K, const Vector& v) {
  AlignmentBatch batch;
  TokenBundle img{v, Matrix(K, v.size()), {}};
  TokenBundle txt{v, Matrix(L, v.size()), {}};
  img.seq.rowwise() = v.transpose();
  txt.seq.rowwise() = v.transpose();
  for (long i = 0; i < n; ++i) {
    batch.image_view1.push_back(img);
    batch.image_view2.push_back(img);
    batch.text.push_back(txt);
  }
  return batch;
}

inline Matrix random_row_stochastic(prima::Rng& rng, long n) {
  Matrix s(n, n);
  for (long i = 0; i < n; ++i) {
    for (long j = 0; j < n; ++j) s(i, j) = rng.uniform(0.05, 1.0);
    s.row(i) /= s.row(i).sum();
  }
  return s;
}

}  // namespace testing_support
