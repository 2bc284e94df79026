#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// matrices. A Var is a handle to a graph node; graphs are built dynamically
// by the op functions below and released when the last handle goes away.
// Parameters are leaf nodes that outlive individual graphs and accumulate
// gradients across backward passes until zero_grad() is called.
//
// The tape is single-threaded: building or differentiating two graphs that
// share parameter nodes from different threads is not supported.

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "prima/numerics.hpp"

namespace prima::ag {

struct Node {
  Matrix value;
  Matrix grad;  // empty until something flows into this node
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  void accumulate(const Matrix& g);
};

class Var {
 public:
  Var() = default;
  explicit Var(Matrix value, bool requires_grad = false);
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Matrix& value() const { return node_->value; }
  /// Gradient of the last backward pass; a zero matrix if nothing flowed here.
  Matrix grad() const;
  bool requires_grad() const { return node_ && node_->requires_grad; }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  double scalar() const { return node_->value(0, 0); }
  bool defined() const { return static_cast<bool>(node_); }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Constant (no gradient) wrapper.
inline Var constant(Matrix value) { return Var(std::move(value), false); }

/// Runs reverse-mode differentiation from a 1x1 output.
void backward(const Var& output);

// Linear algebra.
Var matmul(const Var& a, const Var& b);
/// a * b^T
Var matmul_nt(const Var& a, const Var& b);
Var transpose(const Var& a);

// Elementwise.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
/// a + row, with `row` a 1 x cols vector broadcast over every row of a.
Var add_row(const Var& a, const Var& row);
Var gelu(const Var& a);
Var tanh(const Var& a);

// Row-wise normalizations.
/// Divides each row by its L2 norm. Throws DomainError on a zero row.
Var l2_normalize_rows(const Var& a);
/// Zero-mean unit-variance per row (no affine parameters).
Var layer_norm_rows(const Var& a, double eps = 1e-5);

/// Mask entries set to false are excluded from the normalization and come
/// out as exactly 0 (probabilities) or 0 (log-probabilities, never read).
using Mask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
Var softmax_rows(const Var& a);
Var log_softmax_rows(const Var& a);
Var log_softmax_rows(const Var& a, const Mask& mask);
/// Log-softmax down each column.
Var log_softmax_cols(const Var& a);

// Structural.
Var rows(const Var& a, Eigen::Index start, Eigen::Index count);
Var gather_rows(const Var& a, std::span<const Eigen::Index> index);
Var gather_cols(const Var& a, std::span<const Eigen::Index> index);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
/// Row-major reinterpretation to a new shape with the same element count.
Var reshape(const Var& a, Eigen::Index rows, Eigen::Index cols);
/// Zero-pads `extra` rows at the bottom.
Var pad_rows(const Var& a, Eigen::Index extra);

// Reductions.
Var sum(const Var& a);
/// sum_ij weights_ij * a_ij, skipping entries where the weight is exactly 0
/// (so masked -inf/NaN-free placeholders never contaminate the result).
Var weighted_sum(const Var& a, const Matrix& weights);

/// Scaled dot-product self-attention applied independently to consecutive
/// blocks of `block` rows (one block per sequence). `key_valid`, when
/// non-empty, has one entry per row and excludes padded keys; `causal`
/// restricts each query to keys at or before its own position.
Var block_attention(const Var& q, const Var& k, const Var& v, Eigen::Index block,
                    const std::vector<bool>& key_valid, bool causal);

}  // namespace prima::ag
