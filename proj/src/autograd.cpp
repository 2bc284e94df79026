#include "prima/autograd.hpp"

#include <cmath>
#include <algorithm>
#include <limits>
#include <string>
#include <unordered_set>

#include "prima/errors.hpp"

namespace prima::ag {

namespace {

using NodePtr = std::shared_ptr<Node>;

Var make_op(Matrix value, std::vector<NodePtr> inputs, std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  for (const auto& in : inputs) {
    if (in->requires_grad) {
      node->requires_grad = true;
      break;
    }
  }
  if (node->requires_grad) {
    node->inputs = std::move(inputs);
    node->backward = std::move(backward_fn);
  }
  return Var(std::move(node));
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()));
  }
}

}  // namespace

void Node::accumulate(const Matrix& g) {
  if (!requires_grad) return;
  if (grad.size() == 0) {
    grad = g;
  } else {
    grad += g;
  }
}

Var::Var(Matrix value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Matrix Var::grad() const {
  if (node_->grad.size() == 0) return Matrix::Zero(rows(), cols());
  return node_->grad;
}

void backward(const Var& output) {
  if (output.rows() != 1 || output.cols() != 1) {
    throw ShapeError("backward() needs a scalar output");
  }
  if (!output.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(output.node().get(), 0);
  seen.insert(output.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  output.node()->accumulate(Matrix::Constant(1, 1, 1.0));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward && node->grad.size() != 0) node->backward(*node);
  }
}

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ (" + std::to_string(a.cols()) + " vs " +
                     std::to_string(b.rows()) + ")");
  }
  Matrix out;
  out.noalias() = a.value() * b.value();
  return make_op(std::move(out), {a.node(), b.node()}, [](Node& n) {
    auto& x = *n.inputs[0];
    auto& y = *n.inputs[1];
    if (x.requires_grad) x.accumulate(n.grad * y.value.transpose());
    if (y.requires_grad) y.accumulate(x.value.transpose() * n.grad);
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: inner dimensions differ (" + std::to_string(a.cols()) +
                     " vs " + std::to_string(b.cols()) + ")");
  }
  Matrix out;
  out.noalias() = a.value() * b.value().transpose();
  return make_op(std::move(out), {a.node(), b.node()}, [](Node& n) {
    auto& x = *n.inputs[0];
    auto& y = *n.inputs[1];
    if (x.requires_grad) x.accumulate(n.grad * y.value);
    if (y.requires_grad) y.accumulate(n.grad.transpose() * x.value);
  });
}

Var transpose(const Var& a) {
  return make_op(a.value().transpose(), {a.node()},
                 [](Node& n) { n.inputs[0]->accumulate(n.grad.transpose()); });
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  return make_op(a.value() + b.value(), {a.node(), b.node()}, [](Node& n) {
    n.inputs[0]->accumulate(n.grad);
    n.inputs[1]->accumulate(n.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  return make_op(a.value() - b.value(), {a.node(), b.node()}, [](Node& n) {
    n.inputs[0]->accumulate(n.grad);
    n.inputs[1]->accumulate(-n.grad);
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  return make_op(a.value().cwiseProduct(b.value()), {a.node(), b.node()}, [](Node& n) {
    auto& x = *n.inputs[0];
    auto& y = *n.inputs[1];
    if (x.requires_grad) x.accumulate(n.grad.cwiseProduct(y.value));
    if (y.requires_grad) y.accumulate(n.grad.cwiseProduct(x.value));
  });
}

Var scale(const Var& a, double factor) {
  return make_op(a.value() * factor, {a.node()},
                 [factor](Node& n) { n.inputs[0]->accumulate(n.grad * factor); });
}

Var add_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw ShapeError("add_row: bias must be 1x" + std::to_string(a.cols()));
  }
  Matrix out = a.value();
  out.rowwise() += row.value().row(0);
  return make_op(std::move(out), {a.node(), row.node()}, [](Node& n) {
    n.inputs[0]->accumulate(n.grad);
    if (n.inputs[1]->requires_grad) n.inputs[1]->accumulate(n.grad.colwise().sum());
  });
}

Var gelu(const Var& a) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double k = 0.044715;
  Matrix out(a.rows(), a.cols());
  const Matrix& x = a.value();
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double v = x.data()[i];
    out.data()[i] = 0.5 * v * (1.0 + std::tanh(c * (v + k * v * v * v)));
  }
  return make_op(std::move(out), {a.node()}, [](Node& n) {
    const Matrix& x = n.inputs[0]->value;
    Matrix g(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      const double v = x.data()[i];
      const double t = std::tanh(c * (v + k * v * v * v));
      const double dt = (1.0 - t * t) * c * (1.0 + 3.0 * k * v * v);
      g.data()[i] = n.grad.data()[i] * (0.5 * (1.0 + t) + 0.5 * v * dt);
    }
    n.inputs[0]->accumulate(g);
  });
}

Var tanh(const Var& a) {
  Matrix out = a.value().array().tanh().matrix();
  return make_op(out, {a.node()}, [out](Node& n) {
    n.inputs[0]->accumulate(n.grad.cwiseProduct((1.0 - out.array().square()).matrix()));
  });
}

Var l2_normalize_rows(const Var& a) {
  const Matrix& x = a.value();
  Eigen::VectorXd norms = x.rowwise().norm();
  for (Eigen::Index r = 0; r < norms.size(); ++r) {
    if (norms(r) == 0.0) {
      throw DomainError("cannot normalize zero-norm row " + std::to_string(r));
    }
  }
  Matrix out = norms.cwiseInverse().asDiagonal() * x;
  return make_op(out, {a.node()}, [out, norms](Node& n) {
    Matrix g(out.rows(), out.cols());
    for (Eigen::Index r = 0; r < out.rows(); ++r) {
      const double proj = out.row(r).dot(n.grad.row(r));
      g.row(r) = (n.grad.row(r) - proj * out.row(r)) / norms(r);
    }
    n.inputs[0]->accumulate(g);
  });
}

Var layer_norm_rows(const Var& a, double eps) {
  const Matrix& x = a.value();
  const auto cols = static_cast<double>(x.cols());
  Matrix out(x.rows(), x.cols());
  Eigen::VectorXd inv_std(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mean = x.row(r).mean();
    const double var = (x.row(r).array() - mean).square().sum() / cols;
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    out.row(r) = (x.row(r).array() - mean) * inv_std(r);
  }
  return make_op(out, {a.node()}, [out, inv_std, cols](Node& n) {
    Matrix g(out.rows(), out.cols());
    for (Eigen::Index r = 0; r < out.rows(); ++r) {
      const double mg = n.grad.row(r).sum() / cols;
      const double mgy = n.grad.row(r).dot(out.row(r)) / cols;
      g.row(r) = inv_std(r) * (n.grad.row(r).array() - mg - out.row(r).array() * mgy);
    }
    n.inputs[0]->accumulate(g);
  });
}

Var softmax_rows(const Var& a) {
  const Matrix& x = a.value();
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double peak = x.row(r).maxCoeff();
    out.row(r) = (x.row(r).array() - peak).exp();
    out.row(r) /= out.row(r).sum();
  }
  return make_op(out, {a.node()}, [out](Node& n) {
    Matrix g(out.rows(), out.cols());
    for (Eigen::Index r = 0; r < out.rows(); ++r) {
      const double dot = n.grad.row(r).dot(out.row(r));
      g.row(r) = out.row(r).array() * (n.grad.row(r).array() - dot);
    }
    n.inputs[0]->accumulate(g);
  });
}

Var log_softmax_rows(const Var& a) {
  const Matrix& x = a.value();
  if (x.cols() == 0) throw ShapeError("log_softmax over an empty axis");
  Matrix out(x.rows(), x.cols());
  Matrix probs(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double peak = x.row(r).maxCoeff();
    const double lse = peak + std::log((x.row(r).array() - peak).exp().sum());
    out.row(r) = x.row(r).array() - lse;
    probs.row(r) = out.row(r).array().exp();
  }
  return make_op(std::move(out), {a.node()}, [probs](Node& n) {
    Matrix g = n.grad;
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
      g.row(r) -= probs.row(r) * n.grad.row(r).sum();
    }
    n.inputs[0]->accumulate(g);
  });
}

Var log_softmax_rows(const Var& a, const Mask& mask) {
  const Matrix& x = a.value();
  if (mask.rows() != x.rows() || mask.cols() != x.cols()) {
    throw ShapeError("log_softmax mask shape mismatch");
  }
  Matrix out = Matrix::Zero(x.rows(), x.cols());
  Matrix probs = Matrix::Zero(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    double peak = -std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      if (mask(r, c)) peak = std::max(peak, x(r, c));
    }
    if (!std::isfinite(peak)) throw ShapeError("log_softmax row has no unmasked entries");
    double acc = 0.0;
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      if (mask(r, c)) acc += std::exp(x(r, c) - peak);
    }
    const double lse = peak + std::log(acc);
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      if (mask(r, c)) {
        out(r, c) = x(r, c) - lse;
        probs(r, c) = std::exp(out(r, c));
      }
    }
  }
  return make_op(std::move(out), {a.node()}, [probs, mask](Node& n) {
    Matrix g = mask.select(n.grad, 0.0);
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
      const double total = g.row(r).sum();
      g.row(r) -= probs.row(r) * total;
    }
    n.inputs[0]->accumulate(g);
  });
}

Var log_softmax_cols(const Var& a) { return transpose(log_softmax_rows(transpose(a))); }

Var rows(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) {
    throw ShapeError("rows(): slice out of range");
  }
  Matrix out = a.value().middleRows(start, count);
  return make_op(std::move(out), {a.node()}, [start, count](Node& n) {
    Matrix g = Matrix::Zero(n.inputs[0]->value.rows(), n.inputs[0]->value.cols());
    g.middleRows(start, count) = n.grad;
    n.inputs[0]->accumulate(g);
  });
}

Var gather_rows(const Var& a, std::span<const Eigen::Index> index) {
  Matrix out(static_cast<Eigen::Index>(index.size()), a.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= a.rows()) throw ShapeError("gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = a.value().row(index[i]);
  }
  std::vector<Eigen::Index> idx(index.begin(), index.end());
  return make_op(std::move(out), {a.node()}, [idx = std::move(idx)](Node& n) {
    Matrix g = Matrix::Zero(n.inputs[0]->value.rows(), n.inputs[0]->value.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      g.row(idx[i]) += n.grad.row(static_cast<Eigen::Index>(i));
    }
    n.inputs[0]->accumulate(g);
  });
}

Var gather_cols(const Var& a, std::span<const Eigen::Index> index) {
  Matrix out(a.rows(), static_cast<Eigen::Index>(index.size()));
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= a.cols()) throw ShapeError("gather_cols: index out of range");
    out.col(static_cast<Eigen::Index>(i)) = a.value().col(index[i]);
  }
  std::vector<Eigen::Index> idx(index.begin(), index.end());
  return make_op(std::move(out), {a.node()}, [idx = std::move(idx)](Node& n) {
    Matrix g = Matrix::Zero(n.inputs[0]->value.rows(), n.inputs[0]->value.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      g.col(idx[i]) += n.grad.col(static_cast<Eigen::Index>(i));
    }
    n.inputs[0]->accumulate(g);
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows of nothing");
  Eigen::Index total = 0;
  const Eigen::Index cols = parts.front().cols();
  std::vector<NodePtr> inputs;
  std::vector<Eigen::Index> sizes;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw ShapeError("concat_rows: column count mismatch");
    total += p.rows();
    inputs.push_back(p.node());
    sizes.push_back(p.rows());
  }
  Matrix out(total, cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return make_op(std::move(out), std::move(inputs), [sizes](Node& n) {
    Eigen::Index at = 0;
    for (std::size_t i = 0; i < sizes.size(); ++i) {
      if (n.inputs[i]->requires_grad) n.inputs[i]->accumulate(n.grad.middleRows(at, sizes[i]));
      at += sizes[i];
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols of nothing");
  Eigen::Index total = 0;
  const Eigen::Index nrows = parts.front().rows();
  std::vector<NodePtr> inputs;
  std::vector<Eigen::Index> sizes;
  for (const auto& p : parts) {
    if (p.rows() != nrows) throw ShapeError("concat_cols: row count mismatch");
    total += p.cols();
    inputs.push_back(p.node());
    sizes.push_back(p.cols());
  }
  Matrix out(nrows, total);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return make_op(std::move(out), std::move(inputs), [sizes](Node& n) {
    Eigen::Index at = 0;
    for (std::size_t i = 0; i < sizes.size(); ++i) {
      if (n.inputs[i]->requires_grad) n.inputs[i]->accumulate(n.grad.middleCols(at, sizes[i]));
      at += sizes[i];
    }
  });
}

Var reshape(const Var& a, Eigen::Index new_rows, Eigen::Index new_cols) {
  if (new_rows * new_cols != a.value().size()) throw ShapeError("reshape: element count differs");
  Matrix out = Eigen::Map<const Matrix>(a.value().data(), new_rows, new_cols);
  const Eigen::Index r = a.rows();
  const Eigen::Index c = a.cols();
  return make_op(std::move(out), {a.node()}, [r, c](Node& n) {
    n.inputs[0]->accumulate(Eigen::Map<const Matrix>(n.grad.data(), r, c));
  });
}

Var pad_rows(const Var& a, Eigen::Index extra) {
  if (extra == 0) return a;
  Matrix out = Matrix::Zero(a.rows() + extra, a.cols());
  out.topRows(a.rows()) = a.value();
  const Eigen::Index r = a.rows();
  return make_op(std::move(out), {a.node()},
                 [r](Node& n) { n.inputs[0]->accumulate(n.grad.topRows(r)); });
}

Var sum(const Var& a) {
  return make_op(Matrix::Constant(1, 1, a.value().sum()), {a.node()}, [](Node& n) {
    const auto& in = n.inputs[0]->value;
    n.inputs[0]->accumulate(Matrix::Constant(in.rows(), in.cols(), n.grad(0, 0)));
  });
}

Var weighted_sum(const Var& a, const Matrix& weights) {
  if (weights.rows() != a.rows() || weights.cols() != a.cols()) {
    throw ShapeError("weighted_sum: weight shape mismatch");
  }
  double total = 0.0;
  for (Eigen::Index i = 0; i < weights.size(); ++i) {
    const double w = weights.data()[i];
    if (w != 0.0) total += w * a.value().data()[i];
  }
  return make_op(Matrix::Constant(1, 1, total), {a.node()},
                 [weights](Node& n) { n.inputs[0]->accumulate(weights * n.grad(0, 0)); });
}

Var block_attention(const Var& q, const Var& k, const Var& v, Eigen::Index block,
                    const std::vector<bool>& key_valid, bool causal) {
  require_same_shape(q, k, "block_attention(q,k)");
  if (v.rows() != q.rows()) throw ShapeError("block_attention: value rows differ");
  if (block <= 0 || q.rows() % block != 0) {
    throw ShapeError("block_attention: row count is not a multiple of the block size");
  }
  if (!key_valid.empty() && static_cast<Eigen::Index>(key_valid.size()) != q.rows()) {
    throw ShapeError("block_attention: key mask length mismatch");
  }
  const Eigen::Index nblocks = q.rows() / block;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  Matrix out(q.rows(), v.cols());
  std::vector<Matrix> attn(static_cast<std::size_t>(nblocks));
  for (Eigen::Index b = 0; b < nblocks; ++b) {
    const Eigen::Index off = b * block;
    Matrix scores = q.value().middleRows(off, block) * k.value().middleRows(off, block).transpose();
    scores *= inv_sqrt;
    Matrix& a = attn[static_cast<std::size_t>(b)];
    a = Matrix::Zero(block, block);
    for (Eigen::Index i = 0; i < block; ++i) {
      double peak = -std::numeric_limits<double>::infinity();
      auto allowed = [&](Eigen::Index j) {
        if (causal && j > i) return false;
        return key_valid.empty() || key_valid[static_cast<std::size_t>(off + j)];
      };
      for (Eigen::Index j = 0; j < block; ++j) {
        if (allowed(j)) peak = std::max(peak, scores(i, j));
      }
      if (!std::isfinite(peak)) continue;  // no visible keys: zero output row
      double acc = 0.0;
      for (Eigen::Index j = 0; j < block; ++j) {
        if (allowed(j)) {
          a(i, j) = std::exp(scores(i, j) - peak);
          acc += a(i, j);
        }
      }
      a.row(i) /= acc;
    }
    out.middleRows(off, block).noalias() = a * v.value().middleRows(off, block);
  }
  return make_op(std::move(out), {q.node(), k.node(), v.node()},
                 [attn = std::move(attn), block, inv_sqrt](Node& n) {
                   auto& qn = *n.inputs[0];
                   auto& kn = *n.inputs[1];
                   auto& vn = *n.inputs[2];
                   Matrix gq = Matrix::Zero(qn.value.rows(), qn.value.cols());
                   Matrix gk = Matrix::Zero(kn.value.rows(), kn.value.cols());
                   Matrix gv = Matrix::Zero(vn.value.rows(), vn.value.cols());
                   for (std::size_t b = 0; b < attn.size(); ++b) {
                     const Eigen::Index off = static_cast<Eigen::Index>(b) * block;
                     const Matrix& a = attn[b];
                     const auto go = n.grad.middleRows(off, block);
                     gv.middleRows(off, block).noalias() = a.transpose() * go;
                     Matrix da = go * vn.value.middleRows(off, block).transpose();
                     Matrix ds(block, block);
                     for (Eigen::Index i = 0; i < block; ++i) {
                       const double dot = da.row(i).dot(a.row(i));
                       ds.row(i) = a.row(i).array() * (da.row(i).array() - dot);
                     }
                     ds *= inv_sqrt;
                     gq.middleRows(off, block).noalias() = ds * kn.value.middleRows(off, block);
                     gk.middleRows(off, block).noalias() =
                         ds.transpose() * qn.value.middleRows(off, block);
                   }
                   qn.accumulate(gq);
                   kn.accumulate(gk);
                   vn.accumulate(gv);
                 });
}

}  // namespace prima::ag
