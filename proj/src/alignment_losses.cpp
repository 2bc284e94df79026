#include "prima/alignment_losses.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "prima/errors.hpp"

namespace prima {

Eigen::Index TokenBundle::real_tokens() const {
  if (valid.empty()) return seq.rows();
  Eigen::Index count = 0;
  for (bool v : valid) count += v ? 1 : 0;
  return count;
}

void AlignmentBatch::validate() const {
  const std::size_t n = image_view1.size();
  if (n == 0) throw ShapeError("alignment batch is empty (N = 0)");
  if (image_view2.size() != n || text.size() != n) {
    throw ShapeError("alignment batch arrays differ in length");
  }
  const Eigen::Index d = image_view1.front().cls.size();
  if (d < 1) throw ShapeError("latent dimension must be at least 1");
  auto check = [d](const TokenBundle& b, const char* what) {
    if (b.cls.size() != d) throw ShapeError(std::string(what) + " class token has wrong dimension");
    if (b.seq.cols() != d && b.seq.size() != 0) {
      throw ShapeError(std::string(what) + " sequence has wrong dimension");
    }
    if (!b.valid.empty() && static_cast<Eigen::Index>(b.valid.size()) != b.seq.rows()) {
      throw ShapeError(std::string(what) + " padding mask length mismatch");
    }
  };
  for (std::size_t i = 0; i < n; ++i) {
    check(image_view1[i], "view-1");
    check(image_view2[i], "view-2");
    check(text[i], "text");
  }
}

void LossWeights::validate() const {
  for (double b : {beta1, beta2, beta3, beta4}) {
    if (!(b >= 0.0)) throw ConfigError("loss weights must be nonnegative");
  }
  if (!(tau > 0.0)) throw ConfigError("tau must be positive");
  if (!(tau_label > 0.0)) throw ConfigError("tau_label must be positive");
}

void validate_soft_targets(const Matrix& soft, std::size_t n) {
  const auto en = static_cast<Eigen::Index>(n);
  if (soft.rows() != en || soft.cols() != en) {
    throw ShapeError("soft target matrix must be " + std::to_string(n) + "x" + std::to_string(n));
  }
  for (Eigen::Index r = 0; r < soft.rows(); ++r) {
    if ((soft.row(r).array() < 0.0).any()) {
      throw DomainError("soft target row " + std::to_string(r) + " has a negative entry");
    }
    if (std::abs(soft.row(r).sum() - 1.0) > 1e-9) {
      throw DomainError("soft target row " + std::to_string(r) + " does not sum to 1");
    }
  }
}

Matrix label_soft_targets(const std::vector<int>& labels) {
  const auto n = static_cast<Eigen::Index>(labels.size());
  Matrix s(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      s(i, j) = labels[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(j)] ? 1.0 : 0.0;
    }
    s.row(i) /= s.row(i).sum();
  }
  return s;
}

namespace graph {

namespace {

ag::Var stack_cls(const std::vector<TokenBundle>& bundles, bool requires_grad) {
  Matrix m(static_cast<Eigen::Index>(bundles.size()), bundles.front().cls.size());
  for (std::size_t i = 0; i < bundles.size(); ++i) {
    m.row(static_cast<Eigen::Index>(i)) = bundles[i].cls.transpose();
  }
  return ag::Var(std::move(m), requires_grad);
}

void require_nonempty(const BatchTokens& b) {
  if (!b.view1_cls.defined() || b.view1_cls.rows() == 0) {
    throw ShapeError("alignment batch is empty (N = 0)");
  }
}

// Row-wise cosine similarity matrix divided by tau.
ag::Var similarity(const ag::Var& a, const ag::Var& b, const SimilarityConfig& cfg) {
  return ag::scale(ag::matmul_nt(ag::l2_normalize_rows(a), ag::l2_normalize_rows(b)),
                   1.0 / cfg.tau);
}

ag::Var real_text_rows(const BatchTokens& b, std::size_t i) {
  const auto& valid = b.text_valid.at(i);
  const ag::Var& seq = b.text_seq.at(i);
  if (valid.empty()) return seq;
  std::vector<Eigen::Index> idx;
  for (std::size_t r = 0; r < valid.size(); ++r) {
    if (valid[r]) idx.push_back(static_cast<Eigen::Index>(r));
  }
  if (idx.empty()) throw ShapeError("text sequence " + std::to_string(i) + " has no real tokens");
  if (idx.size() == valid.size()) return seq;
  return ag::gather_rows(seq, idx);
}

template <typename Pool>
ag::Var local_loss_impl(const BatchTokens& b, const SimilarityConfig& cfg, Pool pool) {
  cfg.validate();
  require_nonempty(b);
  const std::size_t n = b.size();
  if (b.text_seq.size() != n || b.view1_seq.size() != n || b.view2_seq.size() != n) {
    throw ShapeError("local loss: sequence arrays differ in length");
  }
  const Eigen::Index padded = b.text_seq.front().rows();
  for (const auto& t : b.text_seq) {
    if (t.rows() != padded) {
      throw ShapeError("local loss: text token counts differ within the batch (pad to a common L)");
    }
  }
  std::vector<ag::Var> terms;
  for (std::size_t i = 0; i < n; ++i) {
    ag::Var text = real_text_rows(b, i);
    const Eigen::Index tokens = text.rows();
    const double coeff = -1.0 / (4.0 * static_cast<double>(tokens) * static_cast<double>(n));
    // Row l of the similarity matrix holds sim(q^l, p_hat^m) over m. The
    // text->visual and visual->text terms both normalize over m with q^l
    // fixed, so both equal the diagonal of the row-wise log-softmax.
    const Matrix weights = Matrix::Identity(tokens, tokens) * (2.0 * coeff);
    for (const ag::Var* view : {&b.view1_seq[i], &b.view2_seq[i]}) {
      ag::Var words = pool(text, *view);
      ag::Var logp = ag::log_softmax_rows(similarity(text, words, cfg));
      terms.push_back(ag::weighted_sum(logp, weights));
    }
  }
  return ag::sum(ag::concat_rows(terms));
}

}  // namespace

BatchTokens from_batch(const AlignmentBatch& batch, bool requires_grad) {
  batch.validate();
  BatchTokens out;
  out.view1_cls = stack_cls(batch.image_view1, requires_grad);
  out.view2_cls = stack_cls(batch.image_view2, requires_grad);
  out.text_cls = stack_cls(batch.text, requires_grad);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    out.view1_seq.emplace_back(batch.image_view1[i].seq, requires_grad);
    out.view2_seq.emplace_back(batch.image_view2[i].seq, requires_grad);
    out.text_seq.emplace_back(batch.text[i].seq, requires_grad);
    out.text_valid.push_back(batch.text[i].valid);
  }
  return out;
}

ag::Var image_consistency_loss(const BatchTokens& b, const SimilarityConfig& cfg) {
  cfg.validate();
  require_nonempty(b);
  const Eigen::Index n = b.view1_cls.rows();
  if (b.view2_cls.rows() != n) throw ShapeError("image consistency: view sizes differ");
  ag::Var cross = similarity(b.view1_cls, b.view2_cls, cfg);  // sim(p_i1, p_k2)
  ag::Var self = similarity(b.view1_cls, b.view1_cls, cfg);   // sim(p_i1, p_k1)
  const ag::Var blocks[] = {cross, self};
  ag::Var logits = ag::concat_cols(blocks);
  ag::Mask mask = ag::Mask::Constant(n, 2 * n, true);
  for (Eigen::Index i = 0; i < n; ++i) mask(i, n + i) = false;
  ag::Var logp = ag::log_softmax_rows(logits, mask);
  Matrix weights = Matrix::Zero(n, 2 * n);
  for (Eigen::Index i = 0; i < n; ++i) weights(i, i) = -1.0 / static_cast<double>(n);
  return ag::weighted_sum(logp, weights);
}

ag::Var global_semantic_loss(const BatchTokens& b, const SimilarityConfig& cfg) {
  cfg.validate();
  require_nonempty(b);
  const Eigen::Index n = b.view1_cls.rows();
  if (b.text_cls.rows() != n || b.view2_cls.rows() != n) {
    throw ShapeError("global loss: batch arrays differ in length");
  }
  const Matrix weights = Matrix::Identity(n, n) * (-1.0 / (4.0 * static_cast<double>(n)));
  std::vector<ag::Var> terms;
  for (const ag::Var* view : {&b.view1_cls, &b.view2_cls}) {
    ag::Var sims = similarity(*view, b.text_cls, cfg);  // rows: images, cols: texts
    terms.push_back(ag::weighted_sum(ag::log_softmax_rows(sims), weights));
    terms.push_back(ag::weighted_sum(ag::log_softmax_cols(sims), weights));
  }
  return ag::sum(ag::concat_rows(terms));
}

ag::Var soft_semantic_loss(const BatchTokens& b, const Matrix& soft, const SimilarityConfig& cfg) {
  cfg.validate();
  require_nonempty(b);
  const Eigen::Index n = b.view1_cls.rows();
  validate_soft_targets(soft, static_cast<std::size_t>(n));
  const Matrix weights = soft * (-1.0 / (4.0 * static_cast<double>(n * n)));
  std::vector<ag::Var> terms;
  for (const ag::Var* view : {&b.view1_cls, &b.view2_cls}) {
    ag::Var sims = similarity(*view, b.text_cls, cfg);
    terms.push_back(ag::weighted_sum(ag::log_softmax_rows(sims), weights));
    terms.push_back(ag::weighted_sum(ag::log_softmax_cols(sims), weights));
  }
  return ag::sum(ag::concat_rows(terms));
}

ag::Var attention_pool(const ag::Var& text_seq, const ag::Var& image_seq, Matrix* attn) {
  if (text_seq.cols() != image_seq.cols()) {
    throw ShapeError("attention_pool: text and image tokens differ in dimension");
  }
  if (text_seq.rows() < 1 || image_seq.rows() < 1) {
    throw ShapeError("attention_pool: empty token sequence");
  }
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(text_seq.cols()));
  ag::Var weights = ag::softmax_rows(ag::scale(ag::matmul_nt(text_seq, image_seq), inv_sqrt_d));
  if (attn != nullptr) *attn = weights.value();
  return ag::matmul(weights, image_seq);
}

ag::Var direct_pool(const ag::Var& image_seq, Eigen::Index tokens) {
  const Eigen::Index k = image_seq.rows();
  if (k < 1 || tokens < 1) throw ShapeError("direct_pool: empty sequence");
  Matrix pooling = Matrix::Zero(tokens, k);
  for (Eigen::Index l = 0; l < tokens; ++l) {
    const Eigen::Index begin = l * k / tokens;
    const Eigen::Index end = std::max(begin + 1, (l + 1) * k / tokens);
    const double share = 1.0 / static_cast<double>(end - begin);
    for (Eigen::Index p = begin; p < end; ++p) pooling(l, p) = share;
  }
  return ag::matmul(ag::constant(std::move(pooling)), image_seq);
}

ag::Var local_semantic_loss(const BatchTokens& b, const SimilarityConfig& cfg) {
  return local_loss_impl(b, cfg, [](const ag::Var& text, const ag::Var& image) {
    return attention_pool(text, image);
  });
}

ag::Var local_semantic_loss_direct(const BatchTokens& b, const SimilarityConfig& cfg) {
  return local_loss_impl(b, cfg, [](const ag::Var& text, const ag::Var& image) {
    if (text.cols() != image.cols()) throw ShapeError("direct pooling: dimension mismatch");
    return direct_pool(image, text.rows());
  });
}

LossParts CombinedGraph::parts() const {
  LossParts p;
  if (img.defined()) p.img = img.scalar();
  if (glo.defined()) p.glo = glo.scalar();
  if (loc.defined()) p.loc = loc.scalar();
  if (soft.defined()) p.soft = soft.scalar();
  return p;
}

CombinedGraph combined_alignment_loss(const BatchTokens& b, const Matrix& soft,
                                      const LossWeights& weights, const LossTerms& terms) {
  weights.validate();
  const SimilarityConfig cfg = weights.similarity();
  CombinedGraph out;
  std::vector<ag::Var> weighted;
  if (terms.img) {
    out.img = image_consistency_loss(b, cfg);
    weighted.push_back(ag::scale(out.img, weights.beta1));
  }
  if (terms.glo) {
    out.glo = global_semantic_loss(b, cfg);
    weighted.push_back(ag::scale(out.glo, weights.beta2));
  }
  if (terms.loc) {
    out.loc = terms.local == LossTerms::Local::Attention ? local_semantic_loss(b, cfg)
                                                         : local_semantic_loss_direct(b, cfg);
    weighted.push_back(ag::scale(out.loc, weights.beta3));
  }
  if (terms.soft) {
    out.soft = soft_semantic_loss(b, soft, cfg);
    weighted.push_back(ag::scale(out.soft, weights.beta4));
  }
  out.total = weighted.empty() ? ag::constant(Matrix::Zero(1, 1)) : ag::sum(ag::concat_rows(weighted));
  return out;
}

}  // namespace graph

double image_consistency_loss(const AlignmentBatch& batch, const SimilarityConfig& cfg) {
  return graph::image_consistency_loss(graph::from_batch(batch, false), cfg).scalar();
}

double global_semantic_loss(const AlignmentBatch& batch, const SimilarityConfig& cfg) {
  return graph::global_semantic_loss(graph::from_batch(batch, false), cfg).scalar();
}

double local_semantic_loss(const AlignmentBatch& batch, const SimilarityConfig& cfg) {
  return graph::local_semantic_loss(graph::from_batch(batch, false), cfg).scalar();
}

double local_semantic_loss_direct(const AlignmentBatch& batch, const SimilarityConfig& cfg) {
  return graph::local_semantic_loss_direct(graph::from_batch(batch, false), cfg).scalar();
}

double soft_semantic_loss(const AlignmentBatch& batch, const Matrix& soft,
                          const SimilarityConfig& cfg) {
  return graph::soft_semantic_loss(graph::from_batch(batch, false), soft, cfg).scalar();
}

double supervised_contrastive_loss(const AlignmentBatch& batch, const std::vector<int>& labels,
                                   const SimilarityConfig& cfg) {
  if (labels.size() != batch.size()) throw ShapeError("one label per patient is required");
  return soft_semantic_loss(batch, label_soft_targets(labels), cfg);
}

std::pair<Matrix, AttentionMap> attention_pool(const Matrix& text_seq, const Matrix& image_seq) {
  AttentionMap map;
  ag::Var words = graph::attention_pool(ag::constant(text_seq), ag::constant(image_seq), &map.weights);
  return {words.value(), std::move(map)};
}

CombinedLoss combined_alignment_loss(const AlignmentBatch& batch, const Matrix& soft,
                                     const LossWeights& weights, const LossTerms& terms) {
  auto g = graph::combined_alignment_loss(graph::from_batch(batch, false), soft, weights, terms);
  return CombinedLoss{g.total.scalar(), g.parts()};
}

}  // namespace prima
