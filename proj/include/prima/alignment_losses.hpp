#pragma once

// Multi-granular image/metadata alignment objectives.
//
// Every loss exists in two forms: a graph form operating on autograd
// variables (used for training and gradient checks) and a value form on
// plain token bundles. The value form builds a constant graph and evaluates
// it, so both forms share one implementation.

#include <string>
#include <vector>

#include "prima/autograd.hpp"
#include "prima/numerics.hpp"

namespace prima {

/// Encoder output in the shared latent space: one class token and a
/// sequence of local tokens. `valid` flags real (non-padding) rows of `seq`;
/// empty means every row is real.
struct TokenBundle {
  Vector cls;
  Matrix seq;
  std::vector<bool> valid;

  Eigen::Index dim() const { return cls.size(); }
  Eigen::Index real_tokens() const;
};

/// N patients, two image views each, one metadata text each.
struct AlignmentBatch {
  std::vector<TokenBundle> image_view1;
  std::vector<TokenBundle> image_view2;
  std::vector<TokenBundle> text;

  std::size_t size() const { return image_view1.size(); }
  void validate() const;
};

struct LossWeights {
  double beta1 = 0.2;  // image consistency
  double beta2 = 0.3;  // global semantic
  double beta3 = 0.2;  // local semantic
  double beta4 = 0.3;  // soft semantic
  double tau = kDefaultTau;
  double tau_label = 0.5;

  void validate() const;
  SimilarityConfig similarity() const { return SimilarityConfig{tau}; }
};

struct AttentionMap {
  Matrix weights;  // L x K, rows sum to 1
};

struct LossParts {
  double img = 0.0;
  double glo = 0.0;
  double loc = 0.0;
  double soft = 0.0;
};

struct CombinedLoss {
  double total = 0.0;
  LossParts parts;
};

/// Which objectives contribute, and which variant of the local and soft
/// terms is used. Disabled terms contribute 0; weights are not renormalized.
struct LossTerms {
  enum class Local { Attention, Direct };
  enum class Soft { Metadata, ClassLabels };

  bool img = true;
  bool glo = true;
  bool loc = true;
  bool soft = true;
  Local local = Local::Attention;
  Soft soft_source = Soft::Metadata;

  bool any() const { return img || glo || loc || soft; }
};

namespace graph {

/// Batch tokens as graph variables. Class tokens are stacked N x d; local
/// sequences are per patient. Text sequences share a padded row count;
/// `text_valid[i]` lists which rows of text_seq[i] are real.
struct BatchTokens {
  ag::Var view1_cls;
  ag::Var view2_cls;
  ag::Var text_cls;
  std::vector<ag::Var> view1_seq;
  std::vector<ag::Var> view2_seq;
  std::vector<ag::Var> text_seq;
  std::vector<std::vector<bool>> text_valid;

  std::size_t size() const { return static_cast<std::size_t>(view1_cls.rows()); }
};

/// Wraps a value batch as graph variables (leaves with the given flag).
BatchTokens from_batch(const AlignmentBatch& batch, bool requires_grad);

ag::Var image_consistency_loss(const BatchTokens& batch, const SimilarityConfig& cfg);
ag::Var global_semantic_loss(const BatchTokens& batch, const SimilarityConfig& cfg);
ag::Var local_semantic_loss(const BatchTokens& batch, const SimilarityConfig& cfg);
ag::Var local_semantic_loss_direct(const BatchTokens& batch, const SimilarityConfig& cfg);
ag::Var soft_semantic_loss(const BatchTokens& batch, const Matrix& soft,
                           const SimilarityConfig& cfg);

/// Attention pooling of image patches with text tokens as queries.
/// Returns the L x d visual words; `attn`, when given, receives the weights.
ag::Var attention_pool(const ag::Var& text_seq, const ag::Var& image_seq,
                       Matrix* attn = nullptr);

/// Mean of the l-th contiguous segment of patches for each text token l.
ag::Var direct_pool(const ag::Var& image_seq, Eigen::Index tokens);

struct CombinedGraph {
  ag::Var total;
  ag::Var img, glo, loc, soft;  // undefined when the term is disabled
  LossParts parts() const;
};

/// Weighted sum of the enabled terms. `soft` is the N x N target matrix
/// (ignored when the soft term is disabled).
CombinedGraph combined_alignment_loss(const BatchTokens& batch, const Matrix& soft,
                                      const LossWeights& weights, const LossTerms& terms = {});

}  // namespace graph

double image_consistency_loss(const AlignmentBatch& batch, const SimilarityConfig& cfg);
double global_semantic_loss(const AlignmentBatch& batch, const SimilarityConfig& cfg);
double local_semantic_loss(const AlignmentBatch& batch, const SimilarityConfig& cfg);
double local_semantic_loss_direct(const AlignmentBatch& batch, const SimilarityConfig& cfg);
double soft_semantic_loss(const AlignmentBatch& batch, const Matrix& soft,
                          const SimilarityConfig& cfg);
double supervised_contrastive_loss(const AlignmentBatch& batch, const std::vector<int>& labels,
                                   const SimilarityConfig& cfg);

/// Returns (visual words L x d, attention weights L x K).
std::pair<Matrix, AttentionMap> attention_pool(const Matrix& text_seq, const Matrix& image_seq);

CombinedLoss combined_alignment_loss(const AlignmentBatch& batch, const Matrix& soft,
                                     const LossWeights& weights, const LossTerms& terms = {});

/// Row-normalized same-label indicator matrix.
Matrix label_soft_targets(const std::vector<int>& labels);

/// Throws ShapeError unless `soft` is n x n and DomainError unless it is
/// nonnegative with rows summing to 1 (within 1e-9).
void validate_soft_targets(const Matrix& soft, std::size_t n);

}  // namespace prima
