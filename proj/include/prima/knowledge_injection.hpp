#pragma once

// Knowledge corpus ingestion and masked-language-model batches for the
// text encoder's first training stage.

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "prima/data_model.hpp"
#include "prima/encoders.hpp"

namespace prima {

enum class ReviewStatus { Vetted, Unvetted };

/// One line of the corpus file:
///   {"id": ..., "global_summary": ..., "risk_sections": [{"factor": ..., "text": ...}],
///    "review_status": "vetted" | "unvetted", "source": ...}
struct CorpusDocument {
  std::string id;
  std::string global_summary;
  std::vector<std::pair<std::string, std::string>> risk_sections;  // (factor, paragraph)
  ReviewStatus review_status = ReviewStatus::Vetted;
  std::string source;

  /// Summary first, then "factor: paragraph" for each section; empty parts skipped.
  std::vector<std::string> passages() const;
  nlohmann::json to_json() const;
};

struct CorpusOptions {
  bool include_unvetted = false;
};

/// Throws ParseError (with line number) for malformed records, including
/// documents whose summary and sections are all empty, and ConfigError when
/// no document survives filtering.
std::vector<CorpusDocument> load_corpus(const std::filesystem::path& path,
                                        const CorpusOptions& options = {});
void write_corpus(const std::vector<CorpusDocument>& docs, const std::filesystem::path& path);

/// Every word appearing in the documents.
std::vector<std::string> corpus_words(const std::vector<CorpusDocument>& docs);

/// Tokenized passages, split into chunks of at most `max_tokens` ids.
std::vector<std::vector<int>> corpus_sequences(const std::vector<CorpusDocument>& docs,
                                               const Vocabulary& vocab, int max_tokens);

struct MlmExample {
  std::vector<int> input_ids;
  std::vector<int> positions;  // masked positions, ascending
  std::vector<int> targets;    // original ids at those positions
};

/// Selects each position with probability `mask_rate` (at least one per
/// sequence), then replaces it by the mask id (80%), a random non-reserved id
/// (10%) or leaves it (10%). Sequences shorter than 2 tokens are skipped
/// with a warning.
std::vector<MlmExample> make_mlm_batch(const std::vector<std::vector<int>>& sequences,
                                       double mask_rate, Rng& rng, int vocab_size);
std::vector<MlmExample> make_mlm_batch(const std::vector<CorpusDocument>& docs,
                                       const Vocabulary& vocab, int max_tokens, double mask_rate,
                                       Rng& rng);

/// Mean cross-entropy over masked positions. Throws DomainError when the
/// batch has no masked positions.
ag::Var mlm_loss(const TextEncoder& encoder, const std::vector<MlmExample>& batch);

/// Per-row targets (-1 for unmasked rows) for logits laid out like
/// TextEncoder::encode_hidden output.
std::vector<int> mlm_row_targets(const std::vector<MlmExample>& batch, Eigen::Index seq_len);

/// A synthetic risk-disease corpus consistent with the synthetic cohort's
/// attribute associations. A fraction of documents is marked unvetted.
std::vector<CorpusDocument> generate_synthetic_corpus(int classes, int documents,
                                                      std::uint64_t seed,
                                                      double unvetted_fraction = 0.2);

}  // namespace prima
