#pragma once

// Stage-3 fusion head: aligned image and metadata tokens are projected into
// a small causal decoder's embedding space, framed by learnable special
// tokens, and classified by a softmax restricted to the class-name tokens.
//
// Sequence layout (version 1):
//   [img_start] (global, locals...) per scan [img_end]
//   [txt_start] global, locals... [txt_end] [answer]
// Local sequences are downsampled by the configured stride.

#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "prima/data_model.hpp"
#include "prima/nn.hpp"

namespace prima {

inline constexpr int kFusionLayoutVersion = 1;

struct DecoderSpec {
  int vocab_size = 0;
  int width = 64;
  int depth = 2;
  int mlp_ratio = 4;
  int max_positions = 96;
  std::uint64_t seed = 2;
  nn::LoraConfig lora{16, 0.0};
  std::vector<std::string> lora_targets = {"q", "v"};

  void validate() const;
  nlohmann::json to_json() const;
  static DecoderSpec from_json(const nlohmann::json& j);
};

struct FusionSpec {
  int latent_dim = 32;
  int stride = 2;
  int projector_hidden = 32;
  /// Seed words whose decoder embeddings are averaged to initialize each
  /// special token.
  std::map<std::string, std::vector<std::string>> special_seeds = {
      {"img_start", {"image", "begin"}},
      {"img_end", {"image", "end"}},
      {"txt_start", {"metadata", "begin"}},
      {"txt_end", {"metadata", "end"}},
  };
  std::string answer_word = "diagnosis";

  void validate() const;
  nlohmann::json to_json() const;
  static FusionSpec from_json(const nlohmann::json& j);
  /// Words the vocabulary must contain for this spec.
  std::vector<std::string> required_words() const;
};

struct ClassVocabulary {
  std::vector<std::string> classes;
  std::vector<int> token_ids;

  /// Throws ConfigError for fewer than two classes or repeated ids.
  void validate() const;
  static ClassVocabulary from(const std::vector<std::string>& classes, const Vocabulary& vocab);
};

/// P(y = k | x) = softmax over the class-token logits only.
Vector restricted_class_probabilities(const Vector& logits, const ClassVocabulary& vocab);
/// -log P(y = true_class | x).
double fusion_classification_loss(const Vector& probabilities, int true_class);

/// Graph form: rows of `logits` (B x V) -> B x |C| restricted log-probabilities.
ag::Var restricted_log_probabilities(const ag::Var& logits, const ClassVocabulary& vocab);

/// Small causal transformer over the shared vocabulary.
class ToyDecoder {
 public:
  ToyDecoder(nn::ParameterStore& store, DecoderSpec spec);

  const DecoderSpec& spec() const { return spec_; }
  std::string backbone_component() const { return "decoder.backbone"; }
  std::string lora_component() const { return "decoder.lora"; }

  /// Embedding rows of the given token ids (frozen backbone values).
  ag::Var embed(const std::vector<int>& ids) const;
  /// B sequences of `seq_len` input embeddings stacked row-wise -> logits
  /// (B x V) at each sequence's last position.
  ag::Var last_logits(const ag::Var& inputs, Eigen::Index seq_len) const;

  std::vector<std::pair<std::string, int>> adapted_layers() const;

 private:
  DecoderSpec spec_;
  ag::Var embedding_, pos_;
  std::vector<nn::MixingBlock> blocks_;
  nn::Linear lm_head_;
};

/// Tokens of one sample in the shared latent space.
struct FusionInput {
  std::vector<ag::Var> image_globals;  // per scan, 1 x d
  std::vector<ag::Var> image_locals;   // per scan, K x d
  ag::Var text_global;                 // 1 x d
  ag::Var text_locals;                 // L x d (real tokens only)
};

class FusionHead {
 public:
  FusionHead(nn::ParameterStore& store, const FusionSpec& spec, const ToyDecoder& decoder,
             const Vocabulary& vocab);

  const FusionSpec& spec() const { return spec_; }
  static std::string projector_component() { return "fusion.projector"; }
  static std::string special_component() { return "fusion.special"; }

  ag::Var project_global(const ag::Var& tokens) const;
  /// ceil(L / stride) rows; the last window is padded by repeating the final
  /// token. Sequences shorter than the stride are projected token by token.
  ag::Var project_local(const ag::Var& tokens) const;

  /// Decoder input sequence for one sample.
  ag::Var assemble(const FusionInput& input) const;

  /// Length of the assembled sequence for the given counts.
  static Eigen::Index layout_length(std::size_t scans, Eigen::Index image_locals,
                                    Eigen::Index text_locals, int stride);

  /// Class logits restricted to `classes` for a batch of samples.
  ag::Var class_log_probabilities(const std::vector<FusionInput>& batch,
                                  const ClassVocabulary& classes) const;

  const ag::Var& special(const std::string& name) const;

 private:
  FusionSpec spec_;
  const ToyDecoder* decoder_;
  nn::Mlp global_;
  nn::Linear local_;
  std::map<std::string, ag::Var> specials_;
  int answer_id_ = 0;
};

}  // namespace prima
