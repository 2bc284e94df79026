#pragma once

// Toy vision and text encoders with projection heads into the shared
// latent space. Both follow the same layout: a class token followed by
// local tokens, mixed by a stack of pre-norm attention/MLP blocks, then
// projected by a two-layer head.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "prima/alignment_losses.hpp"
#include "prima/image.hpp"
#include "prima/nn.hpp"

namespace prima {

enum class EncoderKind { Vision, Text };

struct EncoderSpec {
  EncoderKind kind = EncoderKind::Vision;
  /// Vision: {channels, height, width}. Text: {max_tokens}.
  std::vector<int> input_shape;
  int patch = 4;           // vision only
  int vocab_size = 0;      // text only
  int latent_dim = 32;     // shared space d
  int width = 32;          // encoder-native width
  int depth = 2;
  int mlp_ratio = 2;
  std::uint64_t seed = 0;
  nn::LoraConfig lora;     // rank 0: no adapters
  std::vector<std::string> lora_targets = {"q", "k", "v", "o", "fc1", "fc2"};

  /// K patches for vision, maximum L for text.
  int token_count() const;
  void validate() const;

  nlohmann::json to_json() const;
  static EncoderSpec from_json(const nlohmann::json& j);
};

EncoderSpec default_vision_spec();
EncoderSpec default_text_spec(int vocab_size);

/// Encoder output for a batch of B sequences of `seq_len` rows each (class
/// token first), stacked row-wise.
struct EncodedBatch {
  ag::Var hidden;     // B*seq_len x width
  ag::Var projected;  // B*seq_len x d
  Eigen::Index seq_len = 0;
  std::size_t batch = 0;
  std::vector<bool> valid;  // per row; class tokens always valid

  ag::Var cls() const;         // B x d
  ag::Var native_cls() const;  // B x width
  ag::Var seq(std::size_t b) const;
  std::vector<bool> seq_valid(std::size_t b) const;
  TokenBundle bundle(std::size_t b) const;
};

class ProjectionHead {
 public:
  ProjectionHead() = default;
  ProjectionHead(nn::ParameterStore& store, const std::string& name, const std::string& component,
                 Eigen::Index d_in, Eigen::Index d_out, Rng& rng);
  ag::Var operator()(const ag::Var& x) const { return mlp_(x); }

 private:
  nn::Mlp mlp_;
};

/// Shared body of both encoders.
class Encoder {
 public:
  const EncoderSpec& spec() const { return spec_; }
  const std::string& prefix() const { return prefix_; }
  std::vector<std::string> backbone_components() const { return {prefix_ + ".backbone"}; }
  std::string lora_component() const { return prefix_ + ".lora"; }
  std::string head_component() const { return prefix_ + ".head"; }

  /// Applies the projection head to precomputed hidden states.
  EncodedBatch project(ag::Var hidden, Eigen::Index seq_len, std::size_t batch,
                       std::vector<bool> valid) const;

  /// Adapted layers as (name, rank, d_in, d_out).
  struct AdaptedLayer {
    std::string name;
    int rank;
    Eigen::Index d_in, d_out;
  };
  std::vector<AdaptedLayer> adapted_layers() const;

 protected:
  Encoder(nn::ParameterStore& store, EncoderSpec spec, std::string prefix);
  ag::Var mix(ag::Var tokens, Eigen::Index seq_len, const std::vector<bool>& valid) const;

  EncoderSpec spec_;
  std::string prefix_;
  ag::Var cls_token_, pos_;
  std::vector<nn::MixingBlock> blocks_;
  ProjectionHead head_;
};

class VisionEncoder : public Encoder {
 public:
  VisionEncoder(nn::ParameterStore& store, EncoderSpec spec, std::string prefix = "vision");

  EncodedBatch encode(std::span<const Image> images) const;
  TokenBundle encode_image(const Image& image) const;

  /// K x (C * patch * patch) patch matrix, row-major over the patch grid.
  Matrix patchify(const Image& image) const;

 private:
  nn::Linear patch_embed_;
};

class TextEncoder : public Encoder {
 public:
  TextEncoder(nn::ParameterStore& store, EncoderSpec spec, std::string prefix = "text");

  static constexpr int kPadId = 0;
  static constexpr int kClsId = 1;

  /// Encodes content token ids (the class token is prepended internally).
  /// Sequences are padded to the longest one in the batch.
  EncodedBatch encode(const std::vector<std::vector<int>>& ids) const;
  TokenBundle encode_text(const std::vector<int>& ids) const;

  /// Backbone hidden states only (no projection).
  EncodedBatch encode_hidden(const std::vector<std::vector<int>>& ids) const;

  /// Token-prediction logits over the vocabulary for every row of `hidden`.
  ag::Var mlm_logits(const ag::Var& hidden) const { return mlm_head_(hidden); }
  std::string mlm_component() const { return prefix_ + ".mlm_head"; }

 private:
  ag::Var embedding_;
  nn::Linear mlm_head_;
};

struct ComponentCount {
  std::string component;
  std::size_t trainable = 0;
  std::size_t total = 0;
};

struct ParameterReport {
  std::vector<ComponentCount> components;  // sorted by name
  std::size_t trainable = 0;
  std::size_t total = 0;

  double fraction() const { return total ? static_cast<double>(trainable) / total : 0.0; }
  const ComponentCount* find(const std::string& component) const;
  nlohmann::json to_json() const;
  std::string to_text() const;
};

ParameterReport trainable_parameter_report(const nn::ParameterStore& store);

}  // namespace prima
