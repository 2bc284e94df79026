#include "prima/fusion_classifier.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "prima/errors.hpp"
#include "prima/log.hpp"

using nlohmann::json;

namespace prima {

void DecoderSpec::validate() const {
  if (vocab_size < 4) throw ConfigError("decoder vocab_size must be at least 4");
  if (width < 2 || depth < 1 || mlp_ratio < 1) throw ConfigError("invalid decoder width/depth");
  if (max_positions < 8) throw ConfigError("decoder max_positions must be at least 8");
  if (lora.rank < 0) throw ConfigError("decoder LoRA rank must be >= 0");
}

json DecoderSpec::to_json() const {
  return {{"vocab_size", vocab_size}, {"width", width},          {"depth", depth},
          {"mlp_ratio", mlp_ratio},   {"max_positions", max_positions}, {"seed", seed},
          {"lora_rank", lora.rank},   {"lora_alpha", lora.alpha}, {"lora_targets", lora_targets}};
}

DecoderSpec DecoderSpec::from_json(const json& j) {
  DecoderSpec s;
  s.vocab_size = j.value("vocab_size", s.vocab_size);
  s.width = j.value("width", s.width);
  s.depth = j.value("depth", s.depth);
  s.mlp_ratio = j.value("mlp_ratio", s.mlp_ratio);
  s.max_positions = j.value("max_positions", s.max_positions);
  s.seed = j.value("seed", s.seed);
  s.lora.rank = j.value("lora_rank", s.lora.rank);
  s.lora.alpha = j.value("lora_alpha", s.lora.alpha);
  if (j.contains("lora_targets")) s.lora_targets = j["lora_targets"].get<std::vector<std::string>>();
  return s;
}

void FusionSpec::validate() const {
  if (latent_dim < 2) throw ConfigError("fusion latent_dim must be >= 2");
  if (stride < 1) throw ConfigError("fusion stride must be >= 1");
  if (projector_hidden < 1) throw ConfigError("fusion projector_hidden must be >= 1");
  for (const char* name : {"img_start", "img_end", "txt_start", "txt_end"}) {
    auto it = special_seeds.find(name);
    if (it == special_seeds.end() || it->second.empty()) {
      throw ConfigError(std::string("special token '") + name + "' needs seed words");
    }
  }
  if (answer_word.empty()) throw ConfigError("fusion answer_word must be set");
}

json FusionSpec::to_json() const {
  return {{"latent_dim", latent_dim},
          {"stride", stride},
          {"projector_hidden", projector_hidden},
          {"special_seeds", special_seeds},
          {"answer_word", answer_word},
          {"layout_version", kFusionLayoutVersion}};
}

FusionSpec FusionSpec::from_json(const json& j) {
  FusionSpec s;
  s.latent_dim = j.value("latent_dim", s.latent_dim);
  s.stride = j.value("stride", s.stride);
  s.projector_hidden = j.value("projector_hidden", s.projector_hidden);
  if (j.contains("special_seeds")) {
    s.special_seeds = j["special_seeds"].get<std::map<std::string, std::vector<std::string>>>();
  }
  s.answer_word = j.value("answer_word", s.answer_word);
  return s;
}

std::vector<std::string> FusionSpec::required_words() const {
  std::vector<std::string> out = {answer_word};
  for (const auto& [name, words] : special_seeds) out.insert(out.end(), words.begin(), words.end());
  return out;
}

void ClassVocabulary::validate() const {
  if (classes.size() < 2) throw ConfigError("class vocabulary needs at least two classes");
  if (classes.size() != token_ids.size()) throw ConfigError("one token id per class required");
  std::set<int> ids(token_ids.begin(), token_ids.end());
  if (ids.size() != token_ids.size()) throw ConfigError("class token ids must be distinct");
}

ClassVocabulary ClassVocabulary::from(const std::vector<std::string>& classes,
                                      const Vocabulary& vocab) {
  ClassVocabulary cv;
  cv.classes = classes;
  for (const auto& c : classes) cv.token_ids.push_back(vocab.strict_id(c));
  cv.validate();
  return cv;
}

Vector restricted_class_probabilities(const Vector& logits, const ClassVocabulary& vocab) {
  vocab.validate();
  Vector z(static_cast<Eigen::Index>(vocab.token_ids.size()));
  for (std::size_t k = 0; k < vocab.token_ids.size(); ++k) {
    const int id = vocab.token_ids[k];
    if (id < 0 || id >= logits.size()) throw VocabularyError("class token id outside the logits");
    z[static_cast<Eigen::Index>(k)] = logits[id];
  }
  return log_softmax(z).array().exp().matrix();
}

double fusion_classification_loss(const Vector& probabilities, int true_class) {
  if (true_class < 0 || true_class >= probabilities.size()) {
    throw PreconditionError("true class index out of range");
  }
  return -std::log(probabilities[true_class]);
}

ag::Var restricted_log_probabilities(const ag::Var& logits, const ClassVocabulary& vocab) {
  vocab.validate();
  std::vector<Eigen::Index> cols(vocab.token_ids.begin(), vocab.token_ids.end());
  return ag::log_softmax_rows(ag::gather_cols(logits, cols));
}

ToyDecoder::ToyDecoder(nn::ParameterStore& store, DecoderSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  Rng rng(spec_.seed);
  const std::string backbone = backbone_component();
  embedding_ = store.add("decoder.embedding", backbone,
                         rng.normal_matrix(spec_.vocab_size, spec_.width, 1.0));
  pos_ = store.add("decoder.pos", backbone, rng.normal_matrix(spec_.max_positions, spec_.width, 0.5));
  for (int i = 0; i < spec_.depth; ++i) {
    blocks_.emplace_back(store, "decoder.blocks." + std::to_string(i), backbone, spec_.width,
                         spec_.width * spec_.mlp_ratio, rng);
  }
  lm_head_ = nn::Linear(store, "decoder.lm_head", backbone, spec_.width, spec_.vocab_size, rng);
  if (spec_.lora.rank > 0) {
    Rng lora_rng(Rng::derive(spec_.seed, {1}));
    for (auto& b : blocks_) {
      b.attach_lora(store, lora_component(), spec_.lora_targets, spec_.lora, lora_rng);
    }
  }
}

ag::Var ToyDecoder::embed(const std::vector<int>& ids) const {
  std::vector<Eigen::Index> rows;
  for (int id : ids) {
    if (id < 0 || id >= spec_.vocab_size) throw VocabularyError("decoder token id out of range");
    rows.push_back(id);
  }
  return ag::gather_rows(embedding_, rows);
}

ag::Var ToyDecoder::last_logits(const ag::Var& inputs, Eigen::Index seq_len) const {
  if (seq_len > spec_.max_positions) {
    throw ShapeError("decoder sequence of " + std::to_string(seq_len) +
                     " positions exceeds max_positions " + std::to_string(spec_.max_positions));
  }
  if (inputs.cols() != spec_.width || inputs.rows() % seq_len != 0) {
    throw ShapeError("decoder inputs do not match the decoder width or sequence length");
  }
  const Eigen::Index batch = inputs.rows() / seq_len;
  std::vector<Eigen::Index> pos, last;
  for (Eigen::Index b = 0; b < batch; ++b) {
    for (Eigen::Index t = 0; t < seq_len; ++t) pos.push_back(t);
    last.push_back((b + 1) * seq_len - 1);
  }
  ag::Var x = ag::add(inputs, ag::gather_rows(pos_, pos));
  for (const auto& block : blocks_) x = block(x, seq_len, {}, true);
  return lm_head_(ag::layer_norm_rows(ag::gather_rows(x, last)));
}

std::vector<std::pair<std::string, int>> ToyDecoder::adapted_layers() const {
  std::vector<std::pair<std::string, int>> out;
  for (const auto& b : blocks_) {
    for (const nn::Linear* l : b.linears()) {
      if (l->has_lora()) out.emplace_back(l->name(), l->lora_rank());
    }
  }
  return out;
}

FusionHead::FusionHead(nn::ParameterStore& store, const FusionSpec& spec,
                       const ToyDecoder& decoder, const Vocabulary& vocab)
    : spec_(spec), decoder_(&decoder) {
  spec_.validate();
  Rng rng(Rng::derive(decoder.spec().seed, {7}));
  const Eigen::Index w = decoder.spec().width;
  global_ = nn::Mlp(store, "fusion.global", projector_component(), spec_.latent_dim,
                    spec_.projector_hidden, w, rng);
  local_ = nn::Linear(store, "fusion.local", projector_component(),
                      static_cast<Eigen::Index>(spec_.stride) * spec_.latent_dim, w, rng);
  for (const auto& [name, words] : spec_.special_seeds) {
    std::vector<int> ids;
    for (const auto& word : words) ids.push_back(vocab.strict_id(word));
    const Matrix rows = decoder.embed(ids).value();
    specials_[name] = store.add("fusion.special." + name, special_component(),
                                rows.colwise().mean());
  }
  answer_id_ = vocab.strict_id(spec_.answer_word);
}

const ag::Var& FusionHead::special(const std::string& name) const {
  auto it = specials_.find(name);
  if (it == specials_.end()) throw ConfigError("unknown special token " + name);
  return it->second;
}

ag::Var FusionHead::project_global(const ag::Var& tokens) const {
  if (tokens.cols() != spec_.latent_dim) {
    throw ShapeError("project_global: expected " + std::to_string(spec_.latent_dim) +
                     " columns, got " + std::to_string(tokens.cols()));
  }
  return global_(tokens);
}

ag::Var FusionHead::project_local(const ag::Var& tokens) const {
  if (tokens.cols() != spec_.latent_dim) {
    throw ShapeError("project_local: expected " + std::to_string(spec_.latent_dim) +
                     " columns, got " + std::to_string(tokens.cols()));
  }
  const Eigen::Index L = tokens.rows(), s = spec_.stride;
  if (L == 0) throw PreconditionError("project_local: empty sequence");
  std::vector<Eigen::Index> index;
  Eigen::Index windows;
  if (L < s) {
    log::warn("local sequence of " + std::to_string(L) + " tokens is shorter than stride " +
              std::to_string(s) + "; projecting token by token");
    windows = L;
    for (Eigen::Index t = 0; t < L; ++t) {
      for (Eigen::Index j = 0; j < s; ++j) index.push_back(t);
    }
  } else {
    windows = (L + s - 1) / s;
    for (Eigen::Index w = 0; w < windows; ++w) {
      for (Eigen::Index j = 0; j < s; ++j) index.push_back(std::min(w * s + j, L - 1));
    }
  }
  const ag::Var stacked = ag::reshape(ag::gather_rows(tokens, index), windows, s * spec_.latent_dim);
  return local_(stacked);
}

Eigen::Index FusionHead::layout_length(std::size_t scans, Eigen::Index image_locals,
                                       Eigen::Index text_locals, int stride) {
  auto down = [stride](Eigen::Index n) { return n < stride ? n : (n + stride - 1) / stride; };
  return 5 + static_cast<Eigen::Index>(scans) * (1 + down(image_locals)) + 1 + down(text_locals);
}

ag::Var FusionHead::assemble(const FusionInput& input) const {
  if (input.image_globals.empty()) throw PreconditionError("fusion input has no images");
  if (input.image_globals.size() != input.image_locals.size()) {
    throw ShapeError("fusion input needs one local sequence per image");
  }
  std::vector<ag::Var> parts;
  parts.push_back(special("img_start"));
  for (std::size_t s = 0; s < input.image_globals.size(); ++s) {
    parts.push_back(project_global(input.image_globals[s]));
    parts.push_back(project_local(input.image_locals[s]));
  }
  parts.push_back(special("img_end"));
  parts.push_back(special("txt_start"));
  parts.push_back(project_global(input.text_global));
  parts.push_back(project_local(input.text_locals));
  parts.push_back(special("txt_end"));
  parts.push_back(decoder_->embed({answer_id_}));
  return ag::concat_rows(parts);
}

ag::Var FusionHead::class_log_probabilities(const std::vector<FusionInput>& batch,
                                            const ClassVocabulary& classes) const {
  if (batch.empty()) throw PreconditionError("empty fusion batch");
  std::vector<ag::Var> sequences;
  sequences.reserve(batch.size());
  std::map<Eigen::Index, std::vector<std::size_t>> by_length;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    sequences.push_back(assemble(batch[i]));
    by_length[sequences.back().rows()].push_back(i);
  }
  std::vector<ag::Var> logits;
  std::vector<Eigen::Index> position(batch.size());
  Eigen::Index row = 0;
  for (const auto& [len, members] : by_length) {
    std::vector<ag::Var> group;
    for (std::size_t i : members) {
      group.push_back(sequences[i]);
      position[i] = row++;
    }
    logits.push_back(decoder_->last_logits(ag::concat_rows(group), len));
  }
  const ag::Var all = logits.size() == 1 ? logits[0] : ag::concat_rows(logits);
  return restricted_log_probabilities(ag::gather_rows(all, position), classes);
}

}  // namespace prima
