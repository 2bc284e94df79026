#include "prima/encoders.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "prima/errors.hpp"

namespace prima {

namespace {

std::vector<Eigen::Index> tiled(Eigen::Index period, std::size_t times) {
  std::vector<Eigen::Index> idx;
  idx.reserve(static_cast<std::size_t>(period) * times);
  for (std::size_t b = 0; b < times; ++b) {
    for (Eigen::Index t = 0; t < period; ++t) idx.push_back(t);
  }
  return idx;
}

}  // namespace

int EncoderSpec::token_count() const {
  if (kind == EncoderKind::Vision) {
    if (input_shape.size() != 3 || patch <= 0) return 0;
    return (input_shape[1] / patch) * (input_shape[2] / patch);
  }
  return input_shape.empty() ? 0 : input_shape[0];
}

void EncoderSpec::validate() const {
  if (kind == EncoderKind::Vision) {
    if (input_shape.size() != 3) throw ConfigError("vision input_shape must be {C, H, W}");
    if (patch <= 0 || input_shape[1] % patch != 0 || input_shape[2] % patch != 0) {
      throw ConfigError("vision patch size must divide the image height and width");
    }
  } else {
    if (input_shape.size() != 1) throw ConfigError("text input_shape must be {max_tokens}");
    if (vocab_size < 4) throw ConfigError("text vocab_size must be at least 4");
    if (vocab_size > 512) throw ConfigError("text vocab_size must be at most 512");
  }
  if (token_count() < 1) throw ConfigError("encoder token_count must be >= 1");
  if (latent_dim < 2) throw ConfigError("latent_dim must be >= 2");
  if (width < 2 || depth < 1 || mlp_ratio < 1) throw ConfigError("invalid encoder width/depth");
  if (lora.rank < 0) throw ConfigError("LoRA rank must be >= 0");
}

nlohmann::json EncoderSpec::to_json() const {
  nlohmann::json j;
  j["kind"] = kind == EncoderKind::Vision ? "vision" : "text";
  j["input_shape"] = input_shape;
  j["patch"] = patch;
  j["vocab_size"] = vocab_size;
  j["latent_dim"] = latent_dim;
  j["width"] = width;
  j["depth"] = depth;
  j["mlp_ratio"] = mlp_ratio;
  j["seed"] = seed;
  j["lora_rank"] = lora.rank;
  j["lora_alpha"] = lora.alpha;
  j["lora_targets"] = lora_targets;
  return j;
}

EncoderSpec EncoderSpec::from_json(const nlohmann::json& j) {
  EncoderSpec s;
  const std::string kind = j.at("kind").get<std::string>();
  if (kind != "vision" && kind != "text") throw ConfigError("unknown encoder kind: " + kind);
  s.kind = kind == "vision" ? EncoderKind::Vision : EncoderKind::Text;
  s.input_shape = j.at("input_shape").get<std::vector<int>>();
  s.patch = j.value("patch", s.patch);
  s.vocab_size = j.value("vocab_size", s.vocab_size);
  s.latent_dim = j.value("latent_dim", s.latent_dim);
  s.width = j.value("width", s.width);
  s.depth = j.value("depth", s.depth);
  s.mlp_ratio = j.value("mlp_ratio", s.mlp_ratio);
  s.seed = j.value("seed", s.seed);
  s.lora.rank = j.value("lora_rank", s.lora.rank);
  s.lora.alpha = j.value("lora_alpha", s.lora.alpha);
  if (j.contains("lora_targets")) s.lora_targets = j["lora_targets"].get<std::vector<std::string>>();
  return s;
}

EncoderSpec default_vision_spec() {
  EncoderSpec s;
  s.kind = EncoderKind::Vision;
  s.input_shape = {3, 16, 16};
  s.patch = 4;
  s.lora.rank = 32;
  return s;
}

EncoderSpec default_text_spec(int vocab_size) {
  EncoderSpec s;
  s.kind = EncoderKind::Text;
  s.input_shape = {24};
  s.vocab_size = vocab_size;
  s.lora.rank = 8;
  s.seed = 1;
  return s;
}

ag::Var EncodedBatch::cls() const {
  std::vector<Eigen::Index> idx;
  for (std::size_t b = 0; b < batch; ++b) idx.push_back(static_cast<Eigen::Index>(b) * seq_len);
  return ag::gather_rows(projected, idx);
}

ag::Var EncodedBatch::native_cls() const {
  std::vector<Eigen::Index> idx;
  for (std::size_t b = 0; b < batch; ++b) idx.push_back(static_cast<Eigen::Index>(b) * seq_len);
  return ag::gather_rows(hidden, idx);
}

ag::Var EncodedBatch::seq(std::size_t b) const {
  return ag::rows(projected, static_cast<Eigen::Index>(b) * seq_len + 1, seq_len - 1);
}

std::vector<bool> EncodedBatch::seq_valid(std::size_t b) const {
  const auto begin = valid.begin() + static_cast<std::ptrdiff_t>(b * seq_len + 1);
  return std::vector<bool>(begin, begin + (seq_len - 1));
}

TokenBundle EncodedBatch::bundle(std::size_t b) const {
  TokenBundle t;
  const Eigen::Index start = static_cast<Eigen::Index>(b) * seq_len;
  t.cls = projected.value().row(start).transpose();
  t.seq = projected.value().middleRows(start + 1, seq_len - 1);
  t.valid = seq_valid(b);
  if (std::all_of(t.valid.begin(), t.valid.end(), [](bool v) { return v; })) t.valid.clear();
  return t;
}

ProjectionHead::ProjectionHead(nn::ParameterStore& store, const std::string& name,
                               const std::string& component, Eigen::Index d_in, Eigen::Index d_out,
                               Rng& rng)
    : mlp_(store, name, component, d_in, 2 * d_out, d_out, rng) {}

Encoder::Encoder(nn::ParameterStore& store, EncoderSpec spec, std::string prefix)
    : spec_(std::move(spec)), prefix_(std::move(prefix)) {
  spec_.validate();
  Rng rng(spec_.seed);
  const std::string backbone = prefix_ + ".backbone";
  const Eigen::Index w = spec_.width;
  cls_token_ = store.add(prefix_ + ".cls_token", backbone, rng.normal_matrix(1, w, 0.5));
  pos_ = store.add(prefix_ + ".pos", backbone, rng.normal_matrix(1 + spec_.token_count(), w, 0.5));
  for (int i = 0; i < spec_.depth; ++i) {
    blocks_.emplace_back(store, prefix_ + ".blocks." + std::to_string(i), backbone, w,
                         w * spec_.mlp_ratio, rng);
  }
  Rng head_rng(Rng::derive(spec_.seed, {2}));
  head_ = ProjectionHead(store, prefix_ + ".head", head_component(), w, spec_.latent_dim, head_rng);
}

static void attach_encoder_lora(std::vector<nn::MixingBlock>& blocks, nn::ParameterStore& store,
                         const EncoderSpec& spec, const std::string& component) {
  if (spec.lora.rank == 0) return;
  Rng rng(Rng::derive(spec.seed, {1}));
  for (auto& b : blocks) b.attach_lora(store, component, spec.lora_targets, spec.lora, rng);
}

ag::Var Encoder::mix(ag::Var tokens, Eigen::Index seq_len, const std::vector<bool>& valid) const {
  const std::size_t batch = static_cast<std::size_t>(tokens.rows() / seq_len);
  const auto idx = tiled(seq_len, batch);
  ag::Var x = ag::add(tokens, ag::gather_rows(pos_, idx));
  for (const auto& block : blocks_) x = block(x, seq_len, valid, false);
  return ag::layer_norm_rows(x);
}

EncodedBatch Encoder::project(ag::Var hidden, Eigen::Index seq_len, std::size_t batch,
                              std::vector<bool> valid) const {
  EncodedBatch out;
  out.projected = head_(hidden);
  out.hidden = std::move(hidden);
  out.seq_len = seq_len;
  out.batch = batch;
  out.valid = std::move(valid);
  return out;
}

std::vector<Encoder::AdaptedLayer> Encoder::adapted_layers() const {
  std::vector<AdaptedLayer> out;
  for (const auto& block : blocks_) {
    for (const nn::Linear* l : block.linears()) {
      if (l->has_lora()) out.push_back({l->name(), l->lora_rank(), l->in_dim(), l->out_dim()});
    }
  }
  return out;
}

VisionEncoder::VisionEncoder(nn::ParameterStore& store, EncoderSpec spec, std::string prefix)
    : Encoder(store, std::move(spec), std::move(prefix)) {
  if (spec_.kind != EncoderKind::Vision) throw ConfigError("VisionEncoder needs a vision spec");
  Rng rng(Rng::derive(spec_.seed, {3}));
  const Eigen::Index patch_dim = static_cast<Eigen::Index>(spec_.input_shape[0]) * spec_.patch * spec_.patch;
  patch_embed_ = nn::Linear(store, prefix_ + ".patch_embed", prefix_ + ".backbone", patch_dim,
                            spec_.width, rng);
  attach_encoder_lora(blocks_, store, spec_, lora_component());
}

Matrix VisionEncoder::patchify(const Image& image) const {
  const int c = spec_.input_shape[0], h = spec_.input_shape[1], w = spec_.input_shape[2];
  if (image.channels != c || image.height != h || image.width != w ||
      image.data.size() != static_cast<std::size_t>(c) * h * w) {
    std::ostringstream msg;
    msg << "image shape " << image.channels << "x" << image.height << "x" << image.width
        << " does not match encoder input " << c << "x" << h << "x" << w;
    throw ShapeError(msg.str());
  }
  const int p = spec_.patch, gw = w / p;
  Matrix out(spec_.token_count(), static_cast<Eigen::Index>(c) * p * p);
  for (Eigen::Index k = 0; k < out.rows(); ++k) {
    const int gy = static_cast<int>(k) / gw, gx = static_cast<int>(k) % gw;
    Eigen::Index col = 0;
    for (int ch = 0; ch < c; ++ch) {
      for (int dy = 0; dy < p; ++dy) {
        for (int dx = 0; dx < p; ++dx) out(k, col++) = image.at(ch, gy * p + dy, gx * p + dx);
      }
    }
  }
  return out;
}

EncodedBatch VisionEncoder::encode(std::span<const Image> images) const {
  if (images.empty()) throw PreconditionError("encode: empty image batch");
  const Eigen::Index K = spec_.token_count();
  const Eigen::Index seq_len = K + 1;
  Matrix patches(static_cast<Eigen::Index>(images.size()) * K,
                 static_cast<Eigen::Index>(spec_.input_shape[0]) * spec_.patch * spec_.patch);
  for (std::size_t b = 0; b < images.size(); ++b) {
    patches.middleRows(static_cast<Eigen::Index>(b) * K, K) = patchify(images[b]);
  }
  const ag::Var embedded = patch_embed_(ag::constant(std::move(patches)));
  // Row 0 of `pool` is the class token; rows 1.. are the embedded patches.
  const ag::Var parts[] = {cls_token_, embedded};
  const ag::Var pool = ag::concat_rows(parts);
  std::vector<Eigen::Index> order;
  order.reserve(images.size() * static_cast<std::size_t>(seq_len));
  for (std::size_t b = 0; b < images.size(); ++b) {
    order.push_back(0);
    for (Eigen::Index k = 0; k < K; ++k) order.push_back(1 + static_cast<Eigen::Index>(b) * K + k);
  }
  const ag::Var tokens = ag::gather_rows(pool, order);
  const ag::Var hidden = mix(tokens, seq_len, {});
  return project(hidden, seq_len, images.size(),
                 std::vector<bool>(images.size() * static_cast<std::size_t>(seq_len), true));
}

TokenBundle VisionEncoder::encode_image(const Image& image) const {
  return encode(std::span<const Image>(&image, 1)).bundle(0);
}

TextEncoder::TextEncoder(nn::ParameterStore& store, EncoderSpec spec, std::string prefix)
    : Encoder(store, std::move(spec), std::move(prefix)) {
  if (spec_.kind != EncoderKind::Text) throw ConfigError("TextEncoder needs a text spec");
  Rng rng(Rng::derive(spec_.seed, {3}));
  embedding_ = store.add(prefix_ + ".embedding", prefix_ + ".backbone",
                         rng.normal_matrix(spec_.vocab_size, spec_.width, 1.0));
  Rng head_rng(Rng::derive(spec_.seed, {4}));
  mlm_head_ = nn::Linear(store, prefix_ + ".mlm_head", mlm_component(), spec_.width,
                         spec_.vocab_size, head_rng);
  attach_encoder_lora(blocks_, store, spec_, lora_component());
}

EncodedBatch TextEncoder::encode_hidden(const std::vector<std::vector<int>>& ids) const {
  if (ids.empty()) throw PreconditionError("encode: empty text batch");
  std::size_t longest = 0;
  for (const auto& seq : ids) {
    if (seq.empty()) throw PreconditionError("text sequence has no tokens after the class token");
    if (seq.size() > static_cast<std::size_t>(spec_.token_count())) {
      throw PreconditionError("text sequence of " + std::to_string(seq.size()) +
                              " tokens exceeds the maximum of " +
                              std::to_string(spec_.token_count()));
    }
    for (int id : seq) {
      if (id < 0 || id >= spec_.vocab_size) {
        throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary of size " +
                              std::to_string(spec_.vocab_size));
      }
    }
    longest = std::max(longest, seq.size());
  }
  const Eigen::Index seq_len = static_cast<Eigen::Index>(longest) + 1;
  std::vector<Eigen::Index> rows;
  std::vector<bool> valid;
  rows.reserve(ids.size() * static_cast<std::size_t>(seq_len));
  for (const auto& seq : ids) {
    rows.push_back(kClsId);
    valid.push_back(true);
    for (std::size_t t = 0; t < longest; ++t) {
      rows.push_back(t < seq.size() ? seq[t] : kPadId);
      valid.push_back(t < seq.size());
    }
  }
  const ag::Var tokens = ag::gather_rows(embedding_, rows);
  EncodedBatch out;
  out.hidden = mix(tokens, seq_len, valid);
  out.seq_len = seq_len;
  out.batch = ids.size();
  out.valid = std::move(valid);
  return out;
}

EncodedBatch TextEncoder::encode(const std::vector<std::vector<int>>& ids) const {
  EncodedBatch h = encode_hidden(ids);
  return project(h.hidden, h.seq_len, h.batch, std::move(h.valid));
}

TokenBundle TextEncoder::encode_text(const std::vector<int>& ids) const {
  return encode({ids}).bundle(0);
}

const ComponentCount* ParameterReport::find(const std::string& component) const {
  for (const auto& c : components) {
    if (c.component == component) return &c;
  }
  return nullptr;
}

nlohmann::json ParameterReport::to_json() const {
  nlohmann::json j;
  j["trainable"] = trainable;
  j["total"] = total;
  j["trainable_fraction"] = fraction();
  j["components"] = nlohmann::json::array();
  for (const auto& c : components) {
    j["components"].push_back(
        {{"component", c.component}, {"trainable", c.trainable}, {"total", c.total}});
  }
  return j;
}

std::string ParameterReport::to_text() const {
  std::ostringstream out;
  char line[160];
  std::snprintf(line, sizeof line, "%-22s %12s %12s\n", "component", "trainable", "total");
  out << line;
  for (const auto& c : components) {
    std::snprintf(line, sizeof line, "%-22s %12zu %12zu%s\n", c.component.c_str(), c.trainable,
                  c.total, c.trainable == 0 ? "  (frozen)" : "");
    out << line;
  }
  std::snprintf(line, sizeof line, "%-22s %12zu %12zu  (%.2f%% trainable)\n", "all", trainable,
                total, 100.0 * fraction());
  out << line;
  return out.str();
}

ParameterReport trainable_parameter_report(const nn::ParameterStore& store) {
  ParameterReport report;
  std::map<std::string, ComponentCount> by_component;
  for (const nn::Parameter* p : store.parameters()) {
    auto& c = by_component[p->component];
    c.component = p->component;
    const auto n = static_cast<std::size_t>(p->size());
    c.total += n;
    report.total += n;
    if (p->trainable()) {
      c.trainable += n;
      report.trainable += n;
    }
  }
  for (auto& [name, c] : by_component) report.components.push_back(c);
  return report;
}

}  // namespace prima
