#include "prima/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "prima/checkpoint.hpp"
#include "prima/errors.hpp"
#include "prima/log.hpp"
#include "prima/optimizer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace prima {

// ---------------------------------------------------------------- config

void StageConfig::validate(const std::string& tag) const {
  if (!(lr > 0.0)) throw ConfigError(tag + ".lr must be positive");
  if (weight_decay < 0.0) throw ConfigError(tag + ".weight_decay must be non-negative");
  if (epochs < 1) throw ConfigError(tag + ".epochs must be at least 1");
  if (warmup_fraction < 0.0 || warmup_fraction >= 1.0) {
    throw ConfigError(tag + ".warmup_fraction must be in [0, 1)");
  }
  if (batch_size < 1) throw ConfigError(tag + ".batch_size must be at least 1");
  if (lora_rank < 0) throw ConfigError(tag + ".lora_rank must be non-negative");
  if (clip_norm < 0.0) throw ConfigError(tag + ".clip_norm must be non-negative");
}

json StageConfig::to_json() const {
  return {{"lr", lr},
          {"weight_decay", weight_decay},
          {"epochs", epochs},
          {"warmup_fraction", warmup_fraction},
          {"batch_size", batch_size},
          {"lora_rank", lora_rank},
          {"seed", seed},
          {"clip_norm", clip_norm}};
}

StageConfig StageConfig::from_json(const json& j, const StageConfig& d) {
  StageConfig s;
  s.lr = j.value("lr", d.lr);
  s.weight_decay = j.value("weight_decay", d.weight_decay);
  s.epochs = j.value("epochs", d.epochs);
  s.warmup_fraction = j.value("warmup_fraction", d.warmup_fraction);
  s.batch_size = j.value("batch_size", d.batch_size);
  s.lora_rank = j.value("lora_rank", d.lora_rank);
  s.seed = j.value("seed", d.seed);
  s.clip_norm = j.value("clip_norm", d.clip_norm);
  return s;
}

namespace {

json weights_to_json(const LossWeights& w) {
  return {{"beta1", w.beta1}, {"beta2", w.beta2}, {"beta3", w.beta3},
          {"beta4", w.beta4}, {"tau", w.tau},     {"tau_label", w.tau_label}};
}

LossWeights weights_from_json(const json& j) {
  LossWeights w;
  w.beta1 = j.value("beta1", w.beta1);
  w.beta2 = j.value("beta2", w.beta2);
  w.beta3 = j.value("beta3", w.beta3);
  w.beta4 = j.value("beta4", w.beta4);
  w.tau = j.value("tau", w.tau);
  w.tau_label = j.value("tau_label", w.tau_label);
  return w;
}

json parts_to_json(const LossParts& p) {
  return {{"img", p.img}, {"glo", p.glo}, {"loc", p.loc}, {"soft", p.soft}};
}

// Encoder JSON inside the run config: the LoRA rank lives in the stage
// config and the vocabulary size is derived from the data.
json strip_spec(json j) {
  j.erase("lora_rank");
  j.erase("vocab_size");
  return j;
}

// Recursively overlays `patch` onto `base`. Keys must already exist in
// `base`; objects merge, anything else replaces.
void overlay(json& base, const json& patch, const std::string& prefix) {
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!base.contains(it.key())) {
      std::string valid;
      for (const auto& k : config_keys(base)) valid += "\n  " + (prefix.empty() ? k : prefix + "." + k);
      throw ConfigError("unknown configuration key '" + key + "'; valid keys:" + valid);
    }
    json& target = base[it.key()];
    if (target.is_object() && it.value().is_object() && key != "schema") {
      overlay(target, it.value(), key);
    } else {
      target = it.value();
    }
  }
}

}  // namespace

RunConfig default_run_config(const std::string& profile) {
  if (profile != "desk" && profile != "reference") {
    throw ConfigError("unknown profile '" + profile + "' (expected desk or reference)");
  }
  RunConfig c;
  c.profile = profile;
  c.variant = default_ablation_variants().back();
  c.vision = default_vision_spec();
  c.text = default_text_spec(0);
  c.decoder.width = 128;
  c.decoder.lora_targets = {"v"};

  c.stage1.weight_decay = 1e-3;
  c.stage1.lora_rank = 8;
  c.stage1.seed = 1;
  c.stage2.weight_decay = 1e-3;
  c.stage2.lora_rank = 32;
  c.stage2.seed = 2;
  c.stage3.weight_decay = 3e-2;
  c.stage3.lora_rank = 16;
  c.stage3.seed = 3;
  if (profile == "reference") {
    c.stage1.lr = 5e-5;
    c.stage1.epochs = 2500;
    c.stage2.lr = 3e-5;
    c.stage2.epochs = 150;
    c.stage3.lr = 1e-5;
    c.stage3.epochs = 80;
    for (StageConfig* s : {&c.stage1, &c.stage2, &c.stage3}) s->clip_norm = 0.0;
  } else {
    c.stage1.lr = 2e-3;
    c.stage1.epochs = 50;
    c.stage2.lr = 1e-3;
    c.stage2.epochs = 30;
    c.stage3.lr = 1e-3;
    c.stage3.epochs = 15;
  }
  return c;
}

void RunConfig::validate() const {
  validate_settings();
  if (manifest.empty()) throw ConfigError("data.manifest is required");
  if (variant.knowledge_pretraining && corpus.empty()) {
    throw ConfigError("knowledge pretraining needs data.corpus");
  }
}

void RunConfig::validate_settings() const {
  if (folds < 2) throw ConfigError("folds must be at least 2");
  if (!(mask_rate > 0.0 && mask_rate < 1.0)) throw ConfigError("stage1_mask_rate must be in (0, 1)");
  stage1.validate("stage1");
  stage2.validate("stage2");
  stage3.validate("stage3");
  if (stage2.batch_size < 2) {
    throw ConfigError("stage2.batch_size must be at least 2: contrastive losses need negatives");
  }
  losses.validate();
  variant.validate();
  if (vision.latent_dim != text.latent_dim || vision.latent_dim != fusion.latent_dim) {
    throw ConfigError("vision, text and fusion latent dimensions must agree");
  }
  if (!(divergence_factor > 1.0) || divergence_patience < 1) {
    throw ConfigError("divergence factor must exceed 1 and patience must be positive");
  }
  if (schema) schema->validate();
}

json RunConfig::to_json() const {
  return {{"profile", profile},
          {"seed", seed},
          {"folds", folds},
          {"output_dir", output_dir.string()},
          {"data",
           {{"manifest", manifest.string()},
            {"corpus", corpus.string()},
            {"include_unvetted", include_unvetted},
            {"classes", classes}}},
          {"stage1", stage1.to_json()},
          {"stage1_mask_rate", mask_rate},
          {"stage2", stage2.to_json()},
          {"stage3", stage3.to_json()},
          {"losses", weights_to_json(losses)},
          {"variant", variant.to_json()},
          {"schema", schema ? schema->to_json() : json(nullptr)},
          {"encoders", {{"vision", strip_spec(vision.to_json())}, {"text", strip_spec(text.to_json())}}},
          {"decoder", strip_spec(decoder.to_json())},
          {"fusion", fusion.to_json()},
          {"augment", augment.to_json()},
          {"divergence", {{"factor", divergence_factor}, {"patience", divergence_patience}}}};
}

RunConfig RunConfig::from_json(const json& input) {
  const std::string profile = input.value("profile", std::string("desk"));
  const RunConfig defaults = default_run_config(profile);
  json j = defaults.to_json();
  overlay(j, input, "");

  RunConfig c = defaults;
  c.seed = j.at("seed").get<std::uint64_t>();
  c.folds = j.at("folds").get<int>();
  c.output_dir = j.at("output_dir").get<std::string>();
  const json& data = j.at("data");
  c.manifest = data.at("manifest").get<std::string>();
  c.corpus = data.at("corpus").get<std::string>();
  c.include_unvetted = data.at("include_unvetted").get<bool>();
  c.classes = data.at("classes").get<std::vector<std::string>>();
  c.stage1 = StageConfig::from_json(j.at("stage1"), defaults.stage1);
  c.mask_rate = j.at("stage1_mask_rate").get<double>();
  c.stage2 = StageConfig::from_json(j.at("stage2"), defaults.stage2);
  c.stage3 = StageConfig::from_json(j.at("stage3"), defaults.stage3);
  c.losses = weights_from_json(j.at("losses"));
  c.variant = AblationVariant::from_json(j.at("variant"));
  if (!j.at("schema").is_null()) c.schema = MetadataSchema::from_json(j.at("schema"));
  c.vision = EncoderSpec::from_json(j.at("encoders").at("vision"));
  c.text = EncoderSpec::from_json(j.at("encoders").at("text"));
  c.decoder = DecoderSpec::from_json(j.at("decoder"));
  c.fusion = FusionSpec::from_json(j.at("fusion"));
  c.augment = AugmentConfig::from_json(j.at("augment"));
  c.divergence_factor = j.at("divergence").at("factor").get<double>();
  c.divergence_patience = j.at("divergence").at("patience").get<int>();
  c.vision.lora.rank = c.stage2.lora_rank;
  c.text.lora.rank = c.stage1.lora_rank;
  c.decoder.lora.rank = c.stage3.lora_rank;
  return c;
}

std::vector<std::string> config_keys(const json& j) {
  std::vector<std::string> out;
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (it.value().is_object() && it.key() != "schema" && !it.value().empty()) {
      for (const auto& sub : config_keys(it.value())) out.push_back(it.key() + "." + sub);
    } else {
      out.push_back(it.key());
    }
  }
  return out;
}

void apply_override(json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + assignment + "' is not of the form key=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;
  }
  // Build a nested patch and reuse the overlay's key validation.
  json patch = value;
  std::string rest = key;
  std::vector<std::string> parts;
  for (std::size_t pos; (pos = rest.find('.')) != std::string::npos; rest = rest.substr(pos + 1)) {
    parts.push_back(rest.substr(0, pos));
  }
  parts.push_back(rest);
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = json{{*it, patch}};
  overlay(config, patch, "");
}

RunConfig load_run_config(const fs::path& path, const std::vector<std::string>& overrides) {
  json user = json::object();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw PreconditionError("missing artifact: expected config file " + path.string());
    try {
      user = json::parse(in);
    } catch (const json::exception& e) {
      throw ParseError(path.string() + ": " + e.what());
    }
    if (!user.is_object()) throw ParseError(path.string() + ": configuration must be an object");
  }
  std::string profile = user.value("profile", std::string("desk"));
  for (const auto& o : overrides) {
    if (o.rfind("profile=", 0) == 0) profile = o.substr(8);
  }
  json full = default_run_config(profile).to_json();
  overlay(full, user, "");
  full["profile"] = profile;
  for (const auto& o : overrides) apply_override(full, o);
  RunConfig c = RunConfig::from_json(full);
  c.validate_settings();
  return c;
}

// ---------------------------------------------------------------- trace

json TraceStep::to_json() const {
  json j = {{"stage", stage}, {"fold", fold}, {"step", step},
            {"lr", lr},       {"loss", loss}, {"wall_ms", wall_ms}};
  if (parts) j["parts"] = parts_to_json(*parts);
  return j;
}

TraceStep TraceStep::from_json(const json& j) {
  TraceStep s;
  s.stage = j.at("stage").get<std::string>();
  s.fold = j.at("fold").get<int>();
  s.step = j.at("step").get<std::size_t>();
  s.lr = j.at("lr").get<double>();
  s.loss = j.at("loss").get<double>();
  s.wall_ms = j.value("wall_ms", 0.0);
  if (j.contains("parts")) {
    const json& p = j["parts"];
    s.parts = LossParts{p.at("img").get<double>(), p.at("glo").get<double>(),
                        p.at("loc").get<double>(), p.at("soft").get<double>()};
  }
  return s;
}

void TrainingTrace::add(TraceStep step) {
  for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) {
    if (it->stage == step.stage && it->fold == step.fold) {
      if (step.step <= it->step) throw PreconditionError("trace steps must increase within a stage");
      break;
    }
  }
  steps_.push_back(std::move(step));
}

std::vector<double> TrainingTrace::losses(const std::string& stage) const {
  std::vector<double> out;
  for (const auto& s : steps_) {
    if (s.stage == stage) out.push_back(s.loss);
  }
  return out;
}

void TrainingTrace::append(const TrainingTrace& other) {
  steps_.insert(steps_.end(), other.steps_.begin(), other.steps_.end());
}

void TrainingTrace::write(const fs::path& path) const {
  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write trace " + path.string());
  for (const auto& s : steps_) out << s.to_json().dump() << "\n";
}

TrainingTrace TrainingTrace::read(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open trace " + path.string());
  TrainingTrace t;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) t.steps_.push_back(TraceStep::from_json(json::parse(line)));
  }
  return t;
}

std::vector<double> smoothed(const std::vector<double>& values, int windows) {
  if (windows < 1) throw PreconditionError("smoothing needs at least one window");
  const std::size_t w = static_cast<std::size_t>(windows);
  if (values.size() < w) throw PreconditionError("fewer values than smoothing windows");
  const std::size_t chunk = values.size() / w;
  std::vector<double> out;
  for (std::size_t k = 0; k < w; ++k) {
    const std::size_t begin = k * chunk;
    const std::size_t end = k + 1 == w ? values.size() : begin + chunk;
    double sum = 0.0;
    for (std::size_t i = begin; i < end; ++i) sum += values[i];
    out.push_back(sum / static_cast<double>(end - begin));
  }
  return out;
}

bool strictly_decreasing(const std::vector<double>& values) {
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (!(values[i] < values[i - 1])) return false;
  }
  return true;
}

void DivergenceMonitor::observe(double loss) {
  ++step_;
  if (!std::isfinite(loss)) {
    throw TrainingAborted(stage_ + ": non-finite loss at step " + std::to_string(step_));
  }
  if (!initial_) {
    initial_ = loss;
    return;
  }
  if (loss > factor_ * *initial_) {
    if (++above_ >= patience_) {
      std::ostringstream msg;
      msg << stage_ << ": diverged, loss " << loss << " stayed above " << factor_
          << "x the initial loss " << *initial_ << " for " << patience_
          << " consecutive steps (step " << step_ << ")";
      throw TrainingAborted(msg.str());
    }
  } else {
    above_ = 0;
  }
}

// ---------------------------------------------------------------- context

RunContext prepare_run(const RunConfig& config) {
  config.validate();
  RunContext ctx;
  ctx.config = config;
  ctx.manifest = load_manifest(config.manifest);
  if (config.schema) ctx.manifest.schema = *config.schema;
  if (!config.classes.empty() && config.classes != ctx.manifest.classes) {
    throw ConfigError("configured classes do not match the manifest's class list");
  }
  ctx.manifest.validate();
  std::vector<std::string> words = schema_words(ctx.manifest.schema, ctx.manifest.classes);
  const auto required = config.fusion.required_words();
  words.insert(words.end(), required.begin(), required.end());
  if (config.variant.knowledge_pretraining) {
    ctx.corpus = load_corpus(config.corpus, CorpusOptions{config.include_unvetted});
    const auto cw = corpus_words(ctx.corpus);
    words.insert(words.end(), cw.begin(), cw.end());
  } else if (!config.corpus.empty() && fs::exists(config.corpus)) {
    // Keep the vocabulary identical with and without knowledge pretraining.
    ctx.corpus = load_corpus(config.corpus, CorpusOptions{config.include_unvetted});
    const auto cw = corpus_words(ctx.corpus);
    words.insert(words.end(), cw.begin(), cw.end());
  }
  ctx.vocab = Vocabulary(words);
  ctx.classes = ClassVocabulary::from(ctx.manifest.classes, ctx.vocab);
  ctx.folds = make_folds(ctx.manifest, config.folds, Rng::derive(config.seed, {100}));
  return ctx;
}

namespace {

EncoderSpec seeded(EncoderSpec s, std::uint64_t run_seed, int vocab, int lora_rank) {
  s.seed = Rng::derive(run_seed, {s.seed});
  s.lora.rank = lora_rank;
  if (s.kind == EncoderKind::Text) s.vocab_size = vocab;
  return s;
}

}  // namespace

std::unique_ptr<Model> build_model(const RunContext& ctx) {
  const RunConfig& c = ctx.config;
  auto m = std::make_unique<Model>();
  m->vision = std::make_unique<VisionEncoder>(m->store, seeded(c.vision, c.seed, 0, c.stage2.lora_rank));
  m->text = std::make_unique<TextEncoder>(m->store, seeded(c.text, c.seed, ctx.vocab.size(), c.stage1.lora_rank));
  DecoderSpec d = c.decoder;
  d.vocab_size = ctx.vocab.size();
  d.seed = Rng::derive(c.seed, {d.seed});
  d.lora.rank = c.stage3.lora_rank;
  m->decoder = std::make_unique<ToyDecoder>(m->store, d);
  m->fusion = std::make_unique<FusionHead>(m->store, c.fusion, *m->decoder, ctx.vocab);
  Rng rng(Rng::derive(c.seed, {5}));
  m->refine = std::make_unique<nn::Linear>(m->store, "vision.refine", Model::refine_component(),
                                           c.vision.latent_dim,
                                           static_cast<Eigen::Index>(ctx.classes.classes.size()), rng);
  return m;
}

std::unique_ptr<Model> build_text_model(const RunContext& ctx) {
  auto m = std::make_unique<Model>();
  m->text = std::make_unique<TextEncoder>(m->store,
                                          seeded(ctx.config.text, ctx.config.seed, ctx.vocab.size(),
                                                 ctx.config.stage1.lora_rank));
  return m;
}

// ---------------------------------------------------------------- helpers

namespace {

using Clock = std::chrono::steady_clock;

void write_json(const fs::path& path, const json& j) {
  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << j.dump(2) << "\n";
  }
  fs::rename(tmp, path);
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  return json::parse(in);
}

bool stage_done(const fs::path& dir, const json& fingerprint) {
  const fs::path marker = dir / "done.json";
  if (!fs::exists(marker)) return false;
  const json done = read_json(marker);
  if (done.value("fingerprint", json()) == fingerprint) return true;
  log::warn(dir.string() + " holds results for a different configuration; recomputing");
  return false;
}

// Records a digest of every component's weights at the end of the stage.
void mark_done(const fs::path& dir, const std::string& stage, const json& fingerprint,
               const nn::ParameterStore& store) {
  write_json(dir / "done.json",
             {{"stage", stage}, {"fingerprint", fingerprint}, {"digests", component_digests(store)}});
}

void require_checkpoint(const fs::path& dir) {
  if (!checkpoint_exists(dir)) {
    throw PreconditionError("missing checkpoint: expected " + (dir / "manifest.json").string());
  }
}

json stage1_fingerprint(const RunContext& ctx) {
  const RunConfig& c = ctx.config;
  return {{"seed", c.seed},
          {"stage1", c.stage1.to_json()},
          {"mask_rate", c.mask_rate},
          {"text", c.text.to_json()},
          {"vocab", ctx.vocab.to_json()},
          {"documents", ctx.corpus.size()}};
}

json stage2_fingerprint(const RunContext& ctx, int fold) {
  const RunConfig& c = ctx.config;
  json variant = c.variant.to_json();
  variant.erase("name");
  return {{"stage1", c.variant.knowledge_pretraining ? stage1_fingerprint(ctx) : json(nullptr)},
          {"seed", c.seed},
          {"fold", fold},
          {"folds", c.folds},
          {"records", ctx.manifest.records.size()},
          {"stage2", c.stage2.to_json()},
          {"vision", c.vision.to_json()},
          {"text", c.text.to_json()},
          {"losses", weights_to_json(c.losses)},
          {"variant", variant},
          {"augment", c.augment.to_json()},
          {"vocab", ctx.vocab.to_json()}};
}

json stage3_fingerprint(const RunContext& ctx, int fold) {
  const RunConfig& c = ctx.config;
  return {{"stage2", stage2_fingerprint(ctx, fold)},
          {"stage3", c.stage3.to_json()},
          {"decoder", c.decoder.to_json()},
          {"fusion", c.fusion.to_json()}};
}

// Values of every parameter outside the trainable set.
std::map<std::string, Matrix> frozen_snapshot(nn::ParameterStore& store) {
  std::map<std::string, Matrix> out;
  for (const nn::Parameter* p : store.parameters()) {
    if (!p->trainable()) out.emplace(p->name, p->value());
  }
  return out;
}

void verify_frozen(nn::ParameterStore& store, const std::map<std::string, Matrix>& snapshot,
                   const std::string& stage) {
  for (const auto& [name, value] : snapshot) {
    const Matrix& now = store.get(name).value();
    if (now.size() != value.size() ||
        std::memcmp(now.data(), value.data(), static_cast<std::size_t>(value.size()) * sizeof(double)) != 0) {
      throw TrainingAborted(stage + ": frozen parameter " + name + " changed");
    }
  }
}

// Splits a shuffled order into batches; a trailing batch smaller than
// `min_size` is merged into the previous one.
std::vector<std::vector<std::size_t>> make_batches(const std::vector<std::size_t>& order,
                                                   int batch_size, std::size_t min_size) {
  std::vector<std::vector<std::size_t>> out;
  const std::size_t b = static_cast<std::size_t>(batch_size);
  for (std::size_t i = 0; i < order.size(); i += b) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + b)));
  }
  if (out.size() > 1 && out.back().size() < min_size) {
    out[out.size() - 2].insert(out[out.size() - 2].end(), out.back().begin(), out.back().end());
    out.pop_back();
  }
  return out;
}

std::size_t batches_per_epoch(std::size_t n, int batch_size, std::size_t min_size) {
  std::vector<std::size_t> order(n);
  return make_batches(order, batch_size, min_size).size();
}

AdamWConfig adam_config(const StageConfig& s) {
  AdamWConfig cfg;
  cfg.weight_decay = s.weight_decay;
  cfg.clip_norm = s.clip_norm;
  return cfg;
}

double elapsed_ms(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

std::vector<int> patient_text_ids(const RunContext& ctx, const PatientRecord& r) {
  auto ids = ctx.vocab.encode(render_metadata(r.metadata, ctx.manifest.schema));
  const auto limit = static_cast<std::size_t>(ctx.config.text.token_count());
  if (ids.size() > limit) {
    throw ConfigError("rendered metadata of " + r.patient_id + " has " + std::to_string(ids.size()) +
                      " tokens, more than the text encoder's " + std::to_string(limit));
  }
  if (ids.empty()) ids.push_back(Vocabulary::kUnk);
  return ids;
}

// Rows of `m` flagged valid (all rows when `valid` is empty).
Matrix real_rows(const Matrix& m, const std::vector<bool>& valid) {
  if (valid.empty()) return m;
  std::vector<Eigen::Index> keep;
  for (std::size_t i = 0; i < valid.size(); ++i) {
    if (valid[i]) keep.push_back(static_cast<Eigen::Index>(i));
  }
  Matrix out(static_cast<Eigen::Index>(keep.size()), m.cols());
  for (std::size_t i = 0; i < keep.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(keep[i]);
  return out;
}

std::string fold_dir_name(int fold) { return "fold" + std::to_string(fold); }

}  // namespace

// ---------------------------------------------------------------- stage 1

StageResult run_stage1(const RunContext& ctx, const fs::path& dir) {
  const RunConfig& c = ctx.config;
  const json fp = stage1_fingerprint(ctx);
  StageResult result;
  result.dir = dir;
  if (stage_done(dir, fp)) {
    result.trace = TrainingTrace::read(dir / "trace.jsonl");
    result.resumed = true;
    log::info("stage1: reusing " + dir.string());
    return result;
  }
  if (ctx.corpus.empty()) throw PreconditionError("stage1: corpus is empty");
  auto model = build_text_model(ctx);
  TextEncoder& text = *model->text;
  model->store.set_trainable({text.lora_component(), text.mlm_component()}, true);
  const auto frozen = frozen_snapshot(model->store);

  const auto sequences = corpus_sequences(ctx.corpus, ctx.vocab, c.text.token_count());
  std::vector<std::vector<int>> usable;
  for (const auto& s : sequences) {
    if (s.size() >= 2) usable.push_back(s);
  }
  if (usable.empty()) throw PreconditionError("stage1: corpus has no sequence of two or more tokens");
  const std::size_t per_epoch = batches_per_epoch(usable.size(), c.stage1.batch_size, 1);
  WarmupCosine schedule(c.stage1.lr, per_epoch * static_cast<std::size_t>(c.stage1.epochs),
                        c.stage1.warmup_fraction);
  AdamW opt(model->store.trainable(), adam_config(c.stage1));
  DivergenceMonitor monitor("stage1", c.divergence_factor, c.divergence_patience);
  const std::uint64_t seed = Rng::derive(c.seed, {101, c.stage1.seed});
  std::size_t step = 0;
  for (int epoch = 0; epoch < c.stage1.epochs; ++epoch) {
    Rng rng(Rng::derive(seed, {static_cast<std::uint64_t>(epoch)}));
    const auto examples = make_mlm_batch(usable, c.mask_rate, rng, ctx.vocab.size());
    std::vector<std::size_t> order(examples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    for (const auto& batch_idx : make_batches(order, c.stage1.batch_size, 1)) {
      const auto start = Clock::now();
      std::vector<MlmExample> batch;
      for (std::size_t i : batch_idx) batch.push_back(examples[i]);
      const ag::Var loss = mlm_loss(text, batch);
      model->store.zero_grad();
      ag::backward(loss);
      const double lr = schedule(step);
      opt.step(lr);
      monitor.observe(loss.scalar());
      result.trace.add({"stage1", -1, step, lr, loss.scalar(), std::nullopt, elapsed_ms(start)});
      ++step;
    }
  }
  verify_frozen(model->store, frozen, "stage1");
  save_checkpoint(model->store, dir / "checkpoint", {{"stage", "stage1"}});
  result.trace.write(dir / "trace.jsonl");
  mark_done(dir, "stage1", fp, model->store);
  return result;
}

// ---------------------------------------------------------------- stage 2

StageResult run_stage2(const RunContext& ctx, int fold, const fs::path& stage1_dir,
                       const fs::path& dir) {
  const RunConfig& c = ctx.config;
  const json fp = stage2_fingerprint(ctx, fold);
  StageResult result;
  result.dir = dir;
  if (stage_done(dir, fp)) {
    result.trace = TrainingTrace::read(dir / "trace.jsonl");
    result.resumed = true;
    return result;
  }
  auto model = build_model(ctx);
  if (c.variant.knowledge_pretraining) {
    require_checkpoint(stage1_dir / "checkpoint");
    load_checkpoint(model->store, stage1_dir / "checkpoint");
  }
  VisionEncoder& vision = *model->vision;
  TextEncoder& text = *model->text;
  const auto& records = ctx.manifest.records;
  const auto train = ctx.folds.train_indices(ctx.manifest, fold);
  if (train.size() < 2) throw PreconditionError("stage2: fewer than two training patients");
  const auto labels = ctx.manifest.labels();
  const std::uint64_t seed = Rng::derive(c.seed, {102, c.stage2.seed, static_cast<std::uint64_t>(fold)});
  const std::string tag = "fold" + std::to_string(fold) + ".stage2";

  const LossTerms terms = c.variant.loss_terms();
  if (c.variant.any_alignment()) {
    model->store.freeze_all();
    model->store.set_trainable({vision.lora_component(), vision.head_component(), text.head_component()},
                               true);
    const auto frozen = frozen_snapshot(model->store);

    // The text backbone is frozen, so its hidden states are computed once.
    std::map<std::size_t, Matrix> text_hidden;
    std::map<std::size_t, Vector> meta_vec;
    for (std::size_t i : train) {
      text_hidden[i] = text.encode_hidden({patient_text_ids(ctx, records[i])}).hidden.value();
      meta_vec[i] = encode_metadata(records[i].metadata, ctx.manifest.schema);
    }
    const std::size_t per_epoch = batches_per_epoch(train.size(), c.stage2.batch_size, 2);
    WarmupCosine schedule(c.stage2.lr, per_epoch * static_cast<std::size_t>(c.stage2.epochs),
                          c.stage2.warmup_fraction);
    AdamW opt(model->store.trainable(), adam_config(c.stage2));
    DivergenceMonitor monitor(tag + ".align", c.divergence_factor, c.divergence_patience);
    std::size_t step = 0;
    for (int epoch = 0; epoch < c.stage2.epochs; ++epoch) {
      Rng rng(Rng::derive(seed, {1, static_cast<std::uint64_t>(epoch)}));
      std::vector<std::size_t> order = train;
      rng.shuffle(order);
      for (const auto& batch : make_batches(order, c.stage2.batch_size, 2)) {
        const auto start = Clock::now();
        const std::size_t B = batch.size();
        std::vector<Image> v1, v2;
        std::vector<Vector> vecs;
        std::vector<int> batch_labels;
        Eigen::Index longest = 0;
        for (std::size_t i : batch) {
          auto [a, b] = sample_two_views(records[i], rng, c.augment);
          v1.push_back(std::move(a));
          v2.push_back(std::move(b));
          vecs.push_back(meta_vec[i]);
          batch_labels.push_back(labels[i]);
          longest = std::max(longest, text_hidden[i].rows());
        }
        Matrix stacked = Matrix::Zero(static_cast<Eigen::Index>(B) * longest, c.text.width);
        std::vector<bool> valid(static_cast<std::size_t>(stacked.rows()), false);
        for (std::size_t b = 0; b < B; ++b) {
          const Matrix& h = text_hidden[batch[b]];
          stacked.middleRows(static_cast<Eigen::Index>(b) * longest, h.rows()) = h;
          for (Eigen::Index r = 0; r < h.rows(); ++r) {
            valid[b * static_cast<std::size_t>(longest) + static_cast<std::size_t>(r)] = true;
          }
        }
        const EncodedBatch e1 = vision.encode(v1);
        const EncodedBatch e2 = vision.encode(v2);
        const EncodedBatch et = text.project(ag::constant(std::move(stacked)), longest, B, valid);
        graph::BatchTokens tokens;
        tokens.view1_cls = e1.cls();
        tokens.view2_cls = e2.cls();
        tokens.text_cls = et.cls();
        for (std::size_t b = 0; b < B; ++b) {
          tokens.view1_seq.push_back(e1.seq(b));
          tokens.view2_seq.push_back(e2.seq(b));
          tokens.text_seq.push_back(et.seq(b));
          tokens.text_valid.push_back(et.seq_valid(b));
        }
        Matrix soft;
        if (terms.soft) {
          soft = terms.soft_source == LossTerms::Soft::ClassLabels
                     ? label_soft_targets(batch_labels)
                     : build_soft_targets(vecs, c.losses.tau_label);
        }
        const graph::CombinedGraph loss = graph::combined_alignment_loss(tokens, soft, c.losses, terms);
        model->store.zero_grad();
        ag::backward(loss.total);
        const double lr = schedule(step);
        opt.step(lr);
        monitor.observe(loss.total.scalar());
        result.trace.add({"stage2.align", fold, step, lr, loss.total.scalar(), loss.parts(),
                          elapsed_ms(start)});
        ++step;
      }
    }
    verify_frozen(model->store, frozen, tag + ".align");
    save_checkpoint(model->store, dir / "alignment", {{"stage", "stage2.align"}, {"fold", fold}},
                    {"vision.", "text."});
  }

  // Supervised refinement on ground-truth labels.
  model->store.freeze_all();
  model->store.set_trainable({vision.lora_component(), vision.head_component(), Model::refine_component()},
                             true);
  const auto frozen = frozen_snapshot(model->store);
  const int refine_epochs = std::max(1, c.stage2.epochs / 5);
  const std::size_t per_epoch = batches_per_epoch(train.size(), c.stage2.batch_size, 2);
  WarmupCosine schedule(c.stage2.lr, per_epoch * static_cast<std::size_t>(refine_epochs),
                        c.stage2.warmup_fraction);
  AdamW opt(model->store.trainable(), adam_config(c.stage2));
  DivergenceMonitor monitor(tag + ".refine", c.divergence_factor, c.divergence_patience);
  std::size_t step = 0;
  for (int epoch = 0; epoch < refine_epochs; ++epoch) {
    Rng rng(Rng::derive(seed, {2, static_cast<std::uint64_t>(epoch)}));
    std::vector<std::size_t> order = train;
    rng.shuffle(order);
    for (const auto& batch : make_batches(order, c.stage2.batch_size, 2)) {
      const auto start = Clock::now();
      std::vector<Image> views;
      std::vector<int> batch_labels;
      for (std::size_t i : batch) {
        const auto& scans = records[i].scans;
        const Image& scan = scans[rng.index(scans.size())].image;
        views.push_back(c.augment.enabled ? augment(scan, rng, c.augment) : scan);
        batch_labels.push_back(labels[i]);
      }
      const EncodedBatch e = vision.encode(views);
      const ag::Var loss = nn::cross_entropy((*model->refine)(e.cls()), batch_labels);
      model->store.zero_grad();
      ag::backward(loss);
      const double lr = schedule(step);
      opt.step(lr);
      monitor.observe(loss.scalar());
      result.trace.add({"stage2.refine", fold, step, lr, loss.scalar(), std::nullopt, elapsed_ms(start)});
      ++step;
    }
  }
  verify_frozen(model->store, frozen, tag + ".refine");
  save_checkpoint(model->store, dir / "checkpoint", {{"stage", "stage2"}, {"fold", fold}},
                  {"vision.", "text."});
  result.trace.write(dir / "trace.jsonl");
  mark_done(dir, "stage2", fp, model->store);
  return result;
}

// ---------------------------------------------------------------- stage 3

json Prediction::to_json(const std::vector<std::string>& classes) const {
  json probs = json::object();
  for (std::size_t k = 0; k < classes.size(); ++k) probs[classes[k]] = probabilities[k];
  return {{"patient_id", patient_id},
          {"fold", fold},
          {"truth", classes[static_cast<std::size_t>(truth)]},
          {"prediction", classes[static_cast<std::size_t>(prediction)]},
          {"probabilities", probs}};
}

Prediction Prediction::from_json(const json& j, const std::vector<std::string>& classes) {
  auto index = [&](const std::string& name) {
    const auto it = std::find(classes.begin(), classes.end(), name);
    if (it == classes.end()) throw ConfigError("prediction refers to unknown class '" + name + "'");
    return static_cast<int>(it - classes.begin());
  };
  Prediction p;
  p.patient_id = j.at("patient_id").get<std::string>();
  p.fold = j.at("fold").get<int>();
  p.truth = index(j.at("truth").get<std::string>());
  p.prediction = index(j.at("prediction").get<std::string>());
  if (j.contains("probabilities")) {
    for (const auto& c : classes) p.probabilities.push_back(j["probabilities"].value(c, 0.0));
  }
  return p;
}

namespace {

void write_predictions(const std::vector<Prediction>& preds, const std::vector<std::string>& classes,
                       const fs::path& path) {
  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write predictions " + path.string());
  for (const auto& p : preds) out << p.to_json(classes).dump() << "\n";
}

std::vector<Prediction> read_predictions(const fs::path& path, const std::vector<std::string>& classes) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open predictions " + path.string());
  std::vector<Prediction> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(Prediction::from_json(json::parse(line), classes));
    } catch (const json::exception& e) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

MetricsReport report_of(const std::vector<Prediction>& preds, const std::vector<std::string>& classes) {
  std::vector<int> p, t;
  for (const auto& x : preds) {
    p.push_back(x.prediction);
    t.push_back(x.truth);
  }
  return compute_metrics(p, t, classes);
}

// Frozen-encoder tokens for every patient: the first two scans (or the
// single scan twice) without augmentation, plus the rendered metadata.
std::vector<FusionInput> fusion_features(const RunContext& ctx, const Model& model,
                                         const std::vector<std::size_t>& patients) {
  const auto& records = ctx.manifest.records;
  std::vector<FusionInput> out(patients.size());
  constexpr std::size_t kChunk = 64;
  for (std::size_t start = 0; start < patients.size(); start += kChunk) {
    const std::size_t end = std::min(patients.size(), start + kChunk);
    std::vector<Image> images;
    std::vector<std::vector<int>> ids;
    for (std::size_t k = start; k < end; ++k) {
      const auto& scans = records[patients[k]].scans;
      images.push_back(scans[0].image);
      images.push_back(scans.size() > 1 ? scans[1].image : scans[0].image);
      ids.push_back(patient_text_ids(ctx, records[patients[k]]));
    }
    const EncodedBatch ev = model.vision->encode(images);
    const EncodedBatch et = model.text->encode(ids);
    for (std::size_t k = start; k < end; ++k) {
      FusionInput& in = out[k];
      for (std::size_t s = 0; s < 2; ++s) {
        const TokenBundle t = ev.bundle(2 * (k - start) + s);
        in.image_globals.push_back(ag::constant(t.cls.transpose()));
        in.image_locals.push_back(ag::constant(t.seq));
      }
      const TokenBundle t = et.bundle(k - start);
      in.text_global = ag::constant(t.cls.transpose());
      in.text_locals = ag::constant(real_rows(t.seq, t.valid));
    }
  }
  return out;
}

}  // namespace

Stage3Result run_stage3(const RunContext& ctx, int fold, const fs::path& stage2_dir, const fs::path& dir) {
  const RunConfig& c = ctx.config;
  const json fp = stage3_fingerprint(ctx, fold);
  const auto& classes = ctx.classes.classes;
  Stage3Result result;
  result.dir = dir;
  if (stage_done(dir, fp)) {
    result.trace = TrainingTrace::read(dir / "trace.jsonl");
    result.predictions = read_predictions(dir / "predictions.jsonl", classes);
    result.report = MetricsReport::from_json(read_json(dir / "metrics.json"));
    const json pj = read_json(dir / "parameters.json");
    for (const auto& comp : pj.at("components")) {
      result.parameters.components.push_back({comp.at("component").get<std::string>(),
                                              comp.at("trainable").get<std::size_t>(),
                                              comp.at("total").get<std::size_t>()});
    }
    result.parameters.trainable = pj.at("trainable").get<std::size_t>();
    result.parameters.total = pj.at("total").get<std::size_t>();
    result.resumed = true;
    return result;
  }
  require_checkpoint(stage2_dir / "checkpoint");
  auto model = build_model(ctx);
  load_checkpoint(model->store, stage2_dir / "checkpoint");
  model->store.freeze_all();
  model->store.set_trainable({model->decoder->lora_component(), FusionHead::projector_component(),
                              FusionHead::special_component()},
                             true);
  const auto frozen = frozen_snapshot(model->store);
  result.parameters = trainable_parameter_report(model->store);

  const auto train = ctx.folds.train_indices(ctx.manifest, fold);
  const auto test = ctx.folds.test_indices(ctx.manifest, fold);
  if (train.empty() || test.empty()) throw PreconditionError("stage3: empty train or test split");
  const auto labels = ctx.manifest.labels();
  const auto train_features = fusion_features(ctx, *model, train);
  const auto test_features = fusion_features(ctx, *model, test);

  const std::uint64_t seed = Rng::derive(c.seed, {103, c.stage3.seed, static_cast<std::uint64_t>(fold)});
  const std::string tag = "fold" + std::to_string(fold) + ".stage3";
  std::vector<std::size_t> positions(train.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i;
  const std::size_t per_epoch = batches_per_epoch(train.size(), c.stage3.batch_size, 1);
  WarmupCosine schedule(c.stage3.lr, per_epoch * static_cast<std::size_t>(c.stage3.epochs),
                        c.stage3.warmup_fraction);
  AdamW opt(model->store.trainable(), adam_config(c.stage3));
  DivergenceMonitor monitor(tag, c.divergence_factor, c.divergence_patience);
  std::size_t step = 0;
  for (int epoch = 0; epoch < c.stage3.epochs; ++epoch) {
    Rng rng(Rng::derive(seed, {static_cast<std::uint64_t>(epoch)}));
    std::vector<std::size_t> order = positions;
    rng.shuffle(order);
    for (const auto& batch : make_batches(order, c.stage3.batch_size, 1)) {
      const auto start = Clock::now();
      std::vector<FusionInput> inputs;
      std::vector<int> targets;
      for (std::size_t p : batch) {
        inputs.push_back(train_features[p]);
        targets.push_back(labels[train[p]]);
      }
      // Restricted log-probabilities are already normalized, so the
      // cross-entropy's log-softmax leaves them unchanged.
      const ag::Var loss =
          nn::cross_entropy(model->fusion->class_log_probabilities(inputs, ctx.classes), targets);
      model->store.zero_grad();
      ag::backward(loss);
      const double lr = schedule(step);
      opt.step(lr);
      monitor.observe(loss.scalar());
      result.trace.add({"stage3", fold, step, lr, loss.scalar(), std::nullopt, elapsed_ms(start)});
      ++step;
    }
  }
  verify_frozen(model->store, frozen, tag);

  constexpr std::size_t kChunk = 64;
  for (std::size_t start = 0; start < test.size(); start += kChunk) {
    const std::size_t end = std::min(test.size(), start + kChunk);
    std::vector<FusionInput> inputs(test_features.begin() + static_cast<std::ptrdiff_t>(start),
                                    test_features.begin() + static_cast<std::ptrdiff_t>(end));
    const Matrix logp = model->fusion->class_log_probabilities(inputs, ctx.classes).value();
    for (std::size_t k = start; k < end; ++k) {
      const auto row = logp.row(static_cast<Eigen::Index>(k - start));
      Prediction p;
      p.patient_id = ctx.manifest.records[test[k]].patient_id;
      p.fold = fold;
      p.truth = labels[test[k]];
      Eigen::Index best = 0;
      row.maxCoeff(&best);
      p.prediction = static_cast<int>(best);
      for (Eigen::Index j = 0; j < row.size(); ++j) p.probabilities.push_back(std::exp(row(j)));
      result.predictions.push_back(std::move(p));
    }
  }
  result.report = report_of(result.predictions, classes);

  save_checkpoint(model->store, dir / "checkpoint", {{"stage", "stage3"}, {"fold", fold}},
                  {"decoder.lora", "fusion."});
  result.trace.write(dir / "trace.jsonl");
  write_predictions(result.predictions, classes, dir / "predictions.jsonl");
  write_json(dir / "metrics.json", result.report.to_json());
  json pj = result.parameters.to_json();
  pj["reference_fraction_note"] = "the full-scale model trains about 1% of its parameters in this stage";
  write_json(dir / "parameters.json", pj);
  mark_done(dir, "stage3", fp, model->store);
  return result;
}

// ---------------------------------------------------------------- runs

RunResult run_full(const RunConfig& config, const RunOptions& options) {
  RunContext ctx = prepare_run(config);
  const fs::path out = config.output_dir;
  fs::create_directories(out);
  write_json(out / "config.json", config.to_json());
  write_json(out / "vocab.json", ctx.vocab.to_json());
  write_json(out / "classes.json", ctx.classes.classes);
  write_json(out / "folds.json", {{"n_folds", ctx.folds.n_folds}, {"groups", ctx.folds.fold_of_group}});

  RunResult result;
  auto stage_tag = [](const std::string& tag, const std::exception& e) {
    return tag + ": " + e.what();
  };
  const fs::path stage1_dir = options.stage1_dir.value_or(out / "stage1");
  if (config.variant.knowledge_pretraining && options.stages.count(1)) {
    try {
      result.trace.append(run_stage1(ctx, stage1_dir).trace);
    } catch (const TrainingAborted& e) {
      throw TrainingAborted(stage_tag("stage1", e));
    }
    if (options.stop_after == "stage1") {
      result.interrupted = true;
      return result;
    }
  }

  for (int fold = 0; fold < config.folds; ++fold) {
    const fs::path fold_dir = out / fold_dir_name(fold);
    const std::string prefix = fold_dir_name(fold) + ".";
    if (options.stages.count(2)) {
      log::info("fold " + std::to_string(fold) + ": stage 2");
      try {
        result.trace.append(run_stage2(ctx, fold, stage1_dir, fold_dir / "stage2").trace);
      } catch (const TrainingAborted& e) {
        throw TrainingAborted(stage_tag(prefix + "stage2", e));
      }
    }
    if (options.stop_after == prefix + "stage2") {
      result.interrupted = true;
      return result;
    }
    if (options.stages.count(3)) {
      log::info("fold " + std::to_string(fold) + ": stage 3");
      Stage3Result r3;
      try {
        r3 = run_stage3(ctx, fold, fold_dir / "stage2", fold_dir / "stage3");
      } catch (const TrainingAborted& e) {
        throw TrainingAborted(stage_tag(prefix + "stage3", e));
      }
      result.trace.append(r3.trace);
      result.fold_reports.push_back(r3.report);
      result.predictions.insert(result.predictions.end(), r3.predictions.begin(), r3.predictions.end());
    }
    if (options.stop_after == prefix + "stage3") {
      result.interrupted = true;
      return result;
    }
  }

  if (options.stages.count(3)) {
    const auto& classes = ctx.classes.classes;
    write_predictions(result.predictions, classes, out / "predictions.jsonl");
    result.aggregate = aggregate_folds(result.fold_reports);
    write_json(out / "metrics.json", result.aggregate->to_json());
    std::ofstream txt(out / "metrics.txt", std::ios::trunc);
    txt << result.aggregate->to_text();
  }
  return result;
}

std::vector<AblationRow> run_ablation_suite(const RunConfig& base,
                                            const std::vector<AblationVariant>& variants) {
  for (const auto& v : variants) v.validate();
  std::vector<AblationRow> rows;
  const fs::path root = base.output_dir;
  for (const auto& v : variants) {
    log::info("ablation variant " + v.name);
    RunConfig cfg = base;
    cfg.variant = v;
    cfg.output_dir = root / v.name;
    RunOptions opts;
    opts.stage1_dir = root / "stage1";
    const RunResult r = run_full(cfg, opts);
    rows.push_back({v, *r.aggregate});
  }
  fs::create_directories(root);
  write_json(root / "ablation.json", ablation_table_json(rows));
  std::ofstream txt(root / "ablation.txt", std::ios::trunc);
  txt << ablation_table_text(rows);
  return rows;
}

MetricsReport metrics_from_predictions(const fs::path& predictions,
                                       const std::vector<std::string>& classes) {
  const auto preds = read_predictions(predictions, classes);
  if (preds.empty()) throw DomainError("no predictions in " + predictions.string());
  std::map<int, std::vector<Prediction>> by_fold;
  for (const auto& p : preds) by_fold[p.fold].push_back(p);
  std::vector<MetricsReport> reports;
  for (const auto& [fold, list] : by_fold) reports.push_back(report_of(list, classes));
  if (reports.size() == 1) return reports.front();
  return aggregate_folds(reports);
}

}  // namespace prima
