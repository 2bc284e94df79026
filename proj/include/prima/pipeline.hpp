#pragma once

// Three-stage training: knowledge injection into the text encoder, image /
// metadata alignment with supervised refinement, and fusion classification,
// run per cross-validation fold with stage-level checkpoints and resume.
//
// Output directory layout:
//   config.json                    resolved configuration snapshot
//   vocab.json, folds.json
//   stage1/                        checkpoint/, trace.jsonl, done.json
//   fold<k>/stage2/                alignment/, checkpoint/, trace.jsonl, done.json
//   fold<k>/stage3/                checkpoint/, trace.jsonl, predictions.jsonl,
//                                  metrics.json, parameters.json, done.json
//   predictions.jsonl              all folds
//   metrics.json, metrics.txt      per-fold values, mean and SD

#include <filesystem>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "prima/alignment_losses.hpp"
#include "prima/data_model.hpp"
#include "prima/encoders.hpp"
#include "prima/evaluation.hpp"
#include "prima/fusion_classifier.hpp"
#include "prima/knowledge_injection.hpp"

namespace prima {

struct StageConfig {
  double lr = 1e-3;
  double weight_decay = 1e-3;
  int epochs = 10;
  double warmup_fraction = 0.1;
  int batch_size = 32;
  int lora_rank = 8;
  std::uint64_t seed = 0;
  /// Global gradient-norm clip; 0 disables.
  double clip_norm = 1.0;

  void validate(const std::string& tag) const;
  nlohmann::json to_json() const;
  static StageConfig from_json(const nlohmann::json& j, const StageConfig& defaults);
};

struct RunConfig {
  std::string profile = "desk";
  std::uint64_t seed = 0;
  int folds = 5;
  std::filesystem::path output_dir = "runs/default";
  std::filesystem::path manifest;
  std::filesystem::path corpus;
  bool include_unvetted = false;
  double mask_rate = 0.15;
  StageConfig stage1, stage2, stage3;
  LossWeights losses;
  AblationVariant variant;
  /// Expected class list; empty means "take it from the manifest".
  std::vector<std::string> classes;
  /// Replaces the manifest's metadata schema when set.
  std::optional<MetadataSchema> schema;
  EncoderSpec vision;
  EncoderSpec text;
  DecoderSpec decoder;
  FusionSpec fusion;
  AugmentConfig augment;
  double divergence_factor = 10.0;
  int divergence_patience = 50;

  /// Everything, including the data paths a run needs.
  void validate() const;
  /// Settings only; data paths may still be unset.
  void validate_settings() const;
  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
};

/// "desk" (small epochs, gradient clipping) or "reference" (reference epochs,
/// learning rates and no clipping).
RunConfig default_run_config(const std::string& profile = "desk");

/// Every leaf key of a configuration object in dotted form.
std::vector<std::string> config_keys(const nlohmann::json& j);
/// Applies "dotted.key=value" to a configuration object. The value is read as
/// JSON when it parses and as a string otherwise. Unknown keys raise
/// ConfigError listing the valid ones.
void apply_override(nlohmann::json& config, const std::string& assignment);

/// Reads a configuration file (JSON) on top of the profile it names, then
/// applies the overrides in order.
RunConfig load_run_config(const std::filesystem::path& path,
                          const std::vector<std::string>& overrides = {});

struct TraceStep {
  std::string stage;  // "stage1", "stage2.align", "stage2.refine", "stage3"
  int fold = -1;
  std::size_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
  std::optional<LossParts> parts;
  double wall_ms = 0.0;

  nlohmann::json to_json() const;
  static TraceStep from_json(const nlohmann::json& j);
};

class TrainingTrace {
 public:
  void add(TraceStep step);
  const std::vector<TraceStep>& steps() const { return steps_; }
  std::vector<double> losses(const std::string& stage) const;
  void append(const TrainingTrace& other);

  void write(const std::filesystem::path& path) const;
  static TrainingTrace read(const std::filesystem::path& path);

 private:
  std::vector<TraceStep> steps_;
};

/// Means of `windows` equal contiguous chunks of `values` (the last chunk
/// absorbs the remainder).
std::vector<double> smoothed(const std::vector<double>& values, int windows);
bool strictly_decreasing(const std::vector<double>& values);

/// Aborts when the loss stays above factor x the first loss for `patience`
/// consecutive steps, or immediately on a non-finite loss.
class DivergenceMonitor {
 public:
  DivergenceMonitor(std::string stage, double factor, int patience)
      : stage_(std::move(stage)), factor_(factor), patience_(patience) {}
  void observe(double loss);

 private:
  std::string stage_;
  double factor_;
  int patience_;
  std::optional<double> initial_;
  int above_ = 0;
  std::size_t step_ = 0;
};

/// Resolved inputs shared by every stage of a run.
struct RunContext {
  RunConfig config;
  DatasetManifest manifest;
  std::vector<CorpusDocument> corpus;
  Vocabulary vocab;
  ClassVocabulary classes;
  FoldAssignment folds;
};

RunContext prepare_run(const RunConfig& config);

/// Every parameterized module of the model, sharing one parameter store.
struct Model {
  nn::ParameterStore store;
  std::unique_ptr<VisionEncoder> vision;
  std::unique_ptr<TextEncoder> text;
  std::unique_ptr<ToyDecoder> decoder;
  std::unique_ptr<FusionHead> fusion;
  std::unique_ptr<nn::Linear> refine;

  static std::string refine_component() { return "vision.refine"; }
};

/// Builds the model with initial weights for the run's seed and LoRA ranks.
std::unique_ptr<Model> build_model(const RunContext& ctx);
/// Text encoder alone, as trained by stage 1.
std::unique_ptr<Model> build_text_model(const RunContext& ctx);

struct StageResult {
  std::filesystem::path dir;
  TrainingTrace trace;
  bool resumed = false;
};

struct Prediction {
  std::string patient_id;
  int fold = 0;
  int truth = 0;
  int prediction = 0;
  std::vector<double> probabilities;

  nlohmann::json to_json(const std::vector<std::string>& classes) const;
  static Prediction from_json(const nlohmann::json& j, const std::vector<std::string>& classes);
};

struct Stage3Result : StageResult {
  std::vector<Prediction> predictions;
  MetricsReport report;
  ParameterReport parameters;
};

StageResult run_stage1(const RunContext& ctx, const std::filesystem::path& dir);
/// `stage1_dir` is ignored when the variant disables knowledge pretraining.
StageResult run_stage2(const RunContext& ctx, int fold, const std::filesystem::path& stage1_dir,
                       const std::filesystem::path& dir);
Stage3Result run_stage3(const RunContext& ctx, int fold, const std::filesystem::path& stage2_dir,
                        const std::filesystem::path& dir);

struct RunOptions {
  /// Stages to execute; completed stages with a matching fingerprint are
  /// reused. Later stages need the checkpoints of earlier ones.
  std::set<int> stages = {1, 2, 3};
  /// Stop after the named stage completes, e.g. "stage1" or "fold2.stage2".
  std::string stop_after;
  /// Use this stage-1 directory instead of <output_dir>/stage1.
  std::optional<std::filesystem::path> stage1_dir;
};

struct RunResult {
  std::vector<MetricsReport> fold_reports;
  std::optional<MetricsReport> aggregate;
  TrainingTrace trace;
  std::vector<Prediction> predictions;
  bool interrupted = false;
};

RunResult run_full(const RunConfig& config, const RunOptions& options = {});

/// Runs every variant under <base.output_dir>/<variant name>, sharing one
/// stage-1 checkpoint, and writes ablation.json / ablation.txt.
std::vector<AblationRow> run_ablation_suite(const RunConfig& base,
                                            const std::vector<AblationVariant>& variants);

/// Reads a predictions file and recomputes the fold-aggregated report.
MetricsReport metrics_from_predictions(const std::filesystem::path& predictions,
                                       const std::vector<std::string>& classes);

}  // namespace prima
