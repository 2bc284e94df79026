// prima: command-line entry point for data generation, training, evaluation,
// ablations, gradient checks and artifact inspection.

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "prima/checkpoint.hpp"
#include "prima/errors.hpp"
#include "prima/gradcheck.hpp"
#include "prima/knowledge_injection.hpp"
#include "prima/log.hpp"
#include "prima/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace prima;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;
constexpr int kExitCheckFailed = 3;
constexpr const char* kConfigEnv = "PRIMA_CONFIG";

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw PreconditionError("missing artifact: expected " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw PreconditionError("missing artifact: expected " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path default_config(const std::string& given) {
  if (!given.empty()) return given;
  if (const char* env = std::getenv(kConfigEnv)) return env;
  return {};
}

RunConfig resolve_config(const std::string& config, std::vector<std::string> overrides,
                         const std::string& output) {
  if (!output.empty()) overrides.push_back("output_dir=" + json(output).dump());
  return load_run_config(default_config(config), overrides);
}

// ---------------------------------------------------------------- gen-data

struct GenDataArgs {
  std::string out;
  int patients = 600;
  int classes = 3;
  double corr = 0.8;
  double signal = 0.5;
  std::uint64_t seed = 7;
  int documents = 50;
  bool force = false;
};

int cmd_gen_data(const GenDataArgs& a) {
  const fs::path out = a.out;
  if (fs::exists(out) && fs::is_directory(out) && !fs::is_empty(out) && !a.force) {
    throw ConfigError("output directory " + out.string() + " is not empty (use --force to overwrite)");
  }
  SyntheticSpec spec;
  spec.patients = a.patients;
  spec.classes = a.classes;
  spec.correlation = a.corr;
  spec.image_signal = a.signal;
  spec.seed = a.seed;
  const DatasetManifest m = generate_synthetic_cohort(spec);
  if (a.force && fs::exists(out / "images")) fs::remove_all(out / "images");
  write_manifest(m, out / "manifest.jsonl");
  write_corpus(generate_synthetic_corpus(a.classes, a.documents, a.seed), out / "corpus.jsonl");
  const json run = {{"data",
                     {{"manifest", fs::absolute(out / "manifest.jsonl").string()},
                      {"corpus", fs::absolute(out / "corpus.jsonl").string()}}}};
  std::ofstream(out / "run.json") << run.dump(2) << "\n";

  std::map<std::string, int> counts;
  for (const auto& r : m.records) ++counts[r.label];
  std::cout << "wrote " << m.records.size() << " patients to " << (out / "manifest.jsonl").string() << "\n";
  for (const auto& c : m.classes) std::cout << "  " << c << ": " << counts[c] << "\n";
  std::cout << "corpus: " << (out / "corpus.jsonl").string() << "\n";
  std::cout << "starter config: " << (out / "run.json").string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------- train

int cmd_train(const std::string& config, const std::vector<std::string>& overrides,
              const std::string& output, const std::string& stage) {
  const RunConfig cfg = resolve_config(config, overrides, output);
  RunOptions opts;
  if (stage == "all") {
    opts.stages = {1, 2, 3};
  } else if (stage == "1" || stage == "2" || stage == "3") {
    opts.stages = {std::stoi(stage)};
  } else {
    throw ConfigError("--stage must be one of all, 1, 2, 3");
  }
  run_full(cfg, opts);
  if (opts.stages.count(3)) std::cout << read_text(cfg.output_dir / "metrics.txt");
  std::cerr << "outputs in " << cfg.output_dir.string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------- eval

int cmd_eval(const std::string& run_dir, const std::string& predictions, const std::string& classes_csv,
             const std::string& out) {
  fs::path preds;
  std::vector<std::string> classes;
  if (!run_dir.empty()) {
    preds = fs::path(run_dir) / "predictions.jsonl";
    classes = read_json_file(fs::path(run_dir) / "classes.json").get<std::vector<std::string>>();
  }
  if (!predictions.empty()) preds = predictions;
  if (!classes_csv.empty()) {
    classes.clear();
    std::stringstream ss(classes_csv);
    for (std::string c; std::getline(ss, c, ',');) classes.push_back(c);
  }
  if (preds.empty()) throw ConfigError("eval needs --run or --predictions");
  if (classes.empty()) throw ConfigError("eval needs --classes when --run is not given");
  if (!fs::exists(preds)) throw PreconditionError("missing artifact: expected " + preds.string());
  const MetricsReport report = metrics_from_predictions(preds, classes);
  if (!out.empty()) {
    fs::create_directories(fs::path(out).parent_path().empty() ? fs::path(".") : fs::path(out).parent_path());
    std::ofstream(out) << report.to_json().dump(2) << "\n";
  }
  std::cout << report.to_text();
  return kExitOk;
}

// ---------------------------------------------------------------- ablate

int cmd_ablate(const std::string& config, const std::vector<std::string>& overrides,
               const std::string& output, const std::string& names) {
  const RunConfig cfg = resolve_config(config, overrides, output);
  std::vector<AblationVariant> variants = default_ablation_variants();
  if (!names.empty()) {
    std::vector<AblationVariant> chosen;
    std::stringstream ss(names);
    for (std::string n; std::getline(ss, n, ',');) {
      auto it = std::find_if(variants.begin(), variants.end(), [&](const auto& v) { return v.name == n; });
      if (it == variants.end()) {
        std::string known;
        for (const auto& v : variants) known += " " + v.name;
        throw ConfigError("unknown variant '" + n + "'; known:" + known);
      }
      chosen.push_back(*it);
    }
    variants = chosen;
  }
  run_ablation_suite(cfg, variants);
  std::cout << read_text(cfg.output_dir / "ablation.txt");
  return kExitOk;
}

// ---------------------------------------------------------------- gradcheck

GradCheckSizes parse_sizes(const std::string& text) {
  GradCheckSizes s;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw ConfigError("--sizes entries look like N=4");
    const std::string key = item.substr(0, eq);
    int value = 0;
    try {
      value = std::stoi(item.substr(eq + 1));
    } catch (const std::exception&) {
      throw ConfigError("--sizes value for " + key + " is not an integer");
    }
    if (value < 1) throw ConfigError("--sizes values must be positive");
    if (key == "N") s.n = value;
    else if (key == "L") s.l = value;
    else if (key == "K") s.k = value;
    else if (key == "d") s.d = value;
    else throw ConfigError("--sizes keys are N, L, K and d");
  }
  if (s.n < 2) throw ConfigError("--sizes needs N >= 2");
  return s;
}

int cmd_gradcheck(std::uint64_t seed, const std::string& sizes, int instances, const std::string& corrupt) {
  GradCheckOptions opt;
  opt.seed = seed;
  opt.sizes = parse_sizes(sizes);
  opt.instances = instances;
  if (!corrupt.empty()) {
    opt.corrupt_loss = corrupt.rfind("L_", 0) == 0 ? corrupt : "L_" + corrupt;
    const std::vector<std::string> known = {"L_img", "L_glo", "L_loc", "L_soft", "L_loc_dir"};
    if (std::find(known.begin(), known.end(), opt.corrupt_loss) == known.end()) {
      throw ConfigError("--corrupt must name one of img, glo, loc, soft, loc_dir");
    }
  }
  const auto results = run_loss_gradcheck(opt);
  std::printf("gradcheck seed=%llu N<=%d L<=%d K<=%d d<=%d instances=%d h=%g tol=%g\n",
              static_cast<unsigned long long>(seed), opt.sizes.n, opt.sizes.l, opt.sizes.k, opt.sizes.d,
              instances, opt.step, opt.tolerance);
  bool ok = true;
  for (const auto& r : results) {
    std::printf("  %-10s max_rel_error=%.3e  %s\n", r.loss.c_str(), r.max_rel_error, r.passed ? "PASS" : "FAIL");
    ok = ok && r.passed;
  }
  return ok ? kExitOk : kExitCheckFailed;
}

// ---------------------------------------------------------------- inspect

void print_checkpoint(const fs::path& dir) {
  const json m = read_checkpoint_manifest(dir);
  struct Row {
    std::size_t total = 0, trainable = 0, tensors = 0;
  };
  std::map<std::string, Row> rows;
  for (const auto& p : m.at("parameters")) {
    Row& r = rows[p.at("component").get<std::string>()];
    const std::size_t n = p.at("rows").get<std::size_t>() * p.at("cols").get<std::size_t>();
    r.total += n;
    r.tensors += 1;
    if (p.at("trainable").get<bool>()) r.trainable += n;
  }
  std::cout << "checkpoint " << dir.string() << "\n";
  std::cout << "  meta: " << m.value("meta", json::object()).dump() << "\n";
  std::printf("  %-20s %8s %10s  %s\n", "component", "tensors", "values", "state");
  for (const auto& [name, r] : rows) {
    const char* state = r.trainable == 0 ? "frozen" : (r.trainable == r.total ? "trainable" : "mixed");
    std::printf("  %-20s %8zu %10zu  %s\n", name.c_str(), r.tensors, r.total, state);
  }
}

int cmd_inspect(const std::string& path_text) {
  const fs::path path = path_text;
  if (!fs::exists(path)) throw PreconditionError("missing artifact: expected " + path.string());
  if (checkpoint_exists(path)) {
    print_checkpoint(path);
    return kExitOk;
  }
  if (checkpoint_exists(path / "checkpoint")) {
    print_checkpoint(path / "checkpoint");
    if (fs::exists(path / "parameters.json")) {
      const json pj = read_json_file(path / "parameters.json");
      std::cout << "trainable-parameter report (" << path.string() << ")\n";
      for (const auto& c : pj.at("components")) {
        std::printf("  %-20s %10zu / %zu\n", c.at("component").get<std::string>().c_str(),
                    c.at("trainable").get<std::size_t>(), c.at("total").get<std::size_t>());
      }
      std::printf("  trainable fraction %.2f%% (%zu / %zu)\n",
                  100.0 * pj.at("trainable").get<double>() / pj.at("total").get<double>(),
                  pj.at("trainable").get<std::size_t>(), pj.at("total").get<std::size_t>());
    }
    return kExitOk;
  }
  if (fs::exists(path / "config.json")) {
    const json cfg = read_json_file(path / "config.json");
    std::cout << "run " << path.string() << " (profile " << cfg.value("profile", "?") << ", seed "
              << cfg.value("seed", 0) << ", " << cfg.value("folds", 0) << " folds)\n";
    for (const auto& entry : fs::directory_iterator(path)) {
      if (!entry.is_directory()) continue;
      for (const auto& sub : {entry.path(), entry.path() / "stage2", entry.path() / "stage3"}) {
        if (fs::exists(sub / "done.json")) {
          std::cout << "  completed: " << fs::relative(sub, path).string() << "\n";
        }
      }
    }
    if (fs::exists(path / "metrics.txt")) std::cout << read_text(path / "metrics.txt");
    return kExitOk;
  }
  throw PreconditionError("nothing to inspect at " + path.string() +
                          ": expected a checkpoint (manifest.json) or a run directory (config.json)");
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const SchemaError*>(&e) ||
      dynamic_cast<const ParseError*>(&e) || dynamic_cast<const VocabularyError*>(&e) ||
      dynamic_cast<const PreconditionError*>(&e) || dynamic_cast<const ShapeError*>(&e) ||
      dynamic_cast<const DomainError*>(&e)) {
    return kExitValidation;
  }
  return kExitRuntime;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"prima: multi-granular image/metadata alignment and fusion classification"};
  app.require_subcommand(1);
  bool verbose = false, quiet = false;
  app.add_flag("-v,--verbose", verbose, "Progress messages on stderr");
  app.add_flag("-q,--quiet", quiet, "Errors only");

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Write a synthetic cohort, corpus and starter config");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--patients", gen.patients, "Number of patients")->capture_default_str();
  gen_cmd->add_option("--classes", gen.classes, "Number of classes")->capture_default_str();
  gen_cmd->add_option("--corr", gen.corr, "Attribute-label correlation")->capture_default_str();
  gen_cmd->add_option("--signal", gen.signal, "Image signal strength in [0, 1]")->capture_default_str();
  gen_cmd->add_option("--seed", gen.seed, "Generator seed")->capture_default_str();
  gen_cmd->add_option("--documents", gen.documents, "Corpus documents")->capture_default_str();
  gen_cmd->add_flag("--force", gen.force, "Overwrite a non-empty output directory");

  std::string config, output, stage = "all";
  std::vector<std::string> overrides;
  auto* train_cmd = app.add_subcommand("train", "Run training stages and cross-validation");
  train_cmd->add_option("-c,--config", config, std::string("Run configuration (default: $") + kConfigEnv + ")");
  train_cmd->add_option("--set", overrides, "Override, e.g. losses.beta2=0.5 (repeatable)");
  train_cmd->add_option("-o,--out", output, "Output directory (overrides output_dir)");
  train_cmd->add_option("--stage", stage, "all, 1, 2 or 3")->capture_default_str();

  std::string run_dir, predictions, classes_csv, eval_out;
  auto* eval_cmd = app.add_subcommand("eval", "Recompute metrics from prediction files");
  eval_cmd->add_option("--run", run_dir, "Run directory");
  eval_cmd->add_option("--predictions", predictions, "Predictions file (JSON lines)");
  eval_cmd->add_option("--classes", classes_csv, "Comma-separated class list");
  eval_cmd->add_option("--out", eval_out, "Write the report as JSON");

  std::string variant_names;
  auto* ablate_cmd = app.add_subcommand("ablate", "Run the ablation variant suite");
  ablate_cmd->add_option("-c,--config", config, "Run configuration");
  ablate_cmd->add_option("--set", overrides, "Override (repeatable)");
  ablate_cmd->add_option("-o,--out", output, "Output directory");
  ablate_cmd->add_option("--variants", variant_names, "Comma-separated subset of variant names");

  std::uint64_t gc_seed = 0;
  std::string sizes = "N=4,L=4,K=5,d=8", corrupt;
  int instances = 20;
  auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference checks of the alignment losses");
  gc_cmd->add_option("--seed", gc_seed, "Random seed")->capture_default_str();
  gc_cmd->add_option("--sizes", sizes, "Maximum sizes")->capture_default_str();
  gc_cmd->add_option("--instances", instances, "Random instances per loss")->capture_default_str();
  gc_cmd->add_option("--corrupt", corrupt, "Test hook: corrupt the named loss's gradient");

  std::string inspect_path;
  auto* inspect_cmd = app.add_subcommand("inspect", "Describe a checkpoint, stage or run directory");
  inspect_cmd->add_option("path", inspect_path, "Checkpoint, stage or run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitValidation;
  }
  log::set_level(quiet ? log::Level::Quiet : verbose ? log::Level::Info : log::Level::Warn);

  try {
    if (*gen_cmd) {
      if (gen.patients < 1) throw ConfigError("--patients must be at least 1");
      return cmd_gen_data(gen);
    }
    if (*train_cmd) return cmd_train(config, overrides, output, stage);
    if (*eval_cmd) return cmd_eval(run_dir, predictions, classes_csv, eval_out);
    if (*ablate_cmd) return cmd_ablate(config, overrides, output, variant_names);
    if (*gc_cmd) return cmd_gradcheck(gc_seed, sizes, instances, corrupt);
    if (*inspect_cmd) return cmd_inspect(inspect_path);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
  return kExitOk;
}
