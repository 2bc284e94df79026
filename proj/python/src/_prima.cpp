// Python bindings: losses, soft targets, metrics, cohort generation and runs.
// Structured results cross the boundary as JSON text; the Python package
// decodes them.

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <json.hpp>

#include "prima/alignment_losses.hpp"
#include "prima/errors.hpp"
#include "prima/evaluation.hpp"
#include "prima/fusion_classifier.hpp"
#include "prima/gradcheck.hpp"
#include "prima/knowledge_injection.hpp"
#include "prima/log.hpp"
#include "prima/pipeline.hpp"
#include "prima/soft_targets.hpp"

namespace py = pybind11;
using nlohmann::json;
using namespace prima;

namespace {

std::vector<TokenBundle> bundles(const Matrix& cls, const std::vector<Matrix>& seq, const char* what) {
  if (static_cast<std::size_t>(cls.rows()) != seq.size()) {
    throw ShapeError(std::string(what) + ": class tokens and sequences disagree on the batch size");
  }
  std::vector<TokenBundle> out;
  for (Eigen::Index i = 0; i < cls.rows(); ++i) {
    out.push_back({cls.row(i).transpose(), seq[static_cast<std::size_t>(i)], {}});
  }
  return out;
}

std::string alignment_losses(const Matrix& image1_cls, const std::vector<Matrix>& image1_seq, const Matrix& image2_cls,
                      const std::vector<Matrix>& image2_seq, const Matrix& text_cls,
                      const std::vector<Matrix>& text_seq, const std::optional<Matrix>& soft,
                      const std::vector<double>& betas, double tau) {
  if (betas.size() != 4) throw ConfigError("betas needs four weights");
  AlignmentBatch batch;
  batch.image_view1 = bundles(image1_cls, image1_seq, "image1");
  batch.image_view2 = bundles(image2_cls, image2_seq, "image2");
  batch.text = bundles(text_cls, text_seq, "text");
  batch.validate();
  const Eigen::Index n = static_cast<Eigen::Index>(batch.size());
  const Matrix s = soft ? *soft : Matrix(Matrix::Identity(n, n));
  const LossWeights w{betas[0], betas[1], betas[2], betas[3], tau, 0.5};
  w.validate();
  const SimilarityConfig cfg{tau};
  const CombinedLoss combined = combined_alignment_loss(batch, s, w);
  return json{{"img", combined.parts.img},
          {"glo", combined.parts.glo},
          {"loc", combined.parts.loc},
          {"soft", combined.parts.soft},
          {"loc_dir", local_semantic_loss_direct(batch, cfg)},
          {"total", combined.total}}
      .dump();
}

Matrix soft_targets(const Matrix& metadata, double tau_label) {
  std::vector<Vector> rows;
  for (Eigen::Index i = 0; i < metadata.rows(); ++i) rows.push_back(metadata.row(i).transpose());
  return build_soft_targets(rows, tau_label);
}

std::string metrics(const std::vector<int>& predictions, const std::vector<int>& truths,
                    const std::vector<std::string>& classes) {
  return compute_metrics(predictions, truths, classes).to_json().dump();
}

std::string gradcheck(std::uint64_t seed, int instances, const std::string& corrupt) {
  GradCheckOptions opt;
  opt.seed = seed;
  opt.instances = instances;
  opt.corrupt_loss = corrupt;
  json out = json::array();
  for (const auto& r : run_loss_gradcheck(opt)) {
    out.push_back({{"loss", r.loss}, {"max_rel_error", r.max_rel_error}, {"passed", r.passed}});
  }
  return out.dump();
}

std::string generate_cohort(const std::string& out, int patients, int classes, double correlation,
                            double image_signal, std::uint64_t seed, int documents) {
  SyntheticSpec spec;
  spec.patients = patients;
  spec.classes = classes;
  spec.correlation = correlation;
  spec.image_signal = image_signal;
  spec.seed = seed;
  const DatasetManifest m = generate_synthetic_cohort(spec);
  const std::filesystem::path dir = out;
  write_manifest(m, dir / "manifest.jsonl");
  write_corpus(generate_synthetic_corpus(classes, documents, seed), dir / "corpus.jsonl");
  json counts = json::object();
  for (const auto& c : m.classes) counts[c] = 0;
  for (const auto& r : m.records) counts[r.label] = counts[r.label].get<int>() + 1;
  return json{{"manifest", (dir / "manifest.jsonl").string()},
              {"corpus", (dir / "corpus.jsonl").string()},
              {"classes", counts}}
      .dump();
}

std::string default_config(const std::string& profile) { return default_run_config(profile).to_json().dump(); }

std::string train(const std::string& config_path, const std::vector<std::string>& overrides) {
  const RunConfig cfg = load_run_config(config_path, overrides);
  const RunResult r = run_full(cfg);
  return r.aggregate->to_json().dump();
}

}  // namespace

PYBIND11_MODULE(_prima, m) {
  m.doc() = "Multi-granular image/metadata alignment: core routines";

  static py::exception<Error> base(m, "PrimaError");
  static py::exception<ConfigError> config_error(m, "ConfigError", base.ptr());
  static py::exception<ShapeError> shape_error(m, "ShapeError", base.ptr());
  static py::exception<DomainError> domain_error(m, "DomainError", base.ptr());
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const ConfigError& e) {
      py::set_error(config_error, e.what());
    } catch (const ShapeError& e) {
      py::set_error(shape_error, e.what());
    } catch (const DomainError& e) {
      py::set_error(domain_error, e.what());
    } catch (const Error& e) {
      py::set_error(base, e.what());
    }
  });

  m.def("alignment_losses", &alignment_losses, py::arg("image1_cls"), py::arg("image1_seq"),
        py::arg("image2_cls"), py::arg("image2_seq"), py::arg("text_cls"), py::arg("text_seq"),
        py::arg("soft") = py::none(), py::arg("betas") = std::vector<double>{0.2, 0.3, 0.2, 0.3},
        py::arg("tau") = kDefaultTau, "Loss parts and weighted total as JSON text.");
  m.def("soft_targets", &soft_targets, py::arg("metadata"), py::arg("tau_label") = 0.5,
        "Row-stochastic soft targets from encoded metadata rows.");
  m.def("restricted_probabilities", &restricted_class_probabilities, py::arg("logits"), py::arg("classes"),
        "Softmax over the class-token logits only.");
  m.def(
      "class_vocabulary",
      [](const std::vector<std::string>& names, const std::vector<int>& ids) { return ClassVocabulary{names, ids}; },
      py::arg("names"), py::arg("token_ids"));
  py::class_<ClassVocabulary>(m, "ClassVocabulary")
      .def_readonly("classes", &ClassVocabulary::classes)
      .def_readonly("token_ids", &ClassVocabulary::token_ids);
  m.def("metrics", &metrics, py::arg("predictions"), py::arg("truths"), py::arg("classes"));
  m.def("gradcheck", &gradcheck, py::arg("seed") = 0, py::arg("instances") = 20, py::arg("corrupt") = "");
  m.def("generate_cohort", &generate_cohort, py::arg("out"), py::arg("patients") = 600, py::arg("classes") = 3,
        py::arg("correlation") = 0.8, py::arg("image_signal") = 0.5, py::arg("seed") = 7,
        py::arg("documents") = 50);
  m.def("default_config", &default_config, py::arg("profile") = "desk");
  m.def("train", &train, py::arg("config") = "", py::arg("overrides") = std::vector<std::string>{},
        py::call_guard<py::gil_scoped_release>());
  m.def("set_log_level", [](const std::string& level) {
    if (level == "quiet") log::set_level(log::Level::Quiet);
    else if (level == "warn") log::set_level(log::Level::Warn);
    else if (level == "info") log::set_level(log::Level::Info);
    else if (level == "debug") log::set_level(log::Level::Debug);
    else throw ConfigError("log level must be quiet, warn, info or debug");
  });
}
