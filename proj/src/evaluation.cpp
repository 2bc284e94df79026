#include "prima/evaluation.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "prima/errors.hpp"

using nlohmann::json;

namespace prima {

json MetricValues::to_json() const {
  return {{"per_class_f1", per_class_f1},
          {"f1_undefined", f1_undefined},
          {"per_class_recall", per_class_recall},
          {"macro_f1", macro_f1},
          {"accuracy", accuracy},
          {"balanced_accuracy", balanced_accuracy},
          {"samples", samples}};
}

MetricValues MetricValues::from_json(const json& j) {
  MetricValues v;
  v.per_class_f1 = j.at("per_class_f1").get<std::vector<double>>();
  v.f1_undefined = j.value("f1_undefined", std::vector<bool>(v.per_class_f1.size(), false));
  v.per_class_recall = j.value("per_class_recall", std::vector<double>());
  v.macro_f1 = j.at("macro_f1").get<double>();
  v.accuracy = j.at("accuracy").get<double>();
  v.balanced_accuracy = j.at("balanced_accuracy").get<double>();
  v.samples = j.value("samples", std::size_t{0});
  return v;
}

json MetricsReport::to_json() const {
  json folds_j = json::array();
  for (const auto& f : folds) folds_j.push_back(f.to_json());
  return {{"classes", classes}, {"folds", folds_j}, {"mean", mean.to_json()}, {"sd", sd.to_json()}};
}

MetricsReport MetricsReport::from_json(const json& j) {
  MetricsReport r;
  r.classes = j.at("classes").get<std::vector<std::string>>();
  for (const auto& f : j.at("folds")) r.folds.push_back(MetricValues::from_json(f));
  r.mean = MetricValues::from_json(j.at("mean"));
  r.sd = MetricValues::from_json(j.at("sd"));
  return r;
}

namespace {

std::string cell(double mean, double sd) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.2f (%.2f)", mean, sd);
  return buf;
}

}  // namespace

std::string MetricsReport::to_text() const {
  std::ostringstream out;
  char line[160];
  std::snprintf(line, sizeof line, "%-20s %16s\n", "metric", "mean (SD)");
  out << line;
  for (std::size_t c = 0; c < classes.size(); ++c) {
    const std::string name = "F1 " + classes[c];
    std::snprintf(line, sizeof line, "%-20s %16s%s\n", name.c_str(),
                  cell(mean.per_class_f1[c], sd.per_class_f1[c]).c_str(),
                  mean.f1_undefined.size() > c && mean.f1_undefined[c] ? "  (undefined)" : "");
    out << line;
  }
  std::snprintf(line, sizeof line, "%-20s %16s\n", "Avg F1-score", cell(mean.macro_f1, sd.macro_f1).c_str());
  out << line;
  std::snprintf(line, sizeof line, "%-20s %16s\n", "Acc", cell(mean.accuracy, sd.accuracy).c_str());
  out << line;
  std::snprintf(line, sizeof line, "%-20s %16s\n", "BAcc",
                cell(mean.balanced_accuracy, sd.balanced_accuracy).c_str());
  out << line;
  std::snprintf(line, sizeof line, "(%zu folds)\n", folds.size());
  out << line;
  return out.str();
}

MetricsReport compute_metrics(const std::vector<int>& predictions, const std::vector<int>& truths,
                              const std::vector<std::string>& classes) {
  if (predictions.empty()) throw DomainError("compute_metrics: no predictions");
  if (predictions.size() != truths.size()) {
    throw DomainError("compute_metrics: predictions and truths differ in length");
  }
  const std::size_t C = classes.size();
  if (C < 2) throw DomainError("compute_metrics: need at least two classes");
  std::vector<double> tp(C, 0), fp(C, 0), fn(C, 0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < truths.size(); ++i) {
    const int p = predictions[i], t = truths[i];
    if (p < 0 || static_cast<std::size_t>(p) >= C || t < 0 || static_cast<std::size_t>(t) >= C) {
      throw DomainError("compute_metrics: label outside the class vocabulary");
    }
    if (p == t) {
      ++tp[t];
      ++correct;
    } else {
      ++fp[p];
      ++fn[t];
    }
  }
  MetricValues v;
  v.samples = truths.size();
  double recall_sum = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < C; ++c) {
    const double denom = 2 * tp[c] + fp[c] + fn[c];
    v.f1_undefined.push_back(denom == 0.0);
    v.per_class_f1.push_back(denom == 0.0 ? 0.0 : 100.0 * 2 * tp[c] / denom);
    const double support = tp[c] + fn[c];
    const double recall = support == 0.0 ? 0.0 : 100.0 * tp[c] / support;
    v.per_class_recall.push_back(recall);
    if (support > 0.0) {
      recall_sum += recall;
      ++present;
    }
  }
  double f1_sum = 0.0;
  for (double f : v.per_class_f1) f1_sum += f;
  v.macro_f1 = f1_sum / static_cast<double>(C);
  v.accuracy = 100.0 * static_cast<double>(correct) / static_cast<double>(truths.size());
  v.balanced_accuracy = recall_sum / static_cast<double>(present);

  MetricsReport r;
  r.classes = classes;
  r.folds = {v};
  r.mean = v;
  r.sd = v;
  for (auto& x : r.sd.per_class_f1) x = 0.0;
  for (auto& x : r.sd.per_class_recall) x = 0.0;
  r.sd.f1_undefined.assign(C, false);
  r.sd.macro_f1 = r.sd.accuracy = r.sd.balanced_accuracy = 0.0;
  return r;
}

MetricsReport aggregate_folds(const std::vector<MetricsReport>& reports) {
  if (reports.size() < 2) throw DomainError("aggregate_folds: need at least two folds");
  const auto& classes = reports.front().classes;
  for (const auto& r : reports) {
    if (r.classes != classes) throw DomainError("aggregate_folds: class lists differ");
  }
  const std::size_t C = classes.size();
  const double n = static_cast<double>(reports.size());
  auto stats = [&](auto get) {
    double m = 0.0;
    for (const auto& r : reports) m += get(r.mean);
    m /= n;
    double ss = 0.0;
    for (const auto& r : reports) ss += (get(r.mean) - m) * (get(r.mean) - m);
    return std::pair<double, double>(m, std::sqrt(ss / (n - 1.0)));
  };
  MetricsReport out;
  out.classes = classes;
  for (const auto& r : reports) out.folds.push_back(r.mean);
  out.mean.per_class_f1.resize(C);
  out.sd.per_class_f1.resize(C);
  out.mean.per_class_recall.resize(C);
  out.sd.per_class_recall.resize(C);
  out.mean.f1_undefined.assign(C, false);
  out.sd.f1_undefined.assign(C, false);
  for (std::size_t c = 0; c < C; ++c) {
    std::tie(out.mean.per_class_f1[c], out.sd.per_class_f1[c]) =
        stats([c](const MetricValues& v) { return v.per_class_f1[c]; });
    std::tie(out.mean.per_class_recall[c], out.sd.per_class_recall[c]) =
        stats([c](const MetricValues& v) { return v.per_class_recall[c]; });
    bool all_undefined = true;
    for (const auto& r : reports) all_undefined = all_undefined && r.mean.f1_undefined[c];
    out.mean.f1_undefined[c] = all_undefined;
  }
  std::tie(out.mean.macro_f1, out.sd.macro_f1) = stats([](const MetricValues& v) { return v.macro_f1; });
  std::tie(out.mean.accuracy, out.sd.accuracy) = stats([](const MetricValues& v) { return v.accuracy; });
  std::tie(out.mean.balanced_accuracy, out.sd.balanced_accuracy) =
      stats([](const MetricValues& v) { return v.balanced_accuracy; });
  for (const auto& r : reports) out.mean.samples += r.mean.samples;
  return out;
}

void AblationVariant::validate() const {
  if (loc && loc_dir) throw ConfigError("variant '" + name + "': L_loc and L_loc_dir are exclusive");
  if (soft && sup_con) throw ConfigError("variant '" + name + "': L_soft and L_sup_con are exclusive");
}

LossTerms AblationVariant::loss_terms() const {
  validate();
  LossTerms t;
  t.img = img;
  t.glo = glo;
  t.loc = loc || loc_dir;
  t.local = loc_dir ? LossTerms::Local::Direct : LossTerms::Local::Attention;
  t.soft = soft || sup_con;
  t.soft_source = sup_con ? LossTerms::Soft::ClassLabels : LossTerms::Soft::Metadata;
  return t;
}

json AblationVariant::to_json() const {
  return {{"name", name},   {"knowledge_pretraining", knowledge_pretraining},
          {"img", img},     {"glo", glo},
          {"loc", loc},     {"soft", soft},
          {"loc_dir", loc_dir}, {"sup_con", sup_con}};
}

AblationVariant AblationVariant::from_json(const json& j) {
  AblationVariant v;
  v.name = j.value("name", std::string("variant"));
  v.knowledge_pretraining = j.value("knowledge_pretraining", false);
  v.img = j.value("img", false);
  v.glo = j.value("glo", false);
  v.loc = j.value("loc", false);
  v.soft = j.value("soft", false);
  v.loc_dir = j.value("loc_dir", false);
  v.sup_con = j.value("sup_con", false);
  v.validate();
  return v;
}

std::vector<AblationVariant> default_ablation_variants() {
  //            name                     KP     img    glo    loc    soft   dir    supcon
  return {
      {"labels_only", false, false, false, false, false, false, false},
      {"glo", false, false, true, false, false, false, false},
      {"img", false, true, false, false, false, false, false},
      {"img_glo", false, true, true, false, false, false, false},
      {"img_glo_loc", false, true, true, true, false, false, false},
      {"img_glo_loc_soft", false, true, true, true, true, false, false},
      {"kp_img_glo_soft_locdir", true, true, true, false, true, true, false},
      {"kp_img_glo_loc_supcon", true, true, true, true, false, false, true},
      {"full", true, true, true, true, true, false, false},
  };
}

std::string ablation_table_text(const std::vector<AblationRow>& rows) {
  std::ostringstream out;
  char line[256];
  std::snprintf(line, sizeof line, "%-24s %3s %4s %4s %4s %5s %7s %7s  %-15s %-15s %-15s\n",
                "variant", "KP", "img", "glo", "loc", "soft", "loc_dir", "sup_con", "Avg F1-score",
                "Acc", "BAcc");
  out << line;
  auto mark = [](bool b) { return b ? "x" : "."; };
  for (const auto& r : rows) {
    const auto& v = r.variant;
    std::snprintf(line, sizeof line, "%-24s %3s %4s %4s %4s %5s %7s %7s  %-15s %-15s %-15s\n",
                  v.name.c_str(), mark(v.knowledge_pretraining), mark(v.img), mark(v.glo),
                  mark(v.loc), mark(v.soft), mark(v.loc_dir), mark(v.sup_con),
                  cell(r.report.mean.macro_f1, r.report.sd.macro_f1).c_str(),
                  cell(r.report.mean.accuracy, r.report.sd.accuracy).c_str(),
                  cell(r.report.mean.balanced_accuracy, r.report.sd.balanced_accuracy).c_str());
    out << line;
  }
  return out.str();
}

json ablation_table_json(const std::vector<AblationRow>& rows) {
  json out = json::array();
  for (const auto& r : rows) out.push_back({{"variant", r.variant.to_json()}, {"report", r.report.to_json()}});
  return out;
}

}  // namespace prima
