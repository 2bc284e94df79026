#pragma once

// Classification metrics in percent, fold aggregation, and the ablation
// variant table.

#include <string>
#include <vector>

#include <json.hpp>

#include "prima/alignment_losses.hpp"

namespace prima {

struct MetricValues {
  std::vector<double> per_class_f1;
  /// Set for classes absent from both predictions and truths (F1 reported as 0).
  std::vector<bool> f1_undefined;
  std::vector<double> per_class_recall;
  double macro_f1 = 0.0;
  double accuracy = 0.0;
  double balanced_accuracy = 0.0;
  std::size_t samples = 0;

  nlohmann::json to_json() const;
  static MetricValues from_json(const nlohmann::json& j);
};

struct MetricsReport {
  std::vector<std::string> classes;
  std::vector<MetricValues> folds;
  MetricValues mean;
  MetricValues sd;  // sample standard deviation; zero for a single fold

  nlohmann::json to_json() const;
  static MetricsReport from_json(const nlohmann::json& j);
  /// Aligned plain-text table: one row per metric, "mean (SD)" cells.
  std::string to_text() const;
};

/// One-vs-rest F1 = 2TP / (2TP + FP + FN); macro F1 is the unweighted mean;
/// BAcc is the mean recall over classes present in `truths`. Values are
/// percentages. Throws DomainError on empty or mismatched input.
MetricsReport compute_metrics(const std::vector<int>& predictions, const std::vector<int>& truths,
                              const std::vector<std::string>& classes);

/// Mean and sample SD of each metric over fold reports (each report
/// contributes its mean). Throws DomainError for fewer than two reports or
/// inconsistent class lists.
MetricsReport aggregate_folds(const std::vector<MetricsReport>& reports);

struct AblationVariant {
  std::string name;
  bool knowledge_pretraining = false;
  bool img = false;
  bool glo = false;
  bool loc = false;
  bool soft = false;
  bool loc_dir = false;
  bool sup_con = false;

  /// Throws ConfigError when loc and loc_dir, or soft and sup_con, are both set.
  void validate() const;
  bool any_alignment() const { return img || glo || loc || soft || loc_dir || sup_con; }
  LossTerms loss_terms() const;
  nlohmann::json to_json() const;
  static AblationVariant from_json(const nlohmann::json& j);
};

/// The nine rows of the ablation table, all-off first and the full model last.
std::vector<AblationVariant> default_ablation_variants();

struct AblationRow {
  AblationVariant variant;
  MetricsReport report;
};

/// Table with the variant flags and macro F1 / Acc / BAcc as "mean (SD)".
std::string ablation_table_text(const std::vector<AblationRow>& rows);
nlohmann::json ablation_table_json(const std::vector<AblationRow>& rows);

}  // namespace prima
