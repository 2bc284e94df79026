#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "prima/numerics.hpp"

namespace prima {

/// Attribute name -> raw value. A missing key means the value is missing.
/// Continuous attributes carry their number as a decimal string.
using Metadata = std::map<std::string, std::string>;

inline constexpr const char* kMissingLevel = "missing";

struct AttributeSpec {
  std::string name;
  /// Categorical levels in one-hot order. For continuous attributes these
  /// are derived from `edges` (bin0 .. binK) when left empty.
  std::vector<std::string> levels;
  /// Ascending bin edges; non-empty marks the attribute as continuous.
  std::vector<double> edges;
  bool disease_related = false;
  bool visually_relevant = true;
  /// Adds a trailing "missing" level to the block.
  bool nullable = false;

  bool continuous() const { return !edges.empty(); }
  std::size_t width() const { return levels.size() + (nullable ? 1 : 0); }
  /// Maps a raw value to its level (bins continuous values). Throws
  /// SchemaError for unknown levels.
  std::string level_of(const std::string& raw) const;
};

class MetadataSchema {
 public:
  MetadataSchema() = default;
  MetadataSchema(std::vector<AttributeSpec> attributes, double upweight_factor = 3.0);

  const std::vector<AttributeSpec>& attributes() const { return attributes_; }
  double upweight_factor() const { return upweight_factor_; }

  /// When set, the class label is appended as an extra disease-related block.
  void include_label(std::vector<std::string> classes);
  bool includes_label() const { return !label_levels_.empty(); }
  const std::vector<std::string>& label_levels() const { return label_levels_; }

  std::size_t width() const;
  const AttributeSpec& attribute(const std::string& name) const;
  bool has_attribute(const std::string& name) const;
  std::vector<std::string> disease_related() const;

  void validate() const;

  nlohmann::json to_json() const;
  static MetadataSchema from_json(const nlohmann::json& j);

 private:
  std::vector<AttributeSpec> attributes_;
  double upweight_factor_ = 3.0;
  std::vector<std::string> label_levels_;
};

/// Concatenated one-hot blocks in schema order; blocks of disease-related
/// attributes hold the upweight factor instead of 1. `label` is required
/// when the schema includes the label block and ignored otherwise.
Vector encode_metadata(const Metadata& record, const MetadataSchema& schema,
                       const std::optional<std::string>& label = std::nullopt);

/// Inverse of encode_metadata on categorical blocks: recovers each level
/// (continuous attributes come back as their bin names; missing values are
/// omitted).
Metadata decode_metadata(const Vector& encoded, const MetadataSchema& schema);

/// Row-stochastic matrix s_ij = softmax_j(<y_i, y_j> / tau_label).
Matrix build_soft_targets(const std::vector<Vector>& vectors, double tau_label);

}  // namespace prima
