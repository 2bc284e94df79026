#include "prima/soft_targets.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "prima/errors.hpp"

namespace prima {

std::string AttributeSpec::level_of(const std::string& raw) const {
  if (continuous()) {
    double value = 0.0;
    try {
      std::size_t used = 0;
      value = std::stod(raw, &used);
      if (used != raw.size()) throw std::invalid_argument(raw);
    } catch (const std::exception&) {
      // Already-binned values pass through.
      if (std::find(levels.begin(), levels.end(), raw) != levels.end()) return raw;
      throw SchemaError("attribute '" + name + "' expects a number, got '" + raw + "'");
    }
    const auto bin = std::upper_bound(edges.begin(), edges.end(), value) - edges.begin();
    return levels.at(static_cast<std::size_t>(bin));
  }
  if (std::find(levels.begin(), levels.end(), raw) == levels.end()) {
    throw SchemaError("unknown level '" + raw + "' for attribute '" + name + "'");
  }
  return raw;
}

MetadataSchema::MetadataSchema(std::vector<AttributeSpec> attributes, double upweight_factor)
    : attributes_(std::move(attributes)), upweight_factor_(upweight_factor) {
  for (auto& a : attributes_) {
    if (a.continuous() && a.levels.empty()) {
      for (std::size_t b = 0; b <= a.edges.size(); ++b) a.levels.push_back("bin" + std::to_string(b));
    }
  }
  validate();
}

void MetadataSchema::include_label(std::vector<std::string> classes) {
  label_levels_ = std::move(classes);
  validate();
}

std::size_t MetadataSchema::width() const {
  std::size_t w = label_levels_.size();
  for (const auto& a : attributes_) w += a.width();
  return w;
}

bool MetadataSchema::has_attribute(const std::string& name) const {
  return std::any_of(attributes_.begin(), attributes_.end(),
                     [&](const AttributeSpec& a) { return a.name == name; });
}

const AttributeSpec& MetadataSchema::attribute(const std::string& name) const {
  for (const auto& a : attributes_) {
    if (a.name == name) return a;
  }
  throw SchemaError("unknown attribute '" + name + "'");
}

std::vector<std::string> MetadataSchema::disease_related() const {
  std::vector<std::string> out;
  for (const auto& a : attributes_) {
    if (a.disease_related) out.push_back(a.name);
  }
  return out;
}

void MetadataSchema::validate() const {
  if (!(upweight_factor_ > 0.0)) throw SchemaError("upweight factor must be positive");
  std::set<std::string> names;
  for (const auto& a : attributes_) {
    if (a.name.empty()) throw SchemaError("attribute with an empty name");
    if (!names.insert(a.name).second) throw SchemaError("duplicate attribute '" + a.name + "'");
    if (a.levels.size() < 2) throw SchemaError("attribute '" + a.name + "' needs at least 2 levels");
    std::set<std::string> levels(a.levels.begin(), a.levels.end());
    if (levels.size() != a.levels.size()) throw SchemaError("attribute '" + a.name + "' repeats a level");
    if (a.nullable && levels.count(kMissingLevel)) {
      throw SchemaError("attribute '" + a.name + "' declares the reserved level 'missing'");
    }
    if (a.continuous()) {
      if (!std::is_sorted(a.edges.begin(), a.edges.end())) {
        throw SchemaError("bin edges of '" + a.name + "' must ascend");
      }
      if (a.levels.size() != a.edges.size() + 1) {
        throw SchemaError("attribute '" + a.name + "' needs one level per bin");
      }
    }
  }
  if (!label_levels_.empty() && label_levels_.size() < 2) {
    throw SchemaError("label block needs at least 2 classes");
  }
}

nlohmann::json MetadataSchema::to_json() const {
  nlohmann::json attrs = nlohmann::json::array();
  for (const auto& a : attributes_) {
    nlohmann::json j{{"name", a.name},
                     {"levels", a.levels},
                     {"disease_related", a.disease_related},
                     {"visually_relevant", a.visually_relevant},
                     {"nullable", a.nullable}};
    if (a.continuous()) j["edges"] = a.edges;
    attrs.push_back(std::move(j));
  }
  nlohmann::json out{{"attributes", attrs}, {"upweight_factor", upweight_factor_}};
  if (!label_levels_.empty()) out["label_levels"] = label_levels_;
  return out;
}

MetadataSchema MetadataSchema::from_json(const nlohmann::json& j) {
  try {
    std::vector<AttributeSpec> attrs;
    for (const auto& a : j.at("attributes")) {
      AttributeSpec spec;
      spec.name = a.at("name").get<std::string>();
      spec.levels = a.value("levels", std::vector<std::string>{});
      spec.edges = a.value("edges", std::vector<double>{});
      spec.disease_related = a.value("disease_related", false);
      spec.visually_relevant = a.value("visually_relevant", true);
      spec.nullable = a.value("nullable", false);
      attrs.push_back(std::move(spec));
    }
    MetadataSchema schema(std::move(attrs), j.value("upweight_factor", 3.0));
    if (j.contains("label_levels")) {
      schema.include_label(j.at("label_levels").get<std::vector<std::string>>());
    }
    return schema;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("malformed metadata schema: ") + e.what());
  }
}

Vector encode_metadata(const Metadata& record, const MetadataSchema& schema,
                       const std::optional<std::string>& label) {
  for (const auto& [key, value] : record) {
    if (!schema.has_attribute(key)) throw SchemaError("record has unknown attribute '" + key + "'");
  }
  Vector y = Vector::Zero(static_cast<Eigen::Index>(schema.width()));
  Eigen::Index offset = 0;
  for (const auto& a : schema.attributes()) {
    const double weight = a.disease_related ? schema.upweight_factor() : 1.0;
    auto it = record.find(a.name);
    if (it == record.end()) {
      if (!a.nullable) throw SchemaError("record is missing non-nullable attribute '" + a.name + "'");
      y[offset + static_cast<Eigen::Index>(a.levels.size())] = weight;
    } else {
      const std::string level = a.level_of(it->second);
      const auto pos = std::find(a.levels.begin(), a.levels.end(), level) - a.levels.begin();
      y[offset + pos] = weight;
    }
    offset += static_cast<Eigen::Index>(a.width());
  }
  if (schema.includes_label()) {
    if (!label) throw SchemaError("schema includes the label block but no label was given");
    const auto& levels = schema.label_levels();
    const auto pos = std::find(levels.begin(), levels.end(), *label) - levels.begin();
    if (pos == static_cast<std::ptrdiff_t>(levels.size())) {
      throw SchemaError("unknown class label '" + *label + "'");
    }
    y[offset + pos] = schema.upweight_factor();
  }
  return y;
}

Metadata decode_metadata(const Vector& encoded, const MetadataSchema& schema) {
  if (encoded.size() != static_cast<Eigen::Index>(schema.width())) {
    throw ShapeError("encoded metadata has the wrong width");
  }
  Metadata out;
  Eigen::Index offset = 0;
  for (const auto& a : schema.attributes()) {
    const auto width = static_cast<Eigen::Index>(a.width());
    Eigen::Index hot = -1;
    for (Eigen::Index t = 0; t < width; ++t) {
      if (encoded[offset + t] != 0.0) {
        if (hot >= 0) throw SchemaError("block '" + a.name + "' has several nonzero entries");
        hot = t;
      }
    }
    if (hot < 0) throw SchemaError("block '" + a.name + "' has no nonzero entry");
    if (hot < static_cast<Eigen::Index>(a.levels.size())) {
      out[a.name] = a.levels[static_cast<std::size_t>(hot)];
    }
    offset += width;
  }
  return out;
}

Matrix build_soft_targets(const std::vector<Vector>& vectors, double tau_label) {
  if (!(tau_label > 0.0)) throw DomainError("tau_label must be positive");
  if (vectors.empty()) throw ShapeError("soft targets need at least one metadata vector");
  const auto n = static_cast<Eigen::Index>(vectors.size());
  const Eigen::Index width = vectors.front().size();
  Matrix y(n, width);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (vectors[static_cast<std::size_t>(i)].size() != width) {
      throw ShapeError("metadata vectors differ in length");
    }
    y.row(i) = vectors[static_cast<std::size_t>(i)].transpose();
  }
  Matrix logits = (y * y.transpose()) / tau_label;
  return log_softmax(logits, Axis::Cols).array().exp();
}

}  // namespace prima
