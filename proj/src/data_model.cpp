#include "prima/data_model.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "prima/errors.hpp"
#include "prima/log.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace prima {

// ---------------------------------------------------------------- manifest

int DatasetManifest::class_index(const std::string& label) const {
  for (std::size_t c = 0; c < classes.size(); ++c) {
    if (classes[c] == label) return static_cast<int>(c);
  }
  throw SchemaError("unknown class '" + label + "'");
}

std::vector<int> DatasetManifest::labels() const {
  std::vector<int> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(class_index(r.label));
  return out;
}

void DatasetManifest::validate() const {
  if (classes.size() < 2) throw SchemaError("manifest needs at least two classes");
  std::set<std::string> seen_ids;
  for (const auto& r : records) {
    if (r.patient_id.empty()) throw SchemaError("record with empty patient_id");
    if (!seen_ids.insert(r.patient_id).second) {
      throw SchemaError("duplicate patient_id " + r.patient_id);
    }
    if (r.group_key.empty()) throw SchemaError("record " + r.patient_id + " has no group key");
    if (r.scans.empty()) throw SchemaError("record " + r.patient_id + " has zero scans");
    class_index(r.label);
    std::set<std::string> paths;
    for (const auto& s : r.scans) {
      if (!s.path.empty() && !paths.insert(s.path).second) {
        throw SchemaError("record " + r.patient_id + " lists scan " + s.path + " twice");
      }
    }
    for (const auto& [name, value] : r.metadata) {
      if (!schema.has_attribute(name)) {
        throw SchemaError("record " + r.patient_id + " has attribute '" + name +
                          "' not in the schema");
      }
      schema.attribute(name).level_of(value);
    }
  }
}

namespace {

std::string json_scalar(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number() || v.is_boolean()) return v.dump();
  throw ParseError("expected a string or number, got " + v.dump());
}

Image image_from_json(const json& j) {
  const auto shape = j.at("shape").get<std::vector<int>>();
  if (shape.size() != 3) throw ParseError("inline image shape must have three entries");
  Image img(shape[0], shape[1], shape[2]);
  const auto data = j.at("data").get<std::vector<double>>();
  if (data.size() != img.data.size()) throw ParseError("inline image data has the wrong length");
  img.data = data;
  return img;
}

json image_to_json(const Image& img) {
  return {{"shape", {img.channels, img.height, img.width}}, {"data", img.data}};
}

}  // namespace

DatasetManifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  const fs::path base = path.parent_path();
  DatasetManifest m;
  bool have_header = false;
  std::string line;
  int line_no = 0;
  std::vector<std::string> missing;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    const std::string where = path.string() + ":" + std::to_string(line_no) + ": ";
    try {
      if (!have_header) {
        if (!j.contains("manifest_version")) {
          throw ParseError(where + "first line must be the manifest header");
        }
        if (j["manifest_version"].get<int>() != kManifestVersion) {
          throw ParseError(where + "unsupported manifest_version");
        }
        m.schema = MetadataSchema::from_json(j.at("schema"));
        m.classes = j.at("classes").get<std::vector<std::string>>();
        m.group_field = j.value("group_field", std::string("group_key"));
        have_header = true;
        continue;
      }
      PatientRecord r;
      r.patient_id = json_scalar(j.at("patient_id"));
      if (!j.contains(m.group_field)) {
        throw SchemaError(where + "record lacks group field '" + m.group_field + "'");
      }
      r.group_key = json_scalar(j[m.group_field]);
      r.label = j.at("label").get<std::string>();
      if (j.contains("metadata")) {
        for (const auto& [k, v] : j["metadata"].items()) {
          if (!v.is_null()) r.metadata[k] = json_scalar(v);
        }
      }
      for (const auto& s : j.at("scans")) {
        Scan scan;
        scan.modality = s.value("modality", std::string());
        if (s.contains("inline")) {
          scan.image = image_from_json(s["inline"]);
        } else {
          scan.path = s.at("path").get<std::string>();
          const fs::path file = base / scan.path;
          if (!fs::exists(file)) {
            missing.push_back(r.patient_id + " (" + file.string() + ")");
            continue;
          }
          scan.image = read_pnm(file);
        }
        r.scans.push_back(std::move(scan));
      }
      if (r.scans.empty() && missing.empty()) {
        throw SchemaError(where + "record " + r.patient_id + " has zero scans");
      }
      m.records.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw ParseError(where + e.what());
    }
  }
  if (!have_header) throw ParseError(path.string() + ": manifest is empty");
  if (!missing.empty()) {
    std::string msg = "unreadable scan references:";
    for (const auto& s : missing) msg += " " + s;
    throw IoError(msg);
  }
  std::sort(m.records.begin(), m.records.end(),
            [](const PatientRecord& a, const PatientRecord& b) { return a.patient_id < b.patient_id; });
  m.validate();
  return m;
}

void write_manifest(const DatasetManifest& m, const fs::path& path) {
  m.validate();
  const fs::path base = path.parent_path();
  if (!base.empty()) fs::create_directories(base);
  std::ostringstream out;
  json header = {{"manifest_version", kManifestVersion},
                 {"schema", m.schema.to_json()},
                 {"classes", m.classes},
                 {"group_field", m.group_field}};
  out << header.dump() << "\n";
  for (const auto& r : m.records) {
    json j;
    j["patient_id"] = r.patient_id;
    j[m.group_field] = r.group_key;
    j["label"] = r.label;
    j["metadata"] = json::object();
    for (const auto& [k, v] : r.metadata) j["metadata"][k] = v;
    j["scans"] = json::array();
    for (const auto& s : r.scans) {
      json sj = {{"modality", s.modality}};
      if (s.path.empty()) {
        sj["inline"] = image_to_json(s.image);
      } else {
        sj["path"] = s.path;
        const fs::path file = base / s.path;
        fs::create_directories(file.parent_path());
        write_pnm(s.image, file);
      }
      j["scans"].push_back(sj);
    }
    out << j.dump() << "\n";
  }
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write manifest " + path.string());
  f << out.str();
}

// ---------------------------------------------------------------- images

Image read_pnm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image " + path.string());
  auto next_token = [&]() {
    std::string tok;
    char ch;
    while (in.get(ch)) {
      if (ch == '#') {
        std::string skip;
        std::getline(in, skip);
      } else if (std::isspace(static_cast<unsigned char>(ch))) {
        if (!tok.empty()) break;
      } else {
        tok.push_back(ch);
      }
    }
    return tok;
  };
  const std::string magic = next_token();
  if (magic != "P6" && magic != "P5") throw ParseError(path.string() + ": not a binary PPM/PGM");
  const int w = std::stoi(next_token()), h = std::stoi(next_token());
  const int maxval = std::stoi(next_token());
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255) {
    throw ParseError(path.string() + ": unsupported PNM header");
  }
  const int c = magic == "P6" ? 3 : 1;
  std::vector<unsigned char> bytes(static_cast<std::size_t>(w) * h * c);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) {
    throw ParseError(path.string() + ": truncated pixel data");
  }
  Image img(c, h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int ch = 0; ch < c; ++ch) {
        img.at(ch, y, x) = bytes[(static_cast<std::size_t>(y) * w + x) * c + ch] / double(maxval);
      }
    }
  }
  return img;
}

void write_pnm(const Image& img, const fs::path& path) {
  if (img.channels != 3 && img.channels != 1) throw ShapeError("PNM needs 1 or 3 channels");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write image " + path.string());
  out << (img.channels == 3 ? "P6" : "P5") << "\n" << img.width << " " << img.height << "\n255\n";
  std::vector<unsigned char> bytes;
  bytes.reserve(img.data.size());
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      for (int ch = 0; ch < img.channels; ++ch) {
        const double v = std::clamp(img.at(ch, y, x), 0.0, 1.0);
        bytes.push_back(static_cast<unsigned char>(std::lround(v * 255.0)));
      }
    }
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

// ---------------------------------------------------------------- augmentation

json AugmentConfig::to_json() const {
  return {{"enabled", enabled},
          {"flip_prob", flip_prob},
          {"crop_scale_min", crop_scale_min},
          {"brightness", brightness}};
}

AugmentConfig AugmentConfig::from_json(const json& j) {
  AugmentConfig c;
  c.enabled = j.value("enabled", c.enabled);
  c.flip_prob = j.value("flip_prob", c.flip_prob);
  c.crop_scale_min = j.value("crop_scale_min", c.crop_scale_min);
  c.brightness = j.value("brightness", c.brightness);
  return c;
}

Image horizontal_flip(const Image& img) {
  Image out = img;
  for (int c = 0; c < img.channels; ++c) {
    for (int y = 0; y < img.height; ++y) {
      for (int x = 0; x < img.width; ++x) out.at(c, y, x) = img.at(c, y, img.width - 1 - x);
    }
  }
  return out;
}

Image crop_resize(const Image& img, double y0, double x0, double size) {
  Image out(img.channels, img.height, img.width);
  auto sample = [&](int c, double sy, double sx) {
    sy = std::clamp(sy, 0.0, img.height - 1.0);
    sx = std::clamp(sx, 0.0, img.width - 1.0);
    const int y1 = static_cast<int>(std::floor(sy)), x1 = static_cast<int>(std::floor(sx));
    const int y2 = std::min(y1 + 1, img.height - 1), x2 = std::min(x1 + 1, img.width - 1);
    const double fy = sy - y1, fx = sx - x1;
    return (1 - fy) * ((1 - fx) * img.at(c, y1, x1) + fx * img.at(c, y1, x2)) +
           fy * ((1 - fx) * img.at(c, y2, x1) + fx * img.at(c, y2, x2));
  };
  const double sy = size / img.height, sx = size / img.width;
  for (int c = 0; c < img.channels; ++c) {
    for (int y = 0; y < img.height; ++y) {
      for (int x = 0; x < img.width; ++x) {
        out.at(c, y, x) = sample(c, y0 + (y + 0.5) * sy - 0.5, x0 + (x + 0.5) * sx - 0.5);
      }
    }
  }
  return out;
}

Image augment(const Image& img, Rng& rng, const AugmentConfig& cfg) {
  if (!cfg.enabled) return img;
  const bool flip = rng.bernoulli(cfg.flip_prob);
  const double frac = rng.uniform(std::min(cfg.crop_scale_min, 1.0), 1.0);
  const double side = frac * std::min(img.height, img.width);
  const double y0 = rng.uniform() * (img.height - side);
  const double x0 = rng.uniform() * (img.width - side);
  const double shift = rng.uniform(-cfg.brightness, cfg.brightness);
  Image out = crop_resize(flip ? horizontal_flip(img) : img, y0, x0, side);
  for (auto& v : out.data) v = std::clamp(v + shift, 0.0, 1.0);
  return out;
}

std::pair<std::size_t, std::size_t> choose_view_scans(const PatientRecord& record, Rng& rng,
                                                      bool same_modality_only) {
  const std::size_t n = record.scans.size();
  if (n == 0) throw PreconditionError("record " + record.patient_id + " has no scans");
  if (n == 1) return {0, 0};
  const std::size_t i = rng.index(n);
  if (same_modality_only) {
    std::vector<std::size_t> partners;
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i && record.scans[j].modality == record.scans[i].modality) partners.push_back(j);
    }
    if (partners.empty()) return {i, i};
    return {i, partners[rng.index(partners.size())]};
  }
  std::size_t j = rng.index(n - 1);
  if (j >= i) ++j;
  return {i, j};
}

std::pair<Image, Image> sample_two_views(const PatientRecord& record, Rng& rng,
                                         const AugmentConfig& cfg, bool same_modality_only) {
  const auto [i, j] = choose_view_scans(record, rng, same_modality_only);
  Rng r1(rng.next()), r2(rng.next());
  return {augment(record.scans[i].image, r1, cfg), augment(record.scans[j].image, r2, cfg)};
}

// ---------------------------------------------------------------- folds

int FoldAssignment::fold_of(const PatientRecord& record) const {
  auto it = fold_of_group.find(record.group_key);
  if (it == fold_of_group.end()) {
    throw PreconditionError("group " + record.group_key + " has no fold assignment");
  }
  return it->second;
}

std::vector<std::size_t> FoldAssignment::train_indices(const DatasetManifest& m, int fold) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    if (fold_of(m.records[i]) != fold) out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> FoldAssignment::test_indices(const DatasetManifest& m, int fold) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    if (fold_of(m.records[i]) == fold) out.push_back(i);
  }
  return out;
}

FoldAssignment make_folds(const DatasetManifest& manifest, int n_folds, std::uint64_t seed) {
  if (n_folds < 2) throw ConfigError("n_folds must be at least 2");
  std::map<std::string, std::vector<int>> group_labels;
  for (const auto& r : manifest.records) {
    group_labels[r.group_key].push_back(manifest.class_index(r.label));
  }
  if (group_labels.size() < static_cast<std::size_t>(n_folds)) {
    throw ConfigError("need at least " + std::to_string(n_folds) + " groups for " +
                      std::to_string(n_folds) + " folds, found " +
                      std::to_string(group_labels.size()));
  }
  std::vector<std::vector<std::string>> by_class(manifest.classes.size());
  for (const auto& [group, labels] : group_labels) {
    std::vector<int> counts(manifest.classes.size(), 0);
    for (int l : labels) ++counts[l];
    const auto majority = std::max_element(counts.begin(), counts.end()) - counts.begin();
    by_class[majority].push_back(group);
  }
  FoldAssignment out;
  out.n_folds = n_folds;
  out.seed = seed;
  Rng rng(seed);
  std::size_t counter = 0;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& groups = by_class[c];
    if (!groups.empty() && groups.size() < static_cast<std::size_t>(n_folds)) {
      log::warn("class '" + manifest.classes[c] + "' has " + std::to_string(groups.size()) +
                " groups for " + std::to_string(n_folds) + " folds; stratification is best-effort");
    }
    rng.shuffle(groups);
    for (const auto& g : groups) out.fold_of_group[g] = static_cast<int>(counter++ % n_folds);
  }
  return out;
}

// ---------------------------------------------------------------- text

Vocabulary::Vocabulary(const std::vector<std::string>& words) {
  words_ = {"[PAD]", "[CLS]", "[MASK]", "[UNK]"};
  std::set<std::string> unique(words.begin(), words.end());
  for (const auto& w : words_) unique.erase(w);
  unique.erase("");
  words_.insert(words_.end(), unique.begin(), unique.end());
  if (words_.size() > static_cast<std::size_t>(kMaxSize)) {
    throw VocabularyError("vocabulary of " + std::to_string(words_.size()) +
                          " entries exceeds the limit of " + std::to_string(kMaxSize));
  }
  for (std::size_t i = 0; i < words_.size(); ++i) ids_[words_[i]] = static_cast<int>(i);
}

int Vocabulary::id(const std::string& word) const {
  auto it = ids_.find(word);
  return it == ids_.end() ? kUnk : it->second;
}

int Vocabulary::strict_id(const std::string& word) const {
  auto it = ids_.find(word);
  if (it == ids_.end()) throw VocabularyError("word '" + word + "' is not in the vocabulary");
  return it->second;
}

const std::string& Vocabulary::word(int id) const {
  if (id < 0 || id >= size()) throw VocabularyError("token id " + std::to_string(id) + " out of range");
  return words_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::encode(const std::string& text) const {
  std::vector<int> out;
  for (const auto& w : tokenize(text)) out.push_back(id(w));
  return out;
}

Vocabulary Vocabulary::from_json(const json& j) {
  const auto words = j.get<std::vector<std::string>>();
  if (words.size() < static_cast<std::size_t>(kReserved) || words[0] != "[PAD]" ||
      words[1] != "[CLS]" || words[2] != "[MASK]" || words[3] != "[UNK]") {
    throw ParseError("vocabulary must start with the reserved tokens");
  }
  Vocabulary v;
  v.words_ = words;
  for (std::size_t i = 0; i < words.size(); ++i) v.ids_[words[i]] = static_cast<int>(i);
  return v;
}

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto u = static_cast<unsigned char>(ch);
    if (std::isalnum(u) || ch == '_') {
      cur.push_back(static_cast<char>(std::tolower(u)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::string render_metadata(const Metadata& metadata, const MetadataSchema& schema) {
  std::string out;
  for (const auto& a : schema.attributes()) {
    if (!a.visually_relevant) continue;
    auto it = metadata.find(a.name);
    const std::string level = it == metadata.end() ? kMissingLevel : a.level_of(it->second);
    if (!out.empty()) out += "; ";
    out += a.name + ": " + level;
  }
  return out;
}

std::vector<std::string> schema_words(const MetadataSchema& schema,
                                      const std::vector<std::string>& classes) {
  std::vector<std::string> out = {kMissingLevel};
  auto add = [&](const std::string& text) {
    for (auto& w : tokenize(text)) out.push_back(std::move(w));
  };
  for (const auto& a : schema.attributes()) {
    add(a.name);
    for (const auto& l : a.levels) add(l);
  }
  for (const auto& c : classes) add(c);
  return out;
}

// ---------------------------------------------------------------- synthetic

void SyntheticSpec::validate() const {
  if (patients <= 0) throw ConfigError("synthetic cohort needs at least one patient");
  if (classes < 2) throw ConfigError("synthetic cohort needs at least two classes");
  if (correlation < 0.0 || correlation > 1.0) throw ConfigError("correlation must be in [0, 1]");
  if (image_signal < 0.0) throw ConfigError("image_signal must be >= 0");
  if (image_size < 4) throw ConfigError("image_size must be >= 4");
  if (max_scans < 1) throw ConfigError("max_scans must be >= 1");
  if (shared_group_prob < 0.0 || shared_group_prob > 1.0) {
    throw ConfigError("shared_group_prob must be in [0, 1]");
  }
  if (!class_weights.empty()) {
    if (class_weights.size() != static_cast<std::size_t>(classes)) {
      throw ConfigError("class_weights needs one entry per class");
    }
    for (double w : class_weights) {
      if (w <= 0.0) throw ConfigError("class_weights must be positive");
    }
  }
}

json SyntheticSpec::to_json() const {
  return {{"patients", patients},         {"classes", classes},
          {"correlation", correlation},   {"image_signal", image_signal},
          {"seed", seed},                 {"class_weights", class_weights},
          {"image_size", image_size},     {"max_scans", max_scans},
          {"shared_group_prob", shared_group_prob}};
}

std::vector<std::string> synthetic_class_names(int classes) {
  static const char* names[] = {"bcc", "scc", "ack", "sek", "mel", "nev"};
  std::vector<std::string> out;
  for (int c = 0; c < classes; ++c) out.push_back(c < 6 ? names[c] : "class" + std::to_string(c));
  return out;
}

namespace {

std::vector<std::string> pattern_levels(int classes) {
  static const char* names[] = {"nodular", "scaly", "crusted", "waxy", "pigmented", "smooth"};
  std::vector<std::string> out;
  for (int c = 0; c < std::max(classes, 2); ++c) {
    out.push_back(c < 6 ? names[c] : "pattern" + std::to_string(c));
  }
  return out;
}

const std::vector<std::string> kRegions = {"face", "scalp", "arm", "leg", "back", "chest"};
const std::vector<std::string> kModalities = {"white", "blue", "sclerotic"};

double profile(int c, int salt) { return ((c * 37 + salt * 11) % 10) / 9.0; }

Image synthetic_image(int label, int classes, double signal, int size, Rng& rng) {
  Image img(3, size, size);
  const double cy = rng.uniform(0.25, 0.75) * size, cx = rng.uniform(0.25, 0.75) * size;
  const double radius = size * (0.12 + 0.08 * (label % 3));
  const double ny = rng.uniform(0.0, size), nx = rng.uniform(0.0, size);
  const double nradius = rng.uniform(0.1, 0.3) * size;
  double nuisance[3];
  for (double& v : nuisance) v = rng.uniform(-0.25, 0.25);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
      const double n2 = (y - ny) * (y - ny) + (x - nx) * (x - nx);
      const double blob = std::exp(-d2 / (2 * radius * radius));
      const double nblob = std::exp(-n2 / (2 * nradius * nradius));
      for (int c = 0; c < 3; ++c) {
        const double color =
            std::cos(2 * std::numbers::pi * (static_cast<double>(label) / classes + c / 3.0));
        double v = 0.5 + rng.normal(0.0, 0.08) + nuisance[c] * nblob + 0.12 * signal * color * blob;
        v = std::clamp(v, 0.0, 1.0);
        img.at(c, y, x) = std::lround(v * 255.0) / 255.0;
      }
    }
  }
  return img;
}

}  // namespace

double synthetic_profile(int class_index, int salt) { return profile(class_index, salt); }
const std::vector<std::string>& synthetic_regions() { return kRegions; }
std::vector<std::string> synthetic_patterns(int classes) { return pattern_levels(classes); }

MetadataSchema synthetic_schema(int classes) {
  std::vector<AttributeSpec> attrs = {
      {kDesignatedAttribute, pattern_levels(classes), {}, true, true, false},
      {"bleed", {"yes", "no"}, {}, true, true, false},
      {"itch", {"yes", "no"}, {}, true, true, false},
      {"region", kRegions, {}, false, true, false},
      {"age", {}, {40.0, 60.0}, false, true, false},
      {"smoker", {"yes", "no"}, {}, false, false, true},
  };
  return MetadataSchema(std::move(attrs), 3.0);
}

DatasetManifest generate_synthetic_cohort(const SyntheticSpec& spec) {
  spec.validate();
  DatasetManifest m;
  m.classes = synthetic_class_names(spec.classes);
  m.schema = synthetic_schema(spec.classes);
  m.group_field = "group_key";
  const auto patterns = pattern_levels(spec.classes);

  std::vector<double> cumulative;
  double total = 0.0;
  for (int c = 0; c < spec.classes; ++c) {
    total += spec.class_weights.empty() ? 1.0 : spec.class_weights[static_cast<std::size_t>(c)];
    cumulative.push_back(total);
  }

  Rng rng(spec.seed);
  const double rho = spec.correlation;
  int made = 0, group = 0;
  char id[32];
  while (made < spec.patients) {
    const double u = rng.uniform() * total;
    const int label = static_cast<int>(std::upper_bound(cumulative.begin(), cumulative.end(), u) -
                                       cumulative.begin());
    const int members = (spec.patients - made >= 2 && rng.bernoulli(spec.shared_group_prob)) ? 2 : 1;
    std::snprintf(id, sizeof id, "g%05d", group++);
    const std::string group_key = id;
    for (int k = 0; k < members; ++k) {
      PatientRecord r;
      std::snprintf(id, sizeof id, "p%05d", made++);
      r.patient_id = id;
      r.group_key = group_key;
      r.label = m.classes[static_cast<std::size_t>(std::min(label, spec.classes - 1))];
      const int c = m.class_index(r.label);

      r.metadata[kDesignatedAttribute] =
          rng.bernoulli(rho) ? patterns[static_cast<std::size_t>(c)]
                             : patterns[rng.index(patterns.size())];
      const double p_bleed = (1 - rho) * 0.4 + rho * (0.1 + 0.8 * profile(c, 1));
      r.metadata["bleed"] = rng.bernoulli(p_bleed) ? "yes" : "no";
      const double p_itch = (1 - rho) * 0.5 + rho * (0.1 + 0.8 * profile(c, 2));
      r.metadata["itch"] = rng.bernoulli(p_itch) ? "yes" : "no";
      r.metadata["region"] = rng.bernoulli(0.5 * rho) ? kRegions[static_cast<std::size_t>(c) % kRegions.size()]
                                                      : kRegions[rng.index(kRegions.size())];
      const double age = rng.normal(55.0 + rho * 24.0 * (profile(c, 3) - 0.5), 12.0);
      char age_text[32];
      std::snprintf(age_text, sizeof age_text, "%.1f", std::clamp(age, 18.0, 95.0));
      r.metadata["age"] = age_text;
      if (!rng.bernoulli(0.2)) r.metadata["smoker"] = rng.bernoulli(0.3) ? "yes" : "no";

      const int scans = 1 + static_cast<int>(rng.index(static_cast<std::size_t>(spec.max_scans)));
      for (int s = 0; s < scans; ++s) {
        Scan scan;
        scan.modality = kModalities[static_cast<std::size_t>(s) % kModalities.size()];
        scan.path = "images/" + r.patient_id + "_" + std::to_string(s) + ".ppm";
        scan.image = synthetic_image(c, spec.classes, spec.image_signal, spec.image_size, rng);
        r.scans.push_back(std::move(scan));
      }
      m.records.push_back(std::move(r));
    }
  }
  m.validate();
  return m;
}

}  // namespace prima
