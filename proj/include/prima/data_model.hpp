#pragma once

// Patient records and manifests, image I/O and augmentation, two-view
// sampling, grouped cross-validation folds, metadata-to-text rendering and
// the synthetic cohort generator.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "prima/image.hpp"
#include "prima/numerics.hpp"
#include "prima/soft_targets.hpp"

namespace prima {

struct Scan {
  std::string modality;
  /// Relative to the manifest directory; empty for inline scans.
  std::string path;
  Image image;
};

struct PatientRecord {
  std::string patient_id;
  std::string group_key;
  std::vector<Scan> scans;
  Metadata metadata;
  std::string label;
};

struct DatasetManifest {
  MetadataSchema schema;
  std::vector<std::string> classes;
  /// Record field that populated group_key ("group_key", "lesion_id", ...).
  std::string group_field = "group_key";
  std::vector<PatientRecord> records;

  int class_index(const std::string& label) const;
  std::vector<int> labels() const;
  void validate() const;
};

inline constexpr int kManifestVersion = 1;

/// Reads a line-delimited manifest: a header line with manifest_version,
/// schema, classes and group_field, then one record per line. Records are
/// returned sorted by patient_id.
DatasetManifest load_manifest(const std::filesystem::path& path);

/// Writes the manifest and every scan image. Scans with a path are written as
/// binary PPM files under the manifest directory; scans without one are
/// stored inline.
void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

/// Binary PPM (P6, maxval 255) for 3-channel images, PGM (P5) for 1-channel.
Image read_pnm(const std::filesystem::path& path);
void write_pnm(const Image& image, const std::filesystem::path& path);

struct AugmentConfig {
  bool enabled = true;
  double flip_prob = 0.5;
  double crop_scale_min = 0.8;  // crop side as a fraction of the image side
  double brightness = 0.1;      // additive jitter drawn from [-b, b]

  nlohmann::json to_json() const;
  static AugmentConfig from_json(const nlohmann::json& j);
};

Image horizontal_flip(const Image& image);
/// Crops the square [y0, y0+size) x [x0, x0+size) and resizes it bilinearly
/// back to the original shape.
Image crop_resize(const Image& image, double y0, double x0, double size);
Image augment(const Image& image, Rng& rng, const AugmentConfig& cfg);

/// Two views of one patient: two distinct scans chosen uniformly without
/// replacement when available, otherwise the single scan duplicated. Each
/// view receives independent augmentation draws.
std::pair<Image, Image> sample_two_views(const PatientRecord& record, Rng& rng,
                                         const AugmentConfig& cfg, bool same_modality_only = false);

/// Indices of the two scans sample_two_views would pick (without images).
std::pair<std::size_t, std::size_t> choose_view_scans(const PatientRecord& record, Rng& rng,
                                                      bool same_modality_only = false);

struct FoldAssignment {
  int n_folds = 5;
  std::uint64_t seed = 0;
  std::map<std::string, int> fold_of_group;

  int fold_of(const PatientRecord& record) const;
  std::vector<std::size_t> train_indices(const DatasetManifest& m, int fold) const;
  std::vector<std::size_t> test_indices(const DatasetManifest& m, int fold) const;
};

/// Group-level stratified assignment. Each group is labelled with its most
/// frequent class; groups of each class are shuffled and dealt round-robin
/// with one counter shared across classes.
FoldAssignment make_folds(const DatasetManifest& manifest, int n_folds, std::uint64_t seed);

/// Word-level vocabulary with four reserved ids.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kCls = 1;
  static constexpr int kMask = 2;
  static constexpr int kUnk = 3;
  static constexpr int kReserved = 4;
  static constexpr int kMaxSize = 512;

  Vocabulary() = default;
  /// Reserved tokens followed by the sorted unique words. Throws
  /// VocabularyError past kMaxSize entries.
  explicit Vocabulary(const std::vector<std::string>& words);

  int size() const { return static_cast<int>(words_.size()); }
  bool contains(const std::string& word) const { return ids_.count(word) > 0; }
  /// Unknown words map to kUnk.
  int id(const std::string& word) const;
  /// Throws VocabularyError for unknown words.
  int strict_id(const std::string& word) const;
  const std::string& word(int id) const;
  std::vector<int> encode(const std::string& text) const;

  nlohmann::json to_json() const { return words_; }
  static Vocabulary from_json(const nlohmann::json& j);

 private:
  std::vector<std::string> words_;
  std::map<std::string, int> ids_;
};

/// Lower-cases and splits on anything that is not a letter, digit or '_'.
std::vector<std::string> tokenize(const std::string& text);

/// "name: level" fragments of the visually relevant attributes in schema
/// order, joined by "; ". Missing values render as "missing"; continuous
/// values render as their bin name.
std::string render_metadata(const Metadata& metadata, const MetadataSchema& schema);

/// Every word the schema and class list can produce when rendered.
std::vector<std::string> schema_words(const MetadataSchema& schema,
                                      const std::vector<std::string>& classes);

struct SyntheticSpec {
  int patients = 600;
  int classes = 3;
  double correlation = 0.8;
  double image_signal = 0.5;
  std::uint64_t seed = 7;
  /// Relative class frequencies; empty means balanced.
  std::vector<double> class_weights;
  int image_size = 16;
  int max_scans = 3;
  /// Probability that a group (lesion) holds two records instead of one.
  double shared_group_prob = 0.3;

  void validate() const;
  nlohmann::json to_json() const;
};

/// Class names used by the generator (six dermatology-style names, then
/// "class6", "class7", ...).
std::vector<std::string> synthetic_class_names(int classes);
MetadataSchema synthetic_schema(int classes);
/// The attribute whose level equals the label with probability
/// `correlation` (and is uniform otherwise).
inline constexpr const char* kDesignatedAttribute = "pattern";

/// Class-specific profile value in [0, 1] that drives how often a class shows
/// a given attribute level (salt 1: bleed, 2: itch, 3: age).
double synthetic_profile(int class_index, int salt);
const std::vector<std::string>& synthetic_regions();
std::vector<std::string> synthetic_patterns(int classes);

DatasetManifest generate_synthetic_cohort(const SyntheticSpec& spec);

}  // namespace prima
