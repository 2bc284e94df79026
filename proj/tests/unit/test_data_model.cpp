#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "prima/data_model.hpp"
#include "prima/errors.hpp"
#include "prima/log.hpp"

using namespace prima;
namespace fs = std::filesystem;

namespace {

const fs::path kFixture = fs::path(PRIMA_FIXTURE_DIR) / "manifest" / "manifest.jsonl";

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("prima_dm_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

bool same_records(const DatasetManifest& a, const DatasetManifest& b) {
  if (a.records.size() != b.records.size()) return false;
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    const auto& x = a.records[i];
    const auto& y = b.records[i];
    if (x.patient_id != y.patient_id || x.group_key != y.group_key || x.label != y.label ||
        x.metadata != y.metadata || x.scans.size() != y.scans.size()) {
      return false;
    }
    for (std::size_t s = 0; s < x.scans.size(); ++s) {
      if (x.scans[s].path != y.scans[s].path || x.scans[s].modality != y.scans[s].modality ||
          !(x.scans[s].image == y.scans[s].image)) {
        return false;
      }
    }
  }
  return a.classes == b.classes && a.group_field == b.group_field &&
         a.schema.to_json() == b.schema.to_json();
}

// Plug-in estimate of I(attribute level; label) in nats.
double mutual_information(const DatasetManifest& m, const std::string& attribute) {
  std::map<std::pair<std::string, std::string>, double> joint;
  std::map<std::string, double> pa, pl;
  const double n = static_cast<double>(m.records.size());
  const auto& spec = m.schema.attribute(attribute);
  for (const auto& r : m.records) {
    const std::string level = spec.level_of(r.metadata.at(attribute));
    joint[{level, r.label}] += 1 / n;
    pa[level] += 1 / n;
    pl[r.label] += 1 / n;
  }
  double mi = 0.0;
  for (const auto& [key, p] : joint) mi += p * std::log(p / (pa[key.first] * pl[key.second]));
  return mi;
}

// Mean colour of each 4x4 cell: 3 * 16 features for a 16x16 image.
std::vector<double> cell_features(const Image& img) {
  std::vector<double> f;
  for (int c = 0; c < 3; ++c) {
    for (int gy = 0; gy < 4; ++gy) {
      for (int gx = 0; gx < 4; ++gx) {
        double s = 0;
        for (int y = 0; y < 4; ++y) {
          for (int x = 0; x < 4; ++x) s += img.at(c, gy * 4 + y, gx * 4 + x);
        }
        f.push_back(s / 16);
      }
    }
  }
  // Global channel means carry the blob colour regardless of position.
  for (int c = 0; c < 3; ++c) {
    double s = 0;
    for (int y = 0; y < 16; ++y) {
      for (int x = 0; x < 16; ++x) s += img.at(c, y, x);
    }
    f.push_back(8.0 * s / 256);
  }
  return f;
}

// Nearest-centroid probe: train on the first 75%, report test accuracy.
double probe_accuracy(const DatasetManifest& m) {
  const std::size_t n = m.records.size(), split = n * 3 / 4;
  const auto labels = m.labels();
  std::vector<std::vector<double>> centroid(m.classes.size());
  std::vector<double> count(m.classes.size(), 0.0);
  for (std::size_t i = 0; i < split; ++i) {
    const auto f = cell_features(m.records[i].scans[0].image);
    auto& c = centroid[labels[i]];
    if (c.empty()) c.assign(f.size(), 0.0);
    for (std::size_t k = 0; k < f.size(); ++k) c[k] += f[k];
    count[labels[i]] += 1;
  }
  for (std::size_t c = 0; c < centroid.size(); ++c) {
    for (auto& v : centroid[c]) v /= count[c];
  }
  std::size_t correct = 0;
  for (std::size_t i = split; i < n; ++i) {
    const auto f = cell_features(m.records[i].scans[0].image);
    std::size_t best = 0;
    double best_d = 1e300;
    for (std::size_t c = 0; c < centroid.size(); ++c) {
      double d = 0;
      for (std::size_t k = 0; k < f.size(); ++k) d += (f[k] - centroid[c][k]) * (f[k] - centroid[c][k]);
      if (d < best_d) best_d = d, best = c;
    }
    correct += static_cast<int>(best) == labels[i];
  }
  return 100.0 * correct / static_cast<double>(n - split);
}

}  // namespace

TEST_CASE("fixture manifest loads sorted and validated") {
  const auto m = load_manifest(kFixture);
  REQUIRE(m.records.size() == 10);
  for (std::size_t i = 1; i < m.records.size(); ++i) {
    CHECK(m.records[i - 1].patient_id < m.records[i].patient_id);
  }
  CHECK(m.group_field == "lesion_id");
  CHECK(m.records[0].group_key == "L0");
  CHECK(m.records[1].scans.size() == 2);
  CHECK(m.records[0].scans[0].image.height == 16);
  CHECK(m.records[0].metadata.at("age") == "30");
  CHECK(m.records[0].metadata.count("smoker") == 0);
}

TEST_CASE("manifest round trip") {
  const auto dir = scratch("roundtrip");
  const auto m = load_manifest(kFixture);
  write_manifest(m, dir / "m.jsonl");
  const auto again = load_manifest(dir / "m.jsonl");
  CHECK(same_records(m, again));
  write_manifest(again, dir / "n.jsonl");
  CHECK(same_records(again, load_manifest(dir / "n.jsonl")));

  // Inline scans survive too.
  DatasetManifest inl = again;
  inl.records[0].scans[0].path.clear();
  write_manifest(inl, dir / "inline.jsonl");
  CHECK(same_records(inl, load_manifest(dir / "inline.jsonl")));
  fs::remove_all(dir);
}

TEST_CASE("manifest errors") {
  const auto dir = scratch("errors");
  const std::string header = std::ifstream(kFixture).rdbuf() ? [] {
    std::ifstream in(kFixture);
    std::string line;
    std::getline(in, line);
    return line;
  }() : "";
  auto write = [&](const std::string& name, const std::string& body) {
    std::ofstream(dir / name) << header << "\n" << body << "\n";
    return dir / name;
  };
  CHECK_THROWS_AS(load_manifest(write("zero.jsonl",
                                      R"({"patient_id":"a","lesion_id":"g","label":"bcc","scans":[],"metadata":{}})")),
                  SchemaError);
  CHECK_THROWS_AS(load_manifest(write("cls.jsonl",
                                      R"({"patient_id":"a","lesion_id":"g","label":"xyz","scans":[{"inline":{"shape":[1,1,1],"data":[0]}}],"metadata":{}})")),
                  SchemaError);
  try {
    load_manifest(write("missing.jsonl",
                        R"({"patient_id":"a","lesion_id":"g","label":"bcc","scans":[{"path":"nope.ppm"}],"metadata":{}})"));
    FAIL("expected IoError");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find("nope.ppm") != std::string::npos);
  }
  try {
    load_manifest(write("bad.jsonl", "{not json"));
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find(":2:") != std::string::npos);
  }
  CHECK_THROWS_AS(load_manifest(dir / "absent.jsonl"), IoError);
  fs::remove_all(dir);
}

TEST_CASE("pnm round trip") {
  const auto dir = scratch("pnm");
  Image img(3, 5, 7);
  for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = static_cast<double>(i % 256) / 255.0;
  write_pnm(img, dir / "x.ppm");
  CHECK(read_pnm(dir / "x.ppm") == img);
  Image gray(1, 3, 2, 0.2);
  write_pnm(gray, dir / "g.pgm");
  CHECK(read_pnm(dir / "g.pgm").data[0] == doctest::Approx(51.0 / 255.0));
  fs::remove_all(dir);
}

TEST_CASE("augmentation primitives") {
  Image img(1, 4, 4);
  for (int y = 0; y < 4; ++y) {
    for (int x = 0; x < 4; ++x) img.at(0, y, x) = x * 0.1 + y * 0.01;
  }
  CHECK(horizontal_flip(horizontal_flip(img)) == img);
  CHECK(horizontal_flip(img).at(0, 1, 0) == img.at(0, 1, 3));
  const Image same = crop_resize(img, 0, 0, 4);
  for (std::size_t i = 0; i < img.data.size(); ++i) CHECK(same.data[i] == doctest::Approx(img.data[i]));
  Rng a(3), b(3);
  AugmentConfig cfg;
  CHECK(augment(img, a, cfg) == augment(img, b, cfg));
  cfg.enabled = false;
  CHECK(augment(img, a, cfg) == img);
}

TEST_CASE("two-view sampling") {
  PatientRecord one;
  one.patient_id = "x";
  Image img(3, 8, 8, 0.4);
  img.at(0, 2, 3) = 0.9;
  one.scans.push_back({"white", "", img});

  AugmentConfig off;
  off.enabled = false;
  Rng rng(1);
  auto [v1, v2] = sample_two_views(one, rng, off);
  CHECK(v1 == v2);

  AugmentConfig on;
  auto [a1, a2] = sample_two_views(one, rng, on);
  CHECK_FALSE(a1 == a2);  // same scan, independent augmentation draws

  PatientRecord three = one;
  three.scans.push_back({"blue", "", Image(3, 8, 8, 0.1)});
  three.scans.push_back({"white", "", Image(3, 8, 8, 0.2)});
  const int draws = 10000;
  std::map<std::pair<std::size_t, std::size_t>, int> freq;
  for (int t = 0; t < draws; ++t) {
    auto [i, j] = choose_view_scans(three, rng);
    REQUIRE(i != j);
    freq[{std::min(i, j), std::max(i, j)}]++;
  }
  CHECK(freq.size() == 3);
  const double p = 1.0 / 3, sigma = std::sqrt(draws * p * (1 - p));
  for (const auto& [pair, n] : freq) CHECK(std::abs(n - draws * p) < 3 * sigma);

  PatientRecord two = one;
  two.scans.push_back({"blue", "", Image(3, 8, 8, 0.1)});
  int first_zero = 0;
  for (int t = 0; t < draws; ++t) first_zero += choose_view_scans(two, rng).first == 0;
  CHECK(std::abs(first_zero - draws / 2.0) < 3 * std::sqrt(draws * 0.25));

  for (int t = 0; t < 200; ++t) {
    auto [i, j] = choose_view_scans(three, rng, true);
    CHECK(three.scans[i].modality == three.scans[j].modality);
    if (i == 1) CHECK(j == 1);
  }
}

TEST_CASE("fold assignment") {
  DatasetManifest m = load_manifest(kFixture);
  // Ten single-record groups.
  for (std::size_t i = 0; i < m.records.size(); ++i) m.records[i].group_key = "G" + std::to_string(i);
  const auto folds = make_folds(m, 5, 11);
  std::map<int, int> per_fold;
  for (const auto& [g, f] : folds.fold_of_group) per_fold[f]++;
  CHECK(per_fold.size() == 5);
  for (const auto& [f, n] : per_fold) CHECK(n == 2);
  CHECK(make_folds(m, 5, 11).fold_of_group == folds.fold_of_group);
  CHECK_THROWS_AS(make_folds(m, 1, 0), ConfigError);
  CHECK_THROWS_AS(make_folds(m, 11, 0), ConfigError);
}

TEST_CASE("no group straddles train and test across random manifests") {
  log::set_level(log::Level::Quiet);
  Rng rng(42);
  for (int trial = 0; trial < 100; ++trial) {
    DatasetManifest m;
    m.classes = {"a", "b", "c"};
    const int n = 20 + static_cast<int>(rng.index(80));
    const int groups = 5 + static_cast<int>(rng.index(static_cast<std::size_t>(n - 4)));
    for (int i = 0; i < n; ++i) {
      PatientRecord r;
      r.patient_id = "p" + std::to_string(i);
      r.group_key = "g" + std::to_string(i < groups ? i : static_cast<int>(rng.index(groups)));
      r.label = m.classes[rng.index(3)];
      r.scans.push_back({"white", "", Image(1, 1, 1)});
      m.records.push_back(r);
    }
    const auto folds = make_folds(m, 5, rng.next());
    for (int f = 0; f < 5; ++f) {
      std::set<std::string> train, test;
      for (auto i : folds.train_indices(m, f)) train.insert(m.records[i].group_key);
      for (auto i : folds.test_indices(m, f)) test.insert(m.records[i].group_key);
      for (const auto& g : test) CHECK(train.count(g) == 0);
      CHECK(train.size() + test.size() == static_cast<std::size_t>(groups));
    }
  }
  log::set_level(log::Level::Warn);
}

TEST_CASE("vocabulary and rendering") {
  Vocabulary v({"zeta", "alpha", "alpha", "mid"});
  CHECK(v.size() == 7);
  CHECK(v.id("alpha") == 4);
  CHECK(v.id("unknown") == Vocabulary::kUnk);
  CHECK_THROWS_AS(v.strict_id("unknown"), VocabularyError);
  CHECK(Vocabulary::from_json(v.to_json()).id("zeta") == v.id("zeta"));
  CHECK(tokenize("Site: Arm; itch_2 yes!") == std::vector<std::string>{"site", "arm", "itch_2", "yes"});
  std::vector<std::string> many;
  for (int i = 0; i < 600; ++i) many.push_back("w" + std::to_string(i));
  CHECK_THROWS_AS(Vocabulary{many}, VocabularyError);

  const auto m = load_manifest(kFixture);
  CHECK(render_metadata(m.records[0].metadata, m.schema) == "pattern: nodular; itch: yes; age: bin0");
  Vocabulary sv(schema_words(m.schema, m.classes));
  for (const auto& r : m.records) {
    for (int id : sv.encode(render_metadata(r.metadata, m.schema))) CHECK(id != Vocabulary::kUnk);
  }
}

TEST_CASE("synthetic cohort determinism and structure") {
  SyntheticSpec spec;
  spec.patients = 60;
  const auto a = generate_synthetic_cohort(spec);
  const auto b = generate_synthetic_cohort(spec);
  CHECK(same_records(a, b));
  CHECK(a.records.size() == 60);
  std::set<std::string> groups;
  for (const auto& r : a.records) {
    groups.insert(r.group_key);
    CHECK(r.scans.size() >= 1);
    CHECK(r.scans.size() <= 3);
  }
  CHECK(groups.size() < 60);

  spec.patients = 0;
  CHECK_THROWS_AS(generate_synthetic_cohort(spec), ConfigError);
  spec.patients = 10;
  spec.correlation = 1.5;
  CHECK_THROWS_AS(generate_synthetic_cohort(spec), ConfigError);

  // Writes to disk and reloads identically (images are pre-quantized).
  const auto dir = scratch("synthetic");
  write_manifest(a, dir / "manifest.jsonl");
  CHECK(same_records(a, load_manifest(dir / "manifest.jsonl")));
  fs::remove_all(dir);
}

TEST_CASE("synthetic attribute-label correlation") {
  SyntheticSpec spec;
  spec.patients = 2000;
  spec.image_size = 4;
  spec.max_scans = 1;
  spec.correlation = 1.0;
  const auto exact = generate_synthetic_cohort(spec);
  const auto patterns = exact.schema.attribute(kDesignatedAttribute).levels;
  for (const auto& r : exact.records) {
    CHECK(r.metadata.at(kDesignatedAttribute) == patterns[exact.class_index(r.label)]);
  }

  spec.correlation = 0.0;
  const auto independent = generate_synthetic_cohort(spec);
  for (const char* attr : {"pattern", "bleed", "itch", "region", "age"}) {
    CAPTURE(attr);
    CHECK(mutual_information(independent, attr) < 0.01);
  }
  spec.correlation = 0.8;
  CHECK(mutual_information(generate_synthetic_cohort(spec), "pattern") > 0.3);
}

TEST_CASE("image signal controls probe accuracy") {
  SyntheticSpec spec;
  spec.patients = 2000;
  spec.max_scans = 1;
  spec.image_signal = 0.0;
  const double chance = probe_accuracy(generate_synthetic_cohort(spec));
  CHECK(std::abs(chance - 100.0 / 3) <= 5.0);
  spec.image_signal = 0.5;
  CHECK(probe_accuracy(generate_synthetic_cohort(spec)) > 50.0);
}
