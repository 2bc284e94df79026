#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "prima/errors.hpp"
#include "prima/knowledge_injection.hpp"
#include "prima/log.hpp"

using namespace prima;
namespace fs = std::filesystem;

namespace {

const fs::path kMixed = fs::path(PRIMA_FIXTURE_DIR) / "corpus_mixed.jsonl";

fs::path write_lines(const std::string& name, const std::string& body) {
  const fs::path p = fs::temp_directory_path() / ("prima_ki_" + name);
  std::ofstream(p) << body;
  return p;
}

}  // namespace

TEST_CASE("corpus loading filters unvetted documents") {
  const auto vetted = load_corpus(kMixed);
  CHECK(vetted.size() == 3);
  for (const auto& d : vetted) CHECK(d.review_status == ReviewStatus::Vetted);
  CHECK(load_corpus(kMixed, {true}).size() == 5);
  CHECK(vetted[1].passages() == std::vector<std::string>{"itch: itch yes is typical of scc lesions"});
}

TEST_CASE("corpus errors") {
  const auto three = write_lines(
      "three.jsonl",
      "{\"id\":\"x\",\"global_summary\":\"one\",\"review_status\":\"vetted\"}\n"
      "{\"id\":\"y\",\"global_summary\":\"two\",\"review_status\":\"vetted\"}\n"
      "{\"id\":\"z\",\"global_summary\":\"three\",\"review_status\":\"vetted\"}\n");
  CHECK(load_corpus(three).size() == 3);

  const auto empty_doc = write_lines(
      "empty_doc.jsonl",
      "{\"id\":\"x\",\"global_summary\":\"one\",\"review_status\":\"vetted\"}\n"
      "{\"id\":\"y\",\"global_summary\":\"\",\"risk_sections\":[],\"review_status\":\"vetted\"}\n");
  try {
    load_corpus(empty_doc);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find(":2:") != std::string::npos);
  }
  const auto broken = write_lines("broken.jsonl", "{\"id\": \"x\", \n");
  CHECK_THROWS_AS(load_corpus(broken), ParseError);
  const auto only_unvetted = write_lines(
      "unvetted.jsonl", "{\"id\":\"x\",\"global_summary\":\"one\",\"review_status\":\"unvetted\"}\n");
  CHECK_THROWS_AS(load_corpus(only_unvetted), ConfigError);
  CHECK_THROWS_AS(load_corpus(write_lines("blank.jsonl", "\n")), ConfigError);
}

TEST_CASE("corpus write and reload") {
  const auto docs = generate_synthetic_corpus(3, 12, 5, 0.0);
  const fs::path p = fs::temp_directory_path() / "prima_ki_roundtrip.jsonl";
  write_corpus(docs, p);
  const auto again = load_corpus(p);
  REQUIRE(again.size() == docs.size());
  for (std::size_t i = 0; i < docs.size(); ++i) CHECK(again[i].to_json() == docs[i].to_json());
}

TEST_CASE("mask selection rate concentrates around the configured rate") {
  Rng rng(1);
  std::vector<std::vector<int>> seqs(500, std::vector<int>(20));
  for (auto& s : seqs) {
    for (auto& id : s) id = 4 + static_cast<int>(rng.index(50));
  }
  Rng mrng(2);
  const auto batch = make_mlm_batch(seqs, 0.15, mrng, 54);
  std::size_t selected = 0, total = 0, masked = 0, kept = 0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    total += seqs[b].size();
    selected += batch[b].positions.size();
    for (std::size_t m = 0; m < batch[b].positions.size(); ++m) {
      const int pos = batch[b].positions[m];
      CHECK(batch[b].targets[m] == seqs[b][pos]);
      masked += batch[b].input_ids[pos] == Vocabulary::kMask;
      kept += batch[b].input_ids[pos] == seqs[b][pos];
    }
    // Unselected positions are untouched.
    for (std::size_t t = 0; t < seqs[b].size(); ++t) {
      if (std::find(batch[b].positions.begin(), batch[b].positions.end(), static_cast<int>(t)) ==
          batch[b].positions.end()) {
        CHECK(batch[b].input_ids[t] == seqs[b][t]);
      }
    }
  }
  const double rate = static_cast<double>(selected) / total;
  CHECK(rate >= 0.13);
  CHECK(rate <= 0.17);
  CHECK(static_cast<double>(masked) / selected == doctest::Approx(0.8).epsilon(0.08));
  CHECK(kept >= selected / 20);

  Rng a(9), b(9);
  const auto x = make_mlm_batch(seqs, 0.15, a, 54);
  const auto y = make_mlm_batch(seqs, 0.15, b, 54);
  for (std::size_t i = 0; i < x.size(); ++i) {
    CHECK(x[i].input_ids == y[i].input_ids);
    CHECK(x[i].positions == y[i].positions);
  }
}

TEST_CASE("tiny mask rates still mask one position; short sequences are skipped") {
  log::set_level(log::Level::Quiet);
  Rng rng(3);
  const auto batch = make_mlm_batch({{5, 6, 7}, {5}, {}}, 1e-9, rng, 10);
  log::set_level(log::Level::Warn);
  REQUIRE(batch.size() == 1);
  CHECK(batch[0].positions.size() == 1);
  CHECK_THROWS_AS(make_mlm_batch({{5, 6}}, 0.0, rng, 10), ConfigError);
  CHECK_THROWS_AS(make_mlm_batch({{5, 6}}, 1.0, rng, 10), ConfigError);
}

TEST_CASE("masked cross-entropy properties") {
  const int V = 30;
  // Uniform predictions: loss = log V.
  const ag::Var uniform = ag::constant(Matrix::Zero(6, V));
  CHECK(nn::cross_entropy(uniform, {3, -1, 7, -1, -1, 9}).scalar() == doctest::Approx(std::log(V)).epsilon(1e-12));
  // Perfect logits with a large margin: loss -> 0.
  Matrix perfect = Matrix::Zero(2, V);
  perfect(0, 4) = 60;
  perfect(1, 8) = 60;
  CHECK(nn::cross_entropy(ag::constant(perfect), {4, 8}).scalar() < 1e-20);
  // Perturbing unmasked rows never changes the loss.
  Rng rng(4);
  Matrix logits = rng.normal_matrix(6, V, 1.0);
  const std::vector<int> targets = {3, -1, 7, -1, -1, 9};
  const double base = nn::cross_entropy(ag::constant(logits), targets).scalar();
  for (int r : {1, 3, 4}) logits.row(r) = rng.normal_matrix(1, V, 5.0);
  CHECK(nn::cross_entropy(ag::constant(logits), targets).scalar() == base);
  CHECK_THROWS_AS(nn::cross_entropy(ag::constant(logits), {-1, -1, -1, -1, -1, -1}), DomainError);
}

TEST_CASE("mlm loss through the text encoder") {
  const auto docs = generate_synthetic_corpus(3, 10, 1, 0.0);
  Vocabulary vocab(corpus_words(docs));
  nn::ParameterStore store;
  TextEncoder enc(store, default_text_spec(vocab.size()));
  Rng rng(5);
  auto batch = make_mlm_batch(docs, vocab, 24, 0.15, rng);
  REQUIRE(!batch.empty());
  const double loss = mlm_loss(enc, batch).scalar();
  CHECK(std::isfinite(loss));
  CHECK(loss > 0.0);
  // Row targets land on the masked rows only.
  const auto rows = mlm_row_targets(batch, 25);
  std::size_t counted = 0;
  for (int t : rows) counted += t >= 0;
  std::size_t masked = 0;
  for (const auto& ex : batch) masked += ex.positions.size();
  CHECK(counted == masked);

  for (auto& ex : batch) {
    ex.positions.clear();
    ex.targets.clear();
  }
  CHECK_THROWS_AS(mlm_loss(enc, batch), DomainError);
}
