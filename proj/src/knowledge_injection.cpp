#include "prima/knowledge_injection.hpp"

#include <algorithm>
#include <fstream>

#include "prima/errors.hpp"
#include "prima/log.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace prima {

std::vector<std::string> CorpusDocument::passages() const {
  std::vector<std::string> out;
  if (!global_summary.empty()) out.push_back(global_summary);
  for (const auto& [factor, text] : risk_sections) {
    if (!text.empty()) out.push_back(factor + ": " + text);
  }
  return out;
}

json CorpusDocument::to_json() const {
  json sections = json::array();
  for (const auto& [factor, text] : risk_sections) {
    sections.push_back({{"factor", factor}, {"text", text}});
  }
  return {{"id", id},
          {"global_summary", global_summary},
          {"risk_sections", sections},
          {"review_status", review_status == ReviewStatus::Vetted ? "vetted" : "unvetted"},
          {"source", source}};
}

std::vector<CorpusDocument> load_corpus(const fs::path& path, const CorpusOptions& options) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open corpus " + path.string());
  std::vector<CorpusDocument> docs;
  std::string line;
  int line_no = 0;
  std::size_t skipped = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no) + ": ";
    CorpusDocument doc;
    try {
      const json j = json::parse(line);
      doc.id = j.at("id").get<std::string>();
      doc.global_summary = j.value("global_summary", std::string());
      if (j.contains("risk_sections")) {
        for (const auto& s : j["risk_sections"]) {
          doc.risk_sections.emplace_back(s.at("factor").get<std::string>(),
                                         s.at("text").get<std::string>());
        }
      }
      const std::string status = j.value("review_status", std::string("unvetted"));
      if (status == "vetted") {
        doc.review_status = ReviewStatus::Vetted;
      } else if (status == "unvetted") {
        doc.review_status = ReviewStatus::Unvetted;
      } else {
        throw ParseError(where + "review_status must be 'vetted' or 'unvetted'");
      }
      doc.source = j.value("source", std::string());
    } catch (const json::exception& e) {
      throw ParseError(where + e.what());
    }
    if (doc.id.empty()) throw ParseError(where + "document id is empty");
    if (doc.passages().empty()) {
      throw ParseError(where + "document " + doc.id + " has no summary and no sections");
    }
    if (doc.review_status == ReviewStatus::Unvetted && !options.include_unvetted) {
      ++skipped;
      continue;
    }
    docs.push_back(std::move(doc));
  }
  if (skipped) log::info("skipped " + std::to_string(skipped) + " unvetted corpus documents");
  if (docs.empty()) throw ConfigError("corpus " + path.string() + " has no usable documents");
  return docs;
}

void write_corpus(const std::vector<CorpusDocument>& docs, const fs::path& path) {
  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write corpus " + path.string());
  for (const auto& d : docs) out << d.to_json().dump() << "\n";
}

std::vector<std::string> corpus_words(const std::vector<CorpusDocument>& docs) {
  std::vector<std::string> out;
  for (const auto& d : docs) {
    for (const auto& p : d.passages()) {
      for (auto& w : tokenize(p)) out.push_back(std::move(w));
    }
  }
  return out;
}

std::vector<std::vector<int>> corpus_sequences(const std::vector<CorpusDocument>& docs,
                                               const Vocabulary& vocab, int max_tokens) {
  if (max_tokens < 1) throw ConfigError("max_tokens must be positive");
  std::vector<std::vector<int>> out;
  for (const auto& d : docs) {
    for (const auto& p : d.passages()) {
      const auto ids = vocab.encode(p);
      for (std::size_t start = 0; start < ids.size(); start += static_cast<std::size_t>(max_tokens)) {
        const std::size_t end = std::min(ids.size(), start + static_cast<std::size_t>(max_tokens));
        out.emplace_back(ids.begin() + static_cast<std::ptrdiff_t>(start),
                         ids.begin() + static_cast<std::ptrdiff_t>(end));
      }
    }
  }
  return out;
}

std::vector<MlmExample> make_mlm_batch(const std::vector<std::vector<int>>& sequences,
                                       double mask_rate, Rng& rng, int vocab_size) {
  if (!(mask_rate > 0.0 && mask_rate < 1.0)) throw ConfigError("mask_rate must be in (0, 1)");
  if (vocab_size <= Vocabulary::kReserved) throw ConfigError("vocabulary has no ordinary words");
  std::vector<MlmExample> out;
  std::size_t skipped = 0;
  for (const auto& seq : sequences) {
    if (seq.size() < 2) {
      ++skipped;
      continue;
    }
    MlmExample ex;
    ex.input_ids = seq;
    std::vector<bool> selected(seq.size(), false);
    bool any = false;
    for (std::size_t t = 0; t < seq.size(); ++t) {
      selected[t] = rng.bernoulli(mask_rate);
      any = any || selected[t];
    }
    if (!any) selected[rng.index(seq.size())] = true;
    for (std::size_t t = 0; t < seq.size(); ++t) {
      if (!selected[t]) continue;
      ex.positions.push_back(static_cast<int>(t));
      ex.targets.push_back(seq[t]);
      const double u = rng.uniform();
      if (u < 0.8) {
        ex.input_ids[t] = Vocabulary::kMask;
      } else if (u < 0.9) {
        ex.input_ids[t] = Vocabulary::kReserved +
                          static_cast<int>(rng.index(static_cast<std::size_t>(vocab_size - Vocabulary::kReserved)));
      }
    }
    out.push_back(std::move(ex));
  }
  if (skipped) {
    log::warn("skipped " + std::to_string(skipped) + " sequences shorter than 2 tokens");
  }
  return out;
}

std::vector<MlmExample> make_mlm_batch(const std::vector<CorpusDocument>& docs,
                                       const Vocabulary& vocab, int max_tokens, double mask_rate,
                                       Rng& rng) {
  return make_mlm_batch(corpus_sequences(docs, vocab, max_tokens), mask_rate, rng, vocab.size());
}

std::vector<int> mlm_row_targets(const std::vector<MlmExample>& batch, Eigen::Index seq_len) {
  std::vector<int> targets(batch.size() * static_cast<std::size_t>(seq_len), -1);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    for (std::size_t m = 0; m < batch[b].positions.size(); ++m) {
      targets[b * static_cast<std::size_t>(seq_len) + 1 + static_cast<std::size_t>(batch[b].positions[m])] =
          batch[b].targets[m];
    }
  }
  return targets;
}

ag::Var mlm_loss(const TextEncoder& encoder, const std::vector<MlmExample>& batch) {
  std::size_t masked = 0;
  for (const auto& ex : batch) masked += ex.positions.size();
  if (masked == 0) throw DomainError("MLM batch has no masked positions");
  std::vector<std::vector<int>> inputs;
  inputs.reserve(batch.size());
  for (const auto& ex : batch) inputs.push_back(ex.input_ids);
  const EncodedBatch h = encoder.encode_hidden(inputs);
  const auto targets = mlm_row_targets(batch, h.seq_len);
  // Only rows with a target need logits.
  std::vector<Eigen::Index> rows;
  std::vector<int> row_targets;
  for (std::size_t r = 0; r < targets.size(); ++r) {
    if (targets[r] >= 0) {
      rows.push_back(static_cast<Eigen::Index>(r));
      row_targets.push_back(targets[r]);
    }
  }
  return nn::cross_entropy(encoder.mlm_logits(ag::gather_rows(h.hidden, rows)), row_targets);
}

std::vector<CorpusDocument> generate_synthetic_corpus(int classes, int documents,
                                                      std::uint64_t seed, double unvetted_fraction) {
  if (documents < 1) throw ConfigError("corpus needs at least one document");
  const auto names = synthetic_class_names(classes);
  const auto patterns = synthetic_patterns(classes);
  const auto& regions = synthetic_regions();
  Rng rng(seed);
  std::vector<CorpusDocument> out;
  static const char* openers[] = {"clinical review", "case series", "dermatology note",
                                  "guideline summary"};
  for (int d = 0; d < documents; ++d) {
    const int c = d % classes;
    const std::string& name = names[static_cast<std::size_t>(c)];
    CorpusDocument doc;
    doc.id = "doc" + std::to_string(d);
    doc.source = std::string(openers[rng.index(4)]) + " " + std::to_string(1990 + rng.index(35));
    doc.review_status = rng.bernoulli(unvetted_fraction) ? ReviewStatus::Unvetted
                                                         : ReviewStatus::Vetted;
    const std::string& pattern = patterns[static_cast<std::size_t>(c)];
    doc.global_summary = name + " lesions usually show a " + pattern + " pattern and " + name +
                         " is a common diagnosis in the clinic";
    const bool bleeds = synthetic_profile(c, 1) > 0.5;
    const bool itches = synthetic_profile(c, 2) > 0.5;
    const bool older = synthetic_profile(c, 3) > 0.5;
    const std::string& region = regions[static_cast<std::size_t>(c) % regions.size()];
    std::vector<std::pair<std::string, std::string>> sections = {
        {"bleed", std::string("bleeding is ") + (bleeds ? "common" : "rare") + " in " + name +
                      " so bleed " + (bleeds ? "yes" : "no") + " suggests " +
                      (bleeds ? name : "another diagnosis")},
        {"itch", std::string("itch ") + (itches ? "yes" : "no") + " is typical of " + name +
                     " lesions"},
        {"region", name + " often appears on the " + region},
        {"age", name + " is more common in " + (older ? "older" : "younger") + " patients with age " +
                    (older ? "bin2" : "bin0")},
        {"pattern", "a " + pattern + " pattern points to " + name},
    };
    rng.shuffle(sections);
    const std::size_t keep = 2 + rng.index(sections.size() - 1);
    sections.resize(keep);
    doc.risk_sections = std::move(sections);
    out.push_back(std::move(doc));
  }
  return out;
}

}  // namespace prima
