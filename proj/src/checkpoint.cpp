#include "prima/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "prima/errors.hpp"

namespace fs = std::filesystem;

namespace prima {

static_assert(std::endian::native == std::endian::little, "checkpoints assume little-endian");

namespace {

void write_file(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

void save_checkpoint(const nn::ParameterStore& store, const fs::path& dir,
                     const nlohmann::json& meta, const std::vector<std::string>& prefixes) {
  nlohmann::json manifest;
  manifest["format"] = kCheckpointFormat;
  manifest["version"] = kCheckpointVersion;
  manifest["meta"] = meta;
  manifest["parameters"] = nlohmann::json::array();
  std::string weights;
  std::size_t offset = 0;
  for (const nn::Parameter* p : store.parameters()) {
    if (!prefixes.empty() && std::none_of(prefixes.begin(), prefixes.end(), [&](const std::string& pre) {
          return p->component.rfind(pre, 0) == 0;
        })) {
      continue;
    }
    const Matrix& v = p->value();
    manifest["parameters"].push_back({{"name", p->name},
                                      {"component", p->component},
                                      {"rows", v.rows()},
                                      {"cols", v.cols()},
                                      {"trainable", p->trainable()},
                                      {"offset", offset}});
    weights.append(reinterpret_cast<const char*>(v.data()),
                   static_cast<std::size_t>(v.size()) * sizeof(double));
    offset += static_cast<std::size_t>(v.size());
  }

  if (!dir.parent_path().empty()) fs::create_directories(dir.parent_path());
  const fs::path tmp = dir.string() + ".tmp";
  const fs::path old = dir.string() + ".old";
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  write_file(tmp / "manifest.json", manifest.dump(2) + "\n");
  write_file(tmp / "weights.bin", weights);
  fs::remove_all(old);
  if (fs::exists(dir)) fs::rename(dir, old);
  fs::rename(tmp, dir);
  fs::remove_all(old);
}

bool checkpoint_exists(const fs::path& dir) {
  return fs::exists(dir / "manifest.json") && fs::exists(dir / "weights.bin");
}

nlohmann::json read_checkpoint_manifest(const fs::path& dir) {
  if (!fs::exists(dir / "manifest.json")) {
    throw IoError("no checkpoint manifest at " + (dir / "manifest.json").string());
  }
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_file(dir / "manifest.json"));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("malformed checkpoint manifest " + (dir / "manifest.json").string() + ": " +
                     e.what());
  }
  if (manifest.value("format", "") != kCheckpointFormat) {
    throw ParseError(dir.string() + " is not a checkpoint directory");
  }
  if (manifest.value("version", 0) != kCheckpointVersion) {
    throw ParseError("unsupported checkpoint version in " + dir.string());
  }
  return manifest;
}

nlohmann::json load_checkpoint(nn::ParameterStore& store, const fs::path& dir) {
  nlohmann::json manifest = read_checkpoint_manifest(dir);
  const std::string weights = read_file(dir / "weights.bin");
  for (const auto& entry : manifest.at("parameters")) {
    const auto name = entry.at("name").get<std::string>();
    if (!store.contains(name)) {
      throw ShapeError("checkpoint parameter " + name + " has no counterpart in the model");
    }
    nn::Parameter& p = store.get(name);
    const auto rows = entry.at("rows").get<Eigen::Index>();
    const auto cols = entry.at("cols").get<Eigen::Index>();
    if (p.value().rows() != rows || p.value().cols() != cols) {
      throw ShapeError("checkpoint parameter " + name + " has a different shape");
    }
    const auto offset = entry.at("offset").get<std::size_t>();
    const std::size_t bytes = static_cast<std::size_t>(rows * cols) * sizeof(double);
    if ((offset * sizeof(double)) + bytes > weights.size()) {
      throw ParseError("weights.bin in " + dir.string() + " is truncated");
    }
    std::memcpy(p.value().data(), weights.data() + offset * sizeof(double), bytes);
  }
  return manifest;
}

std::map<std::string, std::string> component_digests(const nn::ParameterStore& store) {
  constexpr std::uint64_t kOffset = 1469598103934665603ULL;
  constexpr std::uint64_t kPrime = 1099511628211ULL;
  std::map<std::string, std::uint64_t> hashes;
  auto mix = [&](std::uint64_t& h, const void* data, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= kPrime;
    }
  };
  for (const nn::Parameter* p : store.parameters()) {
    auto [it, inserted] = hashes.emplace(p->component, kOffset);
    std::uint64_t& h = it->second;
    mix(h, p->name.data(), p->name.size());
    const std::int64_t shape[2] = {p->value().rows(), p->value().cols()};
    mix(h, shape, sizeof(shape));
    mix(h, p->value().data(), static_cast<std::size_t>(p->value().size()) * sizeof(double));
  }
  std::map<std::string, std::string> out;
  for (const auto& [component, h] : hashes) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    out[component] = buf;
  }
  return out;
}

}  // namespace prima
