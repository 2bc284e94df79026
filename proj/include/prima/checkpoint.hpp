#pragma once

// Self-describing checkpoint directories: manifest.json (format tag,
// version, caller metadata and the parameter table) plus weights.bin (raw
// little-endian doubles in table order). Directories are written under a
// temporary name and renamed into place.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "prima/nn.hpp"

namespace prima {

inline constexpr const char* kCheckpointFormat = "prima-checkpoint";
inline constexpr int kCheckpointVersion = 1;

/// Writes the parameters of `store` whose component starts with one of
/// `prefixes` (all of them when empty); `meta` is stored verbatim.
void save_checkpoint(const nn::ParameterStore& store, const std::filesystem::path& dir,
                     const nlohmann::json& meta, const std::vector<std::string>& prefixes = {});

/// Reads the manifest only.
nlohmann::json read_checkpoint_manifest(const std::filesystem::path& dir);

/// Copies checkpoint values into same-named parameters of `store`. Every
/// checkpoint entry must exist in the store with the same shape; store
/// parameters absent from the checkpoint are left untouched. Returns the
/// manifest.
nlohmann::json load_checkpoint(nn::ParameterStore& store, const std::filesystem::path& dir);

bool checkpoint_exists(const std::filesystem::path& dir);

/// FNV-1a digest (16 hex digits) of every parameter's name, shape and raw
/// bytes, grouped by component. Equal digests mean bitwise-equal weights.
std::map<std::string, std::string> component_digests(const nn::ParameterStore& store);

}  // namespace prima
