#pragma once

#include "smlm/nn.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <string_view>

namespace smlm {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Writes `content` to a sibling temp file and renames it over `path`.
void atomic_write(const std::filesystem::path& path, std::string_view content);

// Binary weights ("SMLMCKPT", version, named row-major double matrices) plus
// a sidecar `<path>.json` metadata document.
void save_checkpoint(const std::filesystem::path& path, const nn::ParamList& params, const nlohmann::json& metadata);

// Loads weights into an already-constructed parameter list; names and shapes
// must match exactly. Returns the sidecar metadata.
nlohmann::json load_checkpoint(const std::filesystem::path& path, nn::ParamList& params);

nlohmann::json read_checkpoint_metadata(const std::filesystem::path& path);

}  // namespace smlm
