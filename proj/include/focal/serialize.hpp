#pragma once

#include <cstdint>
#include <string>
#include <string_view>

#include "focal/model.hpp"

namespace focal {

// Canonical JSON form of a model configuration (fixed field order, so equal
// configs serialize to equal strings).
std::string config_to_json(const ModelConfig& config);
ModelConfig config_from_json(const std::string& text);

// Reads a JSON config file. {"preset": "tiny"} selects a named preset; any
// further top-level fields override it.
ModelConfig load_config_file(const std::string& path);

// Weight container: a text manifest (config + per-tensor name/shape/offset,
// in module-path order) followed by the raw little-endian f64 payload.
// Save/load round-trips bit-exactly.
void save_model(const Model& model, const std::string& path);
Model load_model(const std::string& path);

std::uint64_t fnv1a64(std::string_view text);
std::string config_digest(const ModelConfig& config);

}  // namespace focal
