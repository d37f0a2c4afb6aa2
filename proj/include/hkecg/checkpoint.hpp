#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "hkecg/backbones.hpp"
#include "hkecg/errors.hpp"

namespace hkecg {

using Json = nlohmann::json;

Json to_json(const ModelConfig& cfg);

/// Parses a model section; absent keys keep their defaults, unknown keys throw ConfigError.
ModelConfig model_config_from_json(const Json& j);

/**
 * Single-file checkpoint: "HKCK", u32 version, u64 manifest length, manifest
 * JSON, then little-endian f32 payloads in manifest order.
 */
struct Checkpoint {
	static constexpr std::uint32_t format_version = 1;

	ModelConfig model;
	Json meta = Json::object();
	std::vector<std::string> names;
	ModelState<float> state;
};

Checkpoint make_checkpoint(Model<float>& model, Json meta = Json::object());
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Builds the architecture from the checkpoint config and loads its values.
Model<float> restore_model(const Checkpoint& ckpt);

} // namespace hkecg
