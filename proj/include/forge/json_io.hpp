#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "forge/pipelines.hpp"

namespace forge {

using Json = nlohmann::json;

void to_json(Json& j, const PipelineParams& p);
void from_json(const Json& j, PipelineParams& p);

Json read_json_file(const std::filesystem::path& path);

// Writes via a temporary file and rename so readers never see a partial file.
void write_text_atomic(const std::filesystem::path& path, const std::string& text);
void write_json_file(const std::filesystem::path& path, const Json& j);

// Key-order independent fingerprint (object keys are sorted on dump).
std::string json_hash(const Json& j);

// Shortest round-trip formatting, independent of locale.
std::string format_double(double value);

}  // namespace forge
