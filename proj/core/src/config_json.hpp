#pragma once

// Internal: JSON (de)serialization of run configs, shared by the pipeline
// artifacts and the command-line front end. Not installed.

#include <filesystem>
#include <initializer_list>
#include <string>

#include <nlohmann/json.hpp>

#include "conserve/discovery.hpp"
#include "conserve/dynamics.hpp"

namespace conserve::cfg_json {

using nlohmann::json;

// Rejects keys outside `allowed` with IoError naming `where`.
void check_keys(const json& j, std::initializer_list<const char*> allowed,
                const std::string& where);

// Strict parse (IoError on open/parse failure).
json load_json_file(const std::filesystem::path& p);
// Write via temp file + rename so readers never see partial artifacts.
void write_json_file(const std::filesystem::path& p, const json& j);

// JSON has no infinity: non-finite numbers are stored as null.
json jnum(double v);
double jnum_back(const json& j, double fallback);

json system_to_json(const SystemSpec& s);
SystemSpec system_from_json(const json& j, SystemSpec base);

// Full echo of a pipeline run: system plus every PipelineConfig section.
json pipeline_to_json(const SystemSpec& system, const PipelineConfig& cfg);
// Applies the sections present in `j` on top of `base` (strict keys).
void pipeline_from_json(const json& j, SystemSpec& system, PipelineConfig& base);

// FNV-1a of the compact dump; stable across runs and platforms.
std::string hash_hex(const json& j);

} // namespace conserve::cfg_json
