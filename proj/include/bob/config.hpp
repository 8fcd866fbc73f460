#pragma once

// Flat key=value configuration text for ModelConfig and TrainConfig.
// Blank lines and lines starting with '#' are ignored.

#include <filesystem>
#include <stdexcept>
#include <string>

#include "bob/model.hpp"
#include "bob/objectives.hpp"

namespace bob {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
};

/// Every field, one per line, in a fixed order. Doubles use the shortest
/// representation that reads back to the same value.
std::string to_config_text(const RunConfig& config);

/// Sets one field by name; throws ConfigError on unknown keys or bad values.
void apply_setting(RunConfig& config, const std::string& key, const std::string& value);

/// Applies every line of `text` on top of `base`.
RunConfig parse_config_text(const std::string& text, RunConfig base = {});
RunConfig load_config_file(const std::filesystem::path& path, RunConfig base = {});

std::string to_string(Activation a);
std::string to_string(PersonaSource s);

}  // namespace bob
