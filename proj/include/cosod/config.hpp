#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "cosod/losses.hpp"
#include "cosod/model_config.hpp"
#include "cosod/synth.hpp"
#include "cosod/training.hpp"

namespace cosod {

struct RunConfig {
  ModelConfig model;
  LossConfig loss;
  TrainConfig train;
  SynthSpec synth;

  void validate() const;
};

struct ConfigKey {
  std::string section;
  std::string key;
  std::string help;
};

// Every accepted "section.key", in rendering order.
const std::vector<ConfigKey>& config_schema();

// Sets one value; unknown keys and malformed values raise ConfigError naming
// the key.
void apply_setting(RunConfig& cfg, const std::string& section, const std::string& key, const std::string& value);

// "section.key=value".
void apply_override(RunConfig& cfg, std::string_view assignment);

// INI-like text: "[section]" headers, "key = value" lines, '#' comments.
void apply_config_text(RunConfig& cfg, std::string_view text, const std::string& source = "config");

std::string get_setting(const RunConfig& cfg, const std::string& section, const std::string& key);

// Re-parseable text of every key.
std::string render_config(const RunConfig& cfg);

// Defaults, then the COSF_SEED environment variable, then the file, then
// overrides.
RunConfig load_run_config(const std::optional<std::filesystem::path>& file,
                          const std::vector<std::string>& overrides, const char* env_seed);

}  // namespace cosod
