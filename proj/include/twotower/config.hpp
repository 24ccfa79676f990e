#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "twotower/data.hpp"
#include "twotower/drift.hpp"
#include "twotower/trainer.hpp"

namespace twotower {

struct SettingSpec {
  std::string key;
  std::string default_value;
  std::string help;
};

/// Every accepted key with its default.
const std::vector<SettingSpec>& known_settings();

/// Parses flat `key = value` text. Blank lines and `#` comments are ignored;
/// unknown keys are rejected.
std::map<std::string, std::string> parse_config_text(std::string_view text);

/// Resolved settings: flag > config file > built-in default.
class Settings {
 public:
  static Settings resolve(const std::map<std::string, std::string>& file_values,
                          const std::map<std::string, std::string>& flag_values);

  const std::string& get(const std::string& key) const;
  std::string origin(const std::string& key) const;  // "flag", "file" or "default"
  std::int64_t get_int(const std::string& key) const;
  std::size_t get_size(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::vector<std::string> get_list(const std::string& key) const;

 private:
  std::map<std::string, std::string> values_;
  std::map<std::string, std::string> origin_;
};

TrainConfig to_train_config(const Settings& settings);
SplitConfig to_split_config(const Settings& settings);
SynthConfig to_synth_config(const Settings& settings);
DriftConfig to_drift_config(const Settings& settings);

}  // namespace twotower
