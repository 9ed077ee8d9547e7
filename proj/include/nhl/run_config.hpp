#ifndef NHL_RUN_CONFIG_HPP
#define NHL_RUN_CONFIG_HPP

// Flat JSON run configuration. Precedence, lowest first: built-in defaults, the
// --config file, command-line flags. Every key is optional.

#include "nhl/corruption.hpp"
#include "nhl/engine.hpp"
#include "nhl/train.hpp"

#include <json.hpp>

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace nhl {

enum class FieldType { integer, seed, real, boolean, text, text_list, integer_list, seed_list };

struct ConfigField {
  std::string key;
  FieldType type;
  nlohmann::json default_value;
  std::string help;

  bool is_list() const {
    return type == FieldType::text_list || type == FieldType::integer_list || type == FieldType::seed_list;
  }
};

const std::vector<ConfigField>& config_fields();
nlohmann::json default_config();

/// Raised with every problem found, not just the first.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(std::vector<std::string> problems);
  const std::vector<std::string>& problems() const { return problems_; }

 private:
  std::vector<std::string> problems_;
};

/// Flag values are the raw strings given on the command line, keyed by field.
using FlagValues = std::map<std::string, std::vector<std::string>>;

class RunConfig {
 public:
  RunConfig() : values_(default_config()) {}

  /// Layers `file` and `flags` over the defaults and validates the result.
  static RunConfig merge(const nlohmann::json& file, const FlagValues& flags);

  const nlohmann::json& values() const { return values_; }
  template <typename T>
  T get(const std::string& key) const {
    return values_.at(key).get<T>();
  }

  /// Architecture from the overrides, with input and class count taken from the data.
  ArchitectureDescriptor architecture(Index in_channels, Index height, Index width, Index num_classes) const;
  TrainConfig train_config() const;
  std::vector<MethodSpec> methods() const;
  MethodSpec method_spec(MethodKind kind) const;
  std::vector<SuiteCorruption> corruptions() const;
  std::vector<std::uint64_t> seeds() const;

 private:
  nlohmann::json values_;
};

}  // namespace nhl

#endif  // NHL_RUN_CONFIG_HPP
