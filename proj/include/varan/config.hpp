#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "varan/model.hpp"
#include "varan/synthdata.hpp"

namespace varan {

/// Invalid user input: unknown keys, out-of-range values, missing paths.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct OptimConfig {
  double lr = 1e-4;
  double weight_decay = 0.1;
  std::size_t batch_size = 16;
  std::size_t epochs = 30;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct ObjectiveConfig {
  double beta = 0.05;
  double prior_df = 3.0;
};

struct PathsConfig {
  std::string dataset;
  std::string checkpoint;
  std::string metrics;
  std::string exports;
  std::string report;
};

/// Everything a subcommand needs. `seed` drives every random stream,
/// including dataset generation (the synthetic spec's seed follows it).
struct RunConfig {
  std::string task = "compare";
  SynthSpec synth;
  ModelConfig model;
  OptimConfig optim;
  ObjectiveConfig objective;
  PathsConfig paths;
  std::uint64_t seed = 42;

  SynthSpec synth_spec() const;
  /// Range checks; throws ConfigError.
  void validate() const;
};

/// Nested JSON with every key, in registry order.
nlohmann::ordered_json to_json(const RunConfig& c);

/// Applies a nested JSON document on top of `base`. Unknown keys throw.
RunConfig apply_json(RunConfig base, const nlohmann::json& doc);

/// Dotted-key overrides ("optim.lr" -> "1e-3"). Values are read as JSON
/// literals where possible, otherwise as strings. Unknown keys throw.
RunConfig apply_overrides(RunConfig base, const std::map<std::string, std::string>& overrides);

RunConfig load_config_file(const std::string& path);

/// Layered load: defaults, then the file (if any), then overrides. Keys set
/// by both with different values are reported to `notices`; the flag wins.
RunConfig resolve_config(const std::string& file, const std::map<std::string, std::string>& overrides,
                         std::ostream* notices);

/// One line per key: name, default, description.
std::string config_help();

std::vector<std::string> config_keys();

}  // namespace varan
