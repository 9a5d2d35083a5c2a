#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"
#include "varan/config.hpp"
#include "varan/synthdata.hpp"

namespace varan::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitRuntime = 2;

/// Entry point shared by the executable and the tests. `args` excludes the
/// program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Loads `paths.dataset` when it names an existing file, otherwise
/// generates the dataset from the config.
SynthDataset dataset_for(const RunConfig& config);

/// Trains every model kind on `data` and writes per-kind checkpoints and
/// metric streams, the varan weight export and the report. Returns the
/// report document.
nlohmann::ordered_json run_compare(const RunConfig& config, const SynthDataset& data, std::ostream* log);

/// `<dir>/<stem>_<tag><ext>` for `base = <dir>/<stem><ext>`.
std::filesystem::path tagged_path(const std::filesystem::path& base, const std::string& tag);

}  // namespace varan::cli
