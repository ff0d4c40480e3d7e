#pragma once

#include "elsa/config.hpp"

#include <json.hpp>

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace elsa {

/// Paths and per-command options shared by the stage commands.
struct StageIO {
  std::filesystem::path in;
  std::filesystem::path out;
  /// Defaults to "<out>.report.json" (eval: "<in>.eval.json").
  std::filesystem::path report;
  /// Search CSV/SVG directory; defaults to the directory of `out`.
  std::filesystem::path out_dir;
  /// Markdown efficiency table written by eval when set.
  std::filesystem::path table;
  std::string genome;
  bool heuristic = false;
  std::optional<MergeMode> merge_mode;
  /// Command line recorded in the report.
  std::vector<std::string> argv;
};

// Each command reads the previous stage's checkpoint (except pretrain),
// writes a new checkpoint plus a JSON report, and returns the report.
// Reports hold everything but wall-clock data under "results"; timestamps
// and latencies go to "timing".
nlohmann::json cmd_pretrain(const RunConfig& cfg, const StageIO& io);
nlohmann::json cmd_prune(const RunConfig& cfg, const StageIO& io);
nlohmann::json cmd_quantize(const RunConfig& cfg, const StageIO& io);
nlohmann::json cmd_train(const RunConfig& cfg, const StageIO& io);
nlohmann::json cmd_search(const RunConfig& cfg, const StageIO& io);
nlohmann::json cmd_extract(const RunConfig& cfg, const StageIO& io);
nlohmann::json cmd_merge(const RunConfig& cfg, const StageIO& io);
nlohmann::json cmd_eval(const RunConfig& cfg, const StageIO& io);

/// Process exit code for an error kind (0 is success).
int exit_code_for(const std::string& kind);

/// Entry point of the `elsa` executable. Errors are printed to `err` as one
/// JSON object {"error": kind, "message": ...}.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace elsa
