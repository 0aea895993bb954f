#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "rubricrefine/dataset.hpp"
#include "rubricrefine/engine.hpp"
#include "rubricrefine/prompts.hpp"

namespace rubricrefine {

/// Process exit statuses of the rubric-refine tool.
enum ExitCode : int {
  kExitOk = 0,
  kExitConfig = 1,
  kExitIo = 2,
  kExitBackend = 3,
  kExitParse = 4,
};

struct TaskConfig {
  std::string corpus;
  CorpusFormat format = CorpusFormat::asap_tsv;
  ScoreScale scale = asap_p1_scale();
  LoadOptions load;
  /// prompt_id -> file holding the writing task text.
  std::map<std::string, std::string> prompt_files;
};

struct SeedSelection {
  SeedRubricKind kind = SeedRubricKind::simplest;
  std::optional<std::string> file;
};

struct TemplateFiles {
  std::optional<std::string> scoring;
  std::optional<std::string> refinement;
  std::optional<std::string> example_format;
};

/// Everything one invocation needs. Serialized verbatim into run.json, so
/// a run can be reproduced from its snapshot.
struct CliConfig {
  TaskConfig task;
  SplitSpec split;
  RefinementConfig refinement;
  SeedSelection seed_rubric;
  TemplateFiles templates;
  std::string run_dir = "runs/default";
  int verbosity = 1;

  /// Relative paths in the document resolve against this directory. Not
  /// serialized.
  std::filesystem::path base_dir = ".";

  std::filesystem::path resolve(const std::string& path) const;
};

void to_json(nlohmann::json& j, const CliConfig& config);
void from_json(const nlohmann::json& j, CliConfig& config);

/// Reads a config document; relative paths resolve against its directory.
CliConfig load_cli_config(const std::filesystem::path& path);

/// Sets `dotted.path=value` in a config document. The value is parsed as
/// JSON when possible and kept as a string otherwise.
void apply_override(nlohmann::json& doc, std::string_view assignment);

/// Loads the corpus and assigns splits. When `manifest` exists, its
/// assignment must match.
std::vector<EssayRecord> prepare_corpus(const CliConfig& config,
                                        const std::optional<std::filesystem::path>& manifest = std::nullopt);

/// Entry point behind the executable; returns the process exit status.
int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace rubricrefine
