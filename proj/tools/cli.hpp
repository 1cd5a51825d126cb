#pragma once

#include "merlin/adapters.hpp"
#include "merlin/analysis.hpp"
#include "merlin/connector.hpp"
#include "merlin/curriculum.hpp"
#include "merlin/datapipe.hpp"
#include "merlin/evalharness.hpp"
#include "merlin/toy.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace merlin::cli {

/// Process exit codes.
enum ExitCode : int {
  ok = 0,
  audit_failure = 2,
  config_error = 64,
  data_error = 65,
  missing_artifact = 66,
  internal_error = 70,
};

/// Maps a library error onto its exit code.
int exit_code_for(const std::exception& e);

struct RunConfig {
  std::uint64_t seed = 1;
  std::filesystem::path output_dir = "merlin_out";

  struct Data {
    std::string source = "toy";  // toy | files
    datapipe::ToyCorpusConfig toy;
    std::filesystem::path bitext, questions, tasks;
    std::map<std::string, std::filesystem::path> eval;  // files source: eval set name -> tasks file
    datapipe::Quotas quotas;
    std::vector<std::string> languages;
    bool strict = false;
  } data;

  struct Stack {
    std::optional<std::filesystem::path> path;
    toy::ToyStackConfig toy;
  } stack;

  connector::ConnectorSpec connector;
  std::uint64_t connector_seed = 0;
  adapters::AdapterSpec adapters;
  std::uint64_t adapter_seed = 0;
  std::map<curriculum::StageId, curriculum::StageConfig> stages;

  struct Eval {
    std::optional<std::string> template_name;
    int max_new_tokens = 40;
    evalharness::LanguageGroups groups;
  } eval;

  struct Analysis {
    analysis::CurveOptions curve;
    analysis::InputMode mode = analysis::InputMode::assembled;
    int layer = -1;  // export-embeddings; -1 picks the middle layer
  } analysis;

  /// The document after defaults and derived seeds are filled in.
  nlohmann::json resolved;
};

/// Component seed derived from the global seed when the config leaves it out.
std::uint64_t derive_seed(std::uint64_t seed, const std::string& component);

/// Rejects unknown keys and ill-typed values with ConfigError naming the
/// offending JSON path.
RunConfig parse_config(const nlohmann::json& doc);
RunConfig load_config(const std::filesystem::path& path);

/// output_dir, prefixed with $MERLIN_OUTPUT_ROOT when that is set and the
/// configured path is relative.
std::filesystem::path output_root(const RunConfig& cfg);

/// Entry point shared by the executable and the tests.
int run(int argc, const char* const* argv);

}  // namespace merlin::cli
