#pragma once

#include "merlin/adapters.hpp"
#include "merlin/connector.hpp"
#include "merlin/datapipe.hpp"
#include "merlin/modelstack/stack.hpp"
#include "merlin/optim.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace merlin::curriculum {

enum class StageId { map, align, augment, specialize };

std::string to_string(StageId s);
StageId stage_from_string(const std::string& s);
/// Column label of the stage-toggle table: Map, Align, Aug, Spe.
std::string column_label(StageId s);

struct StageConfig {
  StageId stage = StageId::map;
  std::filesystem::path dataset;
  int epochs = 1;
  int batch_size = 8;
  AdamWConfig optim;
  std::string optimizer = "adamw";
  std::uint64_t seed = 1;
  /// Specialize only: keep just the English task examples.
  bool english_only = false;

  /// epochs >= 1, batch_size >= 1, lr >= 0 (0 runs the loop without moving
  /// any weight), optimizer == "adamw".
  void validate() const;
  nlohmann::json to_json() const;
  static StageConfig from_json(const nlohmann::json& j, StageId stage);
};

struct StageData {
  std::vector<datapipe::ParallelPair> pairs;  // map, align
  std::vector<datapipe::TaskExample> tasks;   // augment, specialize
};

/// Reads config.dataset, checking its schema against the stage.
StageData load_stage_data(const StageConfig& config);

struct TrainableEntry {
  std::string name;
  std::int64_t numel = 0;
};

struct StageRecord {
  StageId stage = StageId::map;
  std::map<std::string, std::string> input_digests;
  std::map<std::string, std::string> output_digests;
  std::vector<double> step_losses;
  std::vector<double> epoch_losses;
  double wall_seconds = 0.0;
  std::vector<TrainableEntry> trainable;
  int examples = 0;
  nlohmann::json config;

  nlohmann::json to_json() const;
};

/// Mean NLL of `target_ids` continued after `assembled` (teacher forcing).
ag::Var nll(ag::Tape& tape, modelstack::StackHandle& stack, ag::Var assembled, std::span<const int> target_ids,
            const modelstack::ForwardContext& ctx = {});
double nll_objective(modelstack::StackHandle& stack, const connector::AssembledInput& assembled,
                     std::span<const int> target_ids);

/// Stage Ia / Ib / Ic: trains only the connector.
StageRecord run_mapping_substage(modelstack::StackHandle& stack, connector::Connector& connector, StageId stage,
                                 const StageConfig& config, const StageData& data);

/// Stage II: trains only the adapters; the connector stays frozen.
StageRecord run_specialization(modelstack::StackHandle& stack, connector::Connector& connector,
                               adapters::AdapterSet& adapters, const StageConfig& config, const StageData& data);

/// encode -> project -> assemble_augmented -> greedy decode -> detokenize.
std::string infer(modelstack::StackHandle& stack, connector::Connector& connector, adapters::AdapterSet* adapters,
                  std::string_view query, std::string_view language, int max_new_tokens = 40);

struct PlanInputs {
  connector::ConnectorSpec connector_spec;
  std::uint64_t connector_seed = 1;
  /// Starting connector for plans without a Stage-I sub-stage.
  std::optional<std::filesystem::path> connector_checkpoint;
  adapters::AdapterSpec adapter_spec;
  std::uint64_t adapter_seed = 1;
  std::map<StageId, StageConfig> configs;
  std::map<StageId, StageData> data;
  /// When set: checkpoints per stage plus stages.jsonl and plan.json.
  std::optional<std::filesystem::path> run_dir;
};

struct PlanResult {
  std::vector<StageRecord> records;
  std::optional<connector::Connector> connector;
  adapters::AdapterSet adapters;  // empty unless specialize ran
  nlohmann::json manifest;
};

/// Stages must appear in canonical order without repeats.
void validate_plan(const std::vector<StageId>& plan, bool have_connector_checkpoint);
PlanResult run_plan(modelstack::StackHandle& stack, const std::vector<StageId>& plan, PlanInputs& inputs);

}  // namespace merlin::curriculum
