#pragma once

#include "merlin/autograd.hpp"
#include "merlin/modelstack/stack.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace merlin::connector {

enum class Variant { linear, mlp1, mlp2, mlp3, residual_mlp };

/// How residual_mlp adds its skip path. `linear` is a separate weighted
/// d_enc -> d_llm map; `pad` zero-pads (or truncates) the input to d_llm and
/// has no parameters.
enum class SkipMode { linear, pad };

std::string to_string(Variant v);
Variant variant_from_string(const std::string& s);

struct ConnectorSpec {
  Variant variant = Variant::mlp2;
  int d_enc = 0;
  int d_llm = 0;
  int hidden = 2048;
  std::string activation = "gelu";
  bool bias = true;
  SkipMode skip = SkipMode::linear;
  /// Replace the reserved <sep> row with a trainable boundary vector.
  bool learned_sep = false;

  void validate() const;
  nlohmann::json to_json() const;
  static ConnectorSpec from_json(const nlohmann::json& j);
};

/// Exact trainable-parameter count of a connector built from `spec`.
std::int64_t param_count(const ConnectorSpec& spec);

/// Formats a count the way the mapping-head ablation table prints it,
/// e.g. 9446400 -> "9.45 M".
std::string display_millions(std::int64_t count);

/// The mapping head: row-wise MLP from encoder width to decoder width.
class Connector {
 public:
  Connector(ConnectorSpec spec, std::uint64_t seed);

  const ConnectorSpec& spec() const { return spec_; }

  /// (l, d_enc) -> (l, d_llm), applied independently to every row.
  ag::Var forward(ag::Tape& tape, ag::Var states);

  ParamRefs parameters();
  void set_trainable(bool on);
  std::string digest();
  /// The trainable boundary vector when `learned_sep` is set.
  Parameter* sep_vector() { return sep_ ? &*sep_ : nullptr; }

  /// Initializes the learned boundary from a decoder embedding row.
  void init_sep(const Matrix& row);

  void save(const std::filesystem::path& dir);
  static Connector load(const std::filesystem::path& dir);

 private:
  struct Dense {
    Parameter weight;
    std::optional<Parameter> bias;
  };
  ag::Var dense(ag::Tape& tape, Dense& d, ag::Var x);
  ag::Var activate(ag::Var x) const;

  ConnectorSpec spec_;
  std::vector<Dense> layers_;
  std::optional<Dense> skip_;
  std::optional<Parameter> sep_;
};

struct MappedPrefix {
  Matrix rows;  // (l, d_llm)
};

enum class Layout { prefix_only, augmented };

/// Offsets into an assembled sequence: [bos; X_f; sep; T(q)].
struct Boundaries {
  Index bos = 0;
  Index prefix_begin = 1;
  Index prefix_len = 0;
  Index sep = 0;
  Index query_begin = 0;
  Index query_len = 0;
};

struct AssembledInput {
  Matrix embeddings;
  Layout layout = Layout::prefix_only;
  Boundaries boundaries;
};

MappedPrefix project(Connector& connector, const modelstack::EncoderStates& states);

AssembledInput assemble_prefix(modelstack::StackHandle& stack, const MappedPrefix& prefix,
                               Connector* connector = nullptr);
AssembledInput assemble_augmented(modelstack::StackHandle& stack, const MappedPrefix& prefix,
                                  std::span<const int> query_ids, Connector* connector = nullptr);

/// Differentiable assembly used by training: `prefix` is a tape variable
/// (typically the connector output). An empty `query_ids` with
/// `layout == augmented` is rejected.
struct AssembledVar {
  ag::Var embeddings;
  Layout layout = Layout::prefix_only;
  Boundaries boundaries;
};
AssembledVar assemble(ag::Tape& tape, modelstack::StackHandle& stack, Connector* connector, ag::Var prefix,
                      Layout layout, std::span<const int> query_ids);

}  // namespace merlin::connector
