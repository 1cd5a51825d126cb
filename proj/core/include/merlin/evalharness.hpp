#pragma once

#include "merlin/adapters.hpp"
#include "merlin/connector.hpp"
#include "merlin/modelstack/stack.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace merlin::evalharness {

struct PromptTemplate {
  std::string name;
  std::string text;  // slots written as {name}

  /// gemma_math, metamath_math or nli.
  static PromptTemplate builtin(const std::string& name);
  /// Slot names in order of first appearance.
  std::vector<std::string> slots() const;
};

/// Substitutes every slot. A missing slot raises TemplateError; an empty
/// value is substituted as is.
std::string render_prompt(const PromptTemplate& tmpl, const std::map<std::string, std::string>& instance);

/// Exact decimal number: sign, integer digits and fraction digits with no
/// redundant zeros, so that equality is numeric equality.
struct Decimal {
  bool negative = false;
  std::string integer = "0";
  std::string fraction;

  static Decimal parse(std::string_view literal);
  std::string to_string() const;
  double to_double() const;
  bool operator==(const Decimal&) const = default;
};

/// Last numeral of the text; digit-group commas and trailing punctuation are
/// dropped. std::nullopt when the text holds no digit.
std::optional<Decimal> extract_math_answer(std::string_view generated);

/// First case-insensitive occurrence of entailment / neutral / contradiction.
std::optional<std::string> extract_nli_label(std::string_view generated);

enum class Metric { exact_match, accuracy };
std::string to_string(Metric m);
Metric metric_from_string(const std::string& s);

struct Prediction {
  std::string id;
  std::string language;
  std::string prompt;
  std::string generated;
};

struct Gold {
  std::string id;
  std::string language;
  std::string answer;  // numeral (exact_match) or label (accuracy)
};

struct ItemRecord {
  std::string id;
  std::string language;
  std::string prompt;
  std::string generated;
  std::optional<std::string> extracted;
  std::string gold;
  bool correct = false;

  nlohmann::json to_json() const;
  static ItemRecord from_json(const nlohmann::json& j);
};

struct LanguageScore {
  int n = 0;
  int correct = 0;
  double score = 0.0;
};

/// Group name -> member languages.
using LanguageGroups = std::map<std::string, std::vector<std::string>>;

struct EvalReport {
  Metric metric = Metric::exact_match;
  std::map<std::string, LanguageScore> languages;
  /// Group means, plus "Avg" over every language.
  std::map<std::string, double> groups;
  /// Baseline name -> (language or group -> this minus baseline).
  std::map<std::string, std::map<std::string, double>> deltas;
  std::vector<ItemRecord> items;

  nlohmann::json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
  /// Aligned columns: one row of scores (in percent) plus one row per delta.
  std::string table(const std::string& row_label) const;
};

/// Items are matched by position; ids and languages must agree.
EvalReport score(const std::vector<Prediction>& predictions, const std::vector<Gold>& golds, Metric metric,
                 const LanguageGroups& groups = {});
/// Recomputes scores and group means from persisted per-item records.
EvalReport rescore(const std::vector<ItemRecord>& items, Metric metric, const LanguageGroups& groups = {});
void add_delta(EvalReport& report, const EvalReport& baseline, const std::string& baseline_name);

void write_predictions(const std::filesystem::path& path, const std::vector<ItemRecord>& items);
std::vector<ItemRecord> read_predictions(const std::filesystem::path& path);

struct EvalItem {
  std::string id;
  std::string language;
  std::string query;  // encoder input
  std::string gold;
  /// Template slots; when empty the template is rendered with {query}.
  std::map<std::string, std::string> slots;
};

/// Runs the stacked pipeline on every item. With a template, the rendered
/// prompt (slot "query") replaces the raw query as the decoder-side text;
/// the encoder always reads the raw query.
std::vector<Prediction> generate_predictions(modelstack::StackHandle& stack, connector::Connector& connector,
                                             adapters::AdapterSet* adapters, const std::vector<EvalItem>& items,
                                             const PromptTemplate* tmpl = nullptr, int max_new_tokens = 40);

}  // namespace merlin::evalharness
