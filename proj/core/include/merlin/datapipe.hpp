#pragma once

#include "merlin/modelstack/stack.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace merlin::datapipe {

enum class PairKind { bitext, question_pair };

struct ParallelPair {
  std::string id;
  std::string source;     // target-language side
  std::string reference;  // English side
  std::string language;
  PairKind kind = PairKind::bitext;
};

/// Splits used in task files. `train` marks the undivided pool that
/// build_stage_corpora splits into stage_ic and stage_ii.
enum class Split { train, stage_ic, stage_ii, eval };
std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct TaskExample {
  std::string id;
  std::string question;
  std::string answer;
  std::string language;
  Split split = Split::train;
};

struct NliExample {
  std::string id;
  std::string premise;
  std::string hypothesis;
  std::string label;  // entailment | neutral | contradiction
  std::string language;
};

/// Whitespace collapse plus case fold; the key used by every collision check.
std::string normalize(std::string_view text);

// JSONL readers. Malformed lines raise DatasetSchemaError naming the file and
// the 1-based line number. Records without an "id" get "<stem>:<line>".
std::vector<ParallelPair> read_bitext(const std::filesystem::path& path);
std::vector<ParallelPair> read_question_pairs(const std::filesystem::path& path);
std::vector<TaskExample> read_tasks(const std::filesystem::path& path);
std::vector<NliExample> read_nli(const std::filesystem::path& path);

void write_pairs(const std::filesystem::path& path, const std::vector<ParallelPair>& pairs);
void write_tasks(const std::filesystem::path& path, const std::vector<TaskExample>& tasks);
void write_nli(const std::filesystem::path& path, const std::vector<NliExample>& items);

/// Kind of a JSONL file judged from its first record's keys.
enum class SchemaKind { bitext, question_pair, task, nli, unknown };
SchemaKind detect_schema(const std::filesystem::path& path);
std::string to_string(SchemaKind k);

// ---------------------------------------------------------------------------
// Synthetic cipher languages.

/// Invertible word-substitution cipher of English. Punctuation maps to itself.
class CipherLanguage {
 public:
  CipherLanguage() = default;
  CipherLanguage(std::string tag, std::map<std::string, std::string> table, bool reverse_order);

  const std::string& tag() const { return tag_; }
  bool reverse_order() const { return reverse_; }
  const std::map<std::string, std::string>& table() const { return table_; }

  std::string encipher(std::string_view english) const;
  std::string decipher(std::string_view text) const;
  /// Cipher word for an English word; the word itself when it is not in the table.
  std::string word(const std::string& english) const;

  nlohmann::json to_json() const;
  static CipherLanguage from_json(const nlohmann::json& j);

 private:
  std::string tag_;
  std::map<std::string, std::string> table_;
  std::map<std::string, std::string> inverse_;
  bool reverse_ = false;
};

/// Builds a table over `english_words` whose pseudo-words avoid every string in
/// `taken` (which is extended with the new words).
CipherLanguage make_cipher(const std::string& tag, const std::vector<std::string>& english_words, bool reverse_order,
                           std::uint64_t seed, std::set<std::string>& taken);

struct ToyCorpusConfig {
  std::vector<std::string> languages = {"xa", "xb"};
  /// Encoder alignment noise per language; a larger value plays a
  /// lower-resource language.
  std::map<std::string, double> noise = {{"en", 0.05}, {"xa", 0.15}, {"xb", 0.3}};
  bool reverse_order = false;
  int n_bitext = 3000;      // English sentences, each rendered in every language
  int n_questions = 1500;   // question pairs per language
  int n_tasks = 2000;       // task pool per language (split later into ic / ii)
  int n_eval = 200;         // held-out eval questions per language
  int n_nli = 300;          // NLI triples per language
  int n_pretrain_qa = 6000;  // English QA records for decoder pretraining
  int max_operand = 9;
  std::uint64_t seed = 1;

  nlohmann::json to_json() const;
  static ToyCorpusConfig from_json(const nlohmann::json& j);
};

struct ToyCorpus {
  ToyCorpusConfig config;
  std::vector<CipherLanguage> ciphers;
  std::vector<ParallelPair> bitext;
  std::vector<ParallelPair> question_pairs;
  std::vector<TaskExample> tasks;  // split = train
  std::vector<TaskExample> eval;   // split = eval
  std::vector<NliExample> nli;
  /// English-only text for decoder pretraining.
  std::vector<std::string> english_sentences;
  std::vector<std::pair<std::string, std::string>> english_qa;

  const CipherLanguage& cipher(const std::string& tag) const;
  /// Every string the toy tokenizer must know, English and cipher.
  std::vector<std::string> all_texts() const;
  /// Concept groups: each English word with its cipher translations.
  modelstack::ToyAlignment alignment() const;
};

ToyCorpus gen_toy_corpus(const ToyCorpusConfig& cfg);

/// English answer for the toy arithmetic templates, e.g. "2 plus 3 is 5 . The answer is 5 ."
std::string arithmetic_answer(int a, int b, bool plus);

/// Writes bitext.jsonl, questions.jsonl, tasks.jsonl, eval.jsonl, nli.jsonl,
/// english.jsonl and ciphers.json.
void write_toy_corpus(const ToyCorpus& corpus, const std::filesystem::path& dir);
ToyCorpus read_toy_corpus(const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Stage corpora.

struct Quotas {
  int map = 9000;
  int align = 3000;
  int augment = 3000;
  int specialize = 3000;

  nlohmann::json to_json() const;
  static Quotas from_json(const nlohmann::json& j);
};

struct RawSources {
  std::vector<ParallelPair> bitext;
  std::vector<ParallelPair> question_pairs;
  std::vector<TaskExample> tasks;
  std::map<std::string, std::string> digests;  // source name -> sha256
};

struct Shortfall {
  std::string stage;
  std::string language;
  int requested = 0;
  int available = 0;
};

struct CorpusManifest {
  std::uint64_t seed = 0;
  Quotas quotas;
  std::vector<std::string> languages;
  std::map<std::string, std::map<std::string, int>> counts;                       // stage -> lang -> n
  std::map<std::string, std::map<std::string, std::vector<std::string>>> ids;     // stage -> lang -> ids
  std::vector<Shortfall> shortfalls;
  bool ic_ii_disjoint = true;
  std::map<std::string, std::string> source_digests;
  std::map<std::string, std::string> output_digests;

  nlohmann::json to_json() const;
  static CorpusManifest from_json(const nlohmann::json& j);
};

struct StageCorpora {
  CorpusManifest manifest;
  std::vector<ParallelPair> map;
  std::vector<ParallelPair> align;
  std::vector<TaskExample> augment;
  std::vector<TaskExample> specialize;
};

/// Seeded sampling without replacement per language. Augment and specialize
/// are drawn disjointly (by normalized question) from the same task pool.
/// Shortfalls are recorded; with `strict` the first one throws QuotaShortfall.
StageCorpora build_stage_corpora(const RawSources& sources, const Quotas& quotas,
                                 const std::vector<std::string>& languages, std::uint64_t seed, bool strict = false);

/// Writes map.jsonl, align.jsonl, augment.jsonl, specialize.jsonl and
/// manifest.json (with output digests filled in).
void write_stage_corpora(StageCorpora& corpora, const std::filesystem::path& dir);

struct Collision {
  std::string pool;
  std::string pool_id;
  std::string eval_set;
  std::string eval_id;
  std::string text;
};

struct AuditReport {
  std::vector<Collision> collisions;
  /// Normalized questions present in both stage_ic and stage_ii.
  std::vector<std::string> ic_ii_overlap;
  bool ok() const { return collisions.empty() && ic_ii_overlap.empty(); }
  nlohmann::json to_json() const;
};

struct EvalSet {
  std::string name;
  std::vector<TaskExample> items;
};

AuditReport audit_leakage(const StageCorpora& corpora, const std::vector<EvalSet>& eval_sets);

}  // namespace merlin::datapipe
