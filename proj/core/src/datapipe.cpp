#include "merlin/datapipe.hpp"

#include "merlin/error.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <random>
#include <sstream>
#include <unordered_set>

namespace merlin::datapipe {

using nlohmann::json;

std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::stage_ic: return "stage_ic";
    case Split::stage_ii: return "stage_ii";
    case Split::eval: return "eval";
  }
  return "?";
}

Split split_from_string(const std::string& s) {
  for (Split v : {Split::train, Split::stage_ic, Split::stage_ii, Split::eval})
    if (to_string(v) == s) return v;
  throw DatasetSchemaError("unknown split '" + s + "'");
}

std::string to_string(SchemaKind k) {
  switch (k) {
    case SchemaKind::bitext: return "bitext";
    case SchemaKind::question_pair: return "question_pair";
    case SchemaKind::task: return "task";
    case SchemaKind::nli: return "nli";
    case SchemaKind::unknown: return "unknown";
  }
  return "?";
}

std::string normalize(std::string_view text) {
  std::string out;
  bool space = false;
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      space = !out.empty();
      continue;
    }
    if (space) out.push_back(' ');
    space = false;
    out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSONL

namespace {

template <typename F>
void for_each_record(const std::filesystem::path& path, F&& f) {
  std::ifstream in(path);
  if (!in) throw MissingArtifact("cannot open " + path.string());
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw DatasetSchemaError(path.string() + ":" + std::to_string(lineno) + ": invalid JSON (" + e.what() + ")");
    }
    if (!j.is_object()) throw DatasetSchemaError(path.string() + ":" + std::to_string(lineno) + ": record is not an object");
    f(j, lineno);
  }
}

std::string field(const json& j, const char* key, const std::filesystem::path& path, int lineno, bool allow_empty = false) {
  auto it = j.find(key);
  if (it == j.end() || !it->is_string())
    throw DatasetSchemaError(path.string() + ":" + std::to_string(lineno) + ": missing string field \"" + key + "\"");
  std::string v = it->get<std::string>();
  if (!allow_empty && v.empty())
    throw DatasetSchemaError(path.string() + ":" + std::to_string(lineno) + ": field \"" + key + "\" is empty");
  return v;
}

std::string record_id(const json& j, const std::filesystem::path& path, int lineno) {
  auto it = j.find("id");
  if (it != j.end() && it->is_string()) return it->get<std::string>();
  return path.stem().string() + ":" + std::to_string(lineno);
}

std::vector<ParallelPair> read_pairs(const std::filesystem::path& path, PairKind kind) {
  const char* src = kind == PairKind::bitext ? "src" : "q_src";
  const char* ref = kind == PairKind::bitext ? "ref" : "q_ref";
  std::vector<ParallelPair> out;
  for_each_record(path, [&](const json& j, int n) {
    out.push_back({record_id(j, path, n), field(j, src, path, n), field(j, ref, path, n), field(j, "lang", path, n), kind});
  });
  return out;
}

void write_lines(const std::filesystem::path& path, const std::vector<json>& rows) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw InvalidInput("cannot write " + path.string());
  for (const json& r : rows) out << r.dump() << '\n';
}

}  // namespace

std::vector<ParallelPair> read_bitext(const std::filesystem::path& path) { return read_pairs(path, PairKind::bitext); }

std::vector<ParallelPair> read_question_pairs(const std::filesystem::path& path) {
  return read_pairs(path, PairKind::question_pair);
}

std::vector<TaskExample> read_tasks(const std::filesystem::path& path) {
  std::vector<TaskExample> out;
  for_each_record(path, [&](const json& j, int n) {
    TaskExample t{record_id(j, path, n), field(j, "q", path, n), field(j, "a", path, n), field(j, "lang", path, n),
                  Split::train};
    try {
      t.split = split_from_string(field(j, "split", path, n));
    } catch (const DatasetSchemaError& e) {
      throw DatasetSchemaError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
    out.push_back(std::move(t));
  });
  return out;
}

std::vector<NliExample> read_nli(const std::filesystem::path& path) {
  std::vector<NliExample> out;
  for_each_record(path, [&](const json& j, int n) {
    NliExample e{record_id(j, path, n), field(j, "premise", path, n), field(j, "hypothesis", path, n),
                 field(j, "label", path, n), field(j, "lang", path, n)};
    if (e.label != "entailment" && e.label != "neutral" && e.label != "contradiction")
      throw DatasetSchemaError(path.string() + ":" + std::to_string(n) + ": unknown label '" + e.label + "'");
    out.push_back(std::move(e));
  });
  return out;
}

void write_pairs(const std::filesystem::path& path, const std::vector<ParallelPair>& pairs) {
  std::vector<json> rows;
  for (const auto& p : pairs) {
    if (p.kind == PairKind::bitext)
      rows.push_back({{"id", p.id}, {"src", p.source}, {"ref", p.reference}, {"lang", p.language}});
    else
      rows.push_back({{"id", p.id}, {"q_src", p.source}, {"q_ref", p.reference}, {"lang", p.language}});
  }
  write_lines(path, rows);
}

void write_tasks(const std::filesystem::path& path, const std::vector<TaskExample>& tasks) {
  std::vector<json> rows;
  for (const auto& t : tasks)
    rows.push_back({{"id", t.id}, {"q", t.question}, {"a", t.answer}, {"lang", t.language}, {"split", to_string(t.split)}});
  write_lines(path, rows);
}

void write_nli(const std::filesystem::path& path, const std::vector<NliExample>& items) {
  std::vector<json> rows;
  for (const auto& e : items)
    rows.push_back({{"id", e.id},
                    {"premise", e.premise},
                    {"hypothesis", e.hypothesis},
                    {"label", e.label},
                    {"lang", e.language}});
  write_lines(path, rows);
}

SchemaKind detect_schema(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifact("cannot open " + path.string());
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error&) {
      return SchemaKind::unknown;
    }
    if (j.contains("src") && j.contains("ref")) return SchemaKind::bitext;
    if (j.contains("q_src") && j.contains("q_ref")) return SchemaKind::question_pair;
    if (j.contains("q") && j.contains("a")) return SchemaKind::task;
    if (j.contains("premise") && j.contains("hypothesis")) return SchemaKind::nli;
    return SchemaKind::unknown;
  }
  return SchemaKind::unknown;
}

// ---------------------------------------------------------------------------
// Cipher languages

namespace {

bool is_punct_token(const std::string& w) {
  return w.size() == 1 && std::ispunct(static_cast<unsigned char>(w[0]));
}

std::string join(const std::vector<std::string>& words) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out.push_back(' ');
    out += w;
  }
  return out;
}

// Reverses word order while keeping sentence-final punctuation in place,
// per sentence.
std::vector<std::string> reverse_sentences(const std::vector<std::string>& words) {
  std::vector<std::string> out;
  std::vector<std::string> cur;
  for (const auto& w : words) {
    if (w == "." || w == "?" || w == "!") {
      out.insert(out.end(), cur.rbegin(), cur.rend());
      out.push_back(w);
      cur.clear();
    } else {
      cur.push_back(w);
    }
  }
  out.insert(out.end(), cur.rbegin(), cur.rend());
  return out;
}

}  // namespace

CipherLanguage::CipherLanguage(std::string tag, std::map<std::string, std::string> table, bool reverse_order)
    : tag_(std::move(tag)), table_(std::move(table)), reverse_(reverse_order) {
  for (const auto& [en, c] : table_) {
    if (!inverse_.emplace(c, en).second) throw InvalidInput("cipher " + tag_ + ": table is not invertible at '" + c + "'");
  }
}

std::string CipherLanguage::word(const std::string& english) const {
  auto it = table_.find(english);
  return it == table_.end() ? english : it->second;
}

std::string CipherLanguage::encipher(std::string_view english) const {
  std::vector<std::string> words;
  for (const auto& w : modelstack::Tokenizer::split_words(english)) words.push_back(word(w));
  return join(reverse_ ? reverse_sentences(words) : words);
}

std::string CipherLanguage::decipher(std::string_view text) const {
  std::vector<std::string> words;
  for (const auto& w : modelstack::Tokenizer::split_words(text)) {
    auto it = inverse_.find(w);
    words.push_back(it == inverse_.end() ? w : it->second);
  }
  return join(reverse_ ? reverse_sentences(words) : words);
}

json CipherLanguage::to_json() const { return {{"tag", tag_}, {"reverse_order", reverse_}, {"table", table_}}; }

CipherLanguage CipherLanguage::from_json(const json& j) {
  return CipherLanguage(j.at("tag").get<std::string>(), j.at("table").get<std::map<std::string, std::string>>(),
                        j.value("reverse_order", false));
}

CipherLanguage make_cipher(const std::string& tag, const std::vector<std::string>& english_words, bool reverse_order,
                           std::uint64_t seed, std::set<std::string>& taken) {
  std::vector<std::uint32_t> seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)};
  for (char c : tag) seq.push_back(static_cast<unsigned char>(c));
  std::seed_seq ss(seq.begin(), seq.end());
  std::mt19937_64 rng(ss);
  static constexpr std::string_view kCons = "bdfgklmnprstvz";
  static constexpr std::string_view kVow = "aeiou";
  std::uniform_int_distribution<std::size_t> pc(0, kCons.size() - 1), pv(0, kVow.size() - 1);
  std::uniform_int_distribution<int> coin(0, 1);
  std::vector<std::string> sorted = english_words;
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  std::map<std::string, std::string> table;
  for (const auto& w : sorted) {
    if (is_punct_token(w)) continue;
    std::string c;
    do {
      c.clear();
      const int syll = 2 + coin(rng);
      for (int s = 0; s < syll; ++s) {
        c.push_back(kCons[pc(rng)]);
        c.push_back(kVow[pv(rng)]);
      }
      if (coin(rng)) c.push_back(kCons[pc(rng)]);
    } while (taken.count(c) > 0);
    taken.insert(c);
    table.emplace(w, c);
  }
  return CipherLanguage(tag, std::move(table), reverse_order);
}

// ---------------------------------------------------------------------------
// Toy corpus

json ToyCorpusConfig::to_json() const {
  return {{"languages", languages},     {"noise", noise},       {"reverse_order", reverse_order},
          {"n_bitext", n_bitext},       {"n_questions", n_questions}, {"n_tasks", n_tasks},
          {"n_eval", n_eval},           {"n_nli", n_nli},       {"n_pretrain_qa", n_pretrain_qa},
          {"max_operand", max_operand}, {"seed", seed}};
}

ToyCorpusConfig ToyCorpusConfig::from_json(const json& j) {
  ToyCorpusConfig c;
  if (j.contains("languages")) c.languages = j.at("languages").get<std::vector<std::string>>();
  if (j.contains("noise")) c.noise = j.at("noise").get<std::map<std::string, double>>();
  c.reverse_order = j.value("reverse_order", c.reverse_order);
  c.n_bitext = j.value("n_bitext", c.n_bitext);
  c.n_questions = j.value("n_questions", c.n_questions);
  c.n_tasks = j.value("n_tasks", c.n_tasks);
  c.n_eval = j.value("n_eval", c.n_eval);
  c.n_nli = j.value("n_nli", c.n_nli);
  c.n_pretrain_qa = j.value("n_pretrain_qa", c.n_pretrain_qa);
  c.max_operand = j.value("max_operand", c.max_operand);
  c.seed = j.value("seed", c.seed);
  if (c.languages.empty()) throw InvalidInput("toy corpus needs at least one synthetic language");
  if (c.max_operand < 1) throw InvalidInput("toy corpus: max_operand must be >= 1");
  return c;
}

std::string arithmetic_answer(int a, int b, bool plus) {
  const int c = plus ? a + b : a - b;
  std::ostringstream s;
  s << a << (plus ? " plus " : " minus ") << b << " is " << c << " . The answer is " << c << " .";
  return s.str();
}

namespace {

constexpr std::array<std::string_view, 8> kNames = {"tom", "ann", "sam", "mia", "bob", "eva", "joe", "lily"};
constexpr std::array<std::string_view, 8> kObjects = {"apples", "books", "coins", "cards",
                                                      "pens",   "cups",  "balls", "stamps"};
constexpr std::array<std::string_view, 6> kPlaces = {"park", "school", "market", "house", "garden", "shop"};
constexpr std::array<std::string_view, 6> kAdjectives = {"red", "big", "old", "small", "green", "new"};
constexpr std::array<std::string_view, 6> kVerbs = {"saw", "found", "bought", "sold", "liked", "kept"};

class Generator {
 public:
  Generator(std::uint64_t seed, int max_operand) : rng_(seed), max_(max_operand) {}

  template <std::size_t N>
  std::string pick(const std::array<std::string_view, N>& a) {
    return std::string(a[std::uniform_int_distribution<std::size_t>(0, N - 1)(rng_)]);
  }
  int operand() { return std::uniform_int_distribution<int>(1, max_)(rng_); }
  int number() { return std::uniform_int_distribution<int>(0, 2 * max_)(rng_); }

  std::string sentence() {
    const std::string name = pick(kNames);
    std::string other = pick(kNames);
    while (other == name) other = pick(kNames);
    switch (std::uniform_int_distribution<int>(0, 11)(rng_)) {
      case 0:
        return name + " " + pick(kVerbs) + " " + std::to_string(number()) + " " + pick(kAdjectives) + " " +
               pick(kObjects) + " in the " + pick(kPlaces) + " .";
      case 1: return name + " went to the " + pick(kPlaces) + " with " + other + " .";
      case 2: return "the " + pick(kObjects) + " in the " + pick(kPlaces) + " are " + pick(kAdjectives) + " .";
      case 3: return name + " and " + other + " " + pick(kVerbs) + " the " + pick(kAdjectives) + " " + pick(kObjects) + " .";
      case 4: return "there are " + std::to_string(number()) + " " + pick(kObjects) + " at the " + pick(kPlaces) + " .";
      case 5:
        return name + " has " + std::to_string(number()) + " " + pick(kObjects) + " and " + other + " has " +
               std::to_string(number()) + " .";
      case 6: return name + " gets " + std::to_string(number()) + " more " + pick(kObjects) + " at the " + pick(kPlaces) + " .";
      case 7: return name + " gives away " + std::to_string(number()) + " " + pick(kAdjectives) + " " + pick(kObjects) + " .";
      case 8: return "how many " + pick(kObjects) + " does " + name + " have at the " + pick(kPlaces) + " ?";
      case 9: return "how many " + pick(kAdjectives) + " " + pick(kObjects) + " are left in the " + pick(kPlaces) + " ?";
      case 10: return "what do they have now in the " + pick(kPlaces) + " ?";
      default:
        return "what is the " + pick(kAdjectives) + " " + pick(kObjects) + " plus the " + pick(kObjects) + " minus " +
               std::to_string(number()) + " ?";
    }
  }

  /// English question and answer. `word_only` skips the bare arithmetic
  /// templates, whose small number of variants makes them unfit for held-out
  /// evaluation.
  std::pair<std::string, std::string> question(bool word_only = false) {
    const std::string name = pick(kNames);
    std::string other = pick(kNames);
    while (other == name) other = pick(kNames);
    const std::string obj = pick(kObjects);
    int a = operand(), b = operand();
    const int kind = std::uniform_int_distribution<int>(word_only ? 25 : 0, 99)(rng_);
    if (kind < 15) return {"what is " + std::to_string(a) + " plus " + std::to_string(b) + " ?", arithmetic_answer(a, b, true)};
    if (kind < 25) {
      if (a < b) std::swap(a, b);
      return {"what is " + std::to_string(a) + " minus " + std::to_string(b) + " ?", arithmetic_answer(a, b, false)};
    }
    if (kind < 55)
      return {name + " has " + std::to_string(a) + " " + obj + " . " + name + " gets " + std::to_string(b) +
                  " more . how many " + obj + " does " + name + " have now ?",
              arithmetic_answer(a, b, true)};
    if (kind < 75) {
      if (a < b) std::swap(a, b);
      return {name + " has " + std::to_string(a) + " " + obj + " . " + name + " gives away " + std::to_string(b) +
                  " . how many " + obj + " are left ?",
              arithmetic_answer(a, b, false)};
    }
    return {name + " has " + std::to_string(a) + " " + obj + " and " + other + " has " + std::to_string(b) + " " + obj +
                " . how many " + obj + " do they have ?",
            arithmetic_answer(a, b, true)};
  }

  NliExample nli() {
    const std::string name = pick(kNames);
    std::string other = pick(kNames);
    while (other == name) other = pick(kNames);
    const std::string obj = pick(kObjects);
    const int n = number();
    int m = number();
    while (m == n) m = number();
    NliExample e;
    e.premise = name + " has " + std::to_string(n) + " " + obj + " at the " + pick(kPlaces) + " .";
    switch (std::uniform_int_distribution<int>(0, 2)(rng_)) {
      case 0:
        e.hypothesis = name + " has " + std::to_string(n) + " " + obj + " .";
        e.label = "entailment";
        break;
      case 1:
        e.hypothesis = name + " has " + std::to_string(m) + " " + obj + " .";
        e.label = "contradiction";
        break;
      default:
        e.hypothesis = other + " has " + std::to_string(n) + " " + obj + " .";
        e.label = "neutral";
        break;
    }
    return e;
  }

  std::mt19937_64& rng() { return rng_; }

 private:
  std::mt19937_64 rng_;
  int max_;
};

// Draws up to `n` questions whose normalized text is not in `banned`, unique
// among themselves. Gives up after a bounded number of attempts.
std::vector<std::pair<std::string, std::string>> unique_questions(Generator& g, int n,
                                                                  const std::unordered_set<std::string>& banned,
                                                                  bool word_only = false) {
  std::vector<std::pair<std::string, std::string>> out;
  std::unordered_set<std::string> seen;
  const long max_attempts = 50L * n + 1000;
  for (long attempt = 0; attempt < max_attempts && static_cast<int>(out.size()) < n; ++attempt) {
    auto qa = g.question(word_only);
    const std::string key = normalize(qa.first);
    if (banned.count(key) || !seen.insert(key).second) continue;
    out.push_back(std::move(qa));
  }
  return out;
}

}  // namespace

const CipherLanguage& ToyCorpus::cipher(const std::string& tag) const {
  for (const auto& c : ciphers)
    if (c.tag() == tag) return c;
  throw UnknownLanguage("no synthetic language '" + tag + "'");
}

std::vector<std::string> ToyCorpus::all_texts() const {
  std::vector<std::string> out;
  for (const auto& s : english_sentences) out.push_back(s);
  for (const auto& [q, a] : english_qa) {
    out.push_back(q);
    out.push_back(a);
  }
  for (const auto& p : bitext) {
    out.push_back(p.reference);
    out.push_back(p.source);
  }
  for (const auto& p : question_pairs) {
    out.push_back(p.reference);
    out.push_back(p.source);
  }
  for (const auto& t : tasks) {
    out.push_back(t.question);
    out.push_back(t.answer);
  }
  for (const auto& t : eval) {
    out.push_back(t.question);
    out.push_back(t.answer);
  }
  for (const auto& e : nli) {
    out.push_back(e.premise);
    out.push_back(e.hypothesis);
    out.push_back(e.label);
  }
  for (const auto& c : ciphers)
    for (const auto& [en, w] : c.table()) {
      out.push_back(en);
      out.push_back(w);
    }
  return out;
}

modelstack::ToyAlignment ToyCorpus::alignment() const {
  modelstack::ToyAlignment a;
  a.noise_by_language = config.noise;
  auto en = config.noise.find("en");
  a.default_noise = en == config.noise.end() ? 0.0 : en->second;
  if (ciphers.empty()) return a;
  for (const auto& [word, unused] : ciphers.front().table()) {
    std::vector<modelstack::ToyAlignment::Member> g{{word, "en"}};
    for (const auto& c : ciphers) g.push_back({c.word(word), c.tag()});
    a.groups.push_back(std::move(g));
  }
  return a;
}

ToyCorpus gen_toy_corpus(const ToyCorpusConfig& cfg) {
  if (cfg.languages.empty()) throw InvalidInput("gen_toy_corpus: n_synth must be >= 1");
  ToyCorpus c;
  c.config = cfg;
  Generator g(cfg.seed, cfg.max_operand);

  // Held-out eval questions first; nothing used for training may repeat them.
  const auto eval_qa = unique_questions(g, cfg.n_eval, {}, true);
  std::unordered_set<std::string> banned;
  for (const auto& [q, a] : eval_qa) banned.insert(normalize(q));

  for (int i = 0; i < cfg.n_bitext; ++i) c.english_sentences.push_back(g.sentence());
  std::map<std::string, std::vector<std::pair<std::string, std::string>>> questions, tasks;
  for (const auto& lang : cfg.languages) {
    questions[lang] = unique_questions(g, cfg.n_questions, banned);
    tasks[lang] = unique_questions(g, cfg.n_tasks, banned);
  }
  std::map<std::string, std::vector<NliExample>> nli;
  for (const auto& lang : cfg.languages)
    for (int i = 0; i < cfg.n_nli; ++i) nli[lang].push_back(g.nli());
  c.english_qa = unique_questions(g, cfg.n_pretrain_qa, banned);

  // Cipher tables cover every English word that appears anywhere.
  std::set<std::string> words;
  auto add_words = [&](const std::string& s) {
    for (auto& w : modelstack::Tokenizer::split_words(s)) words.insert(w);
  };
  for (const auto& s : c.english_sentences) add_words(s);
  for (const auto& [q, a] : eval_qa) add_words(q);
  for (const auto& [lang, v] : questions)
    for (const auto& [q, a] : v) add_words(q);
  for (const auto& [lang, v] : tasks)
    for (const auto& [q, a] : v) add_words(q);
  for (const auto& [lang, v] : nli)
    for (const auto& e : v) {
      add_words(e.premise);
      add_words(e.hypothesis);
    }
  for (int n = 0; n <= 2 * cfg.max_operand; ++n) words.insert(std::to_string(n));
  std::set<std::string> taken = words;
  const std::vector<std::string> word_list(words.begin(), words.end());
  for (const auto& lang : cfg.languages) c.ciphers.push_back(make_cipher(lang, word_list, cfg.reverse_order, cfg.seed, taken));

  for (const auto& ci : c.ciphers) {
    const std::string& lang = ci.tag();
    for (std::size_t i = 0; i < c.english_sentences.size(); ++i)
      c.bitext.push_back({"bitext:" + lang + ":" + std::to_string(i), ci.encipher(c.english_sentences[i]),
                          c.english_sentences[i], lang, PairKind::bitext});
    const auto& qs = questions[lang];
    for (std::size_t i = 0; i < qs.size(); ++i)
      c.question_pairs.push_back({"question:" + lang + ":" + std::to_string(i), ci.encipher(qs[i].first), qs[i].first,
                                  lang, PairKind::question_pair});
    const auto& ts = tasks[lang];
    for (std::size_t i = 0; i < ts.size(); ++i)
      c.tasks.push_back({"task:" + lang + ":" + std::to_string(i), ci.encipher(ts[i].first), ts[i].second, lang,
                         Split::train});
    for (std::size_t i = 0; i < eval_qa.size(); ++i)
      c.eval.push_back({"eval:" + lang + ":" + std::to_string(i), ci.encipher(eval_qa[i].first), eval_qa[i].second, lang,
                        Split::eval});
    const auto& ns = nli[lang];
    for (std::size_t i = 0; i < ns.size(); ++i) {
      NliExample e = ns[i];
      e.id = "nli:" + lang + ":" + std::to_string(i);
      e.premise = ci.encipher(e.premise);
      e.hypothesis = ci.encipher(e.hypothesis);
      e.language = lang;
      c.nli.push_back(std::move(e));
    }
  }
  return c;
}

void write_toy_corpus(const ToyCorpus& c, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_pairs(dir / "bitext.jsonl", c.bitext);
  write_pairs(dir / "questions.jsonl", c.question_pairs);
  write_tasks(dir / "tasks.jsonl", c.tasks);
  write_tasks(dir / "eval.jsonl", c.eval);
  write_nli(dir / "nli.jsonl", c.nli);
  std::vector<json> english;
  for (const auto& s : c.english_sentences) english.push_back({{"kind", "sentence"}, {"text", s}});
  for (const auto& [q, a] : c.english_qa) english.push_back({{"kind", "qa"}, {"q", q}, {"a", a}});
  write_lines(dir / "english.jsonl", english);
  json ciphers = json::array();
  for (const auto& ci : c.ciphers) ciphers.push_back(ci.to_json());
  std::ofstream out(dir / "ciphers.json");
  out << json{{"config", c.config.to_json()}, {"ciphers", ciphers}}.dump(1) << '\n';
}

ToyCorpus read_toy_corpus(const std::filesystem::path& dir) {
  std::ifstream in(dir / "ciphers.json");
  if (!in) throw MissingArtifact("no toy corpus at " + dir.string());
  const json j = json::parse(in);
  ToyCorpus c;
  c.config = ToyCorpusConfig::from_json(j.at("config"));
  for (const auto& cj : j.at("ciphers")) c.ciphers.push_back(CipherLanguage::from_json(cj));
  c.bitext = read_bitext(dir / "bitext.jsonl");
  c.question_pairs = read_question_pairs(dir / "questions.jsonl");
  c.tasks = read_tasks(dir / "tasks.jsonl");
  c.eval = read_tasks(dir / "eval.jsonl");
  c.nli = read_nli(dir / "nli.jsonl");
  for_each_record(dir / "english.jsonl", [&](const json& r, int n) {
    const std::string kind = field(r, "kind", dir / "english.jsonl", n);
    if (kind == "sentence")
      c.english_sentences.push_back(field(r, "text", dir / "english.jsonl", n));
    else
      c.english_qa.emplace_back(field(r, "q", dir / "english.jsonl", n), field(r, "a", dir / "english.jsonl", n));
  });
  return c;
}

// ---------------------------------------------------------------------------
// Stage corpora

json Quotas::to_json() const { return {{"map", map}, {"align", align}, {"augment", augment}, {"specialize", specialize}}; }

Quotas Quotas::from_json(const json& j) {
  Quotas q;
  q.map = j.value("map", q.map);
  q.align = j.value("align", q.align);
  q.augment = j.value("augment", q.augment);
  q.specialize = j.value("specialize", q.specialize);
  if (q.map < 1 || q.align < 1 || q.augment < 1 || q.specialize < 1) throw InvalidInput("quotas must be >= 1");
  return q;
}

json CorpusManifest::to_json() const {
  json sf = json::array();
  for (const auto& s : shortfalls)
    sf.push_back({{"stage", s.stage}, {"lang", s.language}, {"requested", s.requested}, {"available", s.available}});
  return {{"seed", seed},
          {"quotas", quotas.to_json()},
          {"languages", languages},
          {"counts", counts},
          {"ids", ids},
          {"shortfalls", sf},
          {"ic_ii_disjoint", ic_ii_disjoint},
          {"sources", source_digests},
          {"outputs", output_digests}};
}

CorpusManifest CorpusManifest::from_json(const json& j) {
  CorpusManifest m;
  m.seed = j.at("seed").get<std::uint64_t>();
  m.quotas = Quotas::from_json(j.at("quotas"));
  m.languages = j.at("languages").get<std::vector<std::string>>();
  m.counts = j.at("counts").get<decltype(m.counts)>();
  m.ids = j.at("ids").get<decltype(m.ids)>();
  for (const auto& s : j.at("shortfalls"))
    m.shortfalls.push_back({s.at("stage").get<std::string>(), s.at("lang").get<std::string>(), s.at("requested").get<int>(),
                            s.at("available").get<int>()});
  m.ic_ii_disjoint = j.at("ic_ii_disjoint").get<bool>();
  m.source_digests = j.value("sources", std::map<std::string, std::string>{});
  m.output_digests = j.value("outputs", std::map<std::string, std::string>{});
  return m;
}

namespace {

std::mt19937_64 stage_rng(std::uint64_t seed, const std::string& stage, const std::string& lang) {
  std::vector<std::uint32_t> seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)};
  for (char c : stage + "/" + lang) seq.push_back(static_cast<unsigned char>(c));
  std::seed_seq ss(seq.begin(), seq.end());
  return std::mt19937_64(ss);
}

template <typename T>
std::vector<std::size_t> sample_indices(const std::vector<T>& items, const std::string& lang, std::mt19937_64& rng) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < items.size(); ++i)
    if (items[i].language == lang) idx.push_back(i);
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

}  // namespace

StageCorpora build_stage_corpora(const RawSources& src, const Quotas& quotas, const std::vector<std::string>& languages,
                                 std::uint64_t seed, bool strict) {
  if (languages.empty()) throw InvalidInput("build_stage_corpora: no languages");
  if (quotas.map < 1 || quotas.align < 1 || quotas.augment < 1 || quotas.specialize < 1)
    throw InvalidInput("build_stage_corpora: quotas must be >= 1");
  StageCorpora out;
  CorpusManifest& m = out.manifest;
  m.seed = seed;
  m.quotas = quotas;
  m.languages = languages;
  m.source_digests = src.digests;

  auto shortfall = [&](const std::string& stage, const std::string& lang, int requested, int available) {
    if (strict)
      throw QuotaShortfall(stage + "/" + lang + ": requested " + std::to_string(requested) + ", only " +
                           std::to_string(available) + " available");
    m.shortfalls.push_back({stage, lang, requested, available});
  };

  for (const auto& lang : languages) {
    {
      auto rng = stage_rng(seed, "map", lang);
      auto idx = sample_indices(src.bitext, lang, rng);
      if (static_cast<int>(idx.size()) < quotas.map) shortfall("map", lang, quotas.map, static_cast<int>(idx.size()));
      idx.resize(std::min<std::size_t>(idx.size(), static_cast<std::size_t>(quotas.map)));
      for (std::size_t i : idx) {
        out.map.push_back(src.bitext[i]);
        m.ids["map"][lang].push_back(src.bitext[i].id);
      }
      m.counts["map"][lang] = static_cast<int>(idx.size());
    }
    {
      auto rng = stage_rng(seed, "align", lang);
      auto idx = sample_indices(src.question_pairs, lang, rng);
      if (static_cast<int>(idx.size()) < quotas.align)
        shortfall("align", lang, quotas.align, static_cast<int>(idx.size()));
      idx.resize(std::min<std::size_t>(idx.size(), static_cast<std::size_t>(quotas.align)));
      for (std::size_t i : idx) {
        out.align.push_back(src.question_pairs[i]);
        m.ids["align"][lang].push_back(src.question_pairs[i].id);
      }
      m.counts["align"][lang] = static_cast<int>(idx.size());
    }
    {
      // One shuffled, de-duplicated pool feeds both task stages.
      auto rng = stage_rng(seed, "task", lang);
      std::vector<std::size_t> pool;
      std::unordered_set<std::string> seen;
      for (std::size_t i = 0; i < src.tasks.size(); ++i) {
        const TaskExample& t = src.tasks[i];
        if (t.language != lang || t.split == Split::eval) continue;
        if (seen.insert(normalize(t.question)).second) pool.push_back(i);
      }
      std::shuffle(pool.begin(), pool.end(), rng);
      const int avail = static_cast<int>(pool.size());
      const int n_ic = std::min(avail, quotas.augment);
      const int n_ii = std::min(avail - n_ic, quotas.specialize);
      if (n_ic < quotas.augment) shortfall("augment", lang, quotas.augment, n_ic);
      if (n_ii < quotas.specialize) shortfall("specialize", lang, quotas.specialize, n_ii);
      for (int k = 0; k < n_ic + n_ii; ++k) {
        TaskExample t = src.tasks[pool[static_cast<std::size_t>(k)]];
        const bool ic = k < n_ic;
        t.split = ic ? Split::stage_ic : Split::stage_ii;
        m.ids[ic ? "augment" : "specialize"][lang].push_back(t.id);
        (ic ? out.augment : out.specialize).push_back(std::move(t));
      }
      m.counts["augment"][lang] = n_ic;
      m.counts["specialize"][lang] = n_ii;
    }
  }
  std::unordered_set<std::string> ic;
  for (const auto& t : out.augment) ic.insert(normalize(t.question));
  for (const auto& t : out.specialize)
    if (ic.count(normalize(t.question))) m.ic_ii_disjoint = false;
  return out;
}

void write_stage_corpora(StageCorpora& c, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_pairs(dir / "map.jsonl", c.map);
  write_pairs(dir / "align.jsonl", c.align);
  write_tasks(dir / "augment.jsonl", c.augment);
  write_tasks(dir / "specialize.jsonl", c.specialize);
  for (const char* f : {"map.jsonl", "align.jsonl", "augment.jsonl", "specialize.jsonl"})
    c.manifest.output_digests[f] = sha256_file(dir / f);
  std::ofstream out(dir / "manifest.json");
  out << c.manifest.to_json().dump(2) << '\n';
}

json AuditReport::to_json() const {
  json cs = json::array();
  for (const auto& c : collisions)
    cs.push_back({{"pool", c.pool}, {"pool_id", c.pool_id}, {"eval_set", c.eval_set}, {"eval_id", c.eval_id}, {"text", c.text}});
  return {{"ok", ok()}, {"collisions", cs}, {"ic_ii_overlap", ic_ii_overlap}};
}

AuditReport audit_leakage(const StageCorpora& c, const std::vector<EvalSet>& eval_sets) {
  AuditReport r;
  std::unordered_map<std::string, std::vector<const TaskExample*>> eval_index;
  for (const auto& set : eval_sets)
    for (const auto& t : set.items) eval_index[normalize(t.question)].push_back(&t);
  auto set_name = [&](const TaskExample* t) {
    for (const auto& set : eval_sets)
      for (const auto& u : set.items)
        if (&u == t) return set.name;
    return std::string();
  };
  auto check = [&](const std::string& pool, const std::string& id, const std::string& text) {
    auto it = eval_index.find(normalize(text));
    if (it == eval_index.end()) return;
    for (const TaskExample* t : it->second) r.collisions.push_back({pool, id, set_name(t), t->id, text});
  };
  for (const auto& p : c.map) check("map", p.id, p.source);
  for (const auto& p : c.align) check("align", p.id, p.source);
  for (const auto& t : c.augment) check("augment", t.id, t.question);
  for (const auto& t : c.specialize) check("specialize", t.id, t.question);

  std::set<std::string> ic;
  for (const auto& t : c.augment) ic.insert(normalize(t.question));
  std::set<std::string> overlap;
  for (const auto& t : c.specialize) {
    const std::string k = normalize(t.question);
    if (ic.count(k)) overlap.insert(k);
  }
  r.ic_ii_overlap.assign(overlap.begin(), overlap.end());
  return r;
}

}  // namespace merlin::datapipe
