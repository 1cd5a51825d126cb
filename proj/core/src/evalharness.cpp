#include "merlin/evalharness.hpp"

#include "merlin/error.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <regex>
#include <sstream>

namespace merlin::evalharness {

using nlohmann::json;

PromptTemplate PromptTemplate::builtin(const std::string& name) {
  if (name == "gemma_math")
    return {name,
            "<bos><start_of_turn>user\n"
            "Below is an instruction that describes a task.\n"
            "Write a response that appropriately completes the request.\n"
            "{query}\n"
            "Let's think step by step.\n"
            "<end_of_turn><start_of_turn>model"};
  if (name == "metamath_math")
    return {name,
            "Below is an instruction that describes a task.\n"
            "Write a response that appropriately completes the request.\n"
            "### Instruction: {query}\n"
            "### Response: Let's think step by step."};
  if (name == "nli") return {name, "Premise: {sentence1}\nHypothesis: {sentence2}\nLabel:"};
  throw TemplateError("unknown template '" + name + "'");
}

std::vector<std::string> PromptTemplate::slots() const {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while ((pos = text.find('{', pos)) != std::string::npos) {
    const std::size_t end = text.find('}', pos);
    if (end == std::string::npos) break;
    std::string slot = text.substr(pos + 1, end - pos - 1);
    if (std::find(out.begin(), out.end(), slot) == out.end()) out.push_back(std::move(slot));
    pos = end + 1;
  }
  return out;
}

std::string render_prompt(const PromptTemplate& tmpl, const std::map<std::string, std::string>& instance) {
  std::string out;
  std::size_t pos = 0;
  while (true) {
    const std::size_t open = tmpl.text.find('{', pos);
    if (open == std::string::npos) break;
    const std::size_t close = tmpl.text.find('}', open);
    if (close == std::string::npos) break;
    const std::string slot = tmpl.text.substr(open + 1, close - open - 1);
    auto it = instance.find(slot);
    if (it == instance.end()) throw TemplateError(tmpl.name + ": missing slot '" + slot + "'");
    out.append(tmpl.text, pos, open - pos);
    out += it->second;
    pos = close + 1;
  }
  out.append(tmpl.text, pos, std::string::npos);
  return out;
}

Decimal Decimal::parse(std::string_view literal) {
  Decimal d;
  std::string digits;
  std::size_t i = 0;
  if (i < literal.size() && literal[i] == '-') {
    d.negative = true;
    ++i;
  }
  for (; i < literal.size() && literal[i] != '.'; ++i) {
    if (literal[i] == ',') continue;
    if (!std::isdigit(static_cast<unsigned char>(literal[i]))) throw InvalidInput("not a numeral: " + std::string(literal));
    digits.push_back(literal[i]);
  }
  std::string frac;
  if (i < literal.size()) {
    for (++i; i < literal.size(); ++i) {
      if (!std::isdigit(static_cast<unsigned char>(literal[i]))) throw InvalidInput("not a numeral: " + std::string(literal));
      frac.push_back(literal[i]);
    }
  }
  const std::size_t nz = digits.find_first_not_of('0');
  d.integer = nz == std::string::npos ? "0" : digits.substr(nz);
  while (!frac.empty() && frac.back() == '0') frac.pop_back();
  d.fraction = frac;
  if (d.integer == "0" && d.fraction.empty()) d.negative = false;
  return d;
}

std::string Decimal::to_string() const {
  std::string s = negative ? "-" : "";
  s += integer;
  if (!fraction.empty()) s += "." + fraction;
  return s;
}

double Decimal::to_double() const { return std::stod(to_string()); }

std::optional<Decimal> extract_math_answer(std::string_view generated) {
  static const std::regex numeral(R"(-?[0-9](?:[0-9,]*[0-9])?(?:\.[0-9]+)?)");
  const std::string text(generated);
  std::optional<Decimal> last;
  for (auto it = std::sregex_iterator(text.begin(), text.end(), numeral); it != std::sregex_iterator(); ++it)
    last = Decimal::parse(it->str());
  return last;
}

std::optional<std::string> extract_nli_label(std::string_view generated) {
  std::string lower(generated);
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  std::optional<std::string> best;
  std::size_t best_pos = std::string::npos;
  for (const char* label : {"entailment", "neutral", "contradiction"}) {
    const std::size_t p = lower.find(label);
    if (p < best_pos) {
      best_pos = p;
      best = label;
    }
  }
  return best;
}

std::string to_string(Metric m) { return m == Metric::exact_match ? "exact_match" : "accuracy"; }

Metric metric_from_string(const std::string& s) {
  if (s == "exact_match") return Metric::exact_match;
  if (s == "accuracy") return Metric::accuracy;
  throw InvalidInput("unknown metric '" + s + "'");
}

json ItemRecord::to_json() const {
  return {{"id", id},
          {"lang", language},
          {"prompt", prompt},
          {"generated", generated},
          {"extracted", extracted ? json(*extracted) : json(nullptr)},
          {"gold", gold},
          {"correct", correct}};
}

ItemRecord ItemRecord::from_json(const json& j) {
  ItemRecord r;
  r.id = j.at("id").get<std::string>();
  r.language = j.at("lang").get<std::string>();
  r.prompt = j.value("prompt", "");
  r.generated = j.at("generated").get<std::string>();
  if (!j.at("extracted").is_null()) r.extracted = j.at("extracted").get<std::string>();
  r.gold = j.at("gold").get<std::string>();
  r.correct = j.value("correct", false);
  return r;
}

namespace {

bool judge(Metric metric, const std::optional<std::string>& extracted, const std::string& gold) {
  if (!extracted) return false;
  if (metric == Metric::accuracy) return *extracted == gold;
  const auto g = extract_math_answer(gold);
  return g && Decimal::parse(*extracted) == *g;
}

void aggregate(EvalReport& r, const LanguageGroups& groups) {
  r.languages.clear();
  r.groups.clear();
  for (const auto& it : r.items) {
    LanguageScore& s = r.languages[it.language];
    ++s.n;
    s.correct += it.correct ? 1 : 0;
  }
  double total = 0.0;
  for (auto& [lang, s] : r.languages) {
    s.score = static_cast<double>(s.correct) / s.n;
    total += s.score;
  }
  for (const auto& [name, members] : groups) {
    if (members.empty()) throw InvalidInput("language group '" + name + "' is empty");
    double sum = 0.0;
    for (const auto& m : members) {
      auto it = r.languages.find(m);
      if (it == r.languages.end()) throw InvalidInput("group '" + name + "' names language '" + m + "' with no items");
      sum += it->second.score;
    }
    r.groups[name] = sum / static_cast<double>(members.size());
  }
  if (!r.languages.empty()) r.groups["Avg"] = total / static_cast<double>(r.languages.size());
}

}  // namespace

EvalReport score(const std::vector<Prediction>& predictions, const std::vector<Gold>& golds, Metric metric,
                 const LanguageGroups& groups) {
  if (predictions.size() != golds.size())
    throw InvalidInput("score: " + std::to_string(predictions.size()) + " predictions for " +
                       std::to_string(golds.size()) + " gold items");
  EvalReport r;
  r.metric = metric;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const Prediction& p = predictions[i];
    const Gold& g = golds[i];
    if (p.id != g.id || p.language != g.language) throw InvalidInput("score: item " + std::to_string(i) + " is misaligned");
    ItemRecord rec{p.id, p.language, p.prompt, p.generated, std::nullopt, g.answer, false};
    if (metric == Metric::exact_match) {
      if (auto d = extract_math_answer(p.generated)) rec.extracted = d->to_string();
    } else {
      rec.extracted = extract_nli_label(p.generated);
    }
    rec.correct = judge(metric, rec.extracted, g.answer);
    r.items.push_back(std::move(rec));
  }
  aggregate(r, groups);
  return r;
}

EvalReport rescore(const std::vector<ItemRecord>& items, Metric metric, const LanguageGroups& groups) {
  EvalReport r;
  r.metric = metric;
  r.items = items;
  for (auto& it : r.items) it.correct = judge(metric, it.extracted, it.gold);
  aggregate(r, groups);
  return r;
}

void add_delta(EvalReport& report, const EvalReport& baseline, const std::string& baseline_name) {
  if (report.metric != baseline.metric) throw InvalidInput("add_delta: metrics differ");
  std::map<std::string, double> d;
  for (const auto& [lang, s] : report.languages) {
    auto it = baseline.languages.find(lang);
    if (it != baseline.languages.end()) d[lang] = s.score - it->second.score;
  }
  for (const auto& [g, v] : report.groups) {
    auto it = baseline.groups.find(g);
    if (it != baseline.groups.end()) d[g] = v - it->second;
  }
  report.deltas[baseline_name] = std::move(d);
}

json EvalReport::to_json() const {
  json langs = json::object();
  for (const auto& [l, s] : languages) langs[l] = {{"n", s.n}, {"correct", s.correct}, {"score", s.score}};
  return {{"metric", evalharness::to_string(metric)}, {"languages", langs}, {"groups", groups}, {"deltas", deltas}};
}

EvalReport EvalReport::from_json(const json& j) {
  EvalReport r;
  r.metric = metric_from_string(j.at("metric").get<std::string>());
  for (const auto& [l, s] : j.at("languages").items())
    r.languages[l] = {s.at("n").get<int>(), s.at("correct").get<int>(), s.at("score").get<double>()};
  r.groups = j.at("groups").get<std::map<std::string, double>>();
  r.deltas = j.value("deltas", decltype(r.deltas){});
  return r;
}

std::string EvalReport::table(const std::string& row_label) const {
  std::vector<std::string> cols;
  for (const auto& [l, s] : languages) cols.push_back(l);
  for (const auto& [g, v] : groups)
    if (g != "Avg") cols.push_back(g);
  if (groups.count("Avg")) cols.push_back("Avg");
  auto value = [&](const std::string& c) {
    auto l = languages.find(c);
    return l != languages.end() ? l->second.score : groups.at(c);
  };
  std::size_t label_w = row_label.size();
  for (const auto& [b, d] : deltas) label_w = std::max(label_w, b.size() + 4);
  std::ostringstream out;
  char buf[32];
  auto cell = [&](const std::string& s) { out << ' ' << std::string(s.size() < 7 ? 7 - s.size() : 0, ' ') << s; };
  out << std::string(label_w, ' ');
  for (const auto& c : cols) cell(c);
  out << '\n' << row_label << std::string(label_w - row_label.size(), ' ');
  for (const auto& c : cols) {
    std::snprintf(buf, sizeof buf, "%.1f", 100.0 * value(c));
    cell(buf);
  }
  out << '\n';
  for (const auto& [b, d] : deltas) {
    const std::string label = "vs " + b;
    out << label << std::string(label_w - label.size(), ' ');
    for (const auto& c : cols) {
      auto it = d.find(c);
      if (it == d.end()) {
        cell("-");
        continue;
      }
      std::snprintf(buf, sizeof buf, "%+.1f", 100.0 * it->second);
      cell(buf);
    }
    out << '\n';
  }
  return out.str();
}

void write_predictions(const std::filesystem::path& path, const std::vector<ItemRecord>& items) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw InvalidInput("cannot write " + path.string());
  for (const auto& it : items) out << it.to_json().dump() << '\n';
}

std::vector<ItemRecord> read_predictions(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifact("cannot open " + path.string());
  std::vector<ItemRecord> out;
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(ItemRecord::from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw DatasetSchemaError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

std::vector<Prediction> generate_predictions(modelstack::StackHandle& stack, connector::Connector& connector,
                                             adapters::AdapterSet* adapters, const std::vector<EvalItem>& items,
                                             const PromptTemplate* tmpl, int max_new_tokens) {
  if (adapters != nullptr) adapters->set_enabled(true);
  std::vector<Prediction> out;
  out.reserve(items.size());
  for (const auto& it : items) {
    std::string prompt = it.query;
    if (tmpl != nullptr)
      prompt = render_prompt(*tmpl, it.slots.empty() ? std::map<std::string, std::string>{{"query", it.query}} : it.slots);
    const connector::MappedPrefix prefix =
        connector::project(connector, modelstack::encode(stack, it.query, it.language));
    const TokenIds q = stack.tokenizer.encode(prompt, it.language);
    const connector::AssembledInput a = connector::assemble_augmented(stack, prefix, q, &connector);
    out.push_back({it.id, it.language, prompt,
                   stack.tokenizer.decode(modelstack::generate(stack, a.embeddings, max_new_tokens))});
  }
  return out;
}

}  // namespace merlin::evalharness
