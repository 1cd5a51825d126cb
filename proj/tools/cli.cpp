#include "cli.hpp"

#include "merlin/error.hpp"
#include "merlin/tensor.hpp"

#include <CLI11.hpp>
#include <Eigen/Core>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <random>

namespace merlin::cli {

using nlohmann::json;
using curriculum::StageId;
namespace fs = std::filesystem;

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const TemplateError*>(&e) ||
      dynamic_cast<const UnknownLanguage*>(&e))
    return config_error;
  if (dynamic_cast<const MissingArtifact*>(&e) || dynamic_cast<const DigestMismatch*>(&e)) return missing_artifact;
  if (dynamic_cast<const FreezeViolation*>(&e)) return internal_error;
  if (dynamic_cast<const Error*>(&e)) return data_error;
  if (dynamic_cast<const json::exception*>(&e)) return data_error;
  return internal_error;
}

std::uint64_t derive_seed(std::uint64_t seed, const std::string& component) {
  std::vector<std::uint32_t> words{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)};
  for (char c : component) words.push_back(static_cast<unsigned char>(c));
  std::seed_seq seq(words.begin(), words.end());
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

namespace {

const std::vector<StageId> kStages = {StageId::map, StageId::align, StageId::augment, StageId::specialize};

json leaves(std::initializer_list<const char*> keys) {
  json j = json::object();
  for (const char* k : keys) j[k] = nullptr;
  return j;
}

const json& schema() {
  static const json s = [] {
    const json adamw = leaves({"lr", "beta1", "beta2", "eps", "weight_decay", "warmup_steps", "total_steps",
                               "final_lr_ratio", "clip_norm"});
    json stage = leaves({"dataset", "epochs", "batch_size", "optimizer", "seed", "english_only", "lr"});
    stage["optim"] = adamw;
    json toy = leaves({"languages", "reverse_order", "n_bitext", "n_questions", "n_tasks", "n_eval", "n_nli",
                       "n_pretrain_qa", "max_operand", "seed"});
    toy["noise"] = json{{"*", nullptr}};
    json data = leaves({"source", "bitext", "questions", "tasks", "languages", "strict"});
    data["toy"] = toy;
    data["eval"] = json{{"*", nullptr}};
    data["quotas"] = leaves({"map", "align", "augment", "specialize"});
    json pretrain = leaves({"steps", "batch_size", "seed"});
    pretrain["optim"] = adamw;
    json stack = leaves({"path", "seed"});
    stack["model"] = leaves({"d_enc", "d_llm", "n_layers", "n_heads", "enc_layers", "enc_heads", "ff_mult", "rope_base"});
    stack["pretrain"] = pretrain;
    json stages = json::object();
    stages["defaults"] = stage;
    for (StageId id : kStages) stages[curriculum::to_string(id)] = stage;
    json eval = leaves({"template", "max_new_tokens"});
    eval["groups"] = json{{"*", nullptr}};
    return json{{"seed", nullptr},
                {"output_dir", nullptr},
                {"data", data},
                {"stack", stack},
                {"connector", leaves({"variant", "d_enc", "d_llm", "hidden", "activation", "bias", "skip", "learned_sep", "seed"})},
                {"adapters", leaves({"method", "rank", "alpha", "dropout", "targets", "init_std", "seed"})},
                {"stages", stages},
                {"eval", eval},
                {"analysis", leaves({"k", "max_pairs", "pooling", "english_queries", "mode", "layer"})}};
  }();
  return s;
}

void check_keys(const json& doc, const json& sch, const std::string& where, std::vector<std::string>& problems) {
  if (!doc.is_object()) {
    problems.push_back(where.empty() ? "/: expected an object" : where + ": expected an object");
    return;
  }
  for (const auto& [k, v] : doc.items()) {
    const std::string path = where + "/" + k;
    const json* sub = nullptr;
    if (sch.contains(k))
      sub = &sch.at(k);
    else if (sch.contains("*"))
      sub = &sch.at("*");
    if (sub == nullptr) {
      problems.push_back(path + ": unknown key");
      continue;
    }
    if (sub->is_object())
      check_keys(v, *sub, path, problems);
    else if (v.is_object())
      problems.push_back(path + ": expected a value, got an object");
  }
}

json section(const json& doc, const char* key) { return doc.contains(key) ? doc.at(key) : json::object(); }

template <typename F>
auto field(const std::string& where, F&& f) {
  try {
    return f();
  } catch (const json::exception& e) {
    throw ConfigError(where + ": " + e.what());
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(where + ": " + e.what());
  }
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw MissingArtifact("cannot open " + p.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw DatasetSchemaError(p.string() + ": " + e.what());
  }
}

void write_json(const fs::path& p, const json& j) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p);
  out << j.dump(2) << '\n';
}

std::string dir_name(const fs::path& p) {
  fs::path n = p.lexically_normal();
  if (n.filename().empty()) n = n.parent_path();
  return n.filename().string();
}

void refuse_existing(const fs::path& marker, bool force) {
  if (fs::exists(marker) && !force)
    throw ConfigError(marker.string() + " already exists; pass --force to overwrite");
}

json versions() {
  return {{"merlin", MERLIN_VERSION},
          {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                        std::to_string(EIGEN_MINOR_VERSION)},
          {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                std::to_string(NLOHMANN_JSON_VERSION_PATCH)},
          {"cli11", CLI11_VERSION}};
}

}  // namespace

RunConfig parse_config(const json& doc) {
  std::vector<std::string> problems;
  check_keys(doc, schema(), "", problems);
  if (!problems.empty()) {
    std::string msg = "invalid config:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ConfigError(msg);
  }
  RunConfig c;
  c.seed = field("/seed", [&] { return doc.value("seed", std::uint64_t{1}); });
  c.output_dir = field("/output_dir", [&] { return doc.value("output_dir", std::string("merlin_out")); });

  const json data = section(doc, "data");
  c.data.source = field("/data/source", [&] { return data.value("source", std::string("toy")); });
  if (c.data.source != "toy" && c.data.source != "files")
    throw ConfigError("/data/source: expected 'toy' or 'files', got '" + c.data.source + "'");
  field("/data/toy", [&] {
    json toy = section(data, "toy");
    if (!toy.contains("seed")) toy["seed"] = c.seed;
    c.data.toy = datapipe::ToyCorpusConfig::from_json(toy);
    return 0;
  });
  c.data.bitext = field("/data/bitext", [&] { return data.value("bitext", std::string()); });
  c.data.questions = field("/data/questions", [&] { return data.value("questions", std::string()); });
  c.data.tasks = field("/data/tasks", [&] { return data.value("tasks", std::string()); });
  if (data.contains("eval"))
    for (const auto& [name, p] : data.at("eval").items())
      c.data.eval[name] = field("/data/eval/" + name, [&] { return p.get<std::string>(); });
  field("/data/quotas", [&] {
    c.data.quotas = datapipe::Quotas::from_json(section(data, "quotas"));
    return 0;
  });
  c.data.languages = field("/data/languages", [&] {
    return data.contains("languages") ? data.at("languages").get<std::vector<std::string>>() : c.data.toy.languages;
  });
  c.data.strict = field("/data/strict", [&] { return data.value("strict", false); });
  if (c.data.source == "files" && (c.data.bitext.empty() || c.data.questions.empty() || c.data.tasks.empty()))
    throw ConfigError("/data: the files source needs bitext, questions and tasks paths");

  const json stack = section(doc, "stack");
  if (stack.contains("path")) c.stack.path = field("/stack/path", [&] { return stack.at("path").get<std::string>(); });
  field("/stack", [&] {
    json s = stack;
    s.erase("path");
    if (!s.contains("model")) s["model"] = json::object();
    s["model"]["vocab_size"] = 0;
    if (!s.contains("seed")) s["seed"] = derive_seed(c.seed, "stack");
    if (!s.contains("pretrain")) s["pretrain"] = json::object();
    if (!s["pretrain"].contains("seed")) s["pretrain"]["seed"] = derive_seed(c.seed, "pretrain");
    c.stack.toy = toy::ToyStackConfig::from_json(s);
    return 0;
  });

  const json conn = section(doc, "connector");
  field("/connector", [&] {
    json s = conn;
    s.erase("seed");
    c.connector = connector::ConnectorSpec::from_json(s);
    c.connector_seed = conn.value("seed", derive_seed(c.seed, "connector"));
    return 0;
  });
  const json ad = section(doc, "adapters");
  field("/adapters", [&] {
    json s = ad;
    s.erase("seed");
    c.adapters = adapters::AdapterSpec::from_json(s);
    c.adapter_seed = ad.value("seed", derive_seed(c.seed, "adapters"));
    return 0;
  });

  const json stages = section(doc, "stages");
  const json defaults = section(stages, "defaults");
  for (StageId id : kStages) {
    const std::string name = curriculum::to_string(id);
    json merged = defaults;
    merged.merge_patch(section(stages, name.c_str()));
    if (!merged.contains("seed")) merged["seed"] = derive_seed(c.seed, "stage/" + name);
    c.stages[id] = field("/stages/" + name, [&] { return curriculum::StageConfig::from_json(merged, id); });
  }

  const json ev = section(doc, "eval");
  if (ev.contains("template") && !ev.at("template").is_null()) {
    c.eval.template_name = field("/eval/template", [&] { return ev.at("template").get<std::string>(); });
    field("/eval/template", [&] { return evalharness::PromptTemplate::builtin(*c.eval.template_name); });
  }
  c.eval.max_new_tokens = field("/eval/max_new_tokens", [&] { return ev.value("max_new_tokens", 40); });
  if (ev.contains("groups"))
    c.eval.groups = field("/eval/groups", [&] { return ev.at("groups").get<evalharness::LanguageGroups>(); });

  const json an = section(doc, "analysis");
  c.analysis.curve.k = field("/analysis/k", [&] { return an.value("k", 5); });
  c.analysis.curve.max_pairs = field("/analysis/max_pairs", [&] { return an.value("max_pairs", 200); });
  c.analysis.curve.pooling =
      field("/analysis/pooling", [&] { return analysis::pooling_from_string(an.value("pooling", std::string("mean"))); });
  c.analysis.curve.english_queries = field("/analysis/english_queries", [&] { return an.value("english_queries", true); });
  c.analysis.mode =
      field("/analysis/mode", [&] { return analysis::input_mode_from_string(an.value("mode", std::string("assembled"))); });
  c.analysis.layer = field("/analysis/layer", [&] { return an.value("layer", -1); });
  if (c.analysis.curve.k < 1) throw ConfigError("/analysis/k: must be >= 1");
  if (c.eval.max_new_tokens < 1) throw ConfigError("/eval/max_new_tokens: must be >= 1");

  // Keep the resolved document loadable by this parser.
  json stage_json = json::object();
  for (const auto& [id, sc] : c.stages) {
    json sj = sc.to_json();
    sj.erase("stage");
    if (sj.contains("optim")) sj["optim"].erase("optimizer");
    stage_json[curriculum::to_string(id)] = sj;
  }
  json conn_json = c.connector.to_json();
  conn_json["seed"] = c.connector_seed;
  json ad_json = c.adapters.to_json();
  ad_json["seed"] = c.adapter_seed;
  json stack_json = c.stack.toy.to_json();
  stack_json["model"].erase("vocab_size");
  if (stack_json["pretrain"].contains("optim")) stack_json["pretrain"]["optim"].erase("optimizer");
  if (c.stack.path) stack_json["path"] = c.stack.path->string();
  c.resolved = {{"seed", c.seed},
                {"output_dir", c.output_dir.string()},
                {"data",
                 {{"source", c.data.source},
                  {"toy", c.data.toy.to_json()},
                  {"bitext", c.data.bitext.string()},
                  {"questions", c.data.questions.string()},
                  {"tasks", c.data.tasks.string()},
                  {"eval", json(c.data.eval)},
                  {"quotas", c.data.quotas.to_json()},
                  {"languages", c.data.languages},
                  {"strict", c.data.strict}}},
                {"stack", stack_json},
                {"connector", conn_json},
                {"adapters", ad_json},
                {"stages", stage_json},
                {"eval",
                 {{"template", c.eval.template_name ? json(*c.eval.template_name) : json(nullptr)},
                  {"max_new_tokens", c.eval.max_new_tokens},
                  {"groups", c.eval.groups}}},
                {"analysis",
                 {{"k", c.analysis.curve.k},
                  {"max_pairs", c.analysis.curve.max_pairs},
                  {"pooling", analysis::to_string(c.analysis.curve.pooling)},
                  {"english_queries", c.analysis.curve.english_queries},
                  {"mode", analysis::to_string(c.analysis.mode)},
                  {"layer", c.analysis.layer}}}};
  return c;
}

RunConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return parse_config(doc);
}

fs::path output_root(const RunConfig& cfg) {
  const char* env = std::getenv("MERLIN_OUTPUT_ROOT");
  if (env != nullptr && *env != '\0' && cfg.output_dir.is_relative()) return fs::path(env) / cfg.output_dir;
  return cfg.output_dir;
}

namespace {

// ---------------------------------------------------------------------------
// Shared helpers.

fs::path stack_dir(const RunConfig& cfg, const fs::path& root) { return cfg.stack.path ? *cfg.stack.path : root / "stack"; }

modelstack::StackHandle obtain_stack(const RunConfig& cfg, const fs::path& root) {
  const fs::path dir = stack_dir(cfg, root);
  if (fs::exists(dir / "meta.json")) return modelstack::load_stack(dir);
  if (cfg.stack.path || cfg.data.source != "toy") throw MissingArtifact("no stack at " + dir.string());
  const fs::path corpus_dir = root / "data" / "corpus";
  if (!fs::exists(corpus_dir / "ciphers.json"))
    throw MissingArtifact("no toy corpus at " + corpus_dir.string() + "; run build-data first");
  std::cerr << "building toy stack in " << dir.string() << '\n';
  const datapipe::ToyCorpus corpus = datapipe::read_toy_corpus(corpus_dir);
  modelstack::StackHandle stack = toy::build_stack(corpus, cfg.stack.toy);
  modelstack::save_stack(stack, dir);
  return stack;
}

struct LoadedRun {
  modelstack::StackHandle stack;
  std::optional<connector::Connector> conn;
  adapters::AdapterSet adapters;
  json manifest;
};

// Members are declared so that the adapters detach before the stack dies.
std::unique_ptr<LoadedRun> load_run(const fs::path& dir) {
  if (!fs::exists(dir / "manifest.json")) throw MissingArtifact("no completed run at " + dir.string());
  auto r = std::make_unique<LoadedRun>();
  r->manifest = read_json(dir / "manifest.json");
  r->stack = modelstack::load_stack(r->manifest.at("stack_dir").get<std::string>());
  r->conn.emplace(connector::Connector::load(dir / "connector"));
  if (fs::exists(dir / "adapters")) r->adapters = adapters::load(r->stack, dir / "adapters");
  return r;
}

std::vector<datapipe::ParallelPair> read_any_pairs(const fs::path& p) {
  if (!fs::exists(p)) throw MissingArtifact("no parallel file at " + p.string());
  switch (datapipe::detect_schema(p)) {
    case datapipe::SchemaKind::bitext: return datapipe::read_bitext(p);
    case datapipe::SchemaKind::question_pair: return datapipe::read_question_pairs(p);
    default: throw DatasetSchemaError(p.string() + ": expected bitext or question-pair records");
  }
}

std::vector<std::string> pair_languages(const std::vector<datapipe::ParallelPair>& pairs) {
  std::vector<std::string> out;
  for (const auto& p : pairs)
    if (std::find(out.begin(), out.end(), p.language) == out.end()) out.push_back(p.language);
  return out;
}

// ---------------------------------------------------------------------------
// build-data

int cmd_build_data(const RunConfig& cfg, bool force) {
  const fs::path root = output_root(cfg);
  const fs::path data_dir = root / "data";
  refuse_existing(data_dir / "stages" / "manifest.json", force);
  datapipe::RawSources src;
  std::vector<datapipe::EvalSet> evals;
  if (cfg.data.source == "toy") {
    const datapipe::ToyCorpus corpus = datapipe::gen_toy_corpus(cfg.data.toy);
    const fs::path cdir = data_dir / "corpus";
    datapipe::write_toy_corpus(corpus, cdir);
    src.bitext = corpus.bitext;
    src.question_pairs = corpus.question_pairs;
    src.tasks = corpus.tasks;
    src.digests = {{"bitext", sha256_file(cdir / "bitext.jsonl")},
                   {"questions", sha256_file(cdir / "questions.jsonl")},
                   {"tasks", sha256_file(cdir / "tasks.jsonl")}};
    evals.push_back({"toy_eval", corpus.eval});
    std::vector<datapipe::ParallelPair> held;
    for (const auto& e : corpus.eval)
      held.push_back({e.id, e.question, corpus.cipher(e.language).decipher(e.question), e.language,
                      datapipe::PairKind::question_pair});
    datapipe::write_pairs(data_dir / "heldout_pairs.jsonl", held);
  } else {
    src.bitext = datapipe::read_bitext(cfg.data.bitext);
    src.question_pairs = datapipe::read_question_pairs(cfg.data.questions);
    src.tasks = datapipe::read_tasks(cfg.data.tasks);
    src.digests = {{"bitext", sha256_file(cfg.data.bitext)},
                   {"questions", sha256_file(cfg.data.questions)},
                   {"tasks", sha256_file(cfg.data.tasks)}};
    for (const auto& [name, p] : cfg.data.eval) evals.push_back({name, datapipe::read_tasks(p)});
  }
  datapipe::StageCorpora sc =
      datapipe::build_stage_corpora(src, cfg.data.quotas, cfg.data.languages, cfg.seed, cfg.data.strict);
  datapipe::write_stage_corpora(sc, data_dir / "stages");
  const datapipe::AuditReport audit = datapipe::audit_leakage(sc, evals);
  write_json(data_dir / "audit.json", audit.to_json());
  write_json(data_dir / "config.json", cfg.resolved);

  for (const auto& [stage, langs] : sc.manifest.counts)
    for (const auto& [lang, n] : langs) std::cout << stage << '\t' << lang << '\t' << n << '\n';
  for (const auto& s : sc.manifest.shortfalls)
    std::cerr << "shortfall: " << s.stage << '/' << s.language << " wanted " << s.requested << ", have "
              << s.available << '\n';
  std::cout << "manifest: " << (data_dir / "stages" / "manifest.json").string() << '\n';
  if (!audit.ok()) {
    std::cerr << "leakage audit failed: " << audit.collisions.size() << " eval collision(s), "
              << audit.ic_ii_overlap.size() << " augment/specialize overlap(s); see "
              << (data_dir / "audit.json").string() << '\n';
    return audit_failure;
  }
  return ok;
}

// ---------------------------------------------------------------------------
// train

int cmd_train(const RunConfig& cfg, std::vector<StageId> plan, const std::string& name_opt,
              const std::string& connector_ckpt, bool force) {
  if (plan.empty()) plan = kStages;
  curriculum::validate_plan(plan, !connector_ckpt.empty());
  const fs::path root = output_root(cfg);
  std::string name = name_opt;
  if (name.empty()) {
    if (plan.size() == 4)
      name = "full";
    else if (plan == std::vector<StageId>{StageId::map, StageId::augment})
      name = "mindmerger";
    else
      for (StageId s : plan) name += (name.empty() ? "" : "+") + curriculum::to_string(s);
  }
  const fs::path run_dir = root / "runs" / name;
  refuse_existing(run_dir / "manifest.json", force);
  if (force) fs::remove_all(run_dir);

  curriculum::PlanInputs in;
  in.connector_spec = cfg.connector;
  in.connector_seed = cfg.connector_seed;
  if (!connector_ckpt.empty()) {
    if (!fs::exists(fs::path(connector_ckpt) / "connector.json"))
      throw MissingArtifact("no connector checkpoint at " + connector_ckpt);
    in.connector_checkpoint = connector_ckpt;
  }
  in.adapter_spec = cfg.adapters;
  in.adapter_seed = cfg.adapter_seed;
  for (StageId s : plan) {
    curriculum::StageConfig sc = cfg.stages.at(s);
    if (sc.dataset.empty()) sc.dataset = root / "data" / "stages" / (curriculum::to_string(s) + ".jsonl");
    if (!fs::exists(sc.dataset)) throw MissingArtifact("no dataset for " + curriculum::to_string(s) + " at " + sc.dataset.string());
    in.data[s] = curriculum::load_stage_data(sc);
    in.configs[s] = sc;
  }
  modelstack::StackHandle stack = obtain_stack(cfg, root);
  in.run_dir = run_dir;
  curriculum::PlanResult res = curriculum::run_plan(stack, plan, in);

  json records = json::array();
  for (const auto& r : res.records) {
    records.push_back(r.to_json());
    std::cout << curriculum::to_string(r.stage) << ": " << r.examples << " examples, final epoch loss "
              << (r.epoch_losses.empty() ? 0.0 : r.epoch_losses.back()) << ", " << r.wall_seconds << " s\n";
  }
  json data_digests = json::object();
  const fs::path dm = root / "data" / "stages" / "manifest.json";
  if (fs::exists(dm)) data_digests["stages/manifest.json"] = sha256_file(dm);
  const json manifest = {{"config", cfg.resolved},
                         {"versions", versions()},
                         {"plan", res.manifest},
                         {"stack_dir", fs::absolute(stack_dir(cfg, root)).string()},
                         {"digests",
                          {{"encoder", stack.encoder_digest()},
                           {"decoder", stack.decoder_digest()},
                           {"connector", res.connector->digest()},
                           {"adapters", res.adapters.size() > 0 ? json(res.adapters.digest()) : json(nullptr)},
                           {"data", data_digests}}},
                         {"stages", records}};
  res.adapters.detach();
  write_json(run_dir / "manifest.json", manifest);
  std::cout << "run: " << run_dir.string() << " (" << res.manifest.at("setting").get<std::string>() << ")\n";
  return ok;
}

// ---------------------------------------------------------------------------
// eval

int cmd_eval(const RunConfig& cfg, const fs::path& run_dir, std::vector<std::string> benches,
             const std::string& baseline, const std::string& tmpl_opt, const std::string& name, bool force) {
  const fs::path root = output_root(cfg);
  const fs::path out_dir = run_dir / "eval" / name;
  refuse_existing(out_dir / "report.json", force);
  if (benches.empty()) benches.push_back((root / "data" / "corpus" / "eval.jsonl").string());

  std::vector<evalharness::EvalItem> items;
  std::optional<datapipe::SchemaKind> kind;
  for (const auto& b : benches) {
    if (!fs::exists(b)) throw MissingArtifact("no benchmark file at " + b);
    const datapipe::SchemaKind k = datapipe::detect_schema(b);
    if (kind && *kind != k) throw InvalidInput("benchmark files mix task kinds");
    kind = k;
    if (k == datapipe::SchemaKind::task) {
      for (const auto& t : datapipe::read_tasks(b)) items.push_back({t.id, t.language, t.question, t.answer, {}});
    } else if (k == datapipe::SchemaKind::nli) {
      for (const auto& t : datapipe::read_nli(b))
        items.push_back({t.id, t.language, t.premise + " " + t.hypothesis, t.label,
                         {{"sentence1", t.premise}, {"sentence2", t.hypothesis}}});
    } else {
      throw DatasetSchemaError(b + ": expected task or nli records");
    }
  }
  const bool nli = kind == datapipe::SchemaKind::nli;
  std::optional<evalharness::PromptTemplate> tmpl;
  if (!tmpl_opt.empty())
    tmpl = evalharness::PromptTemplate::builtin(tmpl_opt);
  else if (cfg.eval.template_name)
    tmpl = evalharness::PromptTemplate::builtin(*cfg.eval.template_name);
  else if (nli)
    tmpl = evalharness::PromptTemplate::builtin("nli");

  std::optional<evalharness::EvalReport> base;
  std::string base_label;
  if (!baseline.empty()) {
    const json bj = read_json(baseline);
    base = evalharness::EvalReport::from_json(bj);
    base_label = bj.contains("run") ? dir_name(bj.at("run").get<std::string>())
                                    : fs::path(baseline).stem().string();
  }

  auto run = load_run(run_dir);
  const auto preds = evalharness::generate_predictions(run->stack, *run->conn,
                                                       run->adapters.size() > 0 ? &run->adapters : nullptr, items,
                                                       tmpl ? &*tmpl : nullptr, cfg.eval.max_new_tokens);
  std::vector<evalharness::Gold> golds;
  for (const auto& it : items) golds.push_back({it.id, it.language, it.gold});
  evalharness::EvalReport report =
      evalharness::score(preds, golds, nli ? evalharness::Metric::accuracy : evalharness::Metric::exact_match,
                         cfg.eval.groups);
  if (base) add_delta(report, *base, base_label);
  evalharness::write_predictions(out_dir / "predictions.jsonl", report.items);
  json rj = report.to_json();
  rj["run"] = run_dir.string();
  rj["benchmarks"] = benches;
  rj["template"] = tmpl ? json(tmpl->name) : json(nullptr);
  write_json(out_dir / "report.json", rj);
  const std::string table = report.table(dir_name(run_dir));
  std::ofstream(out_dir / "report.txt") << table;
  std::cout << table;
  return ok;
}

// ---------------------------------------------------------------------------
// analyze / export-embeddings

struct RunRef {
  std::string label;
  fs::path dir;
};

RunRef parse_run_ref(const std::string& s) {
  const auto eq = s.find('=');
  if (eq != std::string::npos) return {s.substr(0, eq), s.substr(eq + 1)};
  return {dir_name(s), s};
}

int cmd_analyze(const RunConfig& cfg, const std::vector<std::string>& runs, int k, const std::string& pairs_opt,
                std::vector<std::string> languages, bool with_base, const std::string& out_opt, bool force) {
  const fs::path root = output_root(cfg);
  const fs::path out_dir = out_opt.empty() ? root / "analysis" : fs::path(out_opt);
  refuse_existing(out_dir / "retrieval_curve.csv", force);
  const auto pairs = read_any_pairs(pairs_opt.empty() ? root / "data" / "heldout_pairs.jsonl" : fs::path(pairs_opt));
  if (languages.empty()) languages = pair_languages(pairs);
  analysis::CurveOptions opts = cfg.analysis.curve;
  if (k > 0) opts.k = k;

  std::vector<analysis::RetrievalCurve> curves;
  if (with_base) {
    modelstack::StackHandle stack =
        runs.empty() ? obtain_stack(cfg, root)
                     : modelstack::load_stack(read_json(parse_run_ref(runs.front()).dir / "manifest.json")
                                                  .at("stack_dir")
                                                  .get<std::string>());
    curves.push_back(analysis::retrieval_curve({&stack, nullptr, nullptr, analysis::InputMode::text}, "base", pairs,
                                               languages, opts));
  }
  for (const auto& r : runs) {
    const RunRef ref = parse_run_ref(r);
    auto run = load_run(ref.dir);
    const analysis::ModelView view{&run->stack, &*run->conn, run->adapters.size() > 0 ? &run->adapters : nullptr,
                                   cfg.analysis.mode};
    curves.push_back(analysis::retrieval_curve(view, ref.label, pairs, languages, opts));
  }
  if (curves.empty()) throw ConfigError("analyze: nothing to compare; pass --run or keep the base curve");
  analysis::write_curves_csv(out_dir / "retrieval_curve.csv", curves);
  for (const auto& c : curves) {
    std::cout << c.model;
    for (double s : c.scores) std::cout << '\t' << s;
    std::cout << '\n';
  }
  std::cout << "retrieval@" << opts.k << ": " << (out_dir / "retrieval_curve.csv").string() << '\n';
  return ok;
}

int cmd_export(const RunConfig& cfg, const std::string& run_opt, int layer, const std::string& pairs_opt,
               const std::string& out_opt, bool force) {
  const fs::path root = output_root(cfg);
  const fs::path out_dir = out_opt.empty() ? root / "analysis" : fs::path(out_opt);
  refuse_existing(out_dir / "embedding_2d.csv", force);
  const auto pairs = read_any_pairs(pairs_opt.empty() ? root / "data" / "heldout_pairs.jsonl" : fs::path(pairs_opt));

  std::unique_ptr<LoadedRun> run;
  modelstack::StackHandle base_stack;
  analysis::ModelView view;
  if (run_opt.empty()) {
    base_stack = obtain_stack(cfg, root);
    view = {&base_stack, nullptr, nullptr, analysis::InputMode::text};
  } else {
    run = load_run(parse_run_ref(run_opt).dir);
    view = {&run->stack, &*run->conn, run->adapters.size() > 0 ? &run->adapters : nullptr, cfg.analysis.mode};
  }
  if (layer < 0) layer = cfg.analysis.layer >= 0 ? cfg.analysis.layer : view.stack->n_layers() / 2;

  std::vector<std::string> en, en_ids;
  std::map<std::string, std::pair<std::vector<std::string>, std::vector<std::string>>> by_lang;
  for (const auto& p : pairs) {
    auto& [texts, ids] = by_lang[p.language];
    if (static_cast<int>(texts.size()) >= cfg.analysis.curve.max_pairs) continue;
    texts.push_back(p.source);
    ids.push_back(p.id);
    if (std::find(en.begin(), en.end(), p.reference) == en.end()) {
      en.push_back(p.reference);
      en_ids.push_back(p.id);
    }
  }
  std::vector<analysis::SentenceEmbeddingSet> sets;
  auto e = analysis::sentence_embeddings(view, en, "en", layer, cfg.analysis.curve.pooling);
  e.ids = en_ids;
  sets.push_back(std::move(e));
  for (auto& [lang, v] : by_lang) {
    auto s = analysis::sentence_embeddings(view, v.first, lang, layer, cfg.analysis.curve.pooling);
    s.ids = v.second;
    sets.push_back(std::move(s));
  }
  analysis::write_embeddings_csv(out_dir / "embeddings.csv", sets);
  analysis::write_points_csv(out_dir / "embedding_2d.csv", analysis::export_embeddings_2d(sets));
  std::cout << "layer " << layer << ": " << (out_dir / "embedding_2d.csv").string() << '\n';
  return ok;
}

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{"MERLIN toy pipeline: data, staged training, evaluation and analysis"};
  app.require_subcommand(1);
  std::string config_path;
  bool force = false;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", config_path, "Run config (JSON)")->required();
    sub->add_flag("--force", force, "Overwrite a completed run");
  };

  auto* build = app.add_subcommand("build-data", "Sample stage corpora and audit them against the eval sets");
  add_common(build);

  bool f_map = false, f_align = false, f_aug = false, f_spec = false;
  std::string run_name, connector_ckpt;
  auto* train = app.add_subcommand("train", "Run a stage plan; no stage flags runs all four");
  add_common(train);
  train->add_flag("--map", f_map, "Stage Ia: mapping on bitext");
  train->add_flag("--align", f_align, "Stage Ib: question alignment");
  train->add_flag("--augment", f_aug, "Stage Ic: query augmentation");
  train->add_flag("--specialize", f_spec, "Stage II: adapter specialization");
  train->add_option("--name", run_name, "Run directory name under runs/");
  train->add_option("--connector", connector_ckpt, "Starting connector checkpoint");

  std::string run_dir, baseline, tmpl, eval_name = "eval";
  std::vector<std::string> benches;
  auto* eval = app.add_subcommand("eval", "Generate, extract and score on benchmark files");
  add_common(eval);
  eval->add_option("--run", run_dir, "Run directory")->required();
  eval->add_option("--bench", benches, "Benchmark JSONL (task or nli records); repeatable");
  eval->add_option("--baseline", baseline, "Report JSON to subtract");
  eval->add_option("--template", tmpl, "gemma_math, metamath_math or nli");
  eval->add_option("--name", eval_name, "Output name under <run>/eval/");

  std::vector<std::string> runs, languages;
  std::string pairs, out;
  int k = 0;
  bool no_base = false;
  auto* an = app.add_subcommand("analyze", "Layer-wise retrieval@k curves");
  add_common(an);
  an->add_option("--run", runs, "Run directory, optionally label=dir; repeatable");
  an->add_option("--k", k, "Shortlist size")->check(CLI::PositiveNumber);
  an->add_option("--pairs", pairs, "Parallel JSONL (bitext or question pairs)");
  an->add_option("--languages", languages, "Languages to average over");
  an->add_flag("--no-base", no_base, "Skip the base decoder curve");
  an->add_option("--out", out, "Output directory");

  std::string export_run;
  int layer = -1;
  auto* ex = app.add_subcommand("export-embeddings", "Raw sentence embeddings plus a 2-D projection");
  add_common(ex);
  ex->add_option("--run", export_run, "Run directory; omitted means the base decoder");
  ex->add_option("--layer", layer, "Decoder layer (0 = input)");
  ex->add_option("--pairs", pairs, "Parallel JSONL");
  ex->add_option("--out", out, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return config_error;
  }

  try {
    const RunConfig cfg = load_config(config_path);
    if (build->parsed()) return cmd_build_data(cfg, force);
    if (train->parsed()) {
      std::vector<StageId> plan;
      if (f_map) plan.push_back(StageId::map);
      if (f_align) plan.push_back(StageId::align);
      if (f_aug) plan.push_back(StageId::augment);
      if (f_spec) plan.push_back(StageId::specialize);
      return cmd_train(cfg, plan, run_name, connector_ckpt, force);
    }
    if (eval->parsed()) return cmd_eval(cfg, run_dir, benches, baseline, tmpl, eval_name, force);
    if (an->parsed()) return cmd_analyze(cfg, runs, k, pairs, languages, !no_base, out, force);
    if (ex->parsed()) return cmd_export(cfg, export_run, layer, pairs, out, force);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e);
  }
  return internal_error;
}

}  // namespace merlin::cli
