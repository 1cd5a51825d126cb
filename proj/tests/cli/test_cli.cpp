#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "cli.hpp"

#include "merlin/error.hpp"

#include <fstream>
#include <iostream>
#include <sstream>

using namespace merlin;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Workspace {
  fs::path dir;
  explicit Workspace(const std::string& name) : dir(fs::temp_directory_path() / ("merlin_cli_" + name)) {
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  ~Workspace() { fs::remove_all(dir); }
  fs::path out() const { return dir / "out"; }
};

json tiny_config(const fs::path& out) {
  json j = json::parse(R"({
    "seed": 3,
    "data": {
      "source": "toy",
      "toy": {"n_bitext": 100, "n_questions": 50, "n_tasks": 60, "n_eval": 10, "n_nli": 12, "n_pretrain_qa": 80},
      "quotas": {"map": 80, "align": 30, "augment": 30, "specialize": 30}
    },
    "stack": {
      "model": {"d_enc": 8, "d_llm": 16, "n_layers": 2, "n_heads": 2, "enc_layers": 1, "enc_heads": 2},
      "pretrain": {"steps": 10, "batch_size": 8}
    },
    "connector": {"variant": "mlp2", "hidden": 16},
    "adapters": {"method": "lora", "rank": 2, "alpha": 4},
    "stages": {"defaults": {"epochs": 1, "batch_size": 8, "lr": 0.003}},
    "eval": {"max_new_tokens": 6},
    "analysis": {"max_pairs": 10}
  })");
  j["output_dir"] = out.string();
  return j;
}

fs::path write_config(const Workspace& w, const json& j, const std::string& name = "config.json") {
  const fs::path p = w.dir / name;
  std::ofstream(p) << j.dump(2);
  return p;
}

struct Result {
  int code = 0;
  std::string err;
};

Result invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "merlin");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  auto* old_out = std::cout.rdbuf(out.rdbuf());
  auto* old_err = std::cerr.rdbuf(err.rdbuf());
  Result r;
  r.code = cli::run(static_cast<int>(argv.size()), argv.data());
  std::cout.rdbuf(old_out);
  std::cerr.rdbuf(old_err);
  r.err = err.str();
  return r;
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  return json::parse(in);
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::vector<std::string>> rows;
  for (std::string line; std::getline(in, line);) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
    rows.push_back(cells);
  }
  return rows;
}

}  // namespace

TEST_CASE("config: unknown keys, bad types and bad JSON exit 64") {
  Workspace w("config");
  json bad = tiny_config(w.out());
  bad["stages"]["map"]["epoch"] = 3;
  const Result r = invoke({"build-data", "-c", write_config(w, bad).string()});
  CHECK(r.code == cli::config_error);
  CHECK(r.err.find("/stages/map/epoch") != std::string::npos);

  json typed = tiny_config(w.out());
  typed["connector"]["hidden"] = "wide";
  CHECK(invoke({"build-data", "-c", write_config(w, typed).string()}).code == cli::config_error);

  json variant = tiny_config(w.out());
  variant["connector"]["variant"] = "mlp7";
  CHECK(invoke({"build-data", "-c", write_config(w, variant).string()}).code == cli::config_error);

  std::ofstream(w.dir / "broken.json") << "{\"seed\": ";
  CHECK(invoke({"build-data", "-c", (w.dir / "broken.json").string()}).code == cli::config_error);
  CHECK(invoke({"build-data", "-c", (w.dir / "absent.json").string()}).code == cli::config_error);
  CHECK(invoke({"frobnicate"}).code == cli::config_error);
  CHECK(invoke({"build-data"}).code == cli::config_error);
  CHECK_FALSE(fs::exists(w.out()));
}

TEST_CASE("config: defaults and derived seeds are resolved") {
  const cli::RunConfig a = cli::parse_config(json::object());
  CHECK(a.data.source == "toy");
  CHECK(a.stages.size() == 4);
  CHECK(a.connector_seed == cli::derive_seed(1, "connector"));
  CHECK(a.connector_seed != a.adapter_seed);
  const cli::RunConfig b = cli::parse_config(json::object());
  CHECK(a.resolved == b.resolved);
  json j = {{"stages", {{"defaults", {{"epochs", 7}}}, {"map", {{"epochs", 2}}}}}};
  const cli::RunConfig c = cli::parse_config(j);
  CHECK(c.stages.at(curriculum::StageId::map).epochs == 2);
  CHECK(c.stages.at(curriculum::StageId::align).epochs == 7);
  CHECK(cli::parse_config(cli::parse_config(j).resolved).resolved == c.resolved);
}

TEST_CASE("pipeline: build-data, train, eval, analyze, export") {
  Workspace w("pipeline");
  const std::string cfg = write_config(w, tiny_config(w.out())).string();
  const fs::path out = w.out();

  REQUIRE(invoke({"build-data", "-c", cfg}).code == cli::ok);
  for (const char* f : {"stages/manifest.json", "stages/map.jsonl", "stages/specialize.jsonl", "audit.json",
                        "heldout_pairs.jsonl", "corpus/eval.jsonl"})
    CHECK(fs::exists(out / "data" / f));
  CHECK(read_json(out / "data" / "audit.json").at("ok").get<bool>());
  CHECK(invoke({"build-data", "-c", cfg}).code == cli::config_error);
  CHECK(invoke({"build-data", "-c", cfg, "--force"}).code == cli::ok);

  SUBCASE("stage flag errors") {
    CHECK(invoke({"train", "-c", cfg, "--specialize"}).code == cli::data_error);
    CHECK_FALSE(fs::exists(out / "stack"));
    CHECK(invoke({"train", "-c", cfg, "--map", "--connector", (w.dir / "nowhere").string()}).code ==
          cli::missing_artifact);
  }

  SUBCASE("full run") {
    REQUIRE(invoke({"train", "-c", cfg}).code == cli::ok);
    const fs::path full = out / "runs" / "full";
    const json m = read_json(full / "manifest.json");
    CHECK(m.at("plan").at("setting") == "full");
    CHECK(m.at("stages").size() == 4);
    CHECK(m.at("config").at("seed") == 3);
    CHECK(m.at("digests").at("adapters").is_string());
    CHECK(m.at("versions").contains("eigen"));
    CHECK(fs::exists(full / "connector"));
    CHECK(fs::exists(full / "adapters"));
    CHECK(invoke({"train", "-c", cfg}).code == cli::config_error);

    REQUIRE(invoke({"train", "-c", cfg, "--map", "--augment"}).code == cli::ok);
    const fs::path mm = out / "runs" / "mindmerger";
    CHECK(read_json(mm / "manifest.json").at("plan").at("setting") == "mindmerger");

    // Same config, same seeds: identical connector digest on a forced rerun.
    const std::string d0 = m.at("digests").at("connector");
    REQUIRE(invoke({"train", "-c", cfg, "--force"}).code == cli::ok);
    CHECK(read_json(full / "manifest.json").at("digests").at("connector") == d0);

    REQUIRE(invoke({"eval", "-c", cfg, "--run", full.string()}).code == cli::ok);
    const fs::path rep = full / "eval" / "eval" / "report.json";
    const json rj = read_json(rep);
    int n = 0;
    for (const auto& [lang, v] : rj.at("languages").items()) n += v.at("n").get<int>();
    CHECK(n == 20);
    CHECK(evalharness::read_predictions(full / "eval" / "eval" / "predictions.jsonl").size() == 20);
    CHECK(fs::exists(full / "eval" / "eval" / "predictions.jsonl"));
    CHECK(fs::exists(full / "eval" / "eval" / "report.txt"));

    REQUIRE(invoke({"eval", "-c", cfg, "--run", mm.string(), "--baseline", rep.string()}).code == cli::ok);
    const auto mrep = evalharness::EvalReport::from_json(read_json(mm / "eval" / "eval" / "report.json"));
    const auto frep = evalharness::EvalReport::from_json(rj);
    REQUIRE(mrep.deltas.count("full") == 1);
    for (const auto& [lang, s] : mrep.languages)
      CHECK(mrep.deltas.at("full").at(lang) == doctest::Approx(s.score - frep.languages.at(lang).score));

    // NLI bench through slots.
    const auto corpus = datapipe::read_toy_corpus(out / "data" / "corpus");
    datapipe::write_nli(w.dir / "nli.jsonl", corpus.nli);
    REQUIRE(invoke({"eval", "-c", cfg, "--run", full.string(), "--bench", (w.dir / "nli.jsonl").string(), "--name",
                 "nli"})
                .code == cli::ok);
    const json nj = read_json(full / "eval" / "nli" / "report.json");
    CHECK(nj.at("template") == "nli");
    CHECK(nj.at("metric") == "accuracy");

    SUBCASE("errors") {
      CHECK(invoke({"eval", "-c", cfg, "--run", (out / "runs" / "ghost").string()}).code == cli::missing_artifact);
      CHECK(invoke({"eval", "-c", cfg, "--run", full.string(), "--name", "x", "--template", "nope"}).code ==
            cli::config_error);
      {
        std::ifstream in(out / "data" / "corpus" / "eval.jsonl");
        std::ofstream bad(w.dir / "corrupt.jsonl");
        std::string line;
        std::getline(in, line);
        bad << line << "\n{\"id\": \"q\", \"question\": \n";
      }
      const Result r =
          invoke({"eval", "-c", cfg, "--run", full.string(), "--bench", (w.dir / "corrupt.jsonl").string(), "--name", "c"});
      CHECK(r.code == cli::data_error);
      CHECK(r.err.find("corrupt.jsonl:2") != std::string::npos);
      fs::remove_all(full / "connector");
      CHECK(invoke({"eval", "-c", cfg, "--run", full.string(), "--name", "y"}).code == cli::missing_artifact);
    }

    SUBCASE("analysis") {
      REQUIRE(invoke({"analyze", "-c", cfg, "--run", full.string(), "--run", "mm=" + mm.string(), "--k", "1", "--out",
                   (w.dir / "k1").string()})
                  .code == cli::ok);
      REQUIRE(invoke({"analyze", "-c", cfg, "--run", full.string(), "--run", "mm=" + mm.string(), "--k", "5", "--out",
                   (w.dir / "k5").string()})
                  .code == cli::ok);
      const auto k1 = read_csv(w.dir / "k1" / "retrieval_curve.csv");
      const auto k5 = read_csv(w.dir / "k5" / "retrieval_curve.csv");
      REQUIRE(k1.size() == 1 + 3 * 3);
      REQUIRE(k1.size() == k5.size());
      CHECK(k1[0] == std::vector<std::string>{"model", "layer", "score"});
      CHECK(k1[1][0] == "base");
      CHECK(k1[4][0] == "full");
      CHECK(k1[7][0] == "mm");
      for (std::size_t i = 1; i < k1.size(); ++i) CHECK(std::stod(k1[i][2]) <= std::stod(k5[i][2]));
      CHECK(invoke({"analyze", "-c", cfg, "--k", "1", "--out", (w.dir / "k1").string()}).code == cli::config_error);

      REQUIRE(invoke({"export-embeddings", "-c", cfg, "--run", full.string(), "--layer", "1"}).code == cli::ok);
      const auto pts = read_csv(out / "analysis" / "embedding_2d.csv");
      const auto emb = read_csv(out / "analysis" / "embeddings.csv");
      CHECK(pts[0] == std::vector<std::string>{"x", "y", "language", "id"});
      CHECK(pts.size() == emb.size());
      CHECK(emb[0].size() == 2 + 16);
      CHECK(invoke({"export-embeddings", "-c", cfg, "--run", full.string(), "--layer", "3", "--force"}).code ==
            cli::data_error);
    }
  }
}

TEST_CASE("build-data: a planted eval duplicate fails the audit with exit 2") {
  Workspace w("leak");
  datapipe::ToyCorpusConfig tc;
  tc.n_bitext = 60;
  tc.n_questions = 30;
  tc.n_tasks = 40;
  tc.n_eval = 8;
  tc.n_nli = 4;
  tc.n_pretrain_qa = 10;
  const auto corpus = datapipe::gen_toy_corpus(tc);
  datapipe::write_pairs(w.dir / "bitext.jsonl", corpus.bitext);
  datapipe::write_pairs(w.dir / "questions.jsonl", corpus.question_pairs);
  datapipe::write_tasks(w.dir / "tasks.jsonl", corpus.tasks);
  datapipe::write_tasks(w.dir / "clean.jsonl", corpus.eval);
  auto leaked = corpus.eval;
  leaked.front().question = corpus.tasks.front().question;
  for (const auto& t : corpus.tasks) {
    auto e = t;
    e.id = "planted:" + t.id;
    e.split = datapipe::Split::eval;
    leaked.push_back(e);
  }
  datapipe::write_tasks(w.dir / "leaked.jsonl", leaked);

  json j = tiny_config(w.out());
  j["data"] = {{"source", "files"},
               {"bitext", (w.dir / "bitext.jsonl").string()},
               {"questions", (w.dir / "questions.jsonl").string()},
               {"tasks", (w.dir / "tasks.jsonl").string()},
               {"eval", {{"clean", (w.dir / "clean.jsonl").string()}}},
               {"languages", {"xa", "xb"}},
               {"quotas", {{"map", 50}, {"align", 20}, {"augment", 15}, {"specialize", 15}}}};
  CHECK(invoke({"build-data", "-c", write_config(w, j).string()}).code == cli::ok);

  j["data"]["eval"]["leaked"] = (w.dir / "leaked.jsonl").string();
  const Result r = invoke({"build-data", "-c", write_config(w, j).string(), "--force"});
  CHECK(r.code == cli::audit_failure);
  const json audit = read_json(w.out() / "data" / "audit.json");
  CHECK_FALSE(audit.at("ok").get<bool>());
  CHECK_FALSE(audit.at("collisions").empty());
  for (const auto& c : audit.at("collisions")) CHECK(c.at("eval_set") == "leaked");

  j["data"]["bitext"] = (w.dir / "missing.jsonl").string();
  CHECK(invoke({"build-data", "-c", write_config(w, j).string(), "--force"}).code == cli::missing_artifact);
}

TEST_CASE("exit codes follow the error taxonomy") {
  CHECK(cli::exit_code_for(ConfigError("x")) == 64);
  CHECK(cli::exit_code_for(PlanError("x")) == 65);
  CHECK(cli::exit_code_for(DatasetSchemaError("x")) == 65);
  CHECK(cli::exit_code_for(QuotaShortfall("x")) == 65);
  CHECK(cli::exit_code_for(MissingArtifact("x")) == 66);
  CHECK(cli::exit_code_for(std::runtime_error("x")) == 70);
}
