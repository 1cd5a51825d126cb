#include "merlin/curriculum.hpp"

#include "merlin/error.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

namespace merlin::curriculum {

using connector::Connector;
using connector::Layout;
using modelstack::StackHandle;
using nlohmann::json;

std::string to_string(StageId s) {
  switch (s) {
    case StageId::map: return "map";
    case StageId::align: return "align";
    case StageId::augment: return "augment";
    case StageId::specialize: return "specialize";
  }
  return "?";
}

StageId stage_from_string(const std::string& s) {
  for (StageId v : {StageId::map, StageId::align, StageId::augment, StageId::specialize})
    if (to_string(v) == s) return v;
  throw ConfigError("unknown stage '" + s + "'");
}

std::string column_label(StageId s) {
  switch (s) {
    case StageId::map: return "Map";
    case StageId::align: return "Align";
    case StageId::augment: return "Aug";
    case StageId::specialize: return "Spe";
  }
  return "?";
}

void StageConfig::validate() const {
  if (epochs < 1) throw ConfigError(to_string(stage) + ": epochs must be >= 1");
  if (batch_size < 1) throw ConfigError(to_string(stage) + ": batch_size must be >= 1");
  if (!(optim.lr >= 0.0) || !std::isfinite(optim.lr)) throw ConfigError(to_string(stage) + ": lr must be >= 0");
  if (optimizer != "adamw") throw ConfigError(to_string(stage) + ": unsupported optimizer '" + optimizer + "'");
}

json StageConfig::to_json() const {
  return {{"stage", curriculum::to_string(stage)},
          {"dataset", dataset.string()},
          {"epochs", epochs},
          {"batch_size", batch_size},
          {"optimizer", optimizer},
          {"optim", optim.to_json()},
          {"seed", seed},
          {"english_only", english_only}};
}

StageConfig StageConfig::from_json(const json& j, StageId stage) {
  StageConfig c;
  c.stage = stage;
  c.dataset = j.value("dataset", std::string());
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.optimizer = j.value("optimizer", c.optimizer);
  c.seed = j.value("seed", c.seed);
  c.english_only = j.value("english_only", c.english_only);
  if (j.contains("optim")) c.optim = AdamWConfig::from_json(j.at("optim"), c.optim);
  if (j.contains("lr")) c.optim.lr = j.at("lr").get<double>();
  c.validate();
  return c;
}

namespace {

datapipe::SchemaKind expected_schema(StageId s) {
  switch (s) {
    case StageId::map: return datapipe::SchemaKind::bitext;
    case StageId::align: return datapipe::SchemaKind::question_pair;
    default: return datapipe::SchemaKind::task;
  }
}

void check_schema(StageId stage, const StageData& data) {
  auto fail = [&](const std::string& got) {
    throw DatasetSchemaError("stage " + to_string(stage) + " expects " + datapipe::to_string(expected_schema(stage)) +
                             " records, got " + got);
  };
  if (stage == StageId::map || stage == StageId::align) {
    if (!data.tasks.empty()) fail("task");
    if (data.pairs.empty()) throw InvalidInput("stage " + to_string(stage) + ": no training pairs");
    const auto want = stage == StageId::map ? datapipe::PairKind::bitext : datapipe::PairKind::question_pair;
    for (const auto& p : data.pairs)
      if (p.kind != want) fail(p.kind == datapipe::PairKind::bitext ? "bitext" : "question_pair");
  } else {
    if (!data.pairs.empty()) fail(data.pairs.front().kind == datapipe::PairKind::bitext ? "bitext" : "question_pair");
    if (data.tasks.empty()) throw InvalidInput("stage " + to_string(stage) + ": no task examples");
    for (const auto& t : data.tasks)
      if (t.split == datapipe::Split::eval)
        throw DatasetSchemaError("stage " + to_string(stage) + ": record " + t.id + " belongs to the eval split");
  }
}

}  // namespace

StageData load_stage_data(const StageConfig& config) {
  if (config.dataset.empty()) throw ConfigError("stage " + to_string(config.stage) + ": no dataset path");
  if (!std::filesystem::exists(config.dataset)) throw MissingArtifact("dataset not found: " + config.dataset.string());
  const datapipe::SchemaKind got = datapipe::detect_schema(config.dataset);
  if (got != expected_schema(config.stage))
    throw DatasetSchemaError("stage " + to_string(config.stage) + " expects " +
                             datapipe::to_string(expected_schema(config.stage)) + " records, " +
                             config.dataset.string() + " holds " + datapipe::to_string(got));
  StageData d;
  switch (config.stage) {
    case StageId::map: d.pairs = datapipe::read_bitext(config.dataset); break;
    case StageId::align: d.pairs = datapipe::read_question_pairs(config.dataset); break;
    default: d.tasks = datapipe::read_tasks(config.dataset); break;
  }
  check_schema(config.stage, d);
  return d;
}

json StageRecord::to_json() const {
  json inv = json::array();
  for (const auto& e : trainable) inv.push_back({{"name", e.name}, {"numel", e.numel}});
  return {{"stage", curriculum::to_string(stage)},
          {"input_digests", input_digests},
          {"output_digests", output_digests},
          {"step_losses", step_losses},
          {"epoch_losses", epoch_losses},
          {"wall_seconds", wall_seconds},
          {"trainable", inv},
          {"examples", examples},
          {"config", config}};
}

ag::Var nll(ag::Tape& tape, StackHandle& stack, ag::Var assembled, std::span<const int> target_ids,
            const modelstack::ForwardContext& ctx) {
  if (target_ids.empty()) throw InvalidInput("nll: empty target");
  const Index n = static_cast<Index>(target_ids.size());
  const Index l = assembled.rows();
  ag::Var input = assembled;
  if (n > 1) {
    const ag::Var t = stack.decoder->embed(tape, target_ids.first(static_cast<std::size_t>(n - 1)));
    const std::vector<ag::Var> parts{assembled, t};
    input = ag::concat_rows(parts);
  }
  std::vector<int> targets(static_cast<std::size_t>(l + n - 1), -1);
  for (Index i = 0; i < n; ++i) targets[static_cast<std::size_t>(l - 1 + i)] = target_ids[static_cast<std::size_t>(i)];
  return ag::cross_entropy(stack.decoder->forward(tape, input, false, ctx).logits, targets);
}

double nll_objective(StackHandle& stack, const connector::AssembledInput& assembled, std::span<const int> target_ids) {
  if (target_ids.empty()) throw InvalidInput("nll_objective: empty target");
  ag::Tape tape;
  tape.set_grad_enabled(false);
  return nll(tape, stack, tape.constant(assembled.embeddings), target_ids).value()(0, 0);
}

namespace {

struct Prepared {
  Matrix states;  // encoder states, or the projected prefix when the connector is frozen
  TokenIds query;
  TokenIds target;
};

std::map<std::string, std::string> snapshot(StackHandle& stack, Connector& c, adapters::AdapterSet* a) {
  std::map<std::string, std::string> d{
      {"encoder", stack.encoder_digest()}, {"decoder", stack.decoder_digest()}, {"connector", c.digest()}};
  if (a != nullptr && a->size() > 0) d["adapters"] = a->digest();
  return d;
}

void require_frozen_base(StackHandle& stack) {
  for (Parameter* p : stack.encoder_parameters())
    if (p->trainable) throw FreezeViolation("encoder tensor " + p->name + " is trainable");
  for (Parameter* p : stack.decoder_parameters())
    if (p->trainable) throw FreezeViolation("decoder tensor " + p->name + " is trainable");
}

void check_unchanged(const std::map<std::string, std::string>& before, const std::map<std::string, std::string>& after,
                     std::initializer_list<const char*> keys) {
  for (const char* k : keys) {
    auto b = before.find(k);
    auto a = after.find(k);
    if (b == before.end() || a == after.end() || b->second != a->second)
      throw FreezeViolation(std::string(k) + " weights changed during a stage that must keep them frozen");
  }
}

std::vector<TrainableEntry> inventory(StackHandle& stack, Connector& c, adapters::AdapterSet* a) {
  std::vector<TrainableEntry> out;
  auto add = [&](const ParamRefs& ps, const std::string& owner) {
    for (Parameter* p : ps)
      if (p->trainable) out.push_back({owner + "/" + p->name, p->numel()});
  };
  add(stack.encoder_parameters(), "encoder");
  add(stack.decoder_parameters(), "decoder");
  add(c.parameters(), "connector");
  if (a != nullptr) add(a->parameters(), "adapters");
  return out;
}

TokenIds with_eos(TokenIds ids, int eos) {
  ids.push_back(eos);
  return ids;
}

/// Shared minibatch loop. `loss_of` records one example on the tape.
template <typename LossFn>
void train(const std::vector<Prepared>& data, ParamRefs params, const StageConfig& config, StageRecord& rec,
           LossFn&& loss_of) {
  const int batch = config.batch_size;
  const int steps_per_epoch = static_cast<int>((data.size() + static_cast<std::size_t>(batch) - 1) / static_cast<std::size_t>(batch));
  AdamWConfig oc = config.optim;
  if (oc.total_steps == 0) oc.total_steps = steps_per_epoch * config.epochs;
  AdamW opt(params, oc);
  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(batch));
      const double w = 1.0 / static_cast<double>(end - start);
      opt.zero_grad();
      double step_sum = 0.0;
      for (std::size_t i = start; i < end; ++i) {
        ag::Tape tape;
        const ag::Var l = loss_of(tape, data[order[i]], rng);
        const double v = l.value()(0, 0);
        if (!std::isfinite(v)) throw InvalidInput("non-finite loss in stage " + to_string(config.stage));
        tape.backward(ag::scale(l, w));
        step_sum += v;
      }
      opt.step();
      rec.step_losses.push_back(step_sum * w);
      epoch_sum += step_sum;
    }
    rec.epoch_losses.push_back(epoch_sum / static_cast<double>(data.size()));
  }
  for (Parameter* p : params) p->grad.resize(0, 0);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

StageRecord run_mapping_substage(StackHandle& stack, Connector& connector, StageId stage, const StageConfig& config,
                                 const StageData& data) {
  if (stage == StageId::specialize) throw PlanError("run_mapping_substage: specialize is not a mapping sub-stage");
  config.validate();
  check_schema(stage, data);
  require_frozen_base(stack);
  for (const auto& name : stack.decoder->projection_names()) {
    const auto& proj = stack.decoder->projection(name);
    if (proj.adapter != nullptr && proj.adapter_enabled)
      throw PlanError("adapters must be absent during " + to_string(stage));
  }
  const auto t0 = std::chrono::steady_clock::now();
  StageRecord rec;
  rec.stage = stage;
  rec.config = config.to_json();
  rec.input_digests = snapshot(stack, connector, nullptr);

  std::vector<Prepared> prepared;
  if (stage == StageId::augment) {
    for (const auto& t : data.tasks)
      prepared.push_back({modelstack::encode(stack, t.question, t.language).states,
                          stack.tokenizer.encode(t.question, t.language),
                          with_eos(stack.tokenizer.encode(t.answer, "en"), stack.eos_id)});
  } else {
    for (const auto& p : data.pairs)
      prepared.push_back({modelstack::encode(stack, p.source, p.language).states, {},
                          with_eos(stack.tokenizer.encode(p.reference, "en"), stack.eos_id)});
  }
  rec.examples = static_cast<int>(prepared.size());

  connector.set_trainable(true);
  rec.trainable = inventory(stack, connector, nullptr);
  const Layout layout = stage == StageId::augment ? Layout::augmented : Layout::prefix_only;
  train(prepared, connector.parameters(), config, rec, [&](ag::Tape& tape, const Prepared& ex, std::mt19937_64&) {
    const ag::Var prefix = connector.forward(tape, tape.constant(ex.states));
    const connector::AssembledVar a = connector::assemble(tape, stack, &connector, prefix, layout, ex.query);
    return nll(tape, stack, a.embeddings, ex.target);
  });
  connector.set_trainable(false);

  rec.output_digests = snapshot(stack, connector, nullptr);
  check_unchanged(rec.input_digests, rec.output_digests, {"encoder", "decoder"});
  rec.wall_seconds = seconds_since(t0);
  return rec;
}

StageRecord run_specialization(StackHandle& stack, Connector& connector, adapters::AdapterSet& adapters,
                               const StageConfig& config, const StageData& data) {
  config.validate();
  check_schema(StageId::specialize, data);
  require_frozen_base(stack);
  if (adapters.size() == 0) throw PlanError("specialize: no adapters attached");
  const auto t0 = std::chrono::steady_clock::now();
  StageRecord rec;
  rec.stage = StageId::specialize;
  rec.config = config.to_json();
  connector.set_trainable(false);
  adapters.set_enabled(true);
  rec.input_digests = snapshot(stack, connector, &adapters);

  std::vector<Prepared> prepared;
  for (const auto& t : data.tasks) {
    if (config.english_only && t.language != "en") continue;
    const modelstack::EncoderStates s = modelstack::encode(stack, t.question, t.language);
    prepared.push_back({connector::project(connector, s).rows, stack.tokenizer.encode(t.question, t.language),
                        with_eos(stack.tokenizer.encode(t.answer, "en"), stack.eos_id)});
  }
  if (prepared.empty()) throw InvalidInput("specialize: no examples left after filtering");
  rec.examples = static_cast<int>(prepared.size());

  adapters.set_trainable(true);
  rec.trainable = inventory(stack, connector, &adapters);
  train(prepared, adapters.parameters(), config, rec, [&](ag::Tape& tape, const Prepared& ex, std::mt19937_64& rng) {
    const connector::AssembledVar a =
        connector::assemble(tape, stack, &connector, tape.constant(ex.states), Layout::augmented, ex.query);
    return nll(tape, stack, a.embeddings, ex.target, modelstack::ForwardContext{true, &rng});
  });
  adapters.set_trainable(false);

  rec.output_digests = snapshot(stack, connector, &adapters);
  check_unchanged(rec.input_digests, rec.output_digests, {"encoder", "decoder", "connector"});
  rec.wall_seconds = seconds_since(t0);
  return rec;
}

std::string infer(StackHandle& stack, Connector& connector, adapters::AdapterSet* adapters, std::string_view query,
                  std::string_view language, int max_new_tokens) {
  if (query.find_first_not_of(" \t\r\n") == std::string_view::npos) throw InvalidInput("infer: empty query");
  if (adapters != nullptr) adapters->set_enabled(true);
  const connector::MappedPrefix prefix = connector::project(connector, modelstack::encode(stack, query, language));
  const TokenIds q = stack.tokenizer.encode(query, language);
  const connector::AssembledInput a = connector::assemble_augmented(stack, prefix, q, &connector);
  return stack.tokenizer.decode(modelstack::generate(stack, a.embeddings, max_new_tokens));
}

void validate_plan(const std::vector<StageId>& plan, bool have_connector_checkpoint) {
  if (plan.empty()) throw PlanError("empty plan");
  for (std::size_t i = 1; i < plan.size(); ++i)
    if (static_cast<int>(plan[i]) <= static_cast<int>(plan[i - 1]))
      throw PlanError("stage " + to_string(plan[i]) + " cannot follow " + to_string(plan[i - 1]));
  if (plan.front() == StageId::specialize && !have_connector_checkpoint)
    throw PlanError("specialize needs a trained connector: add a Stage-I sub-stage or a connector checkpoint");
}

PlanResult run_plan(StackHandle& stack, const std::vector<StageId>& plan, PlanInputs& in) {
  validate_plan(plan, in.connector_checkpoint.has_value());
  PlanResult out;
  if (in.connector_checkpoint) {
    out.connector.emplace(Connector::load(*in.connector_checkpoint));
  } else {
    connector::ConnectorSpec spec = in.connector_spec;
    if (spec.d_enc == 0) spec.d_enc = stack.d_enc();
    if (spec.d_llm == 0) spec.d_llm = stack.d_llm();
    out.connector.emplace(spec, in.connector_seed);
    if (spec.learned_sep) out.connector->init_sep(modelstack::embed_tokens(stack, std::span<const int>(&stack.sep_id, 1)).embeddings);
  }
  Connector& conn = *out.connector;
  if (conn.spec().d_enc != stack.d_enc() || conn.spec().d_llm != stack.d_llm())
    throw ShapeError("connector widths do not match the stack");

  std::ofstream ledger;
  if (in.run_dir) {
    std::filesystem::create_directories(*in.run_dir);
    ledger.open(*in.run_dir / "stages.jsonl");
  }
  for (StageId stage : plan) {
    auto cit = in.configs.find(stage);
    StageConfig cfg;
    cfg.stage = stage;
    if (cit != in.configs.end()) cfg = cit->second;
    cfg.stage = stage;
    auto dit = in.data.find(stage);
    const StageData data = dit != in.data.end() ? dit->second : load_stage_data(cfg);
    StageRecord rec;
    if (stage == StageId::specialize) {
      out.adapters = adapters::attach(stack, in.adapter_spec, in.adapter_seed);
      rec = run_specialization(stack, conn, out.adapters, cfg, data);
    } else {
      rec = run_mapping_substage(stack, conn, stage, cfg, data);
    }
    if (!out.records.empty() && out.records.back().output_digests.at("connector") != rec.input_digests.at("connector"))
      throw PlanError("connector lineage broken before " + to_string(stage));
    if (in.run_dir) {
      const auto dir = *in.run_dir / to_string(stage);
      if (stage == StageId::specialize)
        out.adapters.save(dir / "adapters");
      else
        conn.save(dir / "connector");
      ledger << rec.to_json().dump() << '\n';
      ledger.flush();
    }
    out.records.push_back(std::move(rec));
  }

  json columns = json::object();
  for (StageId s : {StageId::map, StageId::align, StageId::augment, StageId::specialize})
    columns[column_label(s)] = std::find(plan.begin(), plan.end(), s) != plan.end();
  std::string setting = "custom";
  if (plan.size() == 4) setting = "full";
  if (plan == std::vector<StageId>{StageId::map, StageId::augment}) setting = "mindmerger";
  json stages = json::array();
  for (StageId s : plan) stages.push_back(to_string(s));
  out.manifest = {{"plan", stages},
                  {"columns", columns},
                  {"setting", setting},
                  {"connector_digest", conn.digest()},
                  {"connector_spec", conn.spec().to_json()}};
  if (out.adapters.size() > 0) {
    out.manifest["adapter_digest"] = out.adapters.digest();
    out.manifest["adapter_spec"] = out.adapters.spec().to_json();
  }
  if (in.run_dir) {
    conn.save(*in.run_dir / "connector");
    if (out.adapters.size() > 0) out.adapters.save(*in.run_dir / "adapters");
    std::ofstream pj(*in.run_dir / "plan.json");
    pj << out.manifest.dump(2) << '\n';
  }
  return out;
}

}  // namespace merlin::curriculum
