#include "merlin/toy.hpp"

namespace merlin::toy {

using nlohmann::json;

json ToyStackConfig::to_json() const {
  return {{"model", model.to_json()},
          {"pretrain",
           {{"steps", pretrain.steps},
            {"batch_size", pretrain.batch_size},
            {"optim", pretrain.optim.to_json()},
            {"seed", pretrain.seed}}},
          {"seed", seed}};
}

ToyStackConfig ToyStackConfig::from_json(const json& j) {
  ToyStackConfig c;
  if (j.contains("model")) c.model = modelstack::ToyConfig::from_json(j.at("model"));
  if (j.contains("pretrain")) {
    const json& p = j.at("pretrain");
    c.pretrain.steps = p.value("steps", c.pretrain.steps);
    c.pretrain.batch_size = p.value("batch_size", c.pretrain.batch_size);
    c.pretrain.seed = p.value("seed", c.pretrain.seed);
    if (p.contains("optim")) c.pretrain.optim = AdamWConfig::from_json(p.at("optim"), c.pretrain.optim);
  }
  c.seed = j.value("seed", c.seed);
  return c;
}

std::vector<modelstack::PretrainExample> pretraining_examples(const modelstack::StackHandle& stack,
                                                              const datapipe::ToyCorpus& corpus) {
  std::vector<modelstack::PretrainExample> out;
  for (const auto& s : corpus.english_sentences) {
    const TokenIds ids = stack.tokenizer.encode(s, "en");
    out.push_back({ids, ids});
  }
  for (const auto& [q, a] : corpus.english_qa) {
    const TokenIds qi = stack.tokenizer.encode(q, "en");
    TokenIds completion = qi;
    const TokenIds ai = stack.tokenizer.encode(a, "en");
    completion.insert(completion.end(), ai.begin(), ai.end());
    out.push_back({qi, completion});
    out.push_back({qi, ai});
  }
  return out;
}

modelstack::StackHandle build_stack(const datapipe::ToyCorpus& corpus, const ToyStackConfig& cfg,
                                    std::vector<double>* pretrain_log) {
  std::vector<std::string> languages{"en"};
  languages.insert(languages.end(), corpus.config.languages.begin(), corpus.config.languages.end());
  modelstack::Tokenizer tok = modelstack::Tokenizer::build(corpus.all_texts(), languages);
  modelstack::StackHandle stack = modelstack::build_toy_stack(std::move(tok), cfg.model, corpus.alignment(), cfg.seed);
  const auto log = modelstack::pretrain_decoder(stack, pretraining_examples(stack, corpus), cfg.pretrain);
  if (pretrain_log != nullptr) *pretrain_log = log;
  return stack;
}

}  // namespace merlin::toy
