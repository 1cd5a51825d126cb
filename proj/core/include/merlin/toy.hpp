#pragma once

#include "merlin/datapipe.hpp"
#include "merlin/modelstack/stack.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <vector>

// Builds the desk-scale stand-in for the pretrained encoder / decoder pair:
// a shared tokenizer over the toy corpus, an encoder whose embeddings are
// aligned across the cipher languages, and a decoder pretrained on English
// text only.
namespace merlin::toy {

struct ToyStackConfig {
  modelstack::ToyConfig model;
  modelstack::PretrainConfig pretrain;
  std::uint64_t seed = 1;

  nlohmann::json to_json() const;
  static ToyStackConfig from_json(const nlohmann::json& j);
};

/// English-only decoder pretraining records: sentence echo
/// (`S <sep> S`) and question answering (`Q <sep> Q A`).
std::vector<modelstack::PretrainExample> pretraining_examples(const modelstack::StackHandle& stack,
                                                              const datapipe::ToyCorpus& corpus);

modelstack::StackHandle build_stack(const datapipe::ToyCorpus& corpus, const ToyStackConfig& cfg,
                                    std::vector<double>* pretrain_log = nullptr);

}  // namespace merlin::toy
