#pragma once

#include "merlin/modelstack/interfaces.hpp"

#include <nlohmann/json.hpp>

#include <memory>
#include <random>
#include <string>
#include <vector>

namespace merlin::modelstack {

struct ToyConfig {
  int vocab_size = 0;
  int d_enc = 16;
  int d_llm = 32;
  int n_layers = 4;
  int n_heads = 4;
  int enc_layers = 1;
  int enc_heads = 2;
  int ff_mult = 2;
  double rope_base = 10000.0;

  nlohmann::json to_json() const;
  static ToyConfig from_json(const nlohmann::json& j);
};

/// Pre-norm transformer block shared by the toy encoder and decoder.
struct ToyBlock {
  Parameter attn_norm;
  Projection q_proj, k_proj, v_proj, o_proj;
  Parameter mlp_norm;
  Projection up_proj, down_proj;

  ToyBlock(const std::string& prefix, int d, int ff, std::mt19937_64& rng);
  ag::Var forward(ag::Tape& tape, ag::Var h, int n_heads, bool causal, double rope_base, const ForwardContext& ctx);
  void collect(ParamRefs& out);
  Projection* find(const std::string& local_name);
};

class ToyEncoder final : public SequenceEncoder {
 public:
  ToyEncoder(const ToyConfig& cfg, std::mt19937_64& rng);

  int d_model() const override { return cfg_.d_enc; }
  ag::Var forward(ag::Tape& tape, std::span<const int> ids) override;
  ParamRefs parameters() override;

  /// Gives every token of a concept group (a word and its translations)
  /// the same base vector plus per-token noise of the given scale. This is
  /// what makes the toy encoder behave like a pretrained multilingual one.
  void align_embeddings(const std::vector<std::vector<int>>& groups, const std::vector<double>& noise_by_token,
                        std::mt19937_64& rng);

 private:
  ToyConfig cfg_;
  Parameter embed_;
  std::vector<ToyBlock> blocks_;
  Parameter final_norm_;
};

class ToyDecoder final : public DecoderLM {
 public:
  ToyDecoder(const ToyConfig& cfg, std::mt19937_64& rng);

  int vocab_size() const override { return cfg_.vocab_size; }
  int d_model() const override { return cfg_.d_llm; }
  int n_layers() const override { return cfg_.n_layers; }
  ag::Var embed(ag::Tape& tape, std::span<const int> ids) override;
  DecoderTrace forward(ag::Tape& tape, ag::Var inputs, bool collect_hidden, const ForwardContext& ctx) override;
  std::vector<std::string> projection_names() const override;
  Projection& projection(const std::string& name) override;
  ParamRefs parameters() override;

  Parameter& embedding_table() { return embed_; }

 private:
  ToyConfig cfg_;
  Parameter embed_;  // tied with the output head
  std::vector<ToyBlock> blocks_;
  Parameter final_norm_;
};

}  // namespace merlin::modelstack
