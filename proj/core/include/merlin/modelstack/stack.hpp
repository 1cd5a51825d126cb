#pragma once

#include "merlin/modelstack/interfaces.hpp"
#include "merlin/modelstack/tokenizer.hpp"
#include "merlin/modelstack/toy_models.hpp"
#include "merlin/optim.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

namespace merlin::modelstack {

struct EncoderStates {
  Matrix states;  // (length, d_enc)
  Index length() const { return states.rows(); }
};

struct TokenEmbeddings {
  Matrix embeddings;  // (m, d_llm)
  TokenIds token_ids;
};

struct DecoderOutput {
  Matrix logits;                     // (n, vocab)
  std::vector<Matrix> hidden_states;  // n_layers + 1 when collected
};

/// The frozen encoder, the frozen decoder LM and the shared tokenizer. Base
/// weights are never marked trainable by anything in this library except
/// the toy decoder pretraining routine, which runs before a stack is used.
class StackHandle {
 public:
  Tokenizer tokenizer;
  std::unique_ptr<SequenceEncoder> encoder;
  std::unique_ptr<DecoderLM> decoder;
  int bos_id = SpecialIds::bos;
  int sep_id = SpecialIds::sep;
  int eos_id = SpecialIds::eos;
  /// Architecture record written to meta.json (toy stacks only).
  nlohmann::json architecture;

  int d_enc() const { return encoder->d_model(); }
  int d_llm() const { return decoder->d_model(); }
  int vocab_size() const { return decoder->vocab_size(); }
  int n_layers() const { return decoder->n_layers(); }

  ParamRefs encoder_parameters() const { return encoder->parameters(); }
  ParamRefs decoder_parameters() const { return decoder->parameters(); }
  std::string encoder_digest() const;
  std::string decoder_digest() const;

  /// Throws InvalidInput when special ids or widths are inconsistent.
  void validate() const;
};

EncoderStates encode(StackHandle& stack, std::string_view source_text, std::string_view language);
TokenEmbeddings embed_tokens(StackHandle& stack, std::span<const int> token_ids);
DecoderOutput decoder_forward(StackHandle& stack, const Matrix& input_embeddings, bool collect_hidden);
/// Greedy decoding: argmax per step with ties to the lowest id; stops after
/// emitting EOS (not included in the result) or `max_new_tokens` tokens.
TokenIds generate(StackHandle& stack, const Matrix& input_embeddings, int max_new_tokens);

/// Concept groups tie a word to its translations for the toy encoder's
/// aligned initialization; `noise` is the per-token deviation from the group
/// vector (larger = weaker alignment for that language).
struct ToyAlignment {
  struct Member {
    std::string token;
    std::string language;
  };
  std::vector<std::vector<Member>> groups;
  std::map<std::string, double> noise_by_language;
  double default_noise = 0.0;
};

StackHandle build_toy_stack(Tokenizer tokenizer, ToyConfig cfg, const ToyAlignment& alignment, std::uint64_t seed);

struct PretrainExample {
  TokenIds prompt;
  TokenIds completion;
};

struct PretrainConfig {
  int steps = 3000;
  int batch_size = 16;
  AdamWConfig optim{.lr = 3e-3, .warmup_steps = 100, .final_lr_ratio = 0.1, .clip_norm = 1.0};
  std::uint64_t seed = 1;
  int log_every = 0;
};

/// Next-token training of the toy decoder on `<bos> prompt <sep> completion
/// <eos>` sequences. Returns the mean loss of each logged window. Decoder
/// weights are left frozen afterwards.
std::vector<double> pretrain_decoder(StackHandle& stack, const std::vector<PretrainExample>& data,
                                     const PretrainConfig& cfg);

/// Writes encoder.bin, decoder.bin, tokenizer.json and meta.json into `dir`.
void save_stack(StackHandle& stack, const std::filesystem::path& dir);
StackHandle load_stack(const std::filesystem::path& dir);

}  // namespace merlin::modelstack
