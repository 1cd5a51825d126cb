#include "merlin/modelstack/stack.hpp"

#include "merlin/error.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

namespace merlin::modelstack {

std::string StackHandle::encoder_digest() const {
  const ParamRefs p = encoder->parameters();
  return digest(p);
}

std::string StackHandle::decoder_digest() const {
  const ParamRefs p = decoder->parameters();
  return digest(p);
}

void StackHandle::validate() const {
  if (!encoder || !decoder) throw InvalidInput("stack: encoder and decoder are required");
  for (int id : {bos_id, sep_id, eos_id})
    if (id < 0 || id >= decoder->vocab_size()) throw InvalidInput("stack: special token id outside decoder vocabulary");
  if (tokenizer.size() != decoder->vocab_size()) throw InvalidInput("stack: tokenizer and decoder vocabulary differ");
}

EncoderStates encode(StackHandle& stack, std::string_view source_text, std::string_view language) {
  const TokenIds ids = stack.tokenizer.encode(source_text, language);
  if (ids.empty()) throw InvalidInput("encode: source text is empty after tokenization");
  ag::Tape tape;
  tape.set_grad_enabled(false);
  return EncoderStates{stack.encoder->forward(tape, ids).value()};
}

TokenEmbeddings embed_tokens(StackHandle& stack, std::span<const int> token_ids) {
  ag::Tape tape;
  tape.set_grad_enabled(false);
  return TokenEmbeddings{stack.decoder->embed(tape, token_ids).value(), TokenIds(token_ids.begin(), token_ids.end())};
}

DecoderOutput decoder_forward(StackHandle& stack, const Matrix& input_embeddings, bool collect_hidden) {
  ag::Tape tape;
  tape.set_grad_enabled(false);
  const DecoderTrace tr = stack.decoder->forward(tape, tape.constant(input_embeddings), collect_hidden, {});
  DecoderOutput out{tr.logits.value(), {}};
  for (const ag::Var& h : tr.hidden) out.hidden_states.push_back(h.value());
  return out;
}

TokenIds generate(StackHandle& stack, const Matrix& input_embeddings, int max_new_tokens) {
  if (max_new_tokens < 1) throw InvalidInput("generate: max_new_tokens must be >= 1");
  if (input_embeddings.cols() != stack.d_llm()) throw ShapeError("generate: input width differs from d_llm");
  TokenIds out;
  Matrix seq = input_embeddings;
  for (int step = 0; step < max_new_tokens; ++step) {
    ag::Tape tape;
    tape.set_grad_enabled(false);
    const DecoderTrace tr = stack.decoder->forward(tape, tape.constant(seq), false, {});
    const Matrix& logits = tr.logits.value();
    Index best = 0;
    logits.row(logits.rows() - 1).maxCoeff(&best);  // first maximum = lowest id
    const int tok = static_cast<int>(best);
    if (tok == stack.eos_id) break;
    out.push_back(tok);
    if (step + 1 == max_new_tokens) break;
    const Matrix e = stack.decoder->embed(tape, std::span<const int>(&out.back(), 1)).value();
    seq.conservativeResize(seq.rows() + 1, Eigen::NoChange);
    seq.row(seq.rows() - 1) = e.row(0);
  }
  return out;
}

StackHandle build_toy_stack(Tokenizer tokenizer, ToyConfig cfg, const ToyAlignment& alignment, std::uint64_t seed) {
  cfg.vocab_size = tokenizer.size();
  std::mt19937_64 rng(seed);
  StackHandle stack;
  auto enc = std::make_unique<ToyEncoder>(cfg, rng);
  auto dec = std::make_unique<ToyDecoder>(cfg, rng);

  std::vector<double> noise(static_cast<std::size_t>(cfg.vocab_size), alignment.default_noise);
  std::vector<std::vector<int>> groups;
  for (const auto& g : alignment.groups) {
    std::vector<int> ids;
    for (const auto& m : g) {
      const int id = tokenizer.id(m.token);
      if (id < 0) throw InvalidInput("alignment token '" + m.token + "' missing from vocabulary");
      auto it = alignment.noise_by_language.find(m.language);
      noise[static_cast<std::size_t>(id)] = it == alignment.noise_by_language.end() ? alignment.default_noise : it->second;
      ids.push_back(id);
    }
    groups.push_back(std::move(ids));
  }
  enc->align_embeddings(groups, noise, rng);

  stack.tokenizer = std::move(tokenizer);
  stack.encoder = std::move(enc);
  stack.decoder = std::move(dec);
  stack.architecture = cfg.to_json();
  stack.architecture["kind"] = "toy";
  stack.validate();
  return stack;
}

std::vector<double> pretrain_decoder(StackHandle& stack, const std::vector<PretrainExample>& data,
                                     const PretrainConfig& cfg) {
  if (data.empty()) throw InvalidInput("pretrain_decoder: no data");
  ParamRefs params = stack.decoder_parameters();
  for (Parameter* p : params) p->trainable = true;
  AdamWConfig oc = cfg.optim;
  if (oc.total_steps == 0) oc.total_steps = cfg.steps;
  AdamW opt(params, oc);
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t cursor = 0;
  std::vector<double> logged;
  double window = 0.0;
  int window_n = 0;
  for (int step = 0; step < cfg.steps; ++step) {
    opt.zero_grad();
    for (int b = 0; b < cfg.batch_size; ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const PretrainExample& ex = data[order[cursor++]];
      TokenIds seq{stack.bos_id};
      seq.insert(seq.end(), ex.prompt.begin(), ex.prompt.end());
      seq.push_back(stack.sep_id);
      seq.insert(seq.end(), ex.completion.begin(), ex.completion.end());
      seq.push_back(stack.eos_id);
      const TokenIds input(seq.begin(), seq.end() - 1);
      const TokenIds target(seq.begin() + 1, seq.end());
      ag::Tape tape;
      const ag::Var x = stack.decoder->embed(tape, input);
      const ag::Var loss = ag::cross_entropy(stack.decoder->forward(tape, x, false, {}).logits, target);
      tape.backward(ag::scale(loss, 1.0 / cfg.batch_size));
      window += loss.value()(0, 0);
      ++window_n;
    }
    opt.step();
    if (cfg.log_every > 0 && (step + 1) % cfg.log_every == 0) {
      logged.push_back(window / window_n);
      window = 0.0;
      window_n = 0;
    }
  }
  if (window_n > 0) logged.push_back(window / window_n);
  for (Parameter* p : params) {
    p->trainable = false;
    p->grad.resize(0, 0);
  }
  return logged;
}

void save_stack(StackHandle& stack, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const ParamRefs enc = stack.encoder_parameters();
  const ParamRefs dec = stack.decoder_parameters();
  save_blob(dir / "encoder.bin", enc);
  save_blob(dir / "decoder.bin", dec);
  {
    std::ofstream out(dir / "tokenizer.json");
    out << stack.tokenizer.to_json().dump() << '\n';
  }
  nlohmann::json meta = {
      {"architecture", stack.architecture},
      {"d_enc", stack.d_enc()},
      {"d_llm", stack.d_llm()},
      {"vocab_size", stack.vocab_size()},
      {"n_layers", stack.n_layers()},
      {"special_tokens", {{"bos", stack.bos_id}, {"sep", stack.sep_id}, {"eos", stack.eos_id}}},
      {"digests", {{"encoder", digest(enc)}, {"decoder", digest(dec)}}},
  };
  std::ofstream out(dir / "meta.json");
  out << meta.dump(2) << '\n';
}

StackHandle load_stack(const std::filesystem::path& dir) {
  std::ifstream meta_in(dir / "meta.json");
  if (!meta_in) throw MissingArtifact("no stack checkpoint at " + dir.string());
  const nlohmann::json meta = nlohmann::json::parse(meta_in);
  const nlohmann::json& arch = meta.at("architecture");
  if (arch.value("kind", "") != "toy") throw InvalidInput("only toy stacks can be loaded from disk");
  std::ifstream tok_in(dir / "tokenizer.json");
  if (!tok_in) throw MissingArtifact("missing tokenizer.json in " + dir.string());
  Tokenizer tok = Tokenizer::from_json(nlohmann::json::parse(tok_in));
  const ToyConfig cfg = ToyConfig::from_json(arch);
  std::mt19937_64 rng(0);
  StackHandle stack;
  stack.tokenizer = std::move(tok);
  stack.encoder = std::make_unique<ToyEncoder>(cfg, rng);
  stack.decoder = std::make_unique<ToyDecoder>(cfg, rng);
  stack.architecture = arch;
  const auto& sp = meta.at("special_tokens");
  stack.bos_id = sp.at("bos").get<int>();
  stack.sep_id = sp.at("sep").get<int>();
  stack.eos_id = sp.at("eos").get<int>();
  const ParamRefs enc = stack.encoder_parameters();
  const ParamRefs dec = stack.decoder_parameters();
  load_blob(dir / "encoder.bin", enc);
  load_blob(dir / "decoder.bin", dec);
  if (digest(enc) != meta.at("digests").at("encoder").get<std::string>() ||
      digest(dec) != meta.at("digests").at("decoder").get<std::string>())
    throw DigestMismatch("stack weights in " + dir.string() + " do not match meta.json digests");
  stack.validate();
  return stack;
}

}  // namespace merlin::modelstack
