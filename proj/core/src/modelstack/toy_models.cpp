#include "merlin/modelstack/toy_models.hpp"

#include "merlin/error.hpp"

#include <cmath>

namespace merlin::modelstack {

nlohmann::json ToyConfig::to_json() const {
  return {{"vocab_size", vocab_size}, {"d_enc", d_enc},         {"d_llm", d_llm},     {"n_layers", n_layers},
          {"n_heads", n_heads},       {"enc_layers", enc_layers}, {"enc_heads", enc_heads}, {"ff_mult", ff_mult},
          {"rope_base", rope_base}};
}

ToyConfig ToyConfig::from_json(const nlohmann::json& j) {
  ToyConfig c;
  c.vocab_size = j.at("vocab_size").get<int>();
  c.d_enc = j.value("d_enc", c.d_enc);
  c.d_llm = j.value("d_llm", c.d_llm);
  c.n_layers = j.value("n_layers", c.n_layers);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.enc_layers = j.value("enc_layers", c.enc_layers);
  c.enc_heads = j.value("enc_heads", c.enc_heads);
  c.ff_mult = j.value("ff_mult", c.ff_mult);
  c.rope_base = j.value("rope_base", c.rope_base);
  return c;
}

namespace {

Projection make_projection(const std::string& name, int out, int in, double stddev, std::mt19937_64& rng) {
  Projection p;
  p.weight = Parameter(name, gaussian(out, in, stddev, rng));
  return p;
}

}  // namespace

ToyBlock::ToyBlock(const std::string& prefix, int d, int ff, std::mt19937_64& rng)
    : attn_norm(prefix + "attn_norm", Matrix::Ones(1, d)),
      q_proj(make_projection(prefix + "q_proj", d, d, 1.0 / std::sqrt(d), rng)),
      k_proj(make_projection(prefix + "k_proj", d, d, 1.0 / std::sqrt(d), rng)),
      v_proj(make_projection(prefix + "v_proj", d, d, 1.0 / std::sqrt(d), rng)),
      o_proj(make_projection(prefix + "o_proj", d, d, 0.5 / std::sqrt(d), rng)),
      mlp_norm(prefix + "mlp_norm", Matrix::Ones(1, d)),
      up_proj(make_projection(prefix + "up_proj", ff, d, 1.0 / std::sqrt(d), rng)),
      down_proj(make_projection(prefix + "down_proj", d, ff, 0.5 / std::sqrt(ff), rng)) {}

ag::Var ToyBlock::forward(ag::Tape& tape, ag::Var h, int n_heads, bool causal, double rope_base,
                          const ForwardContext& ctx) {
  const ag::Var a = ag::rms_norm(h, tape.parameter(attn_norm));
  const ag::Var q = ag::rope(q_proj.apply(tape, a, ctx), n_heads, rope_base);
  const ag::Var k = ag::rope(k_proj.apply(tape, a, ctx), n_heads, rope_base);
  const ag::Var v = v_proj.apply(tape, a, ctx);
  h = ag::add(h, o_proj.apply(tape, ag::attention(q, k, v, n_heads, causal), ctx));
  const ag::Var m = ag::rms_norm(h, tape.parameter(mlp_norm));
  return ag::add(h, down_proj.apply(tape, ag::gelu(up_proj.apply(tape, m, ctx)), ctx));
}

void ToyBlock::collect(ParamRefs& out) {
  out.push_back(&attn_norm);
  for (Projection* p : {&q_proj, &k_proj, &v_proj, &o_proj}) out.push_back(&p->weight);
  out.push_back(&mlp_norm);
  out.push_back(&up_proj.weight);
  out.push_back(&down_proj.weight);
}

Projection* ToyBlock::find(const std::string& local_name) {
  if (local_name == "q_proj") return &q_proj;
  if (local_name == "k_proj") return &k_proj;
  if (local_name == "v_proj") return &v_proj;
  if (local_name == "o_proj") return &o_proj;
  if (local_name == "up_proj") return &up_proj;
  if (local_name == "down_proj") return &down_proj;
  return nullptr;
}

ToyEncoder::ToyEncoder(const ToyConfig& cfg, std::mt19937_64& rng)
    : cfg_(cfg),
      embed_("encoder.embed", gaussian(cfg.vocab_size, cfg.d_enc, 1.0, rng)),
      final_norm_("encoder.final_norm", Matrix::Ones(1, cfg.d_enc)) {
  blocks_.reserve(static_cast<std::size_t>(cfg.enc_layers));
  for (int i = 0; i < cfg.enc_layers; ++i)
    blocks_.emplace_back("encoder.layers." + std::to_string(i) + ".", cfg.d_enc, cfg.ff_mult * cfg.d_enc, rng);
}

ag::Var ToyEncoder::forward(ag::Tape& tape, std::span<const int> ids) {
  if (ids.empty()) throw InvalidInput("encoder: empty token sequence");
  const ForwardContext ctx;
  ag::Var h = ag::embedding(tape.parameter(embed_), ids);
  for (auto& b : blocks_) h = b.forward(tape, h, cfg_.enc_heads, /*causal=*/false, cfg_.rope_base, ctx);
  return ag::rms_norm(h, tape.parameter(final_norm_));
}

ParamRefs ToyEncoder::parameters() {
  ParamRefs out{&embed_};
  for (auto& b : blocks_) b.collect(out);
  out.push_back(&final_norm_);
  return out;
}

void ToyEncoder::align_embeddings(const std::vector<std::vector<int>>& groups,
                                  const std::vector<double>& noise_by_token, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  for (const auto& group : groups) {
    Eigen::RowVectorXd base(cfg_.d_enc);
    for (Index j = 0; j < base.size(); ++j) base(j) = dist(rng);
    for (int tok : group) {
      if (tok < 0 || tok >= cfg_.vocab_size) throw InvalidTokenId("align_embeddings: token outside vocabulary");
      const double s = noise_by_token.at(static_cast<std::size_t>(tok));
      for (Index j = 0; j < base.size(); ++j) embed_.value(tok, j) = base(j) + s * dist(rng);
    }
  }
}

ToyDecoder::ToyDecoder(const ToyConfig& cfg, std::mt19937_64& rng)
    : cfg_(cfg),
      embed_("decoder.embed", gaussian(cfg.vocab_size, cfg.d_llm, 1.0 / std::sqrt(cfg.d_llm), rng)),
      final_norm_("decoder.final_norm", Matrix::Ones(1, cfg.d_llm)) {
  if (cfg.d_llm % cfg.n_heads != 0) throw ShapeError("decoder width must divide into heads");
  blocks_.reserve(static_cast<std::size_t>(cfg.n_layers));
  for (int i = 0; i < cfg.n_layers; ++i)
    blocks_.emplace_back("decoder.layers." + std::to_string(i) + ".", cfg.d_llm, cfg.ff_mult * cfg.d_llm, rng);
}

ag::Var ToyDecoder::embed(ag::Tape& tape, std::span<const int> ids) {
  if (ids.empty()) return tape.constant(Matrix(0, cfg_.d_llm));
  return ag::embedding(tape.parameter(embed_), ids);
}

DecoderTrace ToyDecoder::forward(ag::Tape& tape, ag::Var inputs, bool collect_hidden, const ForwardContext& ctx) {
  if (inputs.cols() != cfg_.d_llm)
    throw ShapeError("decoder: input width " + std::to_string(inputs.cols()) + " != d_llm " +
                     std::to_string(cfg_.d_llm));
  if (inputs.rows() < 1) throw InvalidInput("decoder: empty input sequence");
  DecoderTrace trace;
  ag::Var h = inputs;
  if (collect_hidden) trace.hidden.push_back(h);
  for (auto& b : blocks_) {
    h = b.forward(tape, h, cfg_.n_heads, /*causal=*/true, cfg_.rope_base, ctx);
    if (collect_hidden) trace.hidden.push_back(h);
  }
  trace.logits = ag::linear(ag::rms_norm(h, tape.parameter(final_norm_)), tape.parameter(embed_));
  return trace;
}

std::vector<std::string> ToyDecoder::projection_names() const {
  std::vector<std::string> names;
  for (int i = 0; i < cfg_.n_layers; ++i)
    for (const char* p : {"q_proj", "k_proj", "v_proj", "o_proj", "up_proj", "down_proj"})
      names.push_back("layers." + std::to_string(i) + "." + p);
  return names;
}

Projection& ToyDecoder::projection(const std::string& name) {
  // name = layers.<i>.<proj>
  const std::string prefix = "layers.";
  if (name.rfind(prefix, 0) == 0) {
    const auto dot = name.find('.', prefix.size());
    if (dot != std::string::npos) {
      try {
        const int layer = std::stoi(name.substr(prefix.size(), dot - prefix.size()));
        if (layer >= 0 && layer < cfg_.n_layers)
          if (Projection* p = blocks_[static_cast<std::size_t>(layer)].find(name.substr(dot + 1))) return *p;
      } catch (const std::logic_error&) {
      }
    }
  }
  throw UnknownProjection("decoder has no projection named '" + name + "'");
}

ParamRefs ToyDecoder::parameters() {
  ParamRefs out{&embed_};
  for (auto& b : blocks_) b.collect(out);
  out.push_back(&final_norm_);
  return out;
}

}  // namespace merlin::modelstack
