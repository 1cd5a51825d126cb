#pragma once

#include "merlin/autograd.hpp"
#include "merlin/tensor.hpp"

#include <random>
#include <span>
#include <string>
#include <vector>

namespace merlin::modelstack {

struct ForwardContext {
  /// Enables train-only behaviour such as adapter dropout.
  bool training = false;
  std::mt19937_64* rng = nullptr;
};

/// Hook that replaces the plain `x · Wᵀ` of a named projection. The
/// adapters module provides LoRA and DoRA implementations.
class ProjectionAdapter {
 public:
  virtual ~ProjectionAdapter() = default;
  virtual ag::Var apply(ag::Tape& tape, ag::Var x, Parameter& base, const ForwardContext& ctx) = 0;
};

/// A named bias-free linear map inside the decoder, weight stored (out, in).
struct Projection {
  Parameter weight;
  ProjectionAdapter* adapter = nullptr;  // non-owning
  bool adapter_enabled = true;

  Index in_features() const { return weight.value.cols(); }
  Index out_features() const { return weight.value.rows(); }

  ag::Var apply(ag::Tape& tape, ag::Var x, const ForwardContext& ctx) {
    if (adapter != nullptr && adapter_enabled) return adapter->apply(tape, x, weight, ctx);
    return ag::linear(x, tape.parameter(weight));
  }
};

/// Frozen bidirectional sequence encoder (the multilingual encoder slot).
class SequenceEncoder {
 public:
  virtual ~SequenceEncoder() = default;
  virtual int d_model() const = 0;
  virtual ag::Var forward(ag::Tape& tape, std::span<const int> ids) = 0;
  virtual ParamRefs parameters() = 0;
};

struct DecoderTrace {
  ag::Var logits;
  /// Empty unless hidden states were requested; otherwise n_layers + 1
  /// entries, the first being the input embeddings.
  std::vector<ag::Var> hidden;
};

/// Frozen autoregressive decoder language model (the LLM slot).
class DecoderLM {
 public:
  virtual ~DecoderLM() = default;
  virtual int vocab_size() const = 0;
  virtual int d_model() const = 0;
  virtual int n_layers() const = 0;
  /// Plain row lookup into the token-embedding table.
  virtual ag::Var embed(ag::Tape& tape, std::span<const int> ids) = 0;
  virtual DecoderTrace forward(ag::Tape& tape, ag::Var inputs, bool collect_hidden, const ForwardContext& ctx) = 0;
  /// Fully qualified projection names, e.g. `layers.0.q_proj`.
  virtual std::vector<std::string> projection_names() const = 0;
  virtual Projection& projection(const std::string& name) = 0;
  /// Base weights only; adapter tensors are never included.
  virtual ParamRefs parameters() = 0;
};

}  // namespace merlin::modelstack
