#include "merlin/connector.hpp"

#include "merlin/error.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>

namespace merlin::connector {

using modelstack::StackHandle;

std::string to_string(Variant v) {
  switch (v) {
    case Variant::linear: return "linear";
    case Variant::mlp1: return "mlp1";
    case Variant::mlp2: return "mlp2";
    case Variant::mlp3: return "mlp3";
    case Variant::residual_mlp: return "residual_mlp";
  }
  return "?";
}

Variant variant_from_string(const std::string& s) {
  for (Variant v : {Variant::linear, Variant::mlp1, Variant::mlp2, Variant::mlp3, Variant::residual_mlp})
    if (to_string(v) == s) return v;
  throw InvalidInput("unknown connector variant '" + s + "'");
}

void ConnectorSpec::validate() const {
  if (d_enc < 1 || d_llm < 1) throw InvalidInput("connector: dimensions must be positive");
  if (variant != Variant::linear && variant != Variant::mlp1 && hidden < 1)
    throw InvalidInput("connector: hidden width must be >= 1");
  if (activation != "gelu" && activation != "relu" && activation != "identity")
    throw InvalidInput("connector: unsupported activation '" + activation + "'");
}

nlohmann::json ConnectorSpec::to_json() const {
  return {{"variant", to_string(variant)},
          {"d_enc", d_enc},
          {"d_llm", d_llm},
          {"hidden", hidden},
          {"activation", activation},
          {"bias", bias},
          {"skip", skip == SkipMode::linear ? "linear" : "pad"},
          {"learned_sep", learned_sep}};
}

ConnectorSpec ConnectorSpec::from_json(const nlohmann::json& j) {
  ConnectorSpec s;
  s.variant = variant_from_string(j.value("variant", std::string("mlp2")));
  s.d_enc = j.value("d_enc", 0);
  s.d_llm = j.value("d_llm", 0);
  s.hidden = j.value("hidden", s.hidden);
  s.activation = j.value("activation", s.activation);
  s.bias = j.value("bias", s.bias);
  const std::string skip = j.value("skip", std::string("linear"));
  if (skip != "linear" && skip != "pad") throw InvalidInput("connector: skip must be 'linear' or 'pad'");
  s.skip = skip == "linear" ? SkipMode::linear : SkipMode::pad;
  s.learned_sep = j.value("learned_sep", s.learned_sep);
  return s;
}

std::int64_t param_count(const ConnectorSpec& spec) {
  spec.validate();
  const std::int64_t e = spec.d_enc, l = spec.d_llm, h = spec.hidden, b = spec.bias ? 1 : 0;
  std::int64_t n = 0;
  switch (spec.variant) {
    case Variant::linear:
    case Variant::mlp1: n = e * l + b * l; break;
    case Variant::mlp2: n = e * h + b * h + h * l + b * l; break;
    case Variant::mlp3: n = e * h + b * h + h * h + b * h + h * l + b * l; break;
    case Variant::residual_mlp:
      n = e * h + b * h + h * l + b * l;
      if (spec.skip == SkipMode::linear) n += e * l + b * l;
      break;
  }
  if (spec.learned_sep) n += l;
  return n;
}

std::string display_millions(std::int64_t count) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f M", static_cast<double>(count) / 1e6);
  return buf;
}

Connector::Connector(ConnectorSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
  spec_.validate();
  std::mt19937_64 rng(seed);
  int idx = 0;
  auto make = [&](int out, int in) {
    Dense d{Parameter("connector.layers." + std::to_string(idx) + ".weight",
                      gaussian(out, in, 1.0 / std::sqrt(static_cast<double>(in)), rng), true),
            std::nullopt};
    if (spec_.bias) d.bias = Parameter("connector.layers." + std::to_string(idx) + ".bias", Matrix::Zero(1, out), true);
    ++idx;
    return d;
  };
  const int e = spec_.d_enc, l = spec_.d_llm, h = spec_.hidden;
  switch (spec_.variant) {
    case Variant::linear:
    case Variant::mlp1: layers_.push_back(make(l, e)); break;
    case Variant::mlp2:
    case Variant::residual_mlp:
      layers_.push_back(make(h, e));
      layers_.push_back(make(l, h));
      break;
    case Variant::mlp3:
      layers_.push_back(make(h, e));
      layers_.push_back(make(h, h));
      layers_.push_back(make(l, h));
      break;
  }
  if (spec_.variant == Variant::residual_mlp && spec_.skip == SkipMode::linear) {
    skip_ = make(l, e);
    skip_->weight.name = "connector.skip.weight";
    if (skip_->bias) skip_->bias->name = "connector.skip.bias";
  }
  if (spec_.learned_sep) sep_ = Parameter("connector.sep", Matrix::Zero(1, l), true);
}

ag::Var Connector::dense(ag::Tape& tape, Dense& d, ag::Var x) {
  ag::Var y = ag::linear(x, tape.parameter(d.weight));
  if (d.bias) y = ag::add_row(y, tape.parameter(*d.bias));
  return y;
}

ag::Var Connector::activate(ag::Var x) const {
  if (spec_.activation == "gelu") return ag::gelu(x);
  if (spec_.activation == "relu") {
    Matrix mask = (x.value().array() > 0.0).cast<double>().matrix();
    return ag::mul(x, x.tape->constant(std::move(mask)));
  }
  return x;
}

ag::Var Connector::forward(ag::Tape& tape, ag::Var states) {
  if (states.cols() != spec_.d_enc)
    throw ShapeError("connector: input width " + std::to_string(states.cols()) + " != d_enc " +
                     std::to_string(spec_.d_enc));
  ag::Var h = states;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    h = dense(tape, layers_[i], h);
    const bool last = i + 1 == layers_.size();
    if (!last || spec_.variant == Variant::mlp1) h = activate(h);
  }
  if (spec_.variant == Variant::residual_mlp) {
    if (skip_) {
      h = ag::add(h, dense(tape, *skip_, states));
    } else {
      Matrix pad = Matrix::Zero(spec_.d_enc, spec_.d_llm);
      for (int i = 0; i < std::min(spec_.d_enc, spec_.d_llm); ++i) pad(i, i) = 1.0;
      h = ag::add(h, ag::matmul(states, tape.constant(std::move(pad))));
    }
  }
  return h;
}

ParamRefs Connector::parameters() {
  ParamRefs out;
  for (auto& d : layers_) {
    out.push_back(&d.weight);
    if (d.bias) out.push_back(&*d.bias);
  }
  if (skip_) {
    out.push_back(&skip_->weight);
    if (skip_->bias) out.push_back(&*skip_->bias);
  }
  if (sep_) out.push_back(&*sep_);
  return out;
}

void Connector::set_trainable(bool on) {
  for (Parameter* p : parameters()) p->trainable = on;
}

std::string Connector::digest() {
  const ParamRefs p = parameters();
  return merlin::digest(p);
}

void Connector::init_sep(const Matrix& row) {
  if (!sep_) return;
  if (row.rows() != 1 || row.cols() != spec_.d_llm) throw ShapeError("init_sep: expected a 1 x d_llm row");
  sep_->value = row;
}

void Connector::save(const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const ParamRefs p = parameters();
  save_blob(dir / "connector.bin", p);
  nlohmann::json j = spec_.to_json();
  j["digest"] = digest();
  j["param_count"] = param_count(spec_);
  std::ofstream out(dir / "connector.json");
  out << j.dump(2) << '\n';
}

Connector Connector::load(const std::filesystem::path& dir) {
  std::ifstream in(dir / "connector.json");
  if (!in) throw MissingArtifact("no connector checkpoint at " + dir.string());
  const nlohmann::json j = nlohmann::json::parse(in);
  Connector c(ConnectorSpec::from_json(j), 0);
  const ParamRefs p = c.parameters();
  load_blob(dir / "connector.bin", p);
  if (j.contains("digest") && j.at("digest").get<std::string>() != c.digest())
    throw DigestMismatch("connector weights in " + dir.string() + " do not match the manifest digest");
  return c;
}

MappedPrefix project(Connector& connector, const modelstack::EncoderStates& states) {
  ag::Tape tape;
  tape.set_grad_enabled(false);
  return MappedPrefix{connector.forward(tape, tape.constant(states.states)).value()};
}

AssembledVar assemble(ag::Tape& tape, StackHandle& stack, Connector* connector, ag::Var prefix, Layout layout,
                      std::span<const int> query_ids) {
  if (prefix.rows() < 1) throw InvalidInput("assemble: mapped prefix is empty");
  if (prefix.cols() != stack.d_llm()) throw ShapeError("assemble: prefix width differs from d_llm");
  if (layout == Layout::augmented && query_ids.empty()) throw InvalidInput("assemble: augmented layout needs query ids");
  std::vector<ag::Var> parts;
  parts.push_back(stack.decoder->embed(tape, std::span<const int>(&stack.bos_id, 1)));
  parts.push_back(prefix);
  if (connector != nullptr && connector->sep_vector() != nullptr)
    parts.push_back(tape.parameter(*connector->sep_vector()));
  else
    parts.push_back(stack.decoder->embed(tape, std::span<const int>(&stack.sep_id, 1)));
  Boundaries b;
  b.prefix_len = prefix.rows();
  b.sep = 1 + b.prefix_len;
  b.query_begin = b.sep + 1;
  if (layout == Layout::augmented) {
    parts.push_back(stack.decoder->embed(tape, query_ids));
    b.query_len = static_cast<Index>(query_ids.size());
  }
  return AssembledVar{ag::concat_rows(parts), layout, b};
}

AssembledInput assemble_prefix(StackHandle& stack, const MappedPrefix& prefix, Connector* connector) {
  if (prefix.rows.rows() < 1) throw InvalidInput("assemble_prefix: mapped prefix is empty");
  ag::Tape tape;
  tape.set_grad_enabled(false);
  const AssembledVar a = assemble(tape, stack, connector, tape.constant(prefix.rows), Layout::prefix_only, {});
  return AssembledInput{a.embeddings.value(), a.layout, a.boundaries};
}

AssembledInput assemble_augmented(StackHandle& stack, const MappedPrefix& prefix, std::span<const int> query_ids,
                                  Connector* connector) {
  if (prefix.rows.rows() < 1) throw InvalidInput("assemble_augmented: mapped prefix is empty");
  if (query_ids.empty()) throw InvalidInput("assemble_augmented: query ids are empty");
  ag::Tape tape;
  tape.set_grad_enabled(false);
  const AssembledVar a = assemble(tape, stack, connector, tape.constant(prefix.rows), Layout::augmented, query_ids);
  return AssembledInput{a.embeddings.value(), a.layout, a.boundaries};
}

}  // namespace merlin::connector
