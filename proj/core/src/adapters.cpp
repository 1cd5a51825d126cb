#include "merlin/adapters.hpp"

#include "merlin/error.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace merlin::adapters {

std::string to_string(Method m) { return m == Method::lora ? "lora" : "dora"; }

Method method_from_string(const std::string& s) {
  if (s == "lora") return Method::lora;
  if (s == "dora") return Method::dora;
  throw InvalidInput("unknown adapter method '" + s + "'");
}

void AdapterSpec::validate() const {
  if (rank < 1) throw InvalidInput("adapter rank must be >= 1");
  if (!(alpha > 0.0)) throw InvalidInput("adapter alpha must be > 0");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw InvalidInput("adapter dropout must lie in [0, 1)");
  if (targets.empty()) throw InvalidInput("adapter target set is empty");
}

nlohmann::json AdapterSpec::to_json() const {
  return {{"method", to_string(method)}, {"rank", rank},       {"alpha", alpha},
          {"dropout", dropout},          {"targets", targets}, {"init_std", init_std}};
}

AdapterSpec AdapterSpec::from_json(const nlohmann::json& j) {
  AdapterSpec s;
  s.method = method_from_string(j.value("method", std::string("dora")));
  s.rank = j.value("rank", s.rank);
  s.alpha = j.value("alpha", s.alpha);
  s.dropout = j.value("dropout", s.dropout);
  if (j.contains("targets")) s.targets = j.at("targets").get<std::vector<std::string>>();
  s.init_std = j.value("init_std", s.init_std);
  s.validate();
  return s;
}

LowRankAdapter::LowRankAdapter(const std::string& target, const Parameter& base, const AdapterSpec& spec,
                               std::mt19937_64& rng)
    : target_(target), method_(spec.method), scaling_(spec.scaling()), dropout_(spec.dropout) {
  const Index out = base.value.rows(), in = base.value.cols();
  const double sd = spec.init_std > 0.0 ? spec.init_std : 1.0 / std::sqrt(static_cast<double>(in));
  const std::string prefix = "adapter." + target + ".";
  A = Parameter(prefix + "A", gaussian(spec.rank, in, sd, rng), true);
  B = Parameter(prefix + "B", Matrix::Zero(out, spec.rank), true);
  if (method_ == Method::dora) magnitude = Parameter(prefix + "magnitude", base.value.rowwise().norm(), true);
}

ParamRefs LowRankAdapter::parameters() {
  ParamRefs p{&A, &B};
  if (method_ == Method::dora) p.push_back(&magnitude);
  return p;
}

ag::Var LowRankAdapter::apply(ag::Tape& tape, ag::Var x, Parameter& base, const modelstack::ForwardContext& ctx) {
  if (x.cols() != base.value.cols())
    throw ShapeError("adapter " + target_ + ": input width " + std::to_string(x.cols()) + " != in-features " +
                     std::to_string(base.value.cols()));
  const ag::Var w0 = tape.parameter(base);
  ag::Var xd = x;
  const bool drop = ctx.training && dropout_ > 0.0;
  if (drop) {
    if (ctx.rng == nullptr) throw InvalidInput("adapter dropout needs an rng in training mode");
    std::bernoulli_distribution keep(1.0 - dropout_);
    Matrix m(x.rows(), x.cols());
    const double inv = 1.0 / (1.0 - dropout_);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = keep(*ctx.rng) ? inv : 0.0;
    xd = ag::mask(x, m);
  }
  const ag::Var a = tape.parameter(A);
  const ag::Var b = tape.parameter(B);
  const ag::Var base_out = ag::linear(x, w0);
  const ag::Var delta = ag::scale(ag::linear(ag::linear(xd, a), b), scaling_);
  if (method_ == Method::lora) return ag::add(base_out, delta);

  // DoRA: per-output magnitude over the direction of W0 + s·BA.
  const ag::Var combined = ag::add(w0, ag::scale(ag::matmul(b, a), scaling_));
  const ag::Var factor = ag::div(tape.parameter(magnitude), ag::row_norms(combined));
  if (!drop) return ag::scale_cols(ag::add(base_out, delta), factor);
  const ag::Var base_drop = ag::linear(xd, w0);
  return ag::add(ag::add(base_out, ag::sub(ag::scale_cols(base_drop, factor), base_drop)),
                 ag::scale_cols(delta, factor));
}

Matrix LowRankAdapter::merged_weight(const Matrix& base) const {
  Matrix w = base + scaling_ * (B.value * A.value);
  if (method_ == Method::dora) {
    const Eigen::VectorXd n = w.rowwise().norm();
    for (Index i = 0; i < w.rows(); ++i) w.row(i) *= magnitude.value(i, 0) / n(i);
  }
  return w;
}

AdapterSet::AdapterSet(AdapterSet&& o) noexcept
    : spec_(std::move(o.spec_)),
      stack_(o.stack_),
      adapters_(std::move(o.adapters_)),
      base_digest_(std::move(o.base_digest_)) {
  o.stack_ = nullptr;
  o.adapters_.clear();
}

AdapterSet& AdapterSet::operator=(AdapterSet&& o) noexcept {
  if (this != &o) {
    detach();
    spec_ = std::move(o.spec_);
    stack_ = o.stack_;
    adapters_ = std::move(o.adapters_);
    base_digest_ = std::move(o.base_digest_);
    o.stack_ = nullptr;
    o.adapters_.clear();
  }
  return *this;
}

AdapterSet::~AdapterSet() { detach(); }

void AdapterSet::detach() {
  if (stack_ != nullptr && stack_->decoder) {
    for (auto& a : adapters_) {
      modelstack::Projection& p = stack_->decoder->projection(a->target());
      if (p.adapter == a.get()) p.adapter = nullptr;
    }
  }
  stack_ = nullptr;
  adapters_.clear();
}

ParamRefs AdapterSet::parameters() {
  ParamRefs out;
  for (auto& a : adapters_)
    for (Parameter* p : a->parameters()) out.push_back(p);
  return out;
}

void AdapterSet::set_trainable(bool on) {
  for (Parameter* p : parameters()) p->trainable = on;
}

void AdapterSet::set_enabled(bool on) {
  if (stack_ == nullptr) return;
  for (auto& a : adapters_) stack_->decoder->projection(a->target()).adapter_enabled = on;
}

std::string AdapterSet::digest() {
  const ParamRefs p = parameters();
  return merlin::digest(p);
}

void AdapterSet::save(const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const ParamRefs p = parameters();
  save_blob(dir / "adapters.bin", p);
  std::vector<std::string> names;
  for (auto& a : adapters_) names.push_back(a->target());
  nlohmann::json j = {{"spec", spec_.to_json()},
                      {"attached", names},
                      {"base_digest", base_digest_},
                      {"digest", digest()},
                      {"trainable_params", trainable_param_count(*this)}};
  std::ofstream out(dir / "adapters.json");
  out << j.dump(2) << '\n';
}

namespace {

std::vector<std::string> resolve_targets(modelstack::DecoderLM& dec, const std::vector<std::string>& targets) {
  const std::vector<std::string> all = dec.projection_names();
  std::vector<std::string> out;
  for (const std::string& t : targets) {
    bool found = false;
    for (const std::string& name : all) {
      const bool exact = name == t;
      const bool suffix = name.size() > t.size() && name.compare(name.size() - t.size(), t.size(), t) == 0 &&
                          name[name.size() - t.size() - 1] == '.';
      if (exact || suffix) {
        found = true;
        if (std::find(out.begin(), out.end(), name) == out.end()) out.push_back(name);
      }
    }
    if (!found) throw UnknownProjection("no decoder projection matches target '" + t + "'");
  }
  // Keep decoder order so digests do not depend on how targets were listed.
  std::vector<std::string> ordered;
  for (const std::string& name : all)
    if (std::find(out.begin(), out.end(), name) != out.end()) ordered.push_back(name);
  return ordered;
}

}  // namespace

AdapterSet attach(modelstack::StackHandle& stack, const AdapterSpec& spec, std::uint64_t seed) {
  spec.validate();
  if (!stack.decoder) throw InvalidInput("attach: stack has no decoder");
  const std::vector<std::string> names = resolve_targets(*stack.decoder, spec.targets);
  for (const std::string& n : names)
    if (stack.decoder->projection(n).adapter != nullptr)
      throw InvalidInput("attach: projection '" + n + "' already has an adapter");
  std::mt19937_64 rng(seed);
  AdapterSet set;
  set.spec_ = spec;
  set.stack_ = &stack;
  set.base_digest_ = stack.decoder_digest();
  for (const std::string& n : names) {
    modelstack::Projection& p = stack.decoder->projection(n);
    auto a = std::make_unique<LowRankAdapter>(n, p.weight, spec, rng);
    p.adapter = a.get();
    p.adapter_enabled = true;
    set.adapters_.push_back(std::move(a));
  }
  return set;
}

AdapterSet load(modelstack::StackHandle& stack, const std::filesystem::path& dir) {
  std::ifstream in(dir / "adapters.json");
  if (!in) throw MissingArtifact("no adapter checkpoint at " + dir.string());
  const nlohmann::json j = nlohmann::json::parse(in);
  const std::string base = j.at("base_digest").get<std::string>();
  if (base != stack.decoder_digest())
    throw DigestMismatch("adapters in " + dir.string() + " were trained on different decoder weights");
  AdapterSpec spec = AdapterSpec::from_json(j.at("spec"));
  spec.targets = j.at("attached").get<std::vector<std::string>>();
  AdapterSet set = attach(stack, spec, 0);
  set.spec_ = AdapterSpec::from_json(j.at("spec"));
  const ParamRefs p = set.parameters();
  load_blob(dir / "adapters.bin", p);
  if (j.contains("digest") && j.at("digest").get<std::string>() != set.digest())
    throw DigestMismatch("adapter weights in " + dir.string() + " do not match the manifest digest");
  return set;
}

std::int64_t param_count(Method method, int rank, std::int64_t in, std::int64_t out) {
  std::int64_t n = static_cast<std::int64_t>(rank) * (in + out);
  if (method == Method::dora) n += out;
  return n;
}

std::int64_t trainable_param_count(const AdapterSet& set) {
  std::int64_t n = 0;
  for (std::size_t i = 0; i < set.size(); ++i) {
    const LowRankAdapter& a = set.at(i);
    n += param_count(set.spec().method, set.spec().rank, a.A.value.cols(), a.B.value.rows());
  }
  return n;
}

}  // namespace merlin::adapters
