#pragma once

#include "merlin/autograd.hpp"
#include "merlin/modelstack/stack.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

namespace merlin::adapters {

enum class Method { lora, dora };

std::string to_string(Method m);
Method method_from_string(const std::string& s);

struct AdapterSpec {
  Method method = Method::dora;
  int rank = 16;
  double alpha = 32.0;
  double dropout = 0.05;
  /// Short names ("q_proj") match that projection in every block; fully
  /// qualified names ("layers.2.q_proj") match one projection.
  std::vector<std::string> targets = {"q_proj", "v_proj"};
  /// Std of the Gaussian used for A; <= 0 means 1/sqrt(in_features).
  double init_std = 0.0;

  void validate() const;
  double scaling() const { return alpha / rank; }
  nlohmann::json to_json() const;
  static AdapterSpec from_json(const nlohmann::json& j);
};

/// Low-rank update attached to one decoder projection.
class LowRankAdapter : public modelstack::ProjectionAdapter {
 public:
  LowRankAdapter(const std::string& target, const Parameter& base, const AdapterSpec& spec, std::mt19937_64& rng);

  ag::Var apply(ag::Tape& tape, ag::Var x, Parameter& base, const modelstack::ForwardContext& ctx) override;

  /// Effective dense weight (out, in) for a merged forward.
  Matrix merged_weight(const Matrix& base) const;

  const std::string& target() const { return target_; }
  ParamRefs parameters();

  Parameter A;  // (r, in)
  Parameter B;  // (out, r)
  Parameter magnitude;  // (out, 1); empty for LoRA

 private:
  std::string target_;
  Method method_;
  double scaling_;
  double dropout_;
};

/// All adapters hooked into one stack. Detaches on destruction.
class AdapterSet {
 public:
  AdapterSet() = default;
  AdapterSet(AdapterSet&&) noexcept;
  AdapterSet& operator=(AdapterSet&&) noexcept;
  AdapterSet(const AdapterSet&) = delete;
  AdapterSet& operator=(const AdapterSet&) = delete;
  ~AdapterSet();

  const AdapterSpec& spec() const { return spec_; }
  std::size_t size() const { return adapters_.size(); }
  LowRankAdapter& at(std::size_t i) { return *adapters_[i]; }
  const LowRankAdapter& at(std::size_t i) const { return *adapters_[i]; }
  ParamRefs parameters();
  void set_trainable(bool on);
  /// Routes the decoder through (or around) the adapter path.
  void set_enabled(bool on);
  std::string digest();
  /// Digest of the decoder base weights the adapters were attached to.
  const std::string& base_digest() const { return base_digest_; }

  /// Writes adapters.bin and adapters.json into `dir`.
  void save(const std::filesystem::path& dir);
  void detach();

 private:
  friend AdapterSet attach(modelstack::StackHandle&, const AdapterSpec&, std::uint64_t);
  friend AdapterSet load(modelstack::StackHandle&, const std::filesystem::path&);

  AdapterSpec spec_;
  modelstack::StackHandle* stack_ = nullptr;
  std::vector<std::unique_ptr<LowRankAdapter>> adapters_;
  std::string base_digest_;
};

/// Hooks a fresh adapter into every matching projection. The adapted model
/// is functionally identical to the base model until B moves.
AdapterSet attach(modelstack::StackHandle& stack, const AdapterSpec& spec, std::uint64_t seed = 0);

/// Restores adapters saved by AdapterSet::save. Throws DigestMismatch when the
/// stack's decoder weights differ from those recorded at save time.
AdapterSet load(modelstack::StackHandle& stack, const std::filesystem::path& dir);

std::int64_t trainable_param_count(const AdapterSet& set);
/// Closed-form count for one target of shape (out, in).
std::int64_t param_count(Method method, int rank, std::int64_t in, std::int64_t out);

}  // namespace merlin::adapters
