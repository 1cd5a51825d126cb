#pragma once

#include "merlin/tensor.hpp"

#include <nlohmann/json.hpp>

#include <vector>

namespace merlin {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  /// Linear warmup from 0 to `lr` over this many steps.
  int warmup_steps = 0;
  /// Total steps of the run; with `final_lr_ratio < 1` the rate decays
  /// linearly after warmup down to `lr * final_lr_ratio` at `total_steps`.
  int total_steps = 0;
  double final_lr_ratio = 1.0;
  /// Global gradient-norm clip; <= 0 disables.
  double clip_norm = 1.0;

  nlohmann::json to_json() const;
  static AdamWConfig from_json(const nlohmann::json& j);
  static AdamWConfig from_json(const nlohmann::json& j, AdamWConfig defaults);
};

/// Adam with decoupled weight decay over the trainable subset of `params`.
/// Frozen parameters are never touched, not even by weight decay.
class AdamW {
 public:
  AdamW(ParamRefs params, AdamWConfig cfg);

  void zero_grad();
  /// Applies one update from the accumulated gradients.
  void step();
  double current_lr() const;
  int steps_taken() const { return t_; }

 private:
  ParamRefs params_;
  AdamWConfig cfg_;
  std::vector<Matrix> m_, v_;
  int t_ = 0;
};

}  // namespace merlin
