#include "merlin/optim.hpp"

#include <algorithm>
#include <cmath>

namespace merlin {

nlohmann::json AdamWConfig::to_json() const {
  return {{"optimizer", "adamw"},    {"lr", lr},
          {"beta1", beta1},          {"beta2", beta2},
          {"eps", eps},              {"weight_decay", weight_decay},
          {"warmup_steps", warmup_steps}, {"total_steps", total_steps},
          {"final_lr_ratio", final_lr_ratio}, {"clip_norm", clip_norm}};
}

AdamWConfig AdamWConfig::from_json(const nlohmann::json& j) { return from_json(j, AdamWConfig{}); }

AdamWConfig AdamWConfig::from_json(const nlohmann::json& j, AdamWConfig d) {
  d.lr = j.value("lr", d.lr);
  d.beta1 = j.value("beta1", d.beta1);
  d.beta2 = j.value("beta2", d.beta2);
  d.eps = j.value("eps", d.eps);
  d.weight_decay = j.value("weight_decay", d.weight_decay);
  d.warmup_steps = j.value("warmup_steps", d.warmup_steps);
  d.total_steps = j.value("total_steps", d.total_steps);
  d.final_lr_ratio = j.value("final_lr_ratio", d.final_lr_ratio);
  d.clip_norm = j.value("clip_norm", d.clip_norm);
  return d;
}

AdamW::AdamW(ParamRefs params, AdamWConfig cfg) : cfg_(cfg) {
  for (Parameter* p : params)
    if (p->trainable) params_.push_back(p);
  for (Parameter* p : params_) {
    m_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    v_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
  }
  zero_grad();
}

void AdamW::zero_grad() {
  for (Parameter* p : params_) p->zero_grad();
}

double AdamW::current_lr() const {
  const int step = t_ + 1;
  if (cfg_.warmup_steps > 0 && step <= cfg_.warmup_steps)
    return cfg_.lr * static_cast<double>(step) / static_cast<double>(cfg_.warmup_steps);
  if (cfg_.final_lr_ratio < 1.0 && cfg_.total_steps > cfg_.warmup_steps) {
    const double frac = std::clamp(static_cast<double>(step - cfg_.warmup_steps) /
                                       static_cast<double>(cfg_.total_steps - cfg_.warmup_steps),
                                   0.0, 1.0);
    return cfg_.lr * (1.0 - frac * (1.0 - cfg_.final_lr_ratio));
  }
  return cfg_.lr;
}

void AdamW::step() {
  const double lr = current_lr();
  ++t_;
  double scale = 1.0;
  if (cfg_.clip_norm > 0.0) {
    double sq = 0.0;
    for (Parameter* p : params_) sq += p->grad.squaredNorm();
    const double norm = std::sqrt(sq);
    if (norm > cfg_.clip_norm) scale = cfg_.clip_norm / norm;
  }
  if (lr == 0.0) return;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
  const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = *params_[i];
    const Matrix g = p.grad * scale;
    m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
    v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
    if (cfg_.weight_decay > 0.0) p.value *= (1.0 - lr * cfg_.weight_decay);
    p.value.array() -= lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + cfg_.eps);
  }
}

}  // namespace merlin
