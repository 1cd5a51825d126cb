#pragma once

#include "merlin/autograd.hpp"
#include "merlin/modelstack/stack.hpp"

#include <cmath>
#include <functional>
#include <string>
#include <vector>

namespace merlin::testing {

/// Small stack for shape and gradient tests: d_enc = d_llm = 8, two layers.
inline modelstack::StackHandle tiny_stack(int d_enc = 8, int d_llm = 8, int n_layers = 2, std::uint64_t seed = 7) {
  const std::vector<std::string> texts = {"the cat sat on the mat .", "zo ka mi", "what is 3 plus 4 ?"};
  modelstack::Tokenizer tok = modelstack::Tokenizer::build(texts, {"en", "xa"});
  modelstack::ToyConfig cfg;
  cfg.d_enc = d_enc;
  cfg.d_llm = d_llm;
  cfg.n_layers = n_layers;
  cfg.n_heads = 2;
  cfg.enc_heads = 2;
  modelstack::ToyAlignment align;
  align.groups = {{{"cat", "en"}, {"zo", "xa"}}};
  align.default_noise = 0.1;
  return modelstack::build_toy_stack(std::move(tok), cfg, align, seed);
}

/// Worst relative disagreement between the analytic gradient of `loss` with
/// respect to `p` and a central finite difference, measured per tensor as
/// ||g_a - g_n|| / max(||g_a||, ||g_n||).
inline double fd_relative_error(Parameter& p, const std::function<double(bool backward)>& loss, double h = 1e-6) {
  p.grad.resize(0, 0);
  loss(true);
  const Matrix analytic = p.grad.size() == 0 ? Matrix::Zero(p.value.rows(), p.value.cols()) : p.grad;
  Matrix numeric(p.value.rows(), p.value.cols());
  for (Index i = 0; i < p.value.size(); ++i) {
    const double orig = p.value.data()[i];
    p.value.data()[i] = orig + h;
    const double up = loss(false);
    p.value.data()[i] = orig - h;
    const double down = loss(false);
    p.value.data()[i] = orig;
    numeric.data()[i] = (up - down) / (2.0 * h);
  }
  const double scale = std::max({analytic.norm(), numeric.norm(), 1e-12});
  return (analytic - numeric).norm() / scale;
}

}  // namespace merlin::testing
