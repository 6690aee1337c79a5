#pragma once

#include <span>
#include <vector>

#include "rmkd/tensor.hpp"

namespace rmkd {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double epsilon = 1e-9;
};

// First and second moments mirror the parameter set exactly and start at zero.
struct AdamState {
  AdamState() = default;
  AdamState(std::span<const Tensor> params, AdamConfig config);

  long step_count = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  AdamConfig hyper;
};

// Bias-corrected Adam update in place; increments state.step_count.
void adam_step(std::span<Tensor> params, std::span<const Tensor> grads, AdamState& state);

double global_norm(std::span<const Tensor> grads);

// Rescales every gradient by threshold / norm when the global L2 norm exceeds
// the threshold. Returns the norm after clipping.
double clip_grad_norm(std::span<Tensor> grads, double threshold);

}  // namespace rmkd
