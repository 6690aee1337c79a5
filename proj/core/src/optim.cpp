#include "rmkd/optim.hpp"

#include <cmath>

#include "rmkd/error.hpp"

namespace rmkd {

AdamState::AdamState(std::span<const Tensor> params, AdamConfig config) : hyper(config) {
  m.reserve(params.size());
  v.reserve(params.size());
  for (const Tensor& p : params) {
    m.emplace_back(p.shape(), 0.0);
    v.emplace_back(p.shape(), 0.0);
  }
}

void adam_step(std::span<Tensor> params, std::span<const Tensor> grads, AdamState& state) {
  if (params.size() != grads.size() || params.size() != state.m.size()) {
    throw DimensionError("adam_step: parameter, gradient and state counts differ");
  }
  state.step_count += 1;
  const auto& h = state.hyper;
  const double t = static_cast<double>(state.step_count);
  const double correction1 = 1.0 - std::pow(h.beta1, t);
  const double correction2 = 1.0 - std::pow(h.beta2, t);
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (params[p].shape() != grads[p].shape()) {
      throw DimensionError("adam_step: gradient shape " + shape_str(grads[p].shape()) + " for parameter " +
                           shape_str(params[p].shape()));
    }
    auto& m = state.m[p];
    auto& v = state.v[p];
    for (std::size_t i = 0; i < params[p].numel(); ++i) {
      const double g = grads[p][i];
      m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g;
      v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
      const double m_hat = m[i] / correction1;
      const double v_hat = v[i] / correction2;
      params[p][i] -= h.learning_rate * m_hat / (std::sqrt(v_hat) + h.epsilon);
    }
  }
}

double global_norm(std::span<const Tensor> grads) {
  double sq = 0.0;
  for (const Tensor& g : grads)
    for (double v : g.data()) sq += v * v;
  return std::sqrt(sq);
}

double clip_grad_norm(std::span<Tensor> grads, double threshold) {
  if (!(threshold > 0.0)) throw ConfigError("clip threshold must be positive");
  const double norm = global_norm(grads);
  // Slack absorbs the rounding left by a previous clip, keeping clipping idempotent.
  if (norm <= threshold * (1.0 + 1e-12)) return norm;
  const double factor = threshold / norm;
  for (Tensor& g : grads)
    for (double& v : g.storage()) v *= factor;
  return global_norm(grads);
}

}  // namespace rmkd
