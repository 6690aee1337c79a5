#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "rmkd/autodiff.hpp"

namespace rmkd {

// Builds a scalar loss on `graph` from the supplied parameter nodes.
using ScalarFn = std::function<Var(Graph& graph, std::span<const Var> params)>;

struct GradCheckOptions {
  // Uniform perturbation applied to every parameter before checking, so that
  // no coordinate sits exactly on a relu kink.
  double jitter = 0.0;
  std::uint64_t seed = 0;
  // Checks at most this many coordinates per parameter (seeded sample);
  // 0 checks all of them.
  std::size_t max_coords_per_param = 0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;
};

// Compares backward() against central differences (f(p+eps)-f(p-eps))/2eps.
// Relative error uses the denominator max(|a|, |b|, 1e-8). eps must lie in
// [1e-7, 1e-3].
GradCheckResult grad_check(const ScalarFn& f, std::vector<Tensor> params, double eps,
                           const GradCheckOptions& options = {});

struct GradCheckCase {
  std::string name;
  double threshold = 0.0;
  GradCheckResult result;
  bool passed() const { return result.max_rel_error < threshold; }
};

// Checks every differentiable op (threshold 1e-5) and the composite
// backbone + total loss at a tiny configuration (threshold 1e-4) for `seeds`
// random draws each.
std::vector<GradCheckCase> run_gradcheck_suite(int seeds = 10, std::uint64_t base_seed = 1);

}  // namespace rmkd
