#include "rmkd/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "rmkd/error.hpp"
#include "rmkd/rng.hpp"

namespace rmkd {

namespace {

double evaluate(const ScalarFn& f, const std::vector<Tensor>& params) {
  Graph g;
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const Tensor& p : params) vars.push_back(g.constant(p));
  return f(g, vars).value().item();
}

}  // namespace

GradCheckResult grad_check(const ScalarFn& f, std::vector<Tensor> params, double eps,
                           const GradCheckOptions& options) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) throw ConfigError("grad_check: eps must lie in [1e-7, 1e-3]");
  Rng rng(options.seed);
  if (options.jitter > 0.0) {
    for (Tensor& p : params)
      for (double& v : p.storage()) v += rng.uniform(-options.jitter, options.jitter);
  }

  std::vector<Tensor> analytic;
  {
    Graph g;
    std::vector<Var> vars;
    for (const Tensor& p : params) vars.push_back(g.parameter(p));
    Var loss = f(g, vars);
    g.backward(loss);
    for (const Var& v : vars) analytic.push_back(g.grad(v));
  }

  GradCheckResult result;
  for (std::size_t p = 0; p < params.size(); ++p) {
    std::vector<std::size_t> coords(params[p].numel());
    std::iota(coords.begin(), coords.end(), 0);
    if (options.max_coords_per_param && coords.size() > options.max_coords_per_param) {
      rng.shuffle(coords);
      coords.resize(options.max_coords_per_param);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t i : coords) {
      const double saved = params[p][i];
      params[p][i] = saved + eps;
      const double plus = evaluate(f, params);
      params[p][i] = saved - eps;
      const double minus = evaluate(f, params);
      params[p][i] = saved;
      const double numeric = (plus - minus) / (2.0 * eps);
      const double a = analytic[p][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double rel = std::abs(a - numeric) / denom;
      ++result.checked;
      if (rel > result.max_rel_error) {
        result.max_rel_error = rel;
        result.worst_param = p;
        result.worst_index = i;
        result.analytic = a;
        result.numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace rmkd
