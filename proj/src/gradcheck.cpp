#include "varp/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "varp/errors.hpp"

namespace varp {

std::vector<std::vector<double>> analytic_gradients(const LossFn& loss_fn, std::span<Tensor> params) {
  for (Tensor& p : params) p.zero_grad();
  Tensor loss = loss_fn();
  backward(loss);
  std::vector<std::vector<double>> grads;
  for (const Tensor& p : params) grads.emplace_back(p.grad().begin(), p.grad().end());
  return grads;
}

GradCheckResult finite_diff_check(const LossFn& loss_fn, std::span<Tensor> params,
                                  std::span<const std::vector<double>> analytic,
                                  const GradCheckOptions& options) {
  if (!(options.h > 0.0)) throw ContractError("finite_diff_check: h must be positive");
  if (analytic.size() != params.size()) throw ContractError("finite_diff_check: gradient count mismatch");

  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (analytic[i].size() != params[i].numel()) throw ContractError("finite_diff_check: gradient size mismatch");
    for (std::size_t j = 0; j < params[i].numel(); ++j) coords.emplace_back(i, j);
  }
  if (options.max_coords > 0 && coords.size() > options.max_coords) {
    std::mt19937_64 rng(options.seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(options.max_coords);
    std::sort(coords.begin(), coords.end());
  }

  GradCheckResult result;
  for (auto [i, j] : coords) {
    auto w = params[i].mutable_data();
    const double saved = w[j];
    w[j] = saved + options.h;
    const double plus = loss_fn().item();
    w[j] = saved - options.h;
    const double minus = loss_fn().item();
    w[j] = saved;
    const double cd = (plus - minus) / (2.0 * options.h);
    const double a = analytic[i][j];
    const double denom = std::max({std::abs(a), std::abs(cd), 1e-8});
    result.max_rel_error = std::max(result.max_rel_error, std::abs(a - cd) / denom);
    ++result.coords_checked;
  }
  return result;
}

GradCheckResult finite_diff_check(const LossFn& loss_fn, std::span<Tensor> params,
                                  const GradCheckOptions& options) {
  auto grads = analytic_gradients(loss_fn, params);
  return finite_diff_check(loss_fn, params, grads, options);
}

}  // namespace varp
