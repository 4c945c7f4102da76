#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "varp/tensor.hpp"

namespace varp {

struct GradCheckOptions {
  double h = 1e-5;
  // Coordinates probed across all parameters; 0 probes every coordinate.
  std::size_t max_coords = 0;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
};

using LossFn = std::function<Tensor()>;

// Compares `analytic` against central differences of `loss_fn` on sampled
// coordinates: |a - cd| / max(|a|, |cd|, 1e-8). `loss_fn` must be
// deterministic; the check cannot detect a violation of that.
GradCheckResult finite_diff_check(const LossFn& loss_fn, std::span<Tensor> params,
                                  std::span<const std::vector<double>> analytic,
                                  const GradCheckOptions& options = {});

// Runs backward once to obtain the analytic gradient, then checks it.
GradCheckResult finite_diff_check(const LossFn& loss_fn, std::span<Tensor> params,
                                  const GradCheckOptions& options = {});

std::vector<std::vector<double>> analytic_gradients(const LossFn& loss_fn, std::span<Tensor> params);

}  // namespace varp
