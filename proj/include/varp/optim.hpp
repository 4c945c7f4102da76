#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "varp/tensor.hpp"

namespace varp {

struct AdamWConfig {
  double lr = 6e-3;
  double beta1 = 0.9;
  double beta2 = 0.97;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct AdamWState {
  AdamWConfig config;
  std::int64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;

  // Zero moments shaped like `params`.
  static AdamWState for_params(std::span<const Tensor> params, AdamWConfig config);
};

// One decoupled-weight-decay AdamW update. The step counter is incremented
// before bias correction. A non-finite gradient throws NumericError and
// leaves both the parameters and the state untouched.
void adamw_step(std::span<Tensor> params, std::span<const std::vector<double>> grads, AdamWState& state);

// Same, reading each parameter's accumulated gradient (absent = zero).
void adamw_step(std::span<Tensor> params, AdamWState& state);

void zero_grad(std::span<Tensor> params);

}  // namespace varp
