#include "varp/optim.hpp"

#include <cmath>

#include <fmt/format.h>

#include "varp/errors.hpp"

namespace varp {

AdamWState AdamWState::for_params(std::span<const Tensor> params, AdamWConfig config) {
  AdamWState s;
  s.config = config;
  for (const Tensor& p : params) {
    s.m.emplace_back(p.numel(), 0.0);
    s.v.emplace_back(p.numel(), 0.0);
  }
  return s;
}

void adamw_step(std::span<Tensor> params, std::span<const std::vector<double>> grads, AdamWState& state) {
  if (params.size() != grads.size() || params.size() != state.m.size() || params.size() != state.v.size()) {
    throw ContractError(fmt::format("adamw_step: {} params, {} grads, {} moment slots", params.size(),
                                    grads.size(), state.m.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].size() != params[i].numel() || state.m[i].size() != params[i].numel() ||
        state.v[i].size() != params[i].numel()) {
      throw ContractError(fmt::format("adamw_step: size mismatch at parameter {}", i));
    }
    check_finite(grads[i], "adamw gradient");
  }
  const auto& c = state.config;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].mutable_data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    const auto& g = grads[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      w[j] -= c.lr * c.weight_decay * w[j];
      m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
      v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      w[j] -= c.lr * mhat / (std::sqrt(vhat) + c.eps);
    }
  }
}

void adamw_step(std::span<Tensor> params, AdamWState& state) {
  std::vector<std::vector<double>> grads;
  grads.reserve(params.size());
  for (const Tensor& p : params) {
    if (p.has_grad()) {
      grads.emplace_back(p.grad().begin(), p.grad().end());
    } else {
      grads.emplace_back(p.numel(), 0.0);
    }
  }
  adamw_step(params, grads, state);
}

void zero_grad(std::span<Tensor> params) {
  for (Tensor& p : params) p.zero_grad();
}

}  // namespace varp
