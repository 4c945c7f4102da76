#include "varp/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "varp/errors.hpp"

namespace varp {

using detail::Node;

namespace {

using Backward = std::function<void(Node&)>;

Tensor make_result(const char* op, Shape shape, std::vector<double> data,
                   std::initializer_list<Tensor> inputs, Backward backward) {
  check_finite(data, op);
  auto node = std::make_shared<Node>();
  node->op = op;
  node->shape = std::move(shape);
  node->data = std::move(data);
  bool needs = false;
  for (const Tensor& t : inputs) needs = needs || t.requires_grad();
  if (needs) {
    node->requires_grad = true;
    for (const Tensor& t : inputs) node->inputs.push_back(t.node_ptr());
    node->backward = std::move(backward);
  }
  return Tensor::wrap(std::move(node));
}

Tensor make_result(const char* op, Shape shape, std::vector<double> data,
                   const std::vector<Tensor>& inputs, Backward backward) {
  check_finite(data, op);
  auto node = std::make_shared<Node>();
  node->op = op;
  node->shape = std::move(shape);
  node->data = std::move(data);
  bool needs = false;
  for (const Tensor& t : inputs) needs = needs || t.requires_grad();
  if (needs) {
    node->requires_grad = true;
    for (const Tensor& t : inputs) node->inputs.push_back(t.node_ptr());
    node->backward = std::move(backward);
  }
  return Tensor::wrap(std::move(node));
}

// Gradient sink for input i, or nullptr when that input does not need one.
std::vector<double>* sink(Node& self, std::size_t i) {
  Node& in = *self.inputs[i];
  return in.requires_grad ? &in.grad_buffer() : nullptr;
}

std::size_t broadcast_size(const Shape& a, const Shape& b, const char* op) {
  std::size_t lead = 0;
  while (lead < b.size() && b[lead] == 1) ++lead;
  const std::size_t tail = b.size() - lead;
  bool ok = tail <= a.size();
  for (std::size_t i = 0; ok && i < tail; ++i) ok = a[a.size() - tail + i] == b[lead + i];
  if (!ok) {
    throw ContractError(fmt::format("{}: shape {} does not broadcast into {}", op, to_string(b), to_string(a)));
  }
  return numel(b);
}

// Row-major strides.
std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

std::vector<double> swap_axes(std::span<const double> src, const Shape& shape, std::size_t a0,
                              std::size_t a1) {
  Shape out_shape = shape;
  std::swap(out_shape[a0], out_shape[a1]);
  const auto in_st = strides_of(shape);
  auto perm_st = in_st;
  std::swap(perm_st[a0], perm_st[a1]);
  std::vector<double> out(src.size());
  std::vector<std::size_t> idx(shape.size(), 0);
  const std::size_t rank = shape.size();
  std::size_t src_off = 0;
  for (std::size_t flat = 0; flat < out.size(); ++flat) {
    out[flat] = src[src_off];
    for (std::size_t d = rank; d-- > 0;) {
      if (++idx[d] < out_shape[d]) {
        src_off += perm_st[d];
        break;
      }
      src_off -= perm_st[d] * (out_shape[d] - 1);
      idx[d] = 0;
    }
  }
  return out;
}

using v4d = double __attribute__((vector_size(32), aligned(8)));

// C[R rows, 8 cols] += A[R rows, :] * B[:, 8 cols], accumulated in registers.
template <std::size_t R>
void gemm_tile(const double* a, const double* b, double* c, std::size_t k, std::size_t n, std::size_t lda) {
  v4d acc[R][2] = {};
  for (std::size_t p = 0; p < k; ++p) {
    const v4d b0 = *reinterpret_cast<const v4d*>(b + p * n);
    const v4d b1 = *reinterpret_cast<const v4d*>(b + p * n + 4);
    for (std::size_t r = 0; r < R; ++r) {
      const double av = a[r * lda + p];
      acc[r][0] += av * b0;
      acc[r][1] += av * b1;
    }
  }
  for (std::size_t r = 0; r < R; ++r) {
    auto* c0 = reinterpret_cast<v4d*>(c + r * n);
    auto* c1 = reinterpret_cast<v4d*>(c + r * n + 4);
    *c0 += acc[r][0];
    *c1 += acc[r][1];
  }
}

template <std::size_t R>
void gemm_rows(const double* a, const double* b, double* c, std::size_t k, std::size_t n) {
  std::size_t j = 0;
  for (; j + 8 <= n; j += 8) gemm_tile<R>(a, b + j, c + j, k, n, k);
  for (; j < n; ++j) {
    for (std::size_t r = 0; r < R; ++r) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += a[r * k + p] * b[p * n + j];
      c[r * n + j] += acc;
    }
  }
}

// C[m,n] += A[m,k] * B[k,n]
void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) gemm_rows<4>(a + i * k, b, c + i * n, k, n);
  for (; i < m; ++i) gemm_rows<1>(a + i * k, b, c + i * n, k, n);
}

// C[m,k] += A[m,n] * B[k,n]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n, std::size_t k) {
  std::vector<double> bt(n * k);
  for (std::size_t p = 0; p < k; ++p) {
    for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];
  }
  gemm(a, bt.data(), c, m, n, k);
}

// C[k,n] += A[m,k]^T * B[m,n]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  std::vector<double> at(m * k);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) at[p * m + i] = a[i * k + p];
  }
  gemm(at.data(), b, c, k, m, n);
}

std::size_t last_dim(const Tensor& a, const char* op) {
  if (a.rank() == 0) throw ContractError(fmt::format("{} requires rank >= 1", op));
  return a.shape().back();
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  const std::size_t nb = broadcast_size(a.shape(), b.shape(), "add");
  auto x = a.data();
  auto y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t o = 0; o < x.size(); o += nb) {
    for (std::size_t j = 0; j < nb; ++j) out[o + j] = x[o + j] + y[j];
  }
  return make_result("add", a.shape(), std::move(out), {a, b}, [nb](Node& self) {
    const auto& g = self.grad;
    if (auto* da = sink(self, 0)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i];
    }
    if (auto* db = sink(self, 1)) {
      for (std::size_t o = 0; o < g.size(); o += nb) {
        for (std::size_t j = 0; j < nb; ++j) (*db)[j] += g[o + j];
      }
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  const std::size_t nb = broadcast_size(a.shape(), b.shape(), "sub");
  auto x = a.data();
  auto y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t o = 0; o < x.size(); o += nb) {
    for (std::size_t j = 0; j < nb; ++j) out[o + j] = x[o + j] - y[j];
  }
  return make_result("sub", a.shape(), std::move(out), {a, b}, [nb](Node& self) {
    const auto& g = self.grad;
    if (auto* da = sink(self, 0)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i];
    }
    if (auto* db = sink(self, 1)) {
      for (std::size_t o = 0; o < g.size(); o += nb) {
        for (std::size_t j = 0; j < nb; ++j) (*db)[j] -= g[o + j];
      }
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  const std::size_t nb = broadcast_size(a.shape(), b.shape(), "mul");
  auto x = a.data();
  auto y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t o = 0; o < x.size(); o += nb) {
    for (std::size_t j = 0; j < nb; ++j) out[o + j] = x[o + j] * y[j];
  }
  return make_result("mul", a.shape(), std::move(out), {a, b}, [nb](Node& self) {
    const auto& g = self.grad;
    const auto& x = self.inputs[0]->data;
    const auto& y = self.inputs[1]->data;
    if (auto* da = sink(self, 0)) {
      for (std::size_t o = 0; o < g.size(); o += nb) {
        for (std::size_t j = 0; j < nb; ++j) (*da)[o + j] += g[o + j] * y[j];
      }
    }
    if (auto* db = sink(self, 1)) {
      for (std::size_t o = 0; o < g.size(); o += nb) {
        for (std::size_t j = 0; j < nb; ++j) (*db)[j] += g[o + j] * x[o + j];
      }
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * factor;
  return make_result("scale", a.shape(), std::move(out), {a}, [factor](Node& self) {
    auto& da = *sink(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) da[i] += self.grad[i] * factor;
  });
}

Tensor add_scalar(const Tensor& a, double value) {
  auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + value;
  return make_result("add_scalar", a.shape(), std::move(out), {a}, [](Node& self) {
    auto& da = *sink(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) da[i] += self.grad[i];
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  std::size_t batch = 1;
  std::size_t m = 0, k = 0, n = 0;
  Shape out_shape;
  if (sa.size() == 2 && sb.size() == 2) {
    m = sa[0], k = sa[1], n = sb[1];
    if (sb[0] != k) throw ContractError(fmt::format("matmul: {} x {}", to_string(sa), to_string(sb)));
    out_shape = {m, n};
  } else if (sa.size() == 3 && sb.size() == 3) {
    batch = sa[0], m = sa[1], k = sa[2], n = sb[2];
    if (sb[0] != batch || sb[1] != k) {
      throw ContractError(fmt::format("matmul: {} x {}", to_string(sa), to_string(sb)));
    }
    out_shape = {batch, m, n};
  } else {
    throw ContractError(fmt::format("matmul: unsupported ranks {} x {}", to_string(sa), to_string(sb)));
  }
  std::vector<double> out(batch * m * n, 0.0);
  for (std::size_t bi = 0; bi < batch; ++bi) {
    gemm(a.data().data() + bi * m * k, b.data().data() + bi * k * n, out.data() + bi * m * n, m, k, n);
  }
  return make_result("matmul", std::move(out_shape), std::move(out), {a, b},
                     [batch, m, k, n](Node& self) {
                       const double* g = self.grad.data();
                       const double* x = self.inputs[0]->data.data();
                       const double* y = self.inputs[1]->data.data();
                       auto* da = sink(self, 0);
                       auto* db = sink(self, 1);
                       for (std::size_t bi = 0; bi < batch; ++bi) {
                         const double* gb = g + bi * m * n;
                         if (da) gemm_nt(gb, y + bi * k * n, da->data() + bi * m * k, m, n, k);
                         if (db) gemm_tn(x + bi * m * k, gb, db->data() + bi * k * n, m, k, n);
                       }
                     });
}

Tensor transpose(const Tensor& a, std::size_t axis0, std::size_t axis1) {
  const Shape& s = a.shape();
  if (axis0 >= s.size() || axis1 >= s.size()) {
    throw IndexError(fmt::format("transpose axes ({}, {}) out of range for rank {}", axis0, axis1, s.size()));
  }
  Shape out_shape = s;
  std::swap(out_shape[axis0], out_shape[axis1]);
  auto out = swap_axes(a.data(), s, axis0, axis1);
  return make_result("transpose", out_shape, std::move(out), {a},
                     [out_shape, axis0, axis1](Node& self) {
                       auto back = swap_axes(self.grad, out_shape, axis0, axis1);
                       auto& da = *sink(self, 0);
                       for (std::size_t i = 0; i < back.size(); ++i) da[i] += back[i];
                     });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.numel()) {
    throw ContractError(fmt::format("reshape {} -> {}", to_string(a.shape()), to_string(shape)));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return make_result("reshape", std::move(shape), std::move(out), {a}, [](Node& self) {
    auto& da = *sink(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) da[i] += self.grad[i];
  });
}

Tensor exp(const Tensor& a) {
  auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::exp(x[i]);
  return make_result("exp", a.shape(), std::move(out), {a}, [](Node& self) {
    auto& da = *sink(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) da[i] += self.grad[i] * self.data[i];
  });
}

Tensor log(const Tensor& a) {
  auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0.0)) throw NumericError(fmt::format("log of non-positive value {}", x[i]));
    out[i] = std::log(x[i]);
  }
  return make_result("log", a.shape(), std::move(out), {a}, [](Node& self) {
    auto& da = *sink(self, 0);
    const auto& x = self.inputs[0]->data;
    for (std::size_t i = 0; i < self.grad.size(); ++i) da[i] += self.grad[i] / x[i];
  });
}

Tensor relu(const Tensor& a) {
  auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
  return make_result("relu", a.shape(), std::move(out), {a}, [](Node& self) {
    auto& da = *sink(self, 0);
    const auto& x = self.inputs[0]->data;
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (x[i] > 0.0) da[i] += self.grad[i];
    }
  });
}

Tensor gelu(const Tensor& a) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  auto x = a.data();
  std::vector<double> out(x.size());
  auto cdf = std::make_shared<std::vector<double>>(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    (*cdf)[i] = 0.5 * (1.0 + std::erf(x[i] * kInvSqrt2));
    out[i] = x[i] * (*cdf)[i];
  }
  return make_result("gelu", a.shape(), std::move(out), {a}, [cdf](Node& self) {
    constexpr double kInvSqrt2Pi = 0.39894228040143267794;
    auto& da = *sink(self, 0);
    const auto& x = self.inputs[0]->data;
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x[i] * x[i]);
      da[i] += self.grad[i] * ((*cdf)[i] + x[i] * pdf);
    }
  });
}

Tensor layer_norm(const Tensor& a, double eps) {
  const std::size_t d = last_dim(a, "layer_norm");
  const std::size_t rows = a.numel() / d;
  auto x = a.data();
  std::vector<double> out(x.size());
  std::vector<double> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(d);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = (xr[j] - mu) * rstd[r];
  }
  return make_result("layer_norm", a.shape(), std::move(out), {a},
                     [d, rows, rstd = std::move(rstd)](Node& self) {
                       auto& da = *sink(self, 0);
                       const auto& y = self.data;
                       const auto& g = self.grad;
                       for (std::size_t r = 0; r < rows; ++r) {
                         double mg = 0.0, mgy = 0.0;
                         for (std::size_t j = 0; j < d; ++j) {
                           mg += g[r * d + j];
                           mgy += g[r * d + j] * y[r * d + j];
                         }
                         mg /= static_cast<double>(d);
                         mgy /= static_cast<double>(d);
                         for (std::size_t j = 0; j < d; ++j) {
                           const std::size_t i = r * d + j;
                           da[i] += rstd[r] * (g[i] - mg - y[i] * mgy);
                         }
                       }
                     });
}

Tensor softmax(const Tensor& a) {
  const std::size_t v = last_dim(a, "softmax");
  const std::size_t rows = a.numel() / v;
  auto lp = kernels::log_softmax_rows(a.data(), rows, v);
  for (double& e : lp) e = std::exp(e);
  return make_result("softmax", a.shape(), std::move(lp), {a}, [v, rows](Node& self) {
    auto& da = *sink(self, 0);
    const auto& y = self.data;
    const auto& g = self.grad;
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < v; ++j) dot += g[r * v + j] * y[r * v + j];
      for (std::size_t j = 0; j < v; ++j) {
        const std::size_t i = r * v + j;
        da[i] += y[i] * (g[i] - dot);
      }
    }
  });
}

Tensor gather_rows(const Tensor& table, std::span<const int> rows) {
  if (table.rank() == 0) throw ContractError("gather_rows requires rank >= 1");
  if (rows.empty()) throw ContractError("gather_rows requires at least one index");
  const std::size_t r = table.dim(0);
  const std::size_t width = table.numel() / r;
  Shape out_shape = table.shape();
  out_shape[0] = rows.size();
  std::vector<double> out(rows.size() * width);
  auto src = table.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || static_cast<std::size_t>(rows[i]) >= r) {
      throw IndexError(fmt::format("gather_rows index {} out of range [0, {})", rows[i], r));
    }
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(rows[i] * width), width,
                out.begin() + static_cast<std::ptrdiff_t>(i * width));
  }
  std::vector<int> idx(rows.begin(), rows.end());
  return make_result("gather_rows", std::move(out_shape), std::move(out), {table},
                     [idx = std::move(idx), width](Node& self) {
                       auto& da = *sink(self, 0);
                       for (std::size_t i = 0; i < idx.size(); ++i) {
                         double* dst = da.data() + static_cast<std::size_t>(idx[i]) * width;
                         const double* g = self.grad.data() + i * width;
                         for (std::size_t j = 0; j < width; ++j) dst[j] += g[j];
                       }
                     });
}

Tensor rows_range(const Tensor& table, std::size_t begin, std::size_t end) {
  if (table.rank() == 0 || begin >= end || end > table.dim(0)) {
    throw IndexError(fmt::format("rows_range [{}, {}) invalid for shape {}", begin, end, to_string(table.shape())));
  }
  const std::size_t width = table.numel() / table.dim(0);
  Shape out_shape = table.shape();
  out_shape[0] = end - begin;
  auto src = table.data();
  std::vector<double> out(src.begin() + static_cast<std::ptrdiff_t>(begin * width),
                          src.begin() + static_cast<std::ptrdiff_t>(end * width));
  return make_result("rows_range", std::move(out_shape), std::move(out), {table},
                     [offset = begin * width](Node& self) {
                       auto& da = *sink(self, 0);
                       for (std::size_t i = 0; i < self.grad.size(); ++i) da[offset + i] += self.grad[i];
                     });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ContractError("concat_rows requires at least one part");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  std::size_t rows = 0;
  std::vector<double> out;
  std::vector<std::size_t> offsets;
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  for (const Tensor& p : parts) {
    if (p.rank() == 0 || !std::equal(tail.begin(), tail.end(), p.shape().begin() + 1, p.shape().end())) {
      throw ContractError("concat_rows: trailing shapes differ");
    }
    offsets.push_back(out.size());
    rows += p.dim(0);
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  Shape out_shape{rows};
  out_shape.insert(out_shape.end(), tail.begin(), tail.end());
  return make_result("concat_rows", std::move(out_shape), std::move(out), inputs,
                     [offsets = std::move(offsets)](Node& self) {
                       for (std::size_t p = 0; p < self.inputs.size(); ++p) {
                         auto* dp = sink(self, p);
                         if (!dp) continue;
                         for (std::size_t i = 0; i < dp->size(); ++i) (*dp)[i] += self.grad[offsets[p] + i];
                       }
                     });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return make_result("sum", {}, {s}, {a}, [](Node& self) {
    auto& da = *sink(self, 0);
    for (double& v : da) v += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  const double n = static_cast<double>(a.numel());
  return make_result("mean", {}, {s / n}, {a}, [n](Node& self) {
    auto& da = *sink(self, 0);
    for (double& v : da) v += self.grad[0] / n;
  });
}

Tensor mean_rows(const Tensor& a) {
  if (a.rank() == 0) throw ContractError("mean_rows requires rank >= 1");
  const std::size_t r = a.dim(0);
  const std::size_t width = a.numel() / r;
  Shape out_shape(a.shape().begin() + 1, a.shape().end());
  std::vector<double> out(width, 0.0);
  auto x = a.data();
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < width; ++j) out[j] += x[i * width + j];
  }
  for (double& v : out) v /= static_cast<double>(r);
  return make_result("mean_rows", std::move(out_shape), std::move(out), {a}, [r, width](Node& self) {
    auto& da = *sink(self, 0);
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < width; ++j) da[i * width + j] += self.grad[j] / static_cast<double>(r);
    }
  });
}

namespace kernels {

ResizeTaps resize_taps(std::size_t in, std::size_t out) {
  ResizeTaps taps;
  taps.lo.resize(out);
  taps.hi.resize(out);
  taps.frac.resize(out);
  for (std::size_t i = 0; i < out; ++i) {
    const double src = out == 1 ? 0.5 * static_cast<double>(in - 1)
                                : static_cast<double>(i) * static_cast<double>(in - 1) / static_cast<double>(out - 1);
    auto lo = static_cast<std::size_t>(std::floor(src));
    lo = std::min(lo, in - 1);
    taps.lo[i] = lo;
    taps.hi[i] = std::min(lo + 1, in - 1);
    taps.frac[i] = src - static_cast<double>(lo);
  }
  return taps;
}

std::vector<double> resize_bilinear(std::span<const double> in, std::size_t h, std::size_t w,
                                    std::size_t c, std::size_t oh, std::size_t ow) {
  if (in.size() != h * w * c) throw ContractError("resize_bilinear: input size mismatch");
  std::vector<double> out(oh * ow * c, 0.0);
  if (oh == h && ow == w) {
    std::copy(in.begin(), in.end(), out.begin());
    return out;
  }
  const auto ty = resize_taps(h, oh);
  const auto tx = resize_taps(w, ow);
  for (std::size_t i = 0; i < oh; ++i) {
    const double fy = ty.frac[i];
    for (std::size_t j = 0; j < ow; ++j) {
      const double fx = tx.frac[j];
      const double w00 = (1 - fy) * (1 - fx), w01 = (1 - fy) * fx, w10 = fy * (1 - fx), w11 = fy * fx;
      const double* p00 = in.data() + (ty.lo[i] * w + tx.lo[j]) * c;
      const double* p01 = in.data() + (ty.lo[i] * w + tx.hi[j]) * c;
      const double* p10 = in.data() + (ty.hi[i] * w + tx.lo[j]) * c;
      const double* p11 = in.data() + (ty.hi[i] * w + tx.hi[j]) * c;
      double* o = out.data() + (i * ow + j) * c;
      for (std::size_t ch = 0; ch < c; ++ch) {
        o[ch] = w00 * p00[ch] + w01 * p01[ch] + w10 * p10[ch] + w11 * p11[ch];
      }
    }
  }
  return out;
}

std::vector<double> log_softmax_rows(std::span<const double> logits, std::size_t n, std::size_t v) {
  std::vector<double> out(n * v);
  for (std::size_t r = 0; r < n; ++r) {
    const double* x = logits.data() + r * v;
    const double mx = *std::max_element(x, x + v);
    double s = 0.0;
    for (std::size_t j = 0; j < v; ++j) s += std::exp(x[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < v; ++j) out[r * v + j] = x[j] - lse;
  }
  return out;
}

}  // namespace kernels

Tensor resize_bilinear(const Tensor& a, std::size_t out_h, std::size_t out_w) {
  if (a.rank() != 3) throw ContractError("resize_bilinear expects [H, W, C], got " + to_string(a.shape()));
  if (out_h == 0 || out_w == 0) throw ContractError("resize_bilinear: zero output extent");
  const std::size_t h = a.dim(0), w = a.dim(1), c = a.dim(2);
  auto out = kernels::resize_bilinear(a.data(), h, w, c, out_h, out_w);
  return make_result("resize_bilinear", {out_h, out_w, c}, std::move(out), {a},
                     [h, w, c, out_h, out_w](Node& self) {
                       auto& da = *sink(self, 0);
                       const auto& g = self.grad;
                       if (out_h == h && out_w == w) {
                         for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
                         return;
                       }
                       const auto ty = kernels::resize_taps(h, out_h);
                       const auto tx = kernels::resize_taps(w, out_w);
                       for (std::size_t i = 0; i < out_h; ++i) {
                         const double fy = ty.frac[i];
                         for (std::size_t j = 0; j < out_w; ++j) {
                           const double fx = tx.frac[j];
                           const double wts[4] = {(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx};
                           const std::size_t src[4] = {ty.lo[i] * w + tx.lo[j], ty.lo[i] * w + tx.hi[j],
                                                       ty.hi[i] * w + tx.lo[j], ty.hi[i] * w + tx.hi[j]};
                           const double* go = g.data() + (i * out_w + j) * c;
                           for (int t = 0; t < 4; ++t) {
                             double* d = da.data() + src[t] * c;
                             for (std::size_t ch = 0; ch < c; ++ch) d[ch] += wts[t] * go[ch];
                           }
                         }
                       }
                     });
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> targets) {
  if (logits.rank() != 2) throw ContractError("softmax_cross_entropy expects [N, V] logits");
  const std::size_t n = logits.dim(0), v = logits.dim(1);
  if (targets.size() != n) {
    throw ContractError(fmt::format("softmax_cross_entropy: {} targets for {} rows", targets.size(), n));
  }
  for (int t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= v) {
      throw IndexError(fmt::format("target {} out of range [0, {})", t, v));
    }
  }
  check_finite(logits.data(), "softmax_cross_entropy logits");
  auto lp = kernels::log_softmax_rows(logits.data(), n, v);
  double loss = 0.0;
  for (std::size_t r = 0; r < n; ++r) loss -= lp[r * v + static_cast<std::size_t>(targets[r])];
  loss /= static_cast<double>(n);
  std::vector<int> tg(targets.begin(), targets.end());
  return make_result("softmax_cross_entropy", {}, {loss}, {logits},
                     [n, v, lp = std::move(lp), tg = std::move(tg)](Node& self) {
                       auto& da = *sink(self, 0);
                       const double g = self.grad[0] / static_cast<double>(n);
                       for (std::size_t r = 0; r < n; ++r) {
                         for (std::size_t j = 0; j < v; ++j) da[r * v + j] += g * std::exp(lp[r * v + j]);
                         da[r * v + static_cast<std::size_t>(tg[r])] -= g;
                       }
                     });
}

Tensor kl_divergence(const Tensor& teacher_logits, const Tensor& student_logits) {
  if (teacher_logits.shape() != student_logits.shape()) {
    throw ContractError(fmt::format("kl_divergence: shapes {} and {} differ", to_string(teacher_logits.shape()),
                                    to_string(student_logits.shape())));
  }
  if (student_logits.rank() != 2) throw ContractError("kl_divergence expects [N, V] logits");
  const std::size_t n = student_logits.dim(0), v = student_logits.dim(1);
  auto lp = kernels::log_softmax_rows(teacher_logits.data(), n, v);
  auto lq = kernels::log_softmax_rows(student_logits.data(), n, v);
  double total = 0.0;
  std::vector<double> p(n * v);
  for (std::size_t r = 0; r < n; ++r) {
    double row = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      const std::size_t i = r * v + j;
      p[i] = std::exp(lp[i]);
      row += p[i] * (lp[i] - lq[i]);
    }
    // Rounding can leave a near-identical pair a hair below zero.
    total += std::max(row, 0.0);
  }
  total /= static_cast<double>(n);
  Tensor student = student_logits;
  return make_result("kl_divergence", {}, {total}, {student},
                     [n, v, p = std::move(p), lq = std::move(lq)](Node& self) {
                       auto& da = *sink(self, 0);
                       const double g = self.grad[0] / static_cast<double>(n);
                       for (std::size_t i = 0; i < n * v; ++i) da[i] += g * (std::exp(lq[i]) - p[i]);
                     });
}

}  // namespace varp
