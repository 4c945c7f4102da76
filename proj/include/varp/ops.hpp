#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "varp/tensor.hpp"

namespace varp {

// Broadcasting rule for binary ops: after dropping leading unit extents,
// b's shape must be a suffix of a's shape. The result has a's shape.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);

// [M,K]x[K,N] or batched [B,M,K]x[B,K,N].
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a, std::size_t axis0, std::size_t axis1);
Tensor reshape(const Tensor& a, Shape shape);

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);

// Normalizes over the last axis, no affine parameters.
Tensor layer_norm(const Tensor& a, double eps = 1e-5);
// Softmax over the last axis.
Tensor softmax(const Tensor& a);

// Rows of `table` viewed as [R, rest...], picked by index.
Tensor gather_rows(const Tensor& table, std::span<const int> rows);
Tensor rows_range(const Tensor& table, std::size_t begin, std::size_t end);
Tensor concat_rows(std::span<const Tensor> parts);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// Mean over axis 0: [R, rest...] -> [rest...].
Tensor mean_rows(const Tensor& a);

// Bilinear resampling of an [H, W, C] grid to [out_h, out_w, C]. Sampling is
// corner-aligned: output index i reads source coordinate i*(H-1)/(out_h-1).
// A single-row (or single-column) output samples the source center.
Tensor resize_bilinear(const Tensor& a, std::size_t out_h, std::size_t out_w);

// Mean over rows of -log softmax(logits)[target].
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> targets);
// Mean over rows of KL(softmax(teacher) || softmax(student)). The teacher is
// treated as a constant; gradients reach only the student.
Tensor kl_divergence(const Tensor& teacher_logits, const Tensor& student_logits);

// Plain-array helpers shared by the autograd op and non-differentiable callers.
namespace kernels {

struct ResizeTaps {
  std::vector<std::size_t> lo, hi;
  std::vector<double> frac;
};
ResizeTaps resize_taps(std::size_t in, std::size_t out);

// in: [h, w, c] -> out: [oh, ow, c]
std::vector<double> resize_bilinear(std::span<const double> in, std::size_t h, std::size_t w,
                                    std::size_t c, std::size_t oh, std::size_t ow);

// Row-wise log-softmax of an [n, v] array.
std::vector<double> log_softmax_rows(std::span<const double> logits, std::size_t n, std::size_t v);

}  // namespace kernels

}  // namespace varp
