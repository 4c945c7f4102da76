#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "varp/image.hpp"
#include "varp/tensor.hpp"

namespace varp {

struct Extent {
  std::size_t height = 0;
  std::size_t width = 0;
  bool operator==(const Extent&) const = default;
};

// K token-map extents, coarse to fine, ending at the feature-grid extent.
class ScaleSchedule {
 public:
  ScaleSchedule() = default;
  // Throws ContractError unless K >= 2 and the extents grow monotonically
  // with at least one strict increase per step.
  explicit ScaleSchedule(std::vector<Extent> extents);
  // Single-scale or otherwise degenerate schedules, for tests and analysis.
  static ScaleSchedule unchecked(std::vector<Extent> extents);
  static ScaleSchedule desk_default();

  std::size_t size() const { return extents_.size(); }
  const Extent& operator[](std::size_t k) const { return extents_.at(k); }
  const std::vector<Extent>& extents() const { return extents_; }
  const Extent& final_extent() const { return extents_.back(); }
  std::size_t positions(std::size_t k) const { return extents_.at(k).height * extents_.at(k).width; }
  // Offset of scale k in the concatenated sequence.
  std::size_t offset(std::size_t k) const;
  std::size_t total_positions() const { return offset(size()); }

  bool operator==(const ScaleSchedule&) const = default;

 private:
  std::vector<Extent> extents_;
};

// C x h x w feature grid, stored channels-last ([h, w, C] row-major).
struct FeatureMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<double> values;

  FeatureMap() = default;
  FeatureMap(std::size_t h, std::size_t w, std::size_t c, double fill = 0.0)
      : height(h), width(w), channels(c), values(h * w * c, fill) {}

  double mse(const FeatureMap& other) const;
  bool operator==(const FeatureMap&) const = default;
};

struct TokenMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<int> tokens;
  bool operator==(const TokenMap&) const = default;
};

using MultiScaleTokens = std::vector<TokenMap>;

// V x C table of codewords.
struct Codebook {
  Tensor entries;

  std::size_t vocab() const { return entries.dim(0); }
  std::size_t channels() const { return entries.dim(1); }
  // Index of the nearest entry by Euclidean distance, lowest index on ties.
  int nearest(std::span<const double> vec) const;
};

struct AutoencoderConfig {
  std::size_t image_size = 32;
  std::size_t patch = 4;
  std::size_t channels = 16;
  std::size_t hidden = 64;
  std::size_t vocab = 64;
  ScaleSchedule schedule = ScaleSchedule::desk_default();

  std::size_t grid() const { return image_size / patch; }
  std::size_t patch_dim() const { return patch * patch * 3; }
};

// Patch encoder/decoder (linear patchify + residual MLP) and the codebook.
struct AutoencoderWeights {
  AutoencoderConfig config;
  std::map<std::string, Tensor> params;
  Codebook codebook;

  static AutoencoderWeights init(const AutoencoderConfig& config, std::uint64_t seed);
  const Tensor& param(const std::string& name) const;
  AutoencoderWeights clone() const;
  std::vector<Tensor> trainable();
};

FeatureMap encode_image(const Image& image, const AutoencoderWeights& weights);
Image decode_feature(const FeatureMap& f, const AutoencoderWeights& weights);

// Residual multi-scale quantization: at scale k the residual left after
// subtracting the upsampled lookups of scales < k is downsampled to (h_k, w_k)
// and each position takes its nearest codeword.
MultiScaleTokens quantize_multiscale(const FeatureMap& f, const Codebook& codebook, const ScaleSchedule& schedule);

// Sum over scales of upsample(Lookup(r_k)) at the final extent. Accepts a
// prefix of the schedule's scales.
FeatureMap dequantize(const MultiScaleTokens& tokens, const Codebook& codebook, const ScaleSchedule& schedule);

// Lookup(r_k) upsampled to the final extent.
FeatureMap scale_contribution(const TokenMap& tokens, const Codebook& codebook, const ScaleSchedule& schedule);

// Residuals f_1..f_{K+1}: f_k = f - sum_{i<k} upsample(Lookup(r_i)), evaluated left to right.
std::vector<FeatureMap> residual_chain(const FeatureMap& f, const MultiScaleTokens& tokens, const Codebook& codebook,
                                       const ScaleSchedule& schedule);

void check_conforms(const MultiScaleTokens& tokens, const ScaleSchedule& schedule, std::size_t vocab);

// Differentiable encoder/decoder paths used by training.
Tensor encode_tensor(const Image& image, const AutoencoderWeights& weights);
Tensor decode_tensor(const Tensor& features, const AutoencoderWeights& weights);

struct AutoencoderTrainConfig {
  double lr = 2e-3;
  std::size_t iterations = 1500;
  std::size_t batch = 8;
  double commitment = 0.25;
  std::size_t restart_every = 50;
  std::uint64_t seed = 0;
};

struct TrainLogRow {
  std::size_t step = 0;
  double loss = 0.0;
  double recon = 0.0;
  double commit = 0.0;
  std::size_t codes_used = 0;
};

struct AutoencoderTrainResult {
  AutoencoderWeights weights;
  std::vector<TrainLogRow> curve;
};

// Reconstruction MSE + codebook loss + commitment loss with straight-through
// gradients through quantization; unused codewords are periodically
// re-seeded from recent residual vectors.
AutoencoderTrainResult train_autoencoder(std::span<const Image> dataset, const AutoencoderConfig& config,
                                         const AutoencoderTrainConfig& train);

std::vector<std::size_t> codebook_histogram(std::span<const Image> images, const AutoencoderWeights& weights);

}  // namespace varp
