#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "varp/tensor.hpp"
#include "varp/tokenizer.hpp"

namespace varp {

// Parameter roles. SUBJECT is the dedicated <S*> embedding row; LORA marks
// low-rank adapter factors.
enum class Role { SA, CA, FFN, NORM, EMBED, SUBJECT, LORA };

const char* role_name(Role role);
// Accepts the names returned by role_name plus "subject_embedding".
Role parse_role(const std::string& name);

// Closed prompt vocabulary: index 0 is the null prompt, index 1 the subject slot.
class PromptVocab {
 public:
  static constexpr int kNull = 0;
  static constexpr int kSubject = 1;

  PromptVocab() = default;
  explicit PromptVocab(std::vector<std::string> words);
  // "<null>", "<S*>", "a", "on", then the classes and backgrounds.
  static PromptVocab from_lists(const std::vector<std::string>& classes, const std::vector<std::string>& backgrounds);

  std::size_t size() const { return words_.size(); }
  const std::vector<std::string>& words() const { return words_; }
  int id(const std::string& word) const;
  // Whitespace split; the empty prompt maps to the null token. Throws
  // VocabularyError on unknown words.
  std::vector<int> tokenize(const std::string& prompt) const;

  bool operator==(const PromptVocab&) const = default;

 private:
  std::vector<std::string> words_;
};

struct VarConfig {
  std::size_t vocab = 64;     // codebook entries V
  std::size_t channels = 16;  // codebook width C
  ScaleSchedule schedule = ScaleSchedule::desk_default();
  std::size_t depth = 4;
  std::size_t width = 64;
  std::size_t heads = 4;
  std::size_t ffn = 256;

  bool operator==(const VarConfig&) const = default;
};

struct Param {
  Tensor value;
  Role role = Role::EMBED;
  int block = -1;  // -1 outside the transformer blocks
};

// Next-scale transformer. Every parameter carries one role tag. Block
// sublayers are pre-norm with adaptive (prompt-conditioned) scale and shift;
// the adaptive projections form the NORM role.
struct VarModel {
  VarConfig config;
  PromptVocab prompts;
  Codebook codebook;  // frozen copy of the tokenizer's codebook
  std::map<std::string, Param> params;

  static VarModel init(const VarConfig& config, const PromptVocab& prompts, const Codebook& codebook,
                       std::uint64_t seed);

  const Tensor& param(const std::string& name) const;
  bool has(const std::string& name) const { return params.count(name) != 0; }
  // Deep copy (values only, requires_grad preserved).
  VarModel clone() const;
  std::size_t parameter_count() const;
  std::size_t parameter_count(Role role) const;
  void set_requires_grad(bool flag);
};

// Every affine map inside the transformer blocks: `prefix`.w is [d_in, d_out]
// and `prefix`.b is [d_out] (absent for key projections).
struct LinearSite {
  std::string prefix;
  Role role;
  int block;
};
std::vector<LinearSite> block_linear_sites(const VarConfig& config);

// Inputs for scales 1..min(m+1, K) given the first m token maps: the
// accumulated dequantization of r_{<k} resampled to (h_k, w_k). The scale-1
// entry is a zero placeholder; the model substitutes its learned start map.
std::vector<FeatureMap> build_scale_inputs(const MultiScaleTokens& tokens, const Codebook& codebook,
                                           const ScaleSchedule& schedule);

// Logits [positions of the given scales, V] for a prefix of scale inputs.
Tensor forward_inputs(const VarModel& model, const std::vector<FeatureMap>& inputs, std::span<const int> prompt);

// Teacher-forced per-scale logits [h_k * w_k, V], one entry per scale.
std::vector<Tensor> forward_logits(const VarModel& model, const MultiScaleTokens& tokens, std::span<const int> prompt);
std::vector<Tensor> forward_logits(const VarModel& model, const MultiScaleTokens& tokens, const std::string& prompt);

// Block-causal mask over the concatenated sequence of the first n scales:
// 0 where attention is allowed, -1e30 elsewhere.
Tensor scale_attention_mask(const ScaleSchedule& schedule, std::size_t n_scales);

// Mean cross-entropy of each scale's logits against its token map.
std::vector<Tensor> per_scale_ce(const std::vector<Tensor>& logits, const MultiScaleTokens& tokens);

struct SamplerConfig {
  double cfg_scale = 3.0;
  double temperature = 1.0;
  std::optional<std::size_t> top_k;
  std::uint64_t seed = 0;
};

// (1 - s) * null + s * cond; exact at s = 0 and s = 1.
std::vector<double> guide_logits(std::span<const double> cond, std::span<const double> null, double cfg_scale);

// Guided logits for scale k (0-based) given r_{<k}; [positions(k) * V] row-major.
std::vector<double> guided_scale_logits(const VarModel& model, const MultiScaleTokens& prefix,
                                        std::span<const int> prompt, double cfg_scale);

struct SampleResult {
  MultiScaleTokens tokens;
  std::vector<double> entropy;  // mean per-position entropy of the sampling distribution, per scale
};

SampleResult sample(const VarModel& model, const std::string& prompt, const SamplerConfig& cfg);
SampleResult sample(const VarModel& model, std::span<const int> prompt, const SamplerConfig& cfg);

struct TokenizedSample {
  MultiScaleTokens tokens;
  std::vector<int> prompt;
};

struct PretrainConfig {
  std::size_t iterations = 1200;
  std::size_t batch = 8;
  double lr = 2e-3;
  double weight_decay = 0.0;
  double prompt_dropout = 0.1;
  std::size_t warmup = 50;
  std::uint64_t seed = 0;
};

struct PretrainLogRow {
  std::size_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
};

// Unit-weight next-scale cross-entropy with prompt dropout to the null token.
std::vector<PretrainLogRow> pretrain(VarModel& model, std::span<const TokenizedSample> data, const PretrainConfig& cfg);

// Sum over scales of the per-scale mean cross-entropy; the pretraining loss
// for one sample.
Tensor next_scale_loss(const VarModel& model, const TokenizedSample& sample);

}  // namespace varp
