#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "varp/image.hpp"
#include "varp/tensor.hpp"
#include "varp/tokenizer.hpp"
#include "varp/var_model.hpp"

namespace varp {

// Trainable flags keyed by (block index, role); block -1 holds the parameters
// outside the transformer blocks, so (-1, SUBJECT) is the subject row.
struct TuningMask {
  std::set<std::pair<int, Role>> enabled;

  bool allows(const Param& p) const { return enabled.count({p.block, p.role}) != 0; }
  std::vector<std::string> trainable_names(const VarModel& model) const;
  std::size_t trainable_count(const VarModel& model) const;
};

// Role names accepted: SA, CA, FFN, NORM, subject_embedding (case-sensitive,
// as printed by role_name). Anything else throws ContractError.
TuningMask select_trainable(const VarModel& model, const std::vector<std::string>& roles);
std::vector<std::string> default_tuning_roles();

// 1.0 for the coarse scales and 0.5 for the finest ceil(2K/5) scales.
std::vector<double> default_scale_weights(std::size_t n_scales);

// Throws ContractError unless w is nonincreasing and nonnegative.
void check_scale_weights(std::span<const double> w);

// Sum over scales of w_k times the scale's mean cross-entropy.
Tensor weighted_ce_loss(const std::vector<Tensor>& per_scale_logits, const MultiScaleTokens& tokens,
                        std::span<const double> w);

// KL(teacher || student) per scale (position mean), summed over scales, on a
// fixed teacher-forced trajectory. Only the student receives gradients.
Tensor distill_loss_on(const VarModel& teacher, const VarModel& student, const MultiScaleTokens& trajectory,
                       std::span<const int> prompt);

// Samples the teacher's trajectory under `prompt` with `sampler`, then
// evaluates distill_loss_on. The trajectory is written to `trajectory_out`
// when given.
Tensor prior_distill_loss(const VarModel& teacher, const VarModel& student, std::span<const int> prompt,
                          const SamplerConfig& sampler, MultiScaleTokens* trajectory_out = nullptr);

// Unit-weight cross-entropy of `model` on bank[index] under `prompt`.
Tensor prior_preservation_loss(const VarModel& model, std::span<const MultiScaleTokens> bank,
                               std::span<const int> prompt, std::size_t index);
std::vector<MultiScaleTokens> generate_class_bank(const VarModel& model, std::span<const int> prompt,
                                                  std::size_t size, const SamplerConfig& sampler);

// Adds `prefix`.lora_a [d_in, r] ~ N(0, 1/d_in) and `prefix`.lora_b [r, d_out]
// = 0 to every block linear site whose role is listed. Returns the number of
// adapter parameters added.
std::size_t attach_lora(VarModel& model, std::size_t rank, const std::vector<Role>& roles, std::uint64_t seed);
std::vector<Role> default_lora_roles();
// The mask enabling exactly the adapter factors.
TuningMask lora_mask(const VarModel& model);

struct SubjectSet {
  std::vector<Image> images;
  std::string subject_prompt;  // contains <S*> and the class noun
  std::string class_prompt;    // class noun only
  std::string class_noun;
};

enum class Variant { Distill, Ppl, None };
const char* variant_name(Variant v);
Variant parse_variant(const std::string& name);

struct FinetuneConfig {
  std::vector<double> scale_weights;  // empty selects default_scale_weights(K)
  double lambda = 1.0;
  std::size_t distill_batch = 1;
  SamplerConfig teacher_sampler{.cfg_scale = 1.0, .temperature = 1.0, .top_k = std::nullopt, .seed = 0};
  std::size_t iterations = 200;
  double lr = 6e-3;
  double weight_decay = 0.0;
  std::size_t batch = 1;
  bool augment = true;
  std::uint64_t seed = 0;
  Variant variant = Variant::Distill;
  std::optional<std::size_t> lora_rank;
  std::vector<std::string> roles = default_tuning_roles();
  std::size_t bank_size = 16;  // prior-preservation bank
};

void validate(const FinetuneConfig& config, std::size_t n_scales);

struct FinetuneLogRow {
  std::size_t step = 0;
  double loss_wce = 0.0;
  double loss_distill = 0.0;
  double loss_total = 0.0;
  double lr = 0.0;
};

struct FinetuneResult {
  VarModel tuned;
  VarModel original;
  std::vector<FinetuneLogRow> log;
};

// Selective fine-tuning on the subject images. The regularizer column holds
// the distillation or prior-preservation term, depending on the variant.
// Throws NumericError on a non-finite loss and std::logic_error when a frozen
// parameter changed.
FinetuneResult finetune(const VarModel& orig, const AutoencoderWeights& tokenizer, const SubjectSet& subjects,
                        const FinetuneConfig& config);

// Columns: step, loss_wce, loss_distill, loss_total, lr.
std::string finetune_metrics_csv(std::span<const FinetuneLogRow> log);

}  // namespace varp
