#include "varp/personalize.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <random>
#include <stdexcept>

#include <fmt/format.h>

#include "varp/dataset.hpp"
#include "varp/errors.hpp"
#include "varp/ops.hpp"
#include "varp/optim.hpp"

namespace varp {

namespace {

void check_compatible(const VarModel& teacher, const VarModel& student) {
  if (teacher.config.schedule != student.config.schedule) {
    throw ContractError("teacher and student use different scale schedules");
  }
  if (teacher.config.vocab != student.config.vocab) {
    throw ContractError("teacher and student use different token vocabularies");
  }
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  auto x = a.data();
  auto y = b.data();
  return a.shape() == b.shape() && std::equal(x.begin(), x.end(), y.begin(), y.end(), [](double p, double q) {
           return std::bit_cast<std::uint64_t>(p) == std::bit_cast<std::uint64_t>(q);
         });
}

// Copies the class noun's text-embedding row into the subject row.
void init_subject_row(VarModel& m, const std::string& noun) {
  const int id = m.prompts.id(noun);
  if (id == PromptVocab::kSubject || id == PromptVocab::kNull) throw ContractError("class noun must be a plain word");
  const std::size_t row = static_cast<std::size_t>(id) - 1;  // embed.text skips the subject slot
  const auto text = m.param("embed.text").data();
  auto dst = m.params.at("embed.subject").value.mutable_data();
  std::copy_n(text.begin() + static_cast<std::ptrdiff_t>(row * dst.size()), dst.size(), dst.begin());
}

}  // namespace

std::vector<std::string> TuningMask::trainable_names(const VarModel& model) const {
  std::vector<std::string> out;
  for (const auto& [name, p] : model.params) {
    if (allows(p)) out.push_back(name);
  }
  return out;
}

std::size_t TuningMask::trainable_count(const VarModel& model) const {
  std::size_t n = 0;
  for (const auto& [name, p] : model.params) {
    if (allows(p)) n += p.value.numel();
  }
  return n;
}

std::vector<std::string> default_tuning_roles() { return {"CA", "FFN", "subject_embedding"}; }

TuningMask select_trainable(const VarModel& model, const std::vector<std::string>& roles) {
  TuningMask mask;
  for (const auto& name : roles) {
    Role role;
    if (name == "SA") {
      role = Role::SA;
    } else if (name == "CA") {
      role = Role::CA;
    } else if (name == "FFN") {
      role = Role::FFN;
    } else if (name == "NORM") {
      role = Role::NORM;
    } else if (name == "subject_embedding") {
      mask.enabled.insert({-1, Role::SUBJECT});
      continue;
    } else {
      throw ContractError(fmt::format("role '{}' cannot be selected for tuning", name));
    }
    for (std::size_t b = 0; b < model.config.depth; ++b) mask.enabled.insert({static_cast<int>(b), role});
  }
  return mask;
}

std::vector<double> default_scale_weights(std::size_t n_scales) {
  const std::size_t fine = (2 * n_scales + 4) / 5;
  std::vector<double> w(n_scales, 1.0);
  for (std::size_t k = n_scales - std::min(fine, n_scales); k < n_scales; ++k) w[k] = 0.5;
  return w;
}

void check_scale_weights(std::span<const double> w) {
  for (std::size_t k = 0; k < w.size(); ++k) {
    if (!std::isfinite(w[k]) || w[k] < 0.0) throw ContractError(fmt::format("scale weight {} is {}", k + 1, w[k]));
    if (k > 0 && w[k] > w[k - 1]) {
      throw ContractError(fmt::format("scale weights must be nonincreasing (w{} = {} > w{} = {})", k + 1, w[k], k,
                                      w[k - 1]));
    }
  }
}

Tensor weighted_ce_loss(const std::vector<Tensor>& logits, const MultiScaleTokens& tokens, std::span<const double> w) {
  if (w.size() != logits.size() || tokens.size() != logits.size()) {
    throw ContractError(
        fmt::format("{} scale weights for {} logit maps and {} token maps", w.size(), logits.size(), tokens.size()));
  }
  check_scale_weights(w);
  Tensor total;
  for (std::size_t k = 0; k < logits.size(); ++k) {
    if (w[k] == 0.0) continue;
    auto term = scale(softmax_cross_entropy(logits[k], tokens[k].tokens), w[k]);
    total = total.defined() ? add(total, term) : term;
  }
  return total.defined() ? total : Tensor::scalar(0.0);
}

Tensor distill_loss_on(const VarModel& teacher, const VarModel& student, const MultiScaleTokens& trajectory,
                       std::span<const int> prompt) {
  check_compatible(teacher, student);
  auto t = forward_logits(teacher, trajectory, prompt);
  auto s = forward_logits(student, trajectory, prompt);
  Tensor total;
  for (std::size_t k = 0; k < s.size(); ++k) {
    auto term = kl_divergence(t[k].detach(), s[k]);
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

Tensor prior_distill_loss(const VarModel& teacher, const VarModel& student, std::span<const int> prompt,
                          const SamplerConfig& sampler, MultiScaleTokens* trajectory_out) {
  check_compatible(teacher, student);
  auto traj = sample(teacher, prompt, sampler).tokens;
  auto loss = distill_loss_on(teacher, student, traj, prompt);
  if (trajectory_out) *trajectory_out = std::move(traj);
  return loss;
}

Tensor prior_preservation_loss(const VarModel& model, std::span<const MultiScaleTokens> bank,
                               std::span<const int> prompt, std::size_t index) {
  if (bank.empty()) throw ContractError("prior-preservation bank is empty");
  if (index >= bank.size()) throw IndexError(fmt::format("bank index {} outside {} entries", index, bank.size()));
  const std::vector<double> unit(model.config.schedule.size(), 1.0);
  return weighted_ce_loss(forward_logits(model, bank[index], prompt), bank[index], unit);
}

std::vector<MultiScaleTokens> generate_class_bank(const VarModel& model, std::span<const int> prompt,
                                                  std::size_t size, const SamplerConfig& sampler) {
  std::vector<MultiScaleTokens> bank;
  std::mt19937_64 rng(sampler.seed);
  for (std::size_t i = 0; i < size; ++i) {
    SamplerConfig s = sampler;
    s.seed = rng();
    bank.push_back(sample(model, prompt, s).tokens);
  }
  return bank;
}

std::vector<Role> default_lora_roles() { return {Role::SA, Role::CA, Role::FFN, Role::NORM}; }

std::size_t attach_lora(VarModel& model, std::size_t rank, const std::vector<Role>& roles, std::uint64_t seed) {
  if (rank == 0) throw ContractError("adapter rank must be positive");
  std::mt19937_64 rng(seed);
  std::size_t added = 0;
  for (const auto& site : block_linear_sites(model.config)) {
    if (std::find(roles.begin(), roles.end(), site.role) == roles.end()) continue;
    if (model.has(site.prefix + ".lora_a")) throw ContractError(fmt::format("'{}' already has an adapter", site.prefix));
    const auto& w = model.param(site.prefix + ".w");
    const std::size_t in = w.dim(0), out = w.dim(1);
    model.params.emplace(site.prefix + ".lora_a",
                         Param{Tensor::randn({in, rank}, rng, 1.0 / std::sqrt(static_cast<double>(in))), Role::LORA,
                               site.block});
    model.params.emplace(site.prefix + ".lora_b", Param{Tensor::zeros({rank, out}), Role::LORA, site.block});
    added += rank * (in + out);
  }
  return added;
}

TuningMask lora_mask(const VarModel& model) {
  TuningMask mask;
  for (const auto& [name, p] : model.params) {
    if (p.role == Role::LORA) mask.enabled.insert({p.block, Role::LORA});
  }
  return mask;
}

const char* variant_name(Variant v) {
  switch (v) {
    case Variant::Distill:
      return "distill";
    case Variant::Ppl:
      return "ppl";
    case Variant::None:
      return "none";
  }
  return "?";
}

Variant parse_variant(const std::string& name) {
  if (name == "distill") return Variant::Distill;
  if (name == "ppl") return Variant::Ppl;
  if (name == "none") return Variant::None;
  throw ContractError(fmt::format("unknown variant '{}' (expected distill, ppl or none)", name));
}

void validate(const FinetuneConfig& c, std::size_t n_scales) {
  if (!c.scale_weights.empty()) {
    if (c.scale_weights.size() != n_scales) {
      throw ContractError(fmt::format("{} scale weights for a {}-scale schedule", c.scale_weights.size(), n_scales));
    }
    check_scale_weights(c.scale_weights);
    if (c.scale_weights.back() <= 0.0) throw ContractError("the finest scale weight must be positive");
  }
  if (!std::isfinite(c.lambda) || c.lambda < 0.0) throw ContractError("lambda must be finite and nonnegative");
  if (c.iterations == 0 || c.batch == 0 || c.distill_batch == 0) {
    throw ContractError("iterations, batch and distill_batch must be positive");
  }
  if (!(c.lr > 0.0) || !std::isfinite(c.lr)) throw ContractError("learning rate must be positive");
  if (c.lora_rank && *c.lora_rank == 0) throw ContractError("adapter rank must be positive");
  if (c.variant == Variant::Ppl && c.bank_size == 0) throw ContractError("prior-preservation bank is empty");
}

FinetuneResult finetune(const VarModel& orig, const AutoencoderWeights& tokenizer, const SubjectSet& subjects,
                        const FinetuneConfig& cfg) {
  const auto& sched = orig.config.schedule;
  validate(cfg, sched.size());
  if (subjects.images.empty()) throw ContractError("subject set is empty");
  if (tokenizer.config.schedule != sched) throw ContractError("tokenizer and model use different scale schedules");
  const auto sub_prompt = orig.prompts.tokenize(subjects.subject_prompt);
  const auto cls_prompt = orig.prompts.tokenize(subjects.class_prompt);
  if (std::find(sub_prompt.begin(), sub_prompt.end(), PromptVocab::kSubject) == sub_prompt.end()) {
    throw ContractError("subject prompt lacks the subject slot");
  }
  if (std::find(cls_prompt.begin(), cls_prompt.end(), PromptVocab::kSubject) != cls_prompt.end()) {
    throw ContractError("class prompt must not contain the subject slot");
  }
  const auto weights = cfg.scale_weights.empty() ? default_scale_weights(sched.size()) : cfg.scale_weights;

  VarModel teacher = orig.clone();
  teacher.set_requires_grad(false);
  VarModel student = orig.clone();
  student.set_requires_grad(false);
  TuningMask mask;
  if (cfg.lora_rank) {
    attach_lora(student, *cfg.lora_rank, default_lora_roles(), cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    mask = lora_mask(student);
  } else {
    mask = select_trainable(student, cfg.roles);
    if (mask.enabled.count({-1, Role::SUBJECT}) && !subjects.class_noun.empty()) {
      init_subject_row(student, subjects.class_noun);
    }
  }
  std::vector<Tensor> params;
  for (auto& [name, p] : student.params) {
    if (!mask.allows(p)) continue;
    p.value.set_requires_grad(true);
    params.push_back(p.value);
  }
  if (params.empty()) throw ContractError("tuning mask selects no parameters");
  auto state = AdamWState::for_params(
      params, {.lr = cfg.lr, .beta1 = 0.9, .beta2 = 0.97, .eps = 1e-8, .weight_decay = cfg.weight_decay});

  std::mt19937_64 rng(cfg.seed);
  std::vector<MultiScaleTokens> bank;
  if (cfg.variant == Variant::Ppl) {
    SamplerConfig s = cfg.teacher_sampler;
    s.seed = rng();
    bank = generate_class_bank(teacher, cls_prompt, cfg.bank_size, s);
  }
  std::vector<MultiScaleTokens> plain;
  if (!cfg.augment) {
    for (const auto& img : subjects.images) {
      plain.push_back(quantize_multiscale(encode_image(img, tokenizer), tokenizer.codebook, sched));
    }
  }
  std::uniform_int_distribution<std::size_t> pick(0, subjects.images.size() - 1);
  const double inv_b = 1.0 / static_cast<double>(cfg.batch);
  const double inv_d = 1.0 / static_cast<double>(cfg.distill_batch);

  std::vector<FinetuneLogRow> log;
  for (std::size_t step = 0; step < cfg.iterations; ++step) {
    zero_grad(params);
    Tensor wce = Tensor::scalar(0.0);
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      const std::size_t idx = pick(rng);
      MultiScaleTokens tokens;
      if (cfg.augment) {
        auto img = augment(subjects.images[idx], rng());
        tokens = quantize_multiscale(encode_image(img, tokenizer), tokenizer.codebook, sched);
      } else {
        tokens = plain[idx];
      }
      wce = add(wce, scale(weighted_ce_loss(forward_logits(student, tokens, sub_prompt), tokens, weights), inv_b));
    }
    Tensor reg = Tensor::scalar(0.0);
    if (cfg.variant == Variant::Distill) {
      for (std::size_t d = 0; d < cfg.distill_batch; ++d) {
        SamplerConfig s = cfg.teacher_sampler;
        s.seed = rng();
        reg = add(reg, scale(prior_distill_loss(teacher, student, cls_prompt, s), inv_d));
      }
    } else if (cfg.variant == Variant::Ppl) {
      std::uniform_int_distribution<std::size_t> entry(0, bank.size() - 1);
      for (std::size_t d = 0; d < cfg.distill_batch; ++d) {
        reg = add(reg, scale(prior_preservation_loss(student, bank, cls_prompt, entry(rng)), inv_d));
      }
    }
    auto total = add(wce, scale(reg, cfg.lambda));
    FinetuneLogRow row{.step = step, .loss_wce = wce.item(), .loss_distill = reg.item(), .loss_total = total.item(),
                       .lr = cfg.lr};
    if (!std::isfinite(row.loss_total)) throw NumericError(fmt::format("fine-tuning loss diverged at step {}", step));
    backward(total);
    adamw_step(params, state);
    log.push_back(row);
  }
  for (auto& p : params) p.clear_grad();

  for (const auto& [name, p] : student.params) {
    if (mask.allows(p)) continue;
    if (!bit_equal(p.value, orig.param(name))) {
      throw std::logic_error(fmt::format("frozen parameter '{}' was modified", name));
    }
  }
  return {std::move(student), orig.clone(), std::move(log)};
}

std::string finetune_metrics_csv(std::span<const FinetuneLogRow> log) {
  std::string out = "step,loss_wce,loss_distill,loss_total,lr\n";
  for (const auto& r : log) {
    out += fmt::format("{},{:.17g},{:.17g},{:.17g},{:.17g}\n", r.step, r.loss_wce, r.loss_distill, r.loss_total, r.lr);
  }
  return out;
}

}  // namespace varp
