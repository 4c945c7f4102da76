#include "varp/var_model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include <fmt/format.h>

#include "varp/errors.hpp"
#include "varp/ops.hpp"
#include "varp/optim.hpp"

namespace varp {

const char* role_name(Role role) {
  switch (role) {
    case Role::SA: return "SA";
    case Role::CA: return "CA";
    case Role::FFN: return "FFN";
    case Role::NORM: return "NORM";
    case Role::EMBED: return "EMBED";
    case Role::SUBJECT: return "SUBJECT";
    case Role::LORA: return "LORA";
  }
  return "?";
}

Role parse_role(const std::string& name) {
  for (Role r : {Role::SA, Role::CA, Role::FFN, Role::NORM, Role::EMBED, Role::SUBJECT, Role::LORA}) {
    if (name == role_name(r)) return r;
  }
  if (name == "subject_embedding") return Role::SUBJECT;
  throw ContractError(fmt::format("unknown role '{}'", name));
}

PromptVocab::PromptVocab(std::vector<std::string> words) : words_(std::move(words)) {
  if (words_.size() < 2 || words_[kNull] != "<null>" || words_[kSubject] != "<S*>") {
    throw ContractError("prompt vocabulary must start with <null>, <S*>");
  }
  for (std::size_t i = 0; i < words_.size(); ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      if (words_[i] == words_[j]) throw ContractError(fmt::format("duplicate prompt word '{}'", words_[i]));
    }
  }
}

PromptVocab PromptVocab::from_lists(const std::vector<std::string>& classes,
                                    const std::vector<std::string>& backgrounds) {
  std::vector<std::string> w{"<null>", "<S*>", "a", "on"};
  w.insert(w.end(), classes.begin(), classes.end());
  w.insert(w.end(), backgrounds.begin(), backgrounds.end());
  return PromptVocab(std::move(w));
}

int PromptVocab::id(const std::string& word) const {
  auto it = std::find(words_.begin(), words_.end(), word);
  if (it == words_.end()) throw VocabularyError(fmt::format("unknown prompt word '{}'", word));
  return static_cast<int>(it - words_.begin());
}

std::vector<int> PromptVocab::tokenize(const std::string& prompt) const {
  std::istringstream in(prompt);
  std::vector<int> ids;
  for (std::string w; in >> w;) ids.push_back(id(w));
  if (ids.empty()) ids.push_back(kNull);
  return ids;
}

namespace {

std::string block_name(std::size_t i, const char* rest) { return fmt::format("blocks.{}.{}", i, rest); }

void add_param(VarModel& m, const std::string& name, Tensor value, Role role, int block) {
  value.set_requires_grad(true);
  m.params.emplace(name, Param{std::move(value), role, block});
}

// y = x W + b, plus (x A) B when low-rank factors are attached. Key
// projections carry no bias: softmax is invariant to it.
Tensor linear(const VarModel& m, const std::string& prefix, const Tensor& x) {
  auto y = matmul(x, m.param(prefix + ".w"));
  if (m.has(prefix + ".b")) y = add(y, m.param(prefix + ".b"));
  auto a = m.params.find(prefix + ".lora_a");
  if (a != m.params.end()) y = add(y, matmul(matmul(x, a->second.value), m.param(prefix + ".lora_b")));
  return y;
}

// [n, D] -> [H, n, dh]
Tensor split_heads(const Tensor& x, std::size_t heads) {
  const std::size_t n = x.dim(0), dh = x.dim(1) / heads;
  return transpose(reshape(x, {n, heads, dh}), 0, 1);
}

Tensor merge_heads(const Tensor& x) {
  const std::size_t h = x.dim(0), n = x.dim(1), dh = x.dim(2);
  return reshape(transpose(x, 0, 1), {n, h * dh});
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads, const Tensor* mask) {
  const double inv = 1.0 / std::sqrt(static_cast<double>(q.dim(1) / heads));
  auto qh = split_heads(q, heads);
  auto kt = transpose(split_heads(k, heads), 1, 2);
  auto scores = scale(matmul(qh, kt), inv);
  if (mask) scores = add(scores, *mask);
  return merge_heads(matmul(softmax(scores), split_heads(v, heads)));
}

// Prompt token embeddings [P, D]; the subject slot reads its own parameter.
Tensor embed_prompt(const VarModel& m, std::span<const int> prompt) {
  for (int id : prompt) {
    if (id < 0 || static_cast<std::size_t>(id) >= m.prompts.size()) {
      throw VocabularyError(fmt::format("prompt token {} outside vocabulary of {}", id, m.prompts.size()));
    }
  }
  const auto& text = m.param("embed.text");
  std::vector<Tensor> parts{rows_range(text, 0, 1), m.param("embed.subject"), rows_range(text, 1, text.dim(0))};
  return gather_rows(concat_rows(parts), prompt);
}

Tensor modulate(const Tensor& x, const Tensor& mod, std::size_t j) {
  auto gamma = rows_range(mod, 2 * j, 2 * j + 1);
  auto beta = rows_range(mod, 2 * j + 1, 2 * j + 2);
  return add(mul(layer_norm(x), add_scalar(gamma, 1.0)), beta);
}

void check_prefix_inputs(const VarModel& m, const std::vector<FeatureMap>& inputs) {
  const auto& s = m.config.schedule;
  if (inputs.empty() || inputs.size() > s.size()) {
    throw ContractError(fmt::format("{} scale inputs for a {}-scale model", inputs.size(), s.size()));
  }
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const auto& f = inputs[k];
    if (f.height != s[k].height || f.width != s[k].width || f.channels != m.config.channels) {
      throw ContractError(fmt::format("scale input {} is {}x{}x{}, expected {}x{}x{}", k, f.height, f.width,
                                      f.channels, s[k].height, s[k].width, m.config.channels));
    }
  }
}

}  // namespace

std::vector<LinearSite> block_linear_sites(const VarConfig& config) {
  static const std::pair<const char*, Role> kNames[] = {
      {"sa.q", Role::SA},     {"sa.k", Role::SA},     {"sa.v", Role::SA}, {"sa.o", Role::SA},
      {"ca.q", Role::CA},     {"ca.k", Role::CA},     {"ca.v", Role::CA}, {"ca.o", Role::CA},
      {"ffn.fc1", Role::FFN}, {"ffn.fc2", Role::FFN}, {"norm.ada", Role::NORM}};
  std::vector<LinearSite> out;
  for (std::size_t i = 0; i < config.depth; ++i) {
    for (const auto& [n, role] : kNames) out.push_back({block_name(i, n), role, static_cast<int>(i)});
  }
  return out;
}

VarModel VarModel::init(const VarConfig& config, const PromptVocab& prompts, const Codebook& codebook,
                        std::uint64_t seed) {
  if (config.width % config.heads != 0) throw ContractError("model width must be divisible by the head count");
  if (codebook.vocab() != config.vocab || codebook.channels() != config.channels) {
    throw ContractError(fmt::format("codebook {}x{} does not match model vocab {} / channels {}", codebook.vocab(),
                                    codebook.channels(), config.vocab, config.channels));
  }
  VarModel m;
  m.config = config;
  m.prompts = prompts;
  m.codebook = Codebook{codebook.entries.clone()};
  m.codebook.entries.set_requires_grad(false);
  std::mt19937_64 rng(seed);
  const std::size_t D = config.width, N = config.schedule.total_positions();
  const double out_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(config.depth));

  auto lin = [&](const std::string& name, std::size_t in, std::size_t out, Role role, int block, double gain) {
    add_param(m, name + ".w", Tensor::randn({in, out}, rng, gain / std::sqrt(static_cast<double>(in))), role, block);
    if (name.compare(name.size() - 2, 2, ".k") != 0) add_param(m, name + ".b", Tensor::zeros({out}), role, block);
  };

  lin("embed.in", config.channels, D, Role::EMBED, -1, 1.0);
  add_param(m, "embed.start", Tensor::randn({config.schedule.positions(0), D}, rng, 0.5), Role::EMBED, -1);
  add_param(m, "embed.pos", Tensor::randn({N, D}, rng, 0.1), Role::EMBED, -1);
  add_param(m, "embed.scale", Tensor::randn({config.schedule.size(), D}, rng, 0.1), Role::EMBED, -1);
  add_param(m, "embed.text", Tensor::randn({prompts.size() - 1, D}, rng, 0.5), Role::EMBED, -1);
  add_param(m, "embed.subject", Tensor::randn({1, D}, rng, 0.5), Role::SUBJECT, -1);
  for (std::size_t i = 0; i < config.depth; ++i) {
    const int b = static_cast<int>(i);
    for (const char* n : {"sa.q", "sa.k", "sa.v"}) lin(block_name(i, n), D, D, Role::SA, b, 1.0);
    lin(block_name(i, "sa.o"), D, D, Role::SA, b, out_scale);
    for (const char* n : {"ca.q", "ca.k", "ca.v"}) lin(block_name(i, n), D, D, Role::CA, b, 1.0);
    lin(block_name(i, "ca.o"), D, D, Role::CA, b, out_scale);
    lin(block_name(i, "ffn.fc1"), D, config.ffn, Role::FFN, b, 1.0);
    lin(block_name(i, "ffn.fc2"), config.ffn, D, Role::FFN, b, out_scale);
    lin(block_name(i, "norm.ada"), D, 6 * D, Role::NORM, b, 0.1);
  }
  lin("head", D, config.vocab, Role::EMBED, -1, 1.0);
  return m;
}

const Tensor& VarModel::param(const std::string& name) const {
  auto it = params.find(name);
  if (it == params.end()) throw ContractError(fmt::format("model has no parameter '{}'", name));
  return it->second.value;
}

VarModel VarModel::clone() const {
  VarModel m;
  m.config = config;
  m.prompts = prompts;
  m.codebook = Codebook{codebook.entries.clone()};
  for (const auto& [name, p] : params) m.params.emplace(name, Param{p.value.clone(), p.role, p.block});
  return m;
}

std::size_t VarModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, p] : params) n += p.value.numel();
  return n;
}

std::size_t VarModel::parameter_count(Role role) const {
  std::size_t n = 0;
  for (const auto& [name, p] : params) {
    if (p.role == role) n += p.value.numel();
  }
  return n;
}

void VarModel::set_requires_grad(bool flag) {
  for (auto& [name, p] : params) p.value.set_requires_grad(flag);
}

std::vector<FeatureMap> build_scale_inputs(const MultiScaleTokens& tokens, const Codebook& codebook,
                                           const ScaleSchedule& schedule) {
  check_conforms(tokens, schedule, codebook.vocab());
  const std::size_t c = codebook.channels();
  const auto fin = schedule.final_extent();
  const std::size_t count = std::min(tokens.size() + 1, schedule.size());
  std::vector<FeatureMap> out;
  out.emplace_back(schedule[0].height, schedule[0].width, c);
  FeatureMap acc(fin.height, fin.width, c);
  for (std::size_t k = 1; k < count; ++k) {
    auto up = scale_contribution(tokens[k - 1], codebook, schedule);
    for (std::size_t i = 0; i < acc.values.size(); ++i) acc.values[i] += up.values[i];
    FeatureMap in(schedule[k].height, schedule[k].width, c);
    in.values = kernels::resize_bilinear(acc.values, fin.height, fin.width, c, in.height, in.width);
    out.push_back(std::move(in));
  }
  return out;
}

Tensor scale_attention_mask(const ScaleSchedule& schedule, std::size_t n_scales) {
  const std::size_t n = schedule.offset(n_scales);
  std::vector<double> mask(n * n, -1e30);
  for (std::size_t k = 0; k < n_scales; ++k) {
    const std::size_t row_end = schedule.offset(k + 1);
    for (std::size_t i = schedule.offset(k); i < row_end; ++i) {
      std::fill_n(mask.begin() + static_cast<std::ptrdiff_t>(i * n), row_end, 0.0);
    }
  }
  return Tensor::from({n, n}, std::move(mask));
}

Tensor forward_inputs(const VarModel& m, const std::vector<FeatureMap>& inputs, std::span<const int> prompt) {
  check_prefix_inputs(m, inputs);
  const auto& cfg = m.config;
  const auto& sched = cfg.schedule;
  const std::size_t n_scales = inputs.size(), n = sched.offset(n_scales), p0 = sched.positions(0);

  std::vector<Tensor> rows{m.param("embed.start")};
  if (n_scales > 1) {
    std::vector<double> feats;
    feats.reserve((n - p0) * cfg.channels);
    for (std::size_t k = 1; k < n_scales; ++k) feats.insert(feats.end(), inputs[k].values.begin(), inputs[k].values.end());
    rows.push_back(linear(m, "embed.in", Tensor::from({n - p0, cfg.channels}, std::move(feats))));
  }
  std::vector<int> scale_ids(n);
  for (std::size_t k = 0; k < n_scales; ++k) {
    std::fill(scale_ids.begin() + static_cast<std::ptrdiff_t>(sched.offset(k)),
              scale_ids.begin() + static_cast<std::ptrdiff_t>(sched.offset(k + 1)), static_cast<int>(k));
  }
  auto x = add(add(concat_rows(rows), rows_range(m.param("embed.pos"), 0, n)),
               gather_rows(m.param("embed.scale"), scale_ids));

  auto text = embed_prompt(m, prompt);
  auto cond = reshape(mean_rows(text), {1, cfg.width});
  auto mask = scale_attention_mask(sched, n_scales);

  for (std::size_t i = 0; i < cfg.depth; ++i) {
    auto bn = [&](const char* rest) { return block_name(i, rest); };
    auto mod = reshape(linear(m, bn("norm.ada"), cond), {6, cfg.width});

    auto h = modulate(x, mod, 0);
    auto sa = attention(linear(m, bn("sa.q"), h), linear(m, bn("sa.k"), h), linear(m, bn("sa.v"), h), cfg.heads, &mask);
    x = add(x, linear(m, bn("sa.o"), sa));

    h = modulate(x, mod, 1);
    auto ca = attention(linear(m, bn("ca.q"), h), linear(m, bn("ca.k"), text), linear(m, bn("ca.v"), text), cfg.heads,
                        nullptr);
    x = add(x, linear(m, bn("ca.o"), ca));

    h = modulate(x, mod, 2);
    x = add(x, linear(m, bn("ffn.fc2"), gelu(linear(m, bn("ffn.fc1"), h))));
  }
  return linear(m, "head", layer_norm(x));
}

std::vector<Tensor> forward_logits(const VarModel& m, const MultiScaleTokens& tokens, std::span<const int> prompt) {
  const auto& sched = m.config.schedule;
  if (tokens.size() != sched.size()) {
    throw ContractError(fmt::format("{} token maps for a {}-scale model", tokens.size(), sched.size()));
  }
  auto logits = forward_inputs(m, build_scale_inputs(tokens, m.codebook, sched), prompt);
  std::vector<Tensor> out;
  for (std::size_t k = 0; k < sched.size(); ++k) out.push_back(rows_range(logits, sched.offset(k), sched.offset(k + 1)));
  return out;
}

std::vector<Tensor> forward_logits(const VarModel& m, const MultiScaleTokens& tokens, const std::string& prompt) {
  return forward_logits(m, tokens, m.prompts.tokenize(prompt));
}

std::vector<Tensor> per_scale_ce(const std::vector<Tensor>& logits, const MultiScaleTokens& tokens) {
  if (logits.size() != tokens.size()) {
    throw ContractError(fmt::format("{} logit maps for {} token maps", logits.size(), tokens.size()));
  }
  std::vector<Tensor> out;
  for (std::size_t k = 0; k < logits.size(); ++k) out.push_back(softmax_cross_entropy(logits[k], tokens[k].tokens));
  return out;
}

std::vector<double> guide_logits(std::span<const double> cond, std::span<const double> null, double cfg_scale) {
  if (cond.size() != null.size()) throw ContractError("guidance requires equally sized logit arrays");
  std::vector<double> out(cond.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (1.0 - cfg_scale) * null[i] + cfg_scale * cond[i];
  return out;
}

std::vector<double> guided_scale_logits(const VarModel& m, const MultiScaleTokens& prefix, std::span<const int> prompt,
                                        double cfg_scale) {
  const auto& sched = m.config.schedule;
  if (prefix.size() >= sched.size()) throw ContractError("prefix already covers every scale");
  if (!(cfg_scale >= 0.0)) throw ContractError("cfg scale must be non-negative");
  const std::size_t k = prefix.size();
  auto inputs = build_scale_inputs(prefix, m.codebook, sched);
  auto scale_rows = [&](std::span<const int> p) {
    auto logits = forward_inputs(m, inputs, p);
    auto all = logits.data();
    return std::vector<double>(all.begin() + static_cast<std::ptrdiff_t>(sched.offset(k) * m.config.vocab), all.end());
  };
  const int null_prompt[] = {PromptVocab::kNull};
  if (cfg_scale == 1.0) return scale_rows(prompt);
  if (cfg_scale == 0.0) return scale_rows(null_prompt);
  return guide_logits(scale_rows(prompt), scale_rows(null_prompt), cfg_scale);
}

SampleResult sample(const VarModel& m, std::span<const int> prompt, const SamplerConfig& cfg) {
  if (!(cfg.temperature > 0.0)) throw ContractError("temperature must be positive");
  if (cfg.top_k && *cfg.top_k == 0) throw ContractError("top_k must be positive");
  const auto& sched = m.config.schedule;
  const std::size_t V = m.config.vocab;
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  SampleResult res;
  const bool greedy = cfg.temperature < 1e-6;
  std::vector<double> probs(V);
  std::vector<std::size_t> order(V);
  for (std::size_t k = 0; k < sched.size(); ++k) {
    auto logits = guided_scale_logits(m, res.tokens, prompt, cfg.cfg_scale);
    TokenMap tm{sched[k].height, sched[k].width, std::vector<int>(sched.positions(k))};
    double entropy = 0.0;
    for (std::size_t p = 0; p < tm.tokens.size(); ++p) {
      const double* row = logits.data() + p * V;
      if (greedy) {
        tm.tokens[p] = static_cast<int>(std::max_element(row, row + V) - row);
        continue;
      }
      double mx = -INFINITY;
      for (std::size_t v = 0; v < V; ++v) {
        probs[v] = row[v] / cfg.temperature;
        mx = std::max(mx, probs[v]);
      }
      if (cfg.top_k && *cfg.top_k < V) {
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
        for (std::size_t r = *cfg.top_k; r < V; ++r) probs[order[r]] = -INFINITY;
      }
      double z = 0.0;
      for (auto& q : probs) {
        q = std::exp(q - mx);
        z += q;
      }
      double u = unif(rng) * z, cum = 0.0;
      int pick = -1;
      for (std::size_t v = 0; v < V; ++v) {
        const double q = probs[v] / z;
        if (q > 0.0) entropy -= q * std::log(q);
        cum += probs[v];
        if (pick < 0 && u < cum) pick = static_cast<int>(v);
      }
      if (pick < 0) {
        // Rounding left u at the very top of the mass: take the last admissible token.
        for (std::size_t v = V; v-- > 0;) {
          if (probs[v] > 0.0) {
            pick = static_cast<int>(v);
            break;
          }
        }
      }
      tm.tokens[p] = pick;
    }
    res.entropy.push_back(entropy / static_cast<double>(tm.tokens.size()));
    res.tokens.push_back(std::move(tm));
  }
  return res;
}

SampleResult sample(const VarModel& m, const std::string& prompt, const SamplerConfig& cfg) {
  return sample(m, m.prompts.tokenize(prompt), cfg);
}

Tensor next_scale_loss(const VarModel& m, const TokenizedSample& s) {
  auto terms = per_scale_ce(forward_logits(m, s.tokens, s.prompt), s.tokens);
  Tensor total = terms[0];
  for (std::size_t k = 1; k < terms.size(); ++k) total = add(total, terms[k]);
  return total;
}

std::vector<PretrainLogRow> pretrain(VarModel& m, std::span<const TokenizedSample> data, const PretrainConfig& cfg) {
  if (data.empty()) throw ContractError("pretrain: empty dataset");
  if (cfg.batch == 0) throw ContractError("pretrain: batch must be positive");
  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
  std::bernoulli_distribution drop(cfg.prompt_dropout);

  m.set_requires_grad(true);
  std::vector<Tensor> params;
  for (auto& [name, p] : m.params) params.push_back(p.value);
  auto state = AdamWState::for_params(params, {.lr = cfg.lr, .beta1 = 0.9, .beta2 = 0.97, .eps = 1e-8,
                                               .weight_decay = cfg.weight_decay});
  const double inv_b = 1.0 / static_cast<double>(cfg.batch);
  const int null_prompt[] = {PromptVocab::kNull};
  std::vector<PretrainLogRow> log;
  for (std::size_t step = 0; step < cfg.iterations; ++step) {
    // Linear warmup then cosine decay to 10% of the peak rate.
    double lr = cfg.lr;
    if (step < cfg.warmup) {
      lr *= static_cast<double>(step + 1) / static_cast<double>(cfg.warmup);
    } else if (cfg.iterations > cfg.warmup) {
      const double t = static_cast<double>(step - cfg.warmup) / static_cast<double>(cfg.iterations - cfg.warmup);
      lr *= 0.1 + 0.45 * (1.0 + std::cos(M_PI * t));
    }
    state.config.lr = lr;
    zero_grad(params);
    PretrainLogRow row{.step = step, .lr = lr};
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      const auto& s = data[pick(rng)];
      TokenizedSample used{s.tokens, drop(rng) ? std::vector<int>(null_prompt, null_prompt + 1) : s.prompt};
      auto loss = next_scale_loss(m, used);
      const double value = loss.item();
      if (!std::isfinite(value)) throw NumericError(fmt::format("pretraining loss diverged at step {}", step));
      backward(scale(loss, inv_b));
      row.loss += value * inv_b;
    }
    adamw_step(params, state);
    log.push_back(row);
  }
  for (auto& p : params) p.clear_grad();
  return log;
}

}  // namespace varp
