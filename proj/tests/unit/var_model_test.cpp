#include <gtest/gtest.h>

#include <cmath>

#include "micro.hpp"
#include "varp/errors.hpp"
#include "varp/gradcheck.hpp"
#include "varp/ops.hpp"
#include "varp/var_model.hpp"

using namespace varp;
using namespace varp::testing;

namespace {

ScaleSchedule four_scales() { return ScaleSchedule({{1, 1}, {2, 2}, {3, 3}, {4, 4}}); }

std::vector<double> scale_rows(const std::vector<Tensor>& logits, std::size_t k) {
  auto d = logits[k].data();
  return {d.begin(), d.end()};
}

}  // namespace

TEST(PromptVocab, TokenizeAndErrors) {
  auto v = micro_vocab();
  EXPECT_EQ(v.id("<null>"), 0);
  EXPECT_EQ(v.id("<S*>"), 1);
  EXPECT_EQ(v.tokenize("a circle on white"), (std::vector<int>{2, 3 + 1, 3, 6}));
  EXPECT_EQ(v.tokenize(""), (std::vector<int>{0}));
  EXPECT_THROW(v.tokenize("a hexagon"), VocabularyError);
  EXPECT_THROW(PromptVocab({"<S*>", "<null>"}), ContractError);
}

TEST(VarModel, EveryParameterHasOneRole) {
  auto m = micro_model(four_scales(), 2, 3);
  std::size_t by_role = 0;
  for (Role r : {Role::SA, Role::CA, Role::FFN, Role::NORM, Role::EMBED, Role::SUBJECT, Role::LORA}) {
    by_role += m.parameter_count(r);
  }
  EXPECT_EQ(by_role, m.parameter_count());
  EXPECT_EQ(m.parameter_count(Role::SUBJECT), 8u);
  EXPECT_EQ(m.parameter_count(Role::LORA), 0u);
  EXPECT_EQ(m.param("head.w").dim(1), 8u);
  EXPECT_EQ(parse_role("subject_embedding"), Role::SUBJECT);
  EXPECT_THROW(parse_role("attention"), ContractError);
}

TEST(VarModel, DeskModelRoleShares) {
  std::mt19937_64 rng(1);
  Codebook cb{Tensor::randn({64, 16}, rng, 1.0)};
  auto m = VarModel::init({}, micro_vocab(), cb, 2);
  const double tuned = static_cast<double>(m.parameter_count(Role::CA) + m.parameter_count(Role::FFN) +
                                           m.parameter_count(Role::SUBJECT));
  EXPECT_LT(tuned / static_cast<double>(m.parameter_count()), 0.6);
  EXPECT_GT(m.parameter_count(Role::NORM), 0u);
}

TEST(ScaleInputs, StartIsTokenIndependentAndCausal) {
  auto sched = four_scales();
  auto m = micro_model(sched, 1, 4);
  std::mt19937_64 rng(5);
  auto toks = random_tokens(sched, 8, rng);
  auto base = build_scale_inputs(toks, m.codebook, sched);
  ASSERT_EQ(base.size(), 4u);
  for (double v : base[0].values) EXPECT_EQ(v, 0.0);
  for (std::size_t j = 0; j < sched.size(); ++j) {
    auto alt = toks;
    for (auto& id : alt[j].tokens) id = (id + 3) % 8;
    auto changed = build_scale_inputs(alt, m.codebook, sched);
    for (std::size_t k = 0; k <= j; ++k) EXPECT_EQ(changed[k], base[k]) << "scale " << k << " after changing " << j;
  }
  MultiScaleTokens prefix(toks.begin(), toks.begin() + 2);
  EXPECT_EQ(build_scale_inputs(prefix, m.codebook, sched).size(), 3u);
}

TEST(ScaleInputs, TwoScaleInputIsResampledLookup) {
  auto sched = ScaleSchedule({{2, 2}, {4, 4}});
  std::mt19937_64 rng(6);
  Codebook cb{Tensor::randn({8, 4}, rng, 1.0)};
  MultiScaleTokens toks{TokenMap{2, 2, {1, 5, 2, 7}}, TokenMap{4, 4, std::vector<int>(16, 0)}};
  auto in = build_scale_inputs(toks, cb, sched);
  std::vector<double> lookup;
  for (int id : toks[0].tokens) {
    for (std::size_t c = 0; c < 4; ++c) lookup.push_back(cb.entries.at(static_cast<std::size_t>(id) * 4 + c));
  }
  auto up = kernels::resize_bilinear(lookup, 2, 2, 4, 4, 4);
  // Scale 2 is the final extent, so the resample back to (h_2, w_2) is the identity.
  ASSERT_EQ(in[1].values.size(), up.size());
  for (std::size_t i = 0; i < up.size(); ++i) EXPECT_EQ(in[1].values[i], up[i]);
}

TEST(Mask, BlockLowerTriangular) {
  auto sched = four_scales();
  auto mask = scale_attention_mask(sched, 4);
  const std::size_t n = sched.total_positions();
  ASSERT_EQ(mask.shape(), (Shape{n, n}));
  EXPECT_EQ(n, 1u + 4 + 9 + 16);
  auto scale_of = [&](std::size_t i) {
    std::size_t k = 0;
    while (sched.offset(k + 1) <= i) ++k;
    return k;
  };
  auto d = mask.data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      EXPECT_EQ(d[i * n + j], scale_of(j) <= scale_of(i) ? 0.0 : -1e30);
    }
  }
}

TEST(Forward, SoftmaxRowsNormalized) {
  auto sched = four_scales();
  auto m = micro_model(sched, 2, 7);
  std::mt19937_64 rng(8);
  auto logits = forward_logits(m, random_tokens(sched, 8, rng), "a square on black");
  for (const auto& l : logits) {
    auto probs = softmax(l);
    auto p = probs.data();
    for (std::size_t r = 0; r < l.dim(0); ++r) {
      double s = 0.0;
      for (std::size_t v = 0; v < 8; ++v) s += p[r * 8 + v];
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
}

TEST(Forward, ScaleCausality) {
  auto sched = four_scales();
  auto m = micro_model(sched, 2, 9);
  std::mt19937_64 rng(10);
  auto toks = random_tokens(sched, 8, rng);
  auto base = forward_logits(m, toks, "a circle on white");
  for (std::size_t j = 0; j < sched.size(); ++j) {
    auto alt = toks;
    for (auto& id : alt[j].tokens) id = (id + 1) % 8;
    auto changed = forward_logits(m, alt, "a circle on white");
    for (std::size_t k = 0; k <= j; ++k) {
      EXPECT_TRUE(bit_equal(changed[k].data(), base[k].data())) << "scale " << k << " moved with r_" << j;
    }
    if (j + 1 < sched.size()) EXPECT_FALSE(bit_equal(changed[j + 1].data(), base[j + 1].data()));
  }
}

TEST(Forward, PromptIsLive) {
  auto sched = four_scales();
  auto m = micro_model(sched, 2, 11);
  std::mt19937_64 rng(12);
  auto toks = random_tokens(sched, 8, rng);
  auto a = forward_logits(m, toks, "a circle on white");
  auto b = forward_logits(m, toks, "a square on white");
  double diff = 0.0;
  for (std::size_t k = 0; k < sched.size(); ++k) {
    for (std::size_t i = 0; i < a[k].numel(); ++i) diff = std::max(diff, std::abs(a[k].at(i) - b[k].at(i)));
  }
  EXPECT_GT(diff, 0.0);
  EXPECT_THROW(forward_logits(m, toks, "a circle on grass"), VocabularyError);
  const int bad[] = {42};
  EXPECT_THROW(forward_logits(m, toks, std::span<const int>(bad)), VocabularyError);
}

TEST(Forward, PrefixForwardMatchesFullForward) {
  auto sched = four_scales();
  auto m = micro_model(sched, 2, 13);
  std::mt19937_64 rng(14);
  auto toks = random_tokens(sched, 8, rng);
  auto prompt = m.prompts.tokenize("a circle on black");
  auto full = forward_logits(m, toks, prompt);
  for (std::size_t k = 0; k < sched.size(); ++k) {
    MultiScaleTokens prefix(toks.begin(), toks.begin() + static_cast<std::ptrdiff_t>(k));
    auto part = guided_scale_logits(m, prefix, prompt, 1.0);
    auto want = scale_rows(full, k);
    ASSERT_EQ(part.size(), want.size());
    for (std::size_t i = 0; i < part.size(); ++i) EXPECT_NEAR(part[i], want[i], 1e-12);
  }
}

TEST(Guidance, EndpointsAreExact) {
  auto sched = four_scales();
  auto m = micro_model(sched, 2, 15);
  std::mt19937_64 rng(16);
  auto toks = random_tokens(sched, 8, rng);
  auto prompt = m.prompts.tokenize("a square on white");
  const int null_prompt[] = {PromptVocab::kNull};
  for (std::size_t k = 0; k < sched.size(); ++k) {
    MultiScaleTokens prefix(toks.begin(), toks.begin() + static_cast<std::ptrdiff_t>(k));
    auto inputs = build_scale_inputs(prefix, m.codebook, sched);
    auto cond_t = forward_inputs(m, inputs, prompt);
    auto null_t = forward_inputs(m, inputs, null_prompt);
    auto cond_all = cond_t.data();
    auto null_all = null_t.data();
    const auto off = static_cast<std::ptrdiff_t>(sched.offset(k) * 8);
    std::vector<double> cond(cond_all.begin() + off, cond_all.end());
    std::vector<double> null(null_all.begin() + off, null_all.end());
    EXPECT_EQ(guided_scale_logits(m, prefix, prompt, 1.0), cond);
    EXPECT_EQ(guided_scale_logits(m, prefix, prompt, 0.0), null);
    EXPECT_EQ(guide_logits(cond, null, 1.0), cond);
    EXPECT_EQ(guide_logits(cond, null, 0.0), null);
    auto mid = guided_scale_logits(m, prefix, prompt, 2.5);
    for (std::size_t i = 0; i < mid.size(); ++i) EXPECT_NEAR(mid[i], null[i] + 2.5 * (cond[i] - null[i]), 1e-12);
  }
  EXPECT_THROW(guided_scale_logits(m, {}, prompt, -1.0), ContractError);
}

TEST(Sampling, GreedyLimitIsArgmaxAndSeedsAreDeterministic) {
  auto sched = four_scales();
  auto m = micro_model(sched, 2, 17);
  auto prompt = m.prompts.tokenize("a circle on black");
  SamplerConfig greedy{.cfg_scale = 2.0, .temperature = 1e-9, .seed = 3};
  auto g = sample(m, prompt, greedy);
  ASSERT_EQ(g.tokens.size(), sched.size());
  for (std::size_t k = 0; k < sched.size(); ++k) {
    MultiScaleTokens prefix(g.tokens.begin(), g.tokens.begin() + static_cast<std::ptrdiff_t>(k));
    auto l = guided_scale_logits(m, prefix, prompt, 2.0);
    for (std::size_t p = 0; p < sched.positions(k); ++p) {
      auto row = l.begin() + static_cast<std::ptrdiff_t>(p * 8);
      EXPECT_EQ(g.tokens[k].tokens[p], std::max_element(row, row + 8) - row);
    }
    EXPECT_EQ(g.entropy[k], 0.0);
  }
  SamplerConfig top1{.cfg_scale = 2.0, .temperature = 1.0, .top_k = 1, .seed = 99};
  EXPECT_EQ(sample(m, prompt, top1).tokens, g.tokens);

  SamplerConfig s{.cfg_scale = 1.5, .temperature = 1.0, .seed = 21};
  auto a = sample(m, prompt, s);
  auto b = sample(m, prompt, s);
  EXPECT_EQ(a.tokens, b.tokens);
  EXPECT_EQ(a.entropy, b.entropy);
  for (double e : a.entropy) {
    EXPECT_GT(e, 0.0);
    EXPECT_LE(e, std::log(8.0) + 1e-12);
  }
  s.seed = 22;
  EXPECT_NE(sample(m, prompt, s).tokens, a.tokens);
  EXPECT_THROW(sample(m, prompt, SamplerConfig{.temperature = 0.0}), ContractError);
}

TEST(Gradients, MicroModelPretrainingLossMatchesFiniteDifferences) {
  auto sched = ScaleSchedule({{1, 1}, {2, 2}});
  auto m = micro_model(sched, 2, 23);
  std::mt19937_64 rng(24);
  TokenizedSample s{random_tokens(sched, 8, rng), m.prompts.tokenize("a square on white")};
  std::vector<Tensor> params;
  for (auto& [name, p] : m.params) params.push_back(p.value);
  auto r = finite_diff_check([&] { return next_scale_loss(m, s); }, params, GradCheckOptions{});
  EXPECT_GT(r.coords_checked, 1000u);
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(Pretrain, LossDropsAndIsDeterministic) {
  auto sched = ScaleSchedule({{1, 1}, {2, 2}});
  std::mt19937_64 rng(25);
  std::vector<TokenizedSample> data;
  auto base = micro_model(sched, 1, 26);
  for (int i = 0; i < 4; ++i) {
    data.push_back({random_tokens(sched, 8, rng), base.prompts.tokenize(i % 2 ? "a circle" : "a square")});
  }
  PretrainConfig pc{.iterations = 60, .batch = 2, .lr = 1e-2, .warmup = 5, .seed = 1};
  auto a = base.clone();
  auto log = pretrain(a, data, pc);
  ASSERT_EQ(log.size(), 60u);
  EXPECT_LT(log.back().loss, log.front().loss);
  auto b = base.clone();
  auto log2 = pretrain(b, data, pc);
  for (const auto& [name, p] : a.params) EXPECT_TRUE(bit_equal(p.value.data(), b.param(name).data())) << name;
  EXPECT_EQ(log.back().loss, log2.back().loss);
}
