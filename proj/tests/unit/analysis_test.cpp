#include <gtest/gtest.h>

#include <cmath>

#include "micro.hpp"
#include "varp/analysis.hpp"
#include "varp/dataset.hpp"
#include "varp/errors.hpp"
#include "varp/personalize.hpp"

using namespace varp;
using namespace varp::testing;

namespace {

Embedding unit(std::vector<double> v) {
  double n = 0.0;
  for (double x : v) n += x * x;
  for (double& x : v) x /= std::sqrt(n);
  return v;
}

}  // namespace

TEST(WeightDiff, HandOracleAndIdentity) {
  const std::vector<double> orig{1.0, -2.0}, tuned{1.1, -2.0};
  EXPECT_NEAR(mean_diff_ratio(orig, tuned, 1e-8), 0.05, 1e-8);
  EXPECT_EQ(mean_diff_ratio(orig, orig), 0.0);

  auto m = micro_model(ScaleSchedule({{1, 1}, {2, 2}}), 2, 1);
  auto rep = weight_diff_ratio(m, m.clone());
  EXPECT_EQ(rep.epsilon, 1e-8);
  for (const auto& g : rep.groups) EXPECT_EQ(g.ratio, 0.0);
  for (const auto& [role, r] : rep.per_role) EXPECT_EQ(r, 0.0);
  EXPECT_EQ(rep.per_role.size(), 6u);
  EXPECT_EQ(rep.groups.size(), 2u * 4 + 2);  // 4 roles per block plus EMBED and SUBJECT outside
}

TEST(WeightDiff, GroupAveragesAndShapeMismatch) {
  auto m = micro_model(ScaleSchedule({{1, 1}, {2, 2}}), 1, 2);
  auto t = m.clone();
  for (double& v : t.params.at("blocks.0.ca.q.w").value.mutable_data()) v *= 1.5;
  auto rep = weight_diff_ratio(m, t);
  std::size_t ca = m.parameter_count(Role::CA), q = m.param("blocks.0.ca.q.w").numel();
  const double expect = 0.5 * static_cast<double>(q) / static_cast<double>(ca);
  EXPECT_NEAR(rep.per_role.at(Role::CA), expect, 1e-6);
  EXPECT_EQ(rep.per_role.at(Role::SA), 0.0);

  auto bad = m.clone();
  bad.params.at("blocks.0.ca.q.w").value = Tensor::zeros({2, 2});
  EXPECT_THROW(weight_diff_ratio(m, bad), ContractError);

  auto csv = weight_report_csv(rep);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "block,role,ratio");
  EXPECT_NE(csv.find("all,CA,"), std::string::npos);
}

TEST(WeightDiff, SelectiveTuningMovesOnlyTunedRoles) {
  auto tok = micro_tokenizer(1);
  auto orig = micro_model_for(tok, 2, 16, 2);
  SubjectSet s{.subject_prompt = "<S*> circle", .class_prompt = "a circle", .class_noun = "circle"};
  s.images.push_back(noise_image(16, 4));
  FinetuneConfig c;
  c.iterations = 10;
  auto r = finetune(orig, tok, s, c);
  auto rep = weight_diff_ratio(r.original, r.tuned);
  EXPECT_EQ(rep.per_role.at(Role::SA), 0.0);
  EXPECT_EQ(rep.per_role.at(Role::NORM), 0.0);
  EXPECT_EQ(rep.per_role.at(Role::EMBED), 0.0);
  EXPECT_GT(rep.per_role.at(Role::CA), 0.0);
  EXPECT_GT(rep.per_role.at(Role::FFN), 0.0);
}

TEST(Corruption, EndpointsAreExactRecomputations) {
  auto tok = AutoencoderWeights::init({}, 3);
  auto ds = generate_synthetic_dataset({.samples_per_class = 2}, 1);
  const auto& img = ds.generic[0].image;
  auto curve = scale_corruption_curve(tok, img, 77, "g0");
  const auto& sched = tok.config.schedule;
  ASSERT_EQ(curve.mse.size(), sched.size() + 1);
  EXPECT_EQ(curve.noise_seed, 77u);
  EXPECT_EQ(curve.image_id, "g0");
  auto clean = quantize_multiscale(encode_image(img, tok), tok.codebook, sched);
  EXPECT_EQ(curve.mse.back(), pixel_mse(decode_feature(dequantize(clean, tok.codebook, sched), tok), img));
  auto noise = quantize_multiscale(encode_image(noise_image(32, 77), tok), tok.codebook, sched);
  EXPECT_EQ(curve.mse.front(), pixel_mse(decode_feature(dequantize(noise, tok.codebook, sched), tok), img));
  for (double v : curve.mse) EXPECT_GE(v, 0.0);
  auto csv = corruption_curve_csv(curve.mse);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "k,mse");
}

TEST(Corruption, CoarseCorruptionHurtsMoreOnAverage) {
  auto tok = AutoencoderWeights::init({}, 3);
  auto ds = generate_synthetic_dataset({.samples_per_class = 5}, 2);
  std::vector<double> mean(tok.config.schedule.size() + 1, 0.0);
  for (std::size_t i = 0; i < ds.generic.size(); ++i) {
    auto c = scale_corruption_curve(tok, ds.generic[i].image, 500 + i);
    for (std::size_t k = 0; k < mean.size(); ++k) mean[k] += c.mse[k];
  }
  EXPECT_GT(mean.front(), mean.back());
}

TEST(Embedder, UnitNormDeterministicAndSelfSimilar) {
  auto tok = AutoencoderWeights::init({}, 3);
  auto img = noise_image(32, 5);
  auto a = embed_for_eval(img, tok);
  double n = 0.0;
  for (double v : a) n += v * v;
  EXPECT_NEAR(std::sqrt(n), 1.0, 1e-12);
  EXPECT_EQ(a, embed_for_eval(img, tok));
  EXPECT_NEAR(cosine(a, a), 1.0, 1e-12);
  EXPECT_THROW(embed_for_eval(Image(32, 32), tok), NumericError);
}

TEST(Embedder, SeparatesClassesAndSubject) {
  auto tok = AutoencoderWeights::init({}, 3);
  auto ds = generate_synthetic_dataset({.samples_per_class = 60}, 4);
  std::vector<Embedding> e;
  for (const auto& s : ds.generic) e.push_back(embed_for_eval(s.image, tok));
  // Class identity is compared among images that share fill, stroke and
  // background, since colour dominates a pooled embedding.
  double same = 0.0, cross = 0.0;
  std::size_t ns = 0, nc = 0;
  for (std::size_t i = 0; i < e.size(); ++i) {
    for (std::size_t j = i + 1; j < e.size(); ++j) {
      const auto &a = ds.generic[i], &b = ds.generic[j];
      if (a.fill != b.fill || a.stroke != b.stroke || a.background != b.background) continue;
      (a.cls == b.cls ? same : cross) += cosine(e[i], e[j]);
      ++(a.cls == b.cls ? ns : nc);
    }
  }
  ASSERT_GT(ns, 10u);
  ASSERT_GT(nc, 10u);
  EXPECT_GT(same / static_cast<double>(ns), cross / static_cast<double>(nc));

  std::vector<Embedding> subj;
  for (const auto& s : ds.subject) subj.push_back(embed_for_eval(s.image, tok));
  std::vector<Embedding> circles;
  for (std::size_t i = 0; i < e.size(); ++i) {
    if (ds.generic[i].cls == "circle") circles.push_back(e[i]);
  }
  EXPECT_GT(subject_fidelity(subj, subj), pres_metric(circles, subj));
}

TEST(Metrics, DefinitionalValues) {
  auto a = unit({1.0, 2.0, 3.0});
  auto b = unit({-2.0, 1.0, 0.0});
  std::vector<Embedding> same{a, a, a};
  EXPECT_EQ(div_metric(same), 0.0);
  EXPECT_NEAR(pres_metric(same, same), 1.0, 1e-12);
  EXPECT_NEAR(subject_fidelity(same, same), 1.0, 1e-12);
  std::vector<Embedding> ortho_a{a}, ortho_b{b};
  EXPECT_NEAR(pres_metric(ortho_a, ortho_b), 0.0, 1e-15);

  // cos = 0.5 between (1, 0) and (1/2, sqrt(3)/2).
  std::vector<Embedding> half{{1.0, 0.0}, {0.5, std::sqrt(3.0) / 2.0}};
  EXPECT_NEAR(div_metric(half), 0.5, 1e-12);
  EXPECT_NEAR(cosine(half[0], half[1]), 0.5, 1e-12);

  std::vector<Embedding> mixed{a, b, unit({1.0, 1.0, 1.0})};
  std::vector<Embedding> permuted{mixed[2], mixed[0], mixed[1]};
  EXPECT_NEAR(div_metric(mixed), div_metric(permuted), 1e-15);
  EXPECT_NEAR(pres_metric(mixed, same), pres_metric(permuted, same), 1e-15);
  const double f = subject_fidelity(mixed, ortho_b);
  EXPECT_GE(f, -1.0);
  EXPECT_LE(f, 1.0);

  EXPECT_THROW(div_metric(ortho_a), ContractError);
  EXPECT_THROW(pres_metric({}, same), ContractError);
  EXPECT_THROW(subject_fidelity(same, {}), ContractError);
}

TEST(Metrics, EvalCsv) {
  EvalReport r;
  r.rows.push_back({"pres", 0.25, "circle", "a circle on white"});
  EXPECT_EQ(eval_report_csv(r), "metric,value,subject,prompt\npres,0.25,circle,a circle on white\n");
}
