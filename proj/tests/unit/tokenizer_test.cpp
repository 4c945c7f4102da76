#include <gtest/gtest.h>

#include <random>

#include "varp/dataset.hpp"
#include "varp/errors.hpp"
#include "varp/ops.hpp"
#include "varp/tokenizer.hpp"

using namespace varp;

namespace {

// Smooth multi-scale random field: per-scale Gaussian noise, upsampled and summed.
FeatureMap random_field(const ScaleSchedule& sched, std::size_t c, std::mt19937_64& rng) {
  const auto fin = sched.final_extent();
  FeatureMap f(fin.height, fin.width, c);
  std::normal_distribution<double> n(0.0, 1.0);
  for (std::size_t k = 0; k < sched.size(); ++k) {
    std::vector<double> g(sched.positions(k) * c);
    for (auto& v : g) v = n(rng) / static_cast<double>(k + 1);
    auto up = kernels::resize_bilinear(g, sched[k].height, sched[k].width, c, fin.height, fin.width);
    for (std::size_t i = 0; i < up.size(); ++i) f.values[i] += up[i];
  }
  return f;
}

double sq_norm(const FeatureMap& f) {
  double s = 0.0;
  for (double v : f.values) s += v * v;
  return s;
}

std::vector<Image> small_corpus(std::size_t per_class) {
  SyntheticSpec spec;
  spec.samples_per_class = per_class;
  auto ds = generate_synthetic_dataset(spec, 3);
  std::vector<Image> out;
  for (auto& s : ds.generic) out.push_back(s.image);
  return out;
}

}  // namespace

TEST(Schedule, DeskDefault) {
  auto s = ScaleSchedule::desk_default();
  ASSERT_EQ(s.size(), 5u);
  EXPECT_EQ(s.total_positions(), 1u + 4 + 16 + 36 + 64);
  EXPECT_EQ(s.offset(3), 21u);
  EXPECT_EQ(s.final_extent(), (Extent{8, 8}));
}

TEST(Schedule, RejectsBadShapes) {
  EXPECT_THROW(ScaleSchedule({{8, 8}}), ContractError);
  EXPECT_THROW(ScaleSchedule({{2, 2}, {2, 2}}), ContractError);
  EXPECT_THROW(ScaleSchedule({{4, 4}, {2, 2}}), ContractError);
  EXPECT_NO_THROW(ScaleSchedule({{1, 2}, {2, 2}}));
}

TEST(Encoder, GridShapeAndDeterminism) {
  auto w = AutoencoderWeights::init({}, 5);
  Image img = noise_image(32, 1);
  auto a = encode_image(img, w);
  auto b = encode_image(img, w);
  EXPECT_EQ(a.height, 8u);
  EXPECT_EQ(a.width, 8u);
  EXPECT_EQ(a.channels, 16u);
  EXPECT_EQ(a, b);
}

TEST(Encoder, ZeroImageGivesZeroFeatures) {
  auto w = AutoencoderWeights::init({}, 5);
  auto f = encode_image(Image(32, 32), w);
  for (double v : f.values) EXPECT_EQ(v, 0.0);
}

TEST(Encoder, RejectsNonDivisibleImage) {
  auto w = AutoencoderWeights::init({}, 5);
  EXPECT_THROW(encode_image(Image(30, 30), w), ContractError);
}

TEST(Decoder, ZeroFeatureGivesZeroImageAndIsDeterministic) {
  auto w = AutoencoderWeights::init({}, 5);
  auto img = decode_feature(FeatureMap(8, 8, 16), w);
  ASSERT_EQ(img.height, 32u);
  for (double v : img.pixels) EXPECT_EQ(v, 0.0);
  std::mt19937_64 rng(2);
  auto f = random_field(ScaleSchedule::desk_default(), 16, rng);
  EXPECT_EQ(decode_feature(f, w), decode_feature(f, w));
  for (double v : decode_feature(f, w).pixels) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Quantizer, SingleScaleExactMatch) {
  std::mt19937_64 rng(4);
  Codebook cb{Tensor::randn({8, 3}, rng, 1.0)};
  auto sched = ScaleSchedule::unchecked({{4, 4}});
  FeatureMap f(4, 4, 3);
  const int j = 5;
  for (std::size_t p = 0; p < 16; ++p) {
    for (std::size_t ch = 0; ch < 3; ++ch) f.values[p * 3 + ch] = cb.entries.at(static_cast<std::size_t>(j) * 3 + ch);
  }
  auto toks = quantize_multiscale(f, cb, sched);
  ASSERT_EQ(toks.size(), 1u);
  for (int t : toks[0].tokens) EXPECT_EQ(t, j);
  auto rec = dequantize(toks, cb, sched);
  EXPECT_EQ(rec, f);
  auto chain = residual_chain(f, toks, cb, sched);
  for (double v : chain.back().values) EXPECT_EQ(v, 0.0);
}

TEST(Quantizer, TieGoesToLowerIndex) {
  Codebook cb{Tensor::from({3, 2}, {5.0, 5.0, 1.0, 0.0, -1.0, 0.0})};
  std::vector<double> v{0.0, 0.0};
  EXPECT_EQ(cb.nearest(v), 1);
  Codebook rev{Tensor::from({2, 2}, {-1.0, 0.0, 1.0, 0.0})};
  EXPECT_EQ(rev.nearest(v), 0);
}

TEST(Quantizer, EmptyCodebookRejected) {
  Codebook cb;
  EXPECT_THROW(quantize_multiscale(FeatureMap(8, 8, 16), cb, ScaleSchedule::desk_default()), ContractError);
}

TEST(Quantizer, EmittedTokensAreNearest) {
  std::mt19937_64 rng(8);
  auto sched = ScaleSchedule::desk_default();
  Codebook cb{Tensor::randn({64, 16}, rng, 0.3)};
  auto f = random_field(sched, 16, rng);
  auto toks = quantize_multiscale(f, cb, sched);
  auto chain = residual_chain(f, toks, cb, sched);
  auto e = cb.entries.data();
  for (std::size_t k = 0; k < sched.size(); ++k) {
    auto down = kernels::resize_bilinear(chain[k].values, 8, 8, 16, sched[k].height, sched[k].width);
    for (std::size_t p = 0; p < sched.positions(k); ++p) {
      auto dist = [&](std::size_t id) {
        double s = 0.0;
        for (std::size_t c = 0; c < 16; ++c) s += (down[p * 16 + c] - e[id * 16 + c]) * (down[p * 16 + c] - e[id * 16 + c]);
        return s;
      };
      const double chosen = dist(static_cast<std::size_t>(toks[k].tokens[p]));
      for (std::size_t id = 0; id < 64; ++id) EXPECT_LE(chosen, dist(id));
    }
  }
}

TEST(Quantizer, TelescopingIsExact) {
  auto sched = ScaleSchedule::desk_default();
  for (int trial = 0; trial < 10; ++trial) {
    std::mt19937_64 rng(100 + trial);
    Codebook cb{Tensor::randn({64, 16}, rng, 0.3)};
    auto f = random_field(sched, 16, rng);
    auto toks = quantize_multiscale(f, cb, sched);
    auto chain = residual_chain(f, toks, cb, sched);
    ASSERT_EQ(chain.size(), sched.size() + 1);
    for (std::size_t k = 1; k <= sched.size(); ++k) {
      MultiScaleTokens prefix(toks.begin(), toks.begin() + static_cast<std::ptrdiff_t>(k));
      auto rec = dequantize(prefix, cb, sched);
      FeatureMap expect = f;
      for (std::size_t i = 0; i < expect.values.size(); ++i) expect.values[i] -= rec.values[i];
      // Same left-to-right accumulation order on both sides except for the
      // grouping of the sum, so compare to a rounding bound.
      for (std::size_t i = 0; i < expect.values.size(); ++i) EXPECT_NEAR(chain[k].values[i], expect.values[i], 1e-12);
    }
  }
}

TEST(Quantizer, PrefixReconstructionNonIncreasing) {
  auto sched = ScaleSchedule::desk_default();
  for (int trial = 0; trial < 20; ++trial) {
    std::mt19937_64 rng(500 + trial);
    Codebook cb{Tensor::randn({64, 16}, rng, 0.3)};
    auto f = random_field(sched, 16, rng);
    auto toks = quantize_multiscale(f, cb, sched);
    double prev = sq_norm(f);
    for (std::size_t k = 1; k <= sched.size(); ++k) {
      MultiScaleTokens prefix(toks.begin(), toks.begin() + static_cast<std::ptrdiff_t>(k));
      const double err = f.mse(dequantize(prefix, cb, sched)) * static_cast<double>(f.values.size());
      EXPECT_LE(err, prev + 1e-12) << "trial " << trial << " k " << k;
      prev = err;
    }
  }
}

TEST(Dequantize, DegenerateScheduleSumsCodeword) {
  std::mt19937_64 rng(6);
  Codebook cb{Tensor::randn({4, 3}, rng, 1.0)};
  auto sched = ScaleSchedule::unchecked({{2, 2}, {2, 2}, {2, 2}});
  MultiScaleTokens toks(3, TokenMap{2, 2, {2, 2, 2, 2}});
  auto out = dequantize(toks, cb, sched);
  for (std::size_t p = 0; p < 4; ++p) {
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(out.values[p * 3 + c], 3.0 * cb.entries.at(2 * 3 + c), 1e-15);
  }
}

TEST(Dequantize, RejectsNonConformingTokens) {
  std::mt19937_64 rng(6);
  Codebook cb{Tensor::randn({4, 3}, rng, 1.0)};
  auto sched = ScaleSchedule({{1, 1}, {2, 2}});
  EXPECT_THROW(dequantize({TokenMap{2, 2, {0, 0, 0, 0}}}, cb, sched), ContractError);
  EXPECT_THROW(dequantize({TokenMap{1, 1, {9}}}, cb, sched), IndexError);
}

TEST(Training, LossDropsCodesUsedAndDeterministic) {
  auto corpus = small_corpus(16);
  AutoencoderTrainConfig tc;
  tc.iterations = 120;
  tc.batch = 4;
  tc.seed = 11;
  auto a = train_autoencoder(corpus, {}, tc);
  auto smooth = [&](std::size_t from) {
    double s = 0.0;
    for (std::size_t i = from; i < from + 10; ++i) s += a.curve[i].loss;
    return s / 10.0;
  };
  EXPECT_LT(smooth(a.curve.size() - 10), smooth(0));
  auto hist = codebook_histogram(corpus, a.weights);
  const auto used = std::count_if(hist.begin(), hist.end(), [](auto n) { return n > 0; });
  EXPECT_GE(used, 32);

  tc.iterations = 15;
  auto b = train_autoencoder(corpus, {}, tc);
  auto c = train_autoencoder(corpus, {}, tc);
  for (const auto& [name, t] : b.weights.params) {
    auto x = t.data();
    auto y = c.weights.param(name).data();
    EXPECT_TRUE(std::equal(x.begin(), x.end(), y.begin(), y.end())) << name;
  }
  auto x = b.weights.codebook.entries.data();
  auto y = c.weights.codebook.entries.data();
  EXPECT_TRUE(std::equal(x.begin(), x.end(), y.begin(), y.end()));
}
