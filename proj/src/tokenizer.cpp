#include "varp/tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include <fmt/format.h>

#include "varp/errors.hpp"
#include "varp/ops.hpp"
#include "varp/optim.hpp"

namespace varp {

double pixel_mse(const Image& a, const Image& b) {
  if (a.height != b.height || a.width != b.width) throw ContractError("pixel_mse: image extents differ");
  double s = 0.0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) s += (a.pixels[i] - b.pixels[i]) * (a.pixels[i] - b.pixels[i]);
  return s / static_cast<double>(a.pixels.size());
}

ScaleSchedule::ScaleSchedule(std::vector<Extent> extents) : extents_(std::move(extents)) {
  if (extents_.size() < 2) throw ContractError("scale schedule needs K >= 2");
  for (std::size_t k = 0; k < extents_.size(); ++k) {
    const auto& e = extents_[k];
    if (e.height == 0 || e.width == 0) throw ContractError("scale schedule extents must be positive");
    if (k == 0) continue;
    const auto& p = extents_[k - 1];
    const bool grows = e.height >= p.height && e.width >= p.width;
    const bool strict = e.height > p.height || e.width > p.width;
    if (!grows || !strict) {
      throw ContractError(fmt::format("scale {} ({}x{}) does not grow from {}x{}", k, e.height, e.width, p.height, p.width));
    }
  }
}

ScaleSchedule ScaleSchedule::unchecked(std::vector<Extent> extents) {
  if (extents.empty()) throw ContractError("scale schedule needs at least one scale");
  ScaleSchedule s;
  s.extents_ = std::move(extents);
  return s;
}

ScaleSchedule ScaleSchedule::desk_default() {
  return ScaleSchedule({{1, 1}, {2, 2}, {4, 4}, {6, 6}, {8, 8}});
}

std::size_t ScaleSchedule::offset(std::size_t k) const {
  std::size_t off = 0;
  for (std::size_t i = 0; i < k && i < extents_.size(); ++i) off += positions(i);
  return off;
}

double FeatureMap::mse(const FeatureMap& other) const {
  if (values.size() != other.values.size()) throw ContractError("feature map extents differ");
  double s = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) s += (values[i] - other.values[i]) * (values[i] - other.values[i]);
  return s / static_cast<double>(values.size());
}

int Codebook::nearest(std::span<const double> vec) const {
  const std::size_t v = vocab(), c = channels();
  if (vec.size() != c) throw ContractError("codebook lookup: channel mismatch");
  auto e = entries.data();
  int best = 0;
  double best_d = 0.0;
  for (std::size_t i = 0; i < v; ++i) {
    double d = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double diff = vec[j] - e[i * c + j];
      d += diff * diff;
    }
    if (i == 0 || d < best_d) {
      best = static_cast<int>(i);
      best_d = d;
    }
  }
  return best;
}

namespace {

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return add(matmul(x, w), b); }

std::vector<double> patchify(const Image& image, std::size_t patch) {
  const std::size_t gh = image.height / patch, gw = image.width / patch;
  std::vector<double> out;
  out.reserve(image.pixels.size());
  for (std::size_t py = 0; py < gh; ++py) {
    for (std::size_t px = 0; px < gw; ++px) {
      for (std::size_t y = 0; y < patch; ++y) {
        for (std::size_t x = 0; x < patch; ++x) {
          for (std::size_t c = 0; c < 3; ++c) out.push_back(image.at(py * patch + y, px * patch + x, c));
        }
      }
    }
  }
  return out;
}

void check_image(const Image& image, const AutoencoderConfig& cfg) {
  if (image.height % cfg.patch != 0 || image.width % cfg.patch != 0) {
    throw ContractError(fmt::format("image {}x{} not divisible by patch {}", image.height, image.width, cfg.patch));
  }
  if (image.height != cfg.image_size || image.width != cfg.image_size) {
    throw ContractError(fmt::format("image {}x{} does not match tokenizer input {}", image.height, image.width,
                                    cfg.image_size));
  }
  if (image.pixels.size() != image.height * image.width * 3) throw ContractError("image pixel buffer size mismatch");
}

void check_feature(const FeatureMap& f, const ScaleSchedule& schedule, std::size_t channels) {
  const auto& fin = schedule.final_extent();
  if (f.height != fin.height || f.width != fin.width || f.channels != channels) {
    throw ContractError(fmt::format("feature map {}x{}x{} does not match final scale {}x{} with {} channels", f.height,
                                    f.width, f.channels, fin.height, fin.width, channels));
  }
}

std::vector<double> lookup(const TokenMap& t, const Codebook& cb) {
  const std::size_t c = cb.channels();
  auto e = cb.entries.data();
  std::vector<double> out(t.tokens.size() * c);
  for (std::size_t i = 0; i < t.tokens.size(); ++i) {
    std::copy_n(e.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(t.tokens[i]) * c), c,
                out.begin() + static_cast<std::ptrdiff_t>(i * c));
  }
  return out;
}

// Quantization that also reports the downsampled residual vectors it saw.
MultiScaleTokens quantize_impl(const FeatureMap& f, const Codebook& codebook, const ScaleSchedule& schedule,
                               std::vector<std::vector<double>>* seen) {
  if (!codebook.entries.defined() || codebook.entries.numel() == 0) throw ContractError("empty codebook");
  check_feature(f, schedule, codebook.channels());
  const std::size_t c = f.channels, H = f.height, W = f.width;
  std::vector<double> residual = f.values;
  MultiScaleTokens out;
  for (std::size_t k = 0; k < schedule.size(); ++k) {
    const auto [h, w] = schedule[k];
    auto down = kernels::resize_bilinear(residual, H, W, c, h, w);
    TokenMap tm{h, w, std::vector<int>(h * w)};
    for (std::size_t p = 0; p < h * w; ++p) {
      std::span<const double> vec(down.data() + p * c, c);
      tm.tokens[p] = codebook.nearest(vec);
      if (seen) seen->emplace_back(vec.begin(), vec.end());
    }
    auto up = kernels::resize_bilinear(lookup(tm, codebook), h, w, c, H, W);
    for (std::size_t i = 0; i < residual.size(); ++i) residual[i] -= up[i];
    out.push_back(std::move(tm));
  }
  return out;
}

}  // namespace

void check_conforms(const MultiScaleTokens& tokens, const ScaleSchedule& schedule, std::size_t vocab) {
  if (tokens.size() > schedule.size()) {
    throw ContractError(fmt::format("{} token maps for a {}-scale schedule", tokens.size(), schedule.size()));
  }
  for (std::size_t k = 0; k < tokens.size(); ++k) {
    const auto& t = tokens[k];
    if (t.height != schedule[k].height || t.width != schedule[k].width || t.tokens.size() != t.height * t.width) {
      throw ContractError(fmt::format("token map {} is {}x{}, schedule expects {}x{}", k, t.height, t.width,
                                      schedule[k].height, schedule[k].width));
    }
    for (int id : t.tokens) {
      if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
        throw IndexError(fmt::format("token {} out of range [0, {})", id, vocab));
      }
    }
  }
}

AutoencoderWeights AutoencoderWeights::init(const AutoencoderConfig& config, std::uint64_t seed) {
  if (config.patch == 0 || config.image_size % config.patch != 0) {
    throw ContractError("image size must be divisible by the patch size");
  }
  const auto& fin = config.schedule.final_extent();
  if (fin.height != config.grid() || fin.width != config.grid()) {
    throw ContractError("final scale must equal the encoder's latent grid");
  }
  std::mt19937_64 rng(seed);
  const std::size_t pd = config.patch_dim(), hd = config.hidden, c = config.channels;
  auto w = [&](std::size_t in, std::size_t out) {
    return Tensor::randn({in, out}, rng, 1.0 / std::sqrt(static_cast<double>(in)), true);
  };
  auto b = [](std::size_t n) { return Tensor::zeros({n}, true); };
  AutoencoderWeights aw;
  aw.config = config;
  aw.params["enc.in.w"] = w(pd, hd);
  aw.params["enc.in.b"] = b(hd);
  aw.params["enc.res.w1"] = w(hd, hd);
  aw.params["enc.res.b1"] = b(hd);
  aw.params["enc.res.w2"] = w(hd, hd);
  aw.params["enc.res.b2"] = b(hd);
  aw.params["enc.out.w"] = w(hd, c);
  aw.params["enc.out.b"] = b(c);
  aw.params["dec.in.w"] = w(c, hd);
  aw.params["dec.in.b"] = b(hd);
  aw.params["dec.res.w1"] = w(hd, hd);
  aw.params["dec.res.b1"] = b(hd);
  aw.params["dec.res.w2"] = w(hd, hd);
  aw.params["dec.res.b2"] = b(hd);
  aw.params["dec.out.w"] = w(hd, pd);
  aw.params["dec.out.b"] = b(pd);
  aw.codebook.entries = Tensor::randn({config.vocab, c}, rng, 0.5, true);
  return aw;
}

const Tensor& AutoencoderWeights::param(const std::string& name) const {
  auto it = params.find(name);
  if (it == params.end()) throw ContractError("unknown autoencoder parameter " + name);
  return it->second;
}

AutoencoderWeights AutoencoderWeights::clone() const {
  AutoencoderWeights out;
  out.config = config;
  for (const auto& [k, v] : params) out.params[k] = v.clone();
  out.codebook.entries = codebook.entries.clone();
  return out;
}

std::vector<Tensor> AutoencoderWeights::trainable() {
  std::vector<Tensor> out;
  for (auto& [k, v] : params) out.push_back(v);
  out.push_back(codebook.entries);
  return out;
}

Tensor encode_tensor(const Image& image, const AutoencoderWeights& weights) {
  const auto& cfg = weights.config;
  check_image(image, cfg);
  const std::size_t g = cfg.grid();
  auto x = Tensor::from({g * g, cfg.patch_dim()}, patchify(image, cfg.patch));
  auto h = gelu(linear(x, weights.param("enc.in.w"), weights.param("enc.in.b")));
  auto r = gelu(linear(h, weights.param("enc.res.w1"), weights.param("enc.res.b1")));
  h = add(h, linear(r, weights.param("enc.res.w2"), weights.param("enc.res.b2")));
  auto f = linear(h, weights.param("enc.out.w"), weights.param("enc.out.b"));
  return reshape(f, {g, g, cfg.channels});
}

Tensor decode_tensor(const Tensor& features, const AutoencoderWeights& weights) {
  const auto& cfg = weights.config;
  const std::size_t g = cfg.grid(), p = cfg.patch;
  if (features.shape() != Shape{g, g, cfg.channels}) {
    throw ContractError("decoder input must be " + to_string({g, g, cfg.channels}) + ", got " +
                        to_string(features.shape()));
  }
  auto x = reshape(features, {g * g, cfg.channels});
  auto h = gelu(linear(x, weights.param("dec.in.w"), weights.param("dec.in.b")));
  auto r = gelu(linear(h, weights.param("dec.res.w1"), weights.param("dec.res.b1")));
  h = add(h, linear(r, weights.param("dec.res.w2"), weights.param("dec.res.b2")));
  auto out = linear(h, weights.param("dec.out.w"), weights.param("dec.out.b"));
  // [gy, gx, py, px, 3] -> [gy, py, gx, px, 3]
  auto grid = transpose(reshape(out, {g, g, p, p, 3}), 1, 2);
  return reshape(grid, {g * p, g * p, 3});
}

FeatureMap encode_image(const Image& image, const AutoencoderWeights& weights) {
  auto t = encode_tensor(image, weights);
  FeatureMap f(t.dim(0), t.dim(1), t.dim(2));
  std::copy(t.data().begin(), t.data().end(), f.values.begin());
  return f;
}

Image decode_feature(const FeatureMap& f, const AutoencoderWeights& weights) {
  auto t = decode_tensor(Tensor::from({f.height, f.width, f.channels}, f.values), weights);
  Image img(t.dim(0), t.dim(1));
  auto d = t.data();
  for (std::size_t i = 0; i < d.size(); ++i) img.pixels[i] = std::clamp(d[i], 0.0, 1.0);
  return img;
}

MultiScaleTokens quantize_multiscale(const FeatureMap& f, const Codebook& codebook, const ScaleSchedule& schedule) {
  return quantize_impl(f, codebook, schedule, nullptr);
}

FeatureMap scale_contribution(const TokenMap& tokens, const Codebook& codebook, const ScaleSchedule& schedule) {
  const auto& fin = schedule.final_extent();
  const std::size_t c = codebook.channels();
  FeatureMap out(fin.height, fin.width, c);
  out.values = kernels::resize_bilinear(lookup(tokens, codebook), tokens.height, tokens.width, c, fin.height,
                                        fin.width);
  return out;
}

FeatureMap dequantize(const MultiScaleTokens& tokens, const Codebook& codebook, const ScaleSchedule& schedule) {
  check_conforms(tokens, schedule, codebook.vocab());
  const auto& fin = schedule.final_extent();
  FeatureMap out(fin.height, fin.width, codebook.channels());
  for (const auto& t : tokens) {
    auto up = scale_contribution(t, codebook, schedule);
    for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] += up.values[i];
  }
  return out;
}

std::vector<FeatureMap> residual_chain(const FeatureMap& f, const MultiScaleTokens& tokens, const Codebook& codebook,
                                       const ScaleSchedule& schedule) {
  check_feature(f, schedule, codebook.channels());
  check_conforms(tokens, schedule, codebook.vocab());
  std::vector<FeatureMap> chain{f};
  for (const auto& t : tokens) {
    auto up = scale_contribution(t, codebook, schedule);
    FeatureMap next = chain.back();
    for (std::size_t i = 0; i < next.values.size(); ++i) next.values[i] -= up.values[i];
    chain.push_back(std::move(next));
  }
  return chain;
}

std::vector<std::size_t> codebook_histogram(std::span<const Image> images, const AutoencoderWeights& weights) {
  std::vector<std::size_t> hist(weights.codebook.vocab(), 0);
  for (const auto& img : images) {
    auto toks = quantize_multiscale(encode_image(img, weights), weights.codebook, weights.config.schedule);
    for (const auto& t : toks) {
      for (int id : t.tokens) ++hist[static_cast<std::size_t>(id)];
    }
  }
  return hist;
}

AutoencoderTrainResult train_autoencoder(std::span<const Image> dataset, const AutoencoderConfig& config,
                                         const AutoencoderTrainConfig& train) {
  if (dataset.empty()) throw ContractError("train_autoencoder: empty dataset");
  if (train.batch == 0 || train.iterations == 0) throw ContractError("train_autoencoder: batch and iterations must be positive");
  std::mt19937_64 rng(train.seed);
  AutoencoderWeights weights = AutoencoderWeights::init(config, rng());
  const auto& schedule = config.schedule;
  const std::size_t c = config.channels, V = config.vocab, g = config.grid();
  std::uniform_int_distribution<std::size_t> pick(0, dataset.size() - 1);

  // Data-dependent codebook start: residual-free downsampled features.
  {
    std::vector<std::vector<double>> pool;
    for (std::size_t i = 0; i < std::min<std::size_t>(dataset.size(), 32); ++i) {
      auto f = encode_image(dataset[pick(rng)], weights);
      for (std::size_t k = 0; k < schedule.size(); ++k) {
        auto d = kernels::resize_bilinear(f.values, g, g, c, schedule[k].height, schedule[k].width);
        for (std::size_t p = 0; p + c <= d.size(); p += c) pool.emplace_back(d.begin() + p, d.begin() + p + c);
      }
    }
    std::shuffle(pool.begin(), pool.end(), rng);
    std::normal_distribution<double> jitter(0.0, 1e-3);
    auto e = weights.codebook.entries.mutable_data();
    for (std::size_t i = 0; i < V; ++i) {
      for (std::size_t j = 0; j < c; ++j) e[i * c + j] = pool[i % pool.size()][j] + jitter(rng);
    }
  }

  auto params = weights.trainable();
  const std::size_t codebook_slot = params.size() - 1;
  auto state = AdamWState::for_params(params, {.lr = train.lr, .beta1 = 0.9, .beta2 = 0.99, .eps = 1e-8});
  std::vector<std::size_t> usage(V, 0);
  std::vector<std::vector<double>> reservoir;
  AutoencoderTrainResult result;

  for (std::size_t step = 0; step < train.iterations; ++step) {
    zero_grad(params);
    TrainLogRow row{.step = step};
    const double inv_b = 1.0 / static_cast<double>(train.batch);
    for (std::size_t b = 0; b < train.batch; ++b) {
      const Image& img = dataset[pick(rng)];
      auto f = encode_tensor(img, weights);
      FeatureMap fm(g, g, c);
      std::copy(f.data().begin(), f.data().end(), fm.values.begin());
      std::vector<std::vector<double>> seen;
      auto toks = quantize_impl(fm, weights.codebook, schedule, &seen);
      for (const auto& t : toks) {
        for (int id : t.tokens) ++usage[static_cast<std::size_t>(id)];
      }
      for (auto& v : seen) {
        if (reservoir.size() < 4096) {
          reservoir.push_back(std::move(v));
        } else {
          reservoir[rng() % reservoir.size()] = std::move(v);
        }
      }
      // Differentiable reconstruction of the quantized map from the codebook.
      Tensor q;
      for (std::size_t k = 0; k < schedule.size(); ++k) {
        auto rows = gather_rows(weights.codebook.entries, toks[k].tokens);
        auto up = resize_bilinear(reshape(rows, {toks[k].height, toks[k].width, c}), g, g);
        q = k == 0 ? up : add(q, up);
      }
      auto f_const = f.detach();
      auto q_const = q.detach();
      auto codebook_loss = mean(mul(sub(q, f_const), sub(q, f_const)));
      auto commit_loss = mean(mul(sub(f, q_const), sub(f, q_const)));
      // Straight-through: forward uses q, gradient flows to f unchanged.
      auto st = add(f, sub(q_const, f_const));
      auto recon = decode_tensor(st, weights);
      auto target = Tensor::from({img.height, img.width, 3}, img.pixels);
      auto recon_loss = mean(mul(sub(recon, target), sub(recon, target)));
      auto loss = add(add(recon_loss, codebook_loss), scale(commit_loss, train.commitment));
      if (!std::isfinite(loss.item())) throw NumericError(fmt::format("autoencoder loss diverged at step {}", step));
      backward(scale(loss, inv_b));
      row.loss += loss.item() * inv_b;
      row.recon += recon_loss.item() * inv_b;
      row.commit += commit_loss.item() * inv_b;
    }
    adamw_step(params, state);

    if (train.restart_every > 0 && (step + 1) % train.restart_every == 0 && step + 1 < train.iterations) {
      auto e = weights.codebook.entries.mutable_data();
      std::normal_distribution<double> jitter(0.0, 1e-3);
      for (std::size_t i = 0; i < V; ++i) {
        if (usage[i] != 0 || reservoir.empty()) continue;
        const auto& src = reservoir[rng() % reservoir.size()];
        for (std::size_t j = 0; j < c; ++j) {
          e[i * c + j] = src[j] + jitter(rng);
          state.m[codebook_slot][i * c + j] = 0.0;
          state.v[codebook_slot][i * c + j] = 0.0;
        }
      }
      row.codes_used = static_cast<std::size_t>(std::count_if(usage.begin(), usage.end(), [](auto u) { return u > 0; }));
      std::fill(usage.begin(), usage.end(), 0);
    } else {
      row.codes_used = static_cast<std::size_t>(std::count_if(usage.begin(), usage.end(), [](auto u) { return u > 0; }));
    }
    result.curve.push_back(row);
  }
  for (auto& p : params) p.clear_grad();
  result.weights = std::move(weights);
  return result;
}

}  // namespace varp
