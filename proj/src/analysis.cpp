#include "varp/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include <fmt/format.h>

#include "varp/dataset.hpp"
#include "varp/errors.hpp"

namespace varp {

double mean_diff_ratio(std::span<const double> orig, std::span<const double> tuned, double eps) {
  if (orig.size() != tuned.size()) throw ContractError("mean_diff_ratio: sizes differ");
  if (orig.empty()) throw ContractError("mean_diff_ratio: empty parameter");
  double s = 0.0;
  for (std::size_t i = 0; i < orig.size(); ++i) s += std::abs(orig[i] - tuned[i]) / (std::abs(orig[i]) + eps);
  return s / static_cast<double>(orig.size());
}

WeightDiffReport weight_diff_ratio(const VarModel& orig, const VarModel& tuned, double eps) {
  if (!(eps > 0.0)) throw ContractError("weight_diff_ratio: epsilon must be positive");
  struct Acc {
    double sum = 0.0;
    std::size_t n = 0;
  };
  std::map<std::pair<int, Role>, Acc> groups;
  std::map<Role, Acc> roles;
  for (const auto& [name, p] : orig.params) {
    auto it = tuned.params.find(name);
    if (it == tuned.params.end()) throw ContractError(fmt::format("tuned model lacks parameter '{}'", name));
    if (it->second.value.shape() != p.value.shape()) {
      throw ContractError(fmt::format("parameter '{}' differs in shape", name));
    }
    const auto n = p.value.numel();
    const double s = mean_diff_ratio(p.value.data(), it->second.value.data(), eps) * static_cast<double>(n);
    auto& g = groups[{p.block, p.role}];
    g.sum += s;
    g.n += n;
    auto& r = roles[p.role];
    r.sum += s;
    r.n += n;
  }
  WeightDiffReport rep;
  rep.epsilon = eps;
  for (const auto& [key, a] : groups) rep.groups.push_back({key.first, key.second, a.sum / static_cast<double>(a.n)});
  for (const auto& [role, a] : roles) rep.per_role[role] = a.sum / static_cast<double>(a.n);
  return rep;
}

std::vector<Image> corruption_decodes(const AutoencoderWeights& tok, const Image& image, std::uint64_t noise_seed) {
  const auto& sched = tok.config.schedule;
  if (image.height != image.width) throw ContractError("corruption study expects a square image");
  auto clean = quantize_multiscale(encode_image(image, tok), tok.codebook, sched);
  auto noise = quantize_multiscale(encode_image(noise_image(image.height, noise_seed), tok), tok.codebook, sched);
  std::vector<Image> out;
  for (std::size_t k = 0; k <= sched.size(); ++k) {
    MultiScaleTokens mixed(clean.begin(), clean.begin() + static_cast<std::ptrdiff_t>(k));
    mixed.insert(mixed.end(), noise.begin() + static_cast<std::ptrdiff_t>(k), noise.end());
    out.push_back(decode_feature(dequantize(mixed, tok.codebook, sched), tok));
  }
  return out;
}

CorruptionCurve scale_corruption_curve(const AutoencoderWeights& tok, const Image& image, std::uint64_t noise_seed,
                                       const std::string& image_id) {
  CorruptionCurve c{.noise_seed = noise_seed, .image_id = image_id, .mse = {}};
  for (const auto& d : corruption_decodes(tok, image, noise_seed)) c.mse.push_back(pixel_mse(d, image));
  return c;
}

Embedding embed_for_eval(const Image& image, const AutoencoderWeights& tok) {
  auto f = encode_image(image, tok);
  Embedding e(f.channels, 0.0);
  const std::size_t n = f.height * f.width;
  for (std::size_t p = 0; p < n; ++p) {
    for (std::size_t c = 0; c < f.channels; ++c) e[c] += f.values[p * f.channels + c];
  }
  double norm = 0.0;
  for (double& v : e) {
    v /= static_cast<double>(n);
    norm += v * v;
  }
  norm = std::sqrt(norm);
  if (!(norm > 0.0) || !std::isfinite(norm)) throw NumericError("image embedding has zero or non-finite norm");
  for (double& v : e) v /= norm;
  return e;
}

std::vector<Embedding> embed_all(std::span<const Image> images, const AutoencoderWeights& tok) {
  std::vector<Embedding> out;
  out.reserve(images.size());
  for (const auto& img : images) out.push_back(embed_for_eval(img, tok));
  return out;
}

double cosine(const Embedding& a, const Embedding& b) {
  if (a.size() != b.size()) throw ContractError("cosine: embedding sizes differ");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return std::clamp(s, -1.0, 1.0);
}

namespace {

double mean_cross_cosine(std::span<const Embedding> a, std::span<const Embedding> b, const char* what) {
  if (a.empty() || b.empty()) throw ContractError(fmt::format("{}: both image sets must be nonempty", what));
  double s = 0.0;
  for (const auto& x : a) {
    for (const auto& y : b) s += cosine(x, y);
  }
  return s / static_cast<double>(a.size() * b.size());
}

}  // namespace

double pres_metric(std::span<const Embedding> prior, std::span<const Embedding> subject) {
  return mean_cross_cosine(prior, subject, "pres_metric");
}

double subject_fidelity(std::span<const Embedding> generated, std::span<const Embedding> references) {
  return mean_cross_cosine(generated, references, "subject_fidelity");
}

double div_metric(std::span<const Embedding> images) {
  if (images.size() < 2) throw ContractError("div_metric needs at least two images");
  double s = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    for (std::size_t j = i + 1; j < images.size(); ++j) {
      if (images[i].size() != images[j].size()) throw ContractError("div_metric: embedding sizes differ");
      double d = 0.0;
      for (std::size_t c = 0; c < images[i].size(); ++c) d += (images[i][c] - images[j][c]) * (images[i][c] - images[j][c]);
      s += 0.5 * d;
      ++pairs;
    }
  }
  return s / static_cast<double>(pairs);
}

std::string weight_report_csv(const WeightDiffReport& rep) {
  std::string out = "block,role,ratio\n";
  for (const auto& g : rep.groups) {
    out += fmt::format("{},{},{:.17g}\n", g.block < 0 ? std::string("none") : std::to_string(g.block),
                       role_name(g.role), g.ratio);
  }
  for (const auto& [role, r] : rep.per_role) out += fmt::format("all,{},{:.17g}\n", role_name(role), r);
  return out;
}

std::string corruption_curve_csv(std::span<const double> mse) {
  std::string out = "k,mse\n";
  for (std::size_t k = 0; k < mse.size(); ++k) out += fmt::format("{},{:.17g}\n", k, mse[k]);
  return out;
}

std::string eval_report_csv(const EvalReport& rep) {
  std::string out = "metric,value,subject,prompt\n";
  for (const auto& r : rep.rows) out += fmt::format("{},{:.17g},{},{}\n", r.metric, r.value, r.subject, r.prompt);
  return out;
}

}  // namespace varp
