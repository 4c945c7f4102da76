#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "varp/image.hpp"
#include "varp/tensor.hpp"
#include "varp/tokenizer.hpp"
#include "varp/var_model.hpp"

namespace varp {

inline constexpr double kWeightDiffEpsilon = 1e-8;

// Mean over elements of |orig - tuned| / (|orig| + eps).
double mean_diff_ratio(std::span<const double> orig, std::span<const double> tuned, double eps = kWeightDiffEpsilon);

struct GroupRatio {
  int block = -1;
  Role role = Role::EMBED;
  double ratio = 0.0;
};

struct WeightDiffReport {
  double epsilon = kWeightDiffEpsilon;
  std::vector<GroupRatio> groups;  // ordered by (block, role)
  std::map<Role, double> per_role;
};

// Ratios are element means within each (block, role) group and within each
// role. Parameters only present in `tuned` (adapters) are skipped.
WeightDiffReport weight_diff_ratio(const VarModel& orig, const VarModel& tuned, double eps = kWeightDiffEpsilon);

struct CorruptionCurve {
  std::uint64_t noise_seed = 0;
  std::string image_id;
  std::vector<double> mse;  // entry k keeps the image's first k token maps
};

// Decodes of (r_1..r_k, r^N_{k+1}..r^N_K) for k = 0..K, where r^N tokenizes a
// uniform noise image drawn from `noise_seed`.
std::vector<Image> corruption_decodes(const AutoencoderWeights& tokenizer, const Image& image,
                                      std::uint64_t noise_seed);
CorruptionCurve scale_corruption_curve(const AutoencoderWeights& tokenizer, const Image& image,
                                       std::uint64_t noise_seed, const std::string& image_id = "");

using Embedding = std::vector<double>;

// Spatial mean of the encoder features, L2-normalized.
Embedding embed_for_eval(const Image& image, const AutoencoderWeights& tokenizer);
std::vector<Embedding> embed_all(std::span<const Image> images, const AutoencoderWeights& tokenizer);

double cosine(const Embedding& a, const Embedding& b);

// Mean cross-pair cosine between class-prompt generations and real subject images.
double pres_metric(std::span<const Embedding> prior_samples, std::span<const Embedding> subject_images);
// Mean over unordered pairs of 1 - cosine, evaluated as half the squared
// distance between unit vectors.
double div_metric(std::span<const Embedding> images);
// Mean cross-pair cosine between generations and reference subject images.
double subject_fidelity(std::span<const Embedding> generated, std::span<const Embedding> references);

struct EvalRow {
  std::string metric;
  double value = 0.0;
  std::string subject;
  std::string prompt;
};

struct EvalReport {
  double subject_fidelity = 0.0;
  double pres = 0.0;
  double div = 0.0;
  std::vector<EvalRow> rows;
};

// Columns: block, role, ratio. Role aggregates use block "all".
std::string weight_report_csv(const WeightDiffReport& report);
// Columns: k, mse.
std::string corruption_curve_csv(std::span<const double> mse);
// Columns: metric, value, subject, prompt.
std::string eval_report_csv(const EvalReport& report);

}  // namespace varp
