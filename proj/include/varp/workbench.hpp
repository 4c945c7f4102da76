#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "varp/analysis.hpp"
#include "varp/dataset.hpp"
#include "varp/image.hpp"
#include "varp/personalize.hpp"
#include "varp/tokenizer.hpp"
#include "varp/var_model.hpp"

namespace varp {

// Binary PPM (P6, maxval 255); channel values are clamped to [0, 1] and
// rounded to the nearest level.
std::string encode_ppm(const Image& image);
Image decode_ppm(const std::string& bytes);
void write_ppm(const std::filesystem::path& path, const Image& image);
Image read_ppm(const std::filesystem::path& path);

// Columns: scale, row, col, token.
std::string token_dump_csv(const MultiScaleTokens& tokens);

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

struct DataSection {
  std::uint64_t seed = 0;
  std::size_t samples_per_class = 200;
  SubjectSpec subject;
};

struct TokenizerSection {
  AutoencoderConfig arch;
  AutoencoderTrainConfig train;
};

struct VarSection {
  std::string tokenizer = "tokenizer.varp";
  std::size_t depth = 4, width = 64, heads = 4, ffn = 256;
  PretrainConfig train;
};

struct FinetuneSection {
  std::string model = "var.varp";
  std::string tokenizer = "tokenizer.varp";
  FinetuneConfig config;
};

struct SampleSection {
  std::string model = "finetuned.varp";
  std::string tokenizer = "tokenizer.varp";
  std::vector<std::string> prompts;  // empty: the subject prompt
  std::size_t count = 4;
  SamplerConfig sampler;
};

struct AnalyzeWeightsSection {
  std::string original = "var.varp";
  std::string tuned = "finetuned.varp";
  double epsilon = kWeightDiffEpsilon;
};

struct AnalyzeScalesSection {
  std::string tokenizer = "tokenizer.varp";
  std::size_t images = 20;
  std::size_t dump_images = 2;  // images whose corrupted decodes are written as PPM
};

struct EvaluateSection {
  std::string tokenizer = "tokenizer.varp";
  std::string pretrained = "var.varp";
  std::string tuned = "finetuned.varp";
  std::size_t samples = 16;
  std::vector<std::string> prompts;  // empty: subject prompt on every background
  SamplerConfig sampler;
};

struct RunConfig {
  std::string stage;  // empty when the file does not name one
  int stage_line = 0;
  std::uint64_t seed = 0;
  std::string out = "runs/default";
  DataSection data;
  TokenizerSection tokenizer;
  VarSection var;
  FinetuneSection finetune;
  SampleSection sample;
  AnalyzeWeightsSection analyze_weights;
  AnalyzeScalesSection analyze_scales;
  EvaluateSection evaluate;

  // Prompts derived from the data section's subject.
  std::string subject_prompt() const;
  std::string class_prompt() const;
  // Input paths resolve against the output directory unless absolute.
  std::filesystem::path resolve(const std::string& path) const;
};

// Throws ConfigError carrying the 1-based line of the offending text.
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::filesystem::path& path);

const std::vector<std::string>& stage_names();

SyntheticSpec synthetic_spec(const RunConfig& config);
PromptVocab prompt_vocab(const SyntheticSpec& spec);

struct EvalSettings {
  std::size_t samples = 16;
  std::vector<std::string> subject_prompts;
  std::string class_prompt;
  std::string subject;
  SamplerConfig sampler;
};

struct EvalOutcome {
  EvalReport report;
  double pretrained_fidelity = 0.0;
};

// Fidelity and DIV over generations for each subject prompt, PRES over
// class-prompt generations, all against the real subject images.
EvalOutcome evaluate_models(const VarModel& pretrained, const VarModel& tuned, const AutoencoderWeights& tokenizer,
                            const std::vector<Image>& subject_images, const EvalSettings& settings);

Image decode_tokens(const MultiScaleTokens& tokens, const AutoencoderWeights& tokenizer);

// Stage runners; artifacts go under config.out.
void run_pretrain_tokenizer(const RunConfig& config);
void run_pretrain_var(const RunConfig& config);
void run_finetune(const RunConfig& config);
void run_sample(const RunConfig& config);
void run_analyze_weights(const RunConfig& config);
void run_analyze_scales(const RunConfig& config);
void run_evaluate(const RunConfig& config);

struct CheckLine {
  std::string name;
  bool passed = false;
  std::string detail;
};

// Fast finite-difference and invariant checks on micro models.
std::vector<CheckLine> run_selfcheck();

}  // namespace varp
