#include "varp/workbench.hpp"

#include <algorithm>
#include <concepts>
#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <json.hpp>

#include "varp/checkpoint.hpp"
#include "varp/errors.hpp"
#include "varp/gradcheck.hpp"
#include "varp/ops.hpp"

namespace varp {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---------------------------------------------------------------- files

std::string encode_ppm(const Image& img) {
  if (img.pixels.size() != img.height * img.width * 3) throw ContractError("image pixel buffer has the wrong size");
  std::string out = fmt::format("P6\n{} {}\n255\n", img.width, img.height);
  out.reserve(out.size() + img.pixels.size());
  for (double v : img.pixels) {
    if (!std::isfinite(v)) throw NumericError("non-finite pixel value");
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0))));
  }
  return out;
}

Image decode_ppm(const std::string& bytes) {
  std::istringstream in(bytes);
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (!in || magic != "P6" || maxval != 255 || w == 0 || h == 0) throw CorruptFileError("not an 8-bit P6 image");
  in.get();
  Image img(h, w);
  const auto offset = static_cast<std::size_t>(in.tellg());
  if (bytes.size() != offset + img.pixels.size()) throw CorruptFileError("PPM payload has the wrong length");
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    img.pixels[i] = static_cast<double>(static_cast<unsigned char>(bytes[offset + i])) / 255.0;
  }
  return img;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error(fmt::format("cannot write '{}'", path.string()));
  f.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!f) throw std::runtime_error(fmt::format("write to '{}' failed", path.string()));
}

std::string read_text(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error(fmt::format("cannot read '{}'", path.string()));
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

void write_ppm(const fs::path& path, const Image& image) { write_text(path, encode_ppm(image)); }

Image read_ppm(const fs::path& path) { return decode_ppm(read_text(path)); }

std::string token_dump_csv(const MultiScaleTokens& tokens) {
  std::string out = "scale,row,col,token\n";
  for (std::size_t k = 0; k < tokens.size(); ++k) {
    const auto& t = tokens[k];
    for (std::size_t r = 0; r < t.height; ++r) {
      for (std::size_t c = 0; c < t.width; ++c) out += fmt::format("{},{},{},{}\n", k + 1, r, c, t.tokens[r * t.width + c]);
    }
  }
  return out;
}

// ---------------------------------------------------------------- config

namespace {

int line_at(const std::string& text, std::size_t pos) {
  pos = std::min(pos, text.size());
  return 1 + static_cast<int>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(pos), '\n'));
}

// Position of `"key"` used as an object key at or after `from`.
std::size_t find_key(const std::string& text, const std::string& key, std::size_t from) {
  const std::string quoted = "\"" + key + "\"";
  for (auto pos = text.find(quoted, from); pos != std::string::npos; pos = text.find(quoted, pos + 1)) {
    auto after = text.find_first_not_of(" \t\r\n", pos + quoted.size());
    if (after != std::string::npos && text[after] == ':') return pos;
  }
  return std::string::npos;
}

class Section {
 public:
  Section(const json& obj, const std::string& text) : Section(obj, text, "", 0) {}

  [[noreturn]] void fail(const std::string& key, const std::string& msg) const {
    const auto pos = find_key(text_, key, start_);
    fail_at(pos == std::string::npos ? start_ : pos, fmt::format("'{}': {}", qualified(key), msg));
  }

  [[noreturn]] void fail_at(std::size_t pos, const std::string& msg) const {
    const int line = pos == std::string::npos ? 0 : line_at(text_, pos);
    throw ConfigError(name_.empty() || msg.starts_with("'") ? msg : fmt::format("'{}' {}", name_, msg), line);
  }

  const json* take(const std::string& key) {
    seen_.insert(key);
    auto it = obj_.find(key);
    return it == obj_.end() ? nullptr : &*it;
  }

  void get(const std::string& key, std::string& out) {
    if (auto v = take(key)) {
      if (!v->is_string()) fail(key, "expected a string");
      out = v->get<std::string>();
    }
  }
  void get(const std::string& key, bool& out) {
    if (auto v = take(key)) {
      if (!v->is_boolean()) fail(key, "expected true or false");
      out = v->get<bool>();
    }
  }
  void get(const std::string& key, double& out) {
    if (auto v = take(key)) {
      if (!v->is_number()) fail(key, "expected a number");
      out = v->get<double>();
      if (!std::isfinite(out)) fail(key, "must be finite");
    }
  }
  template <std::unsigned_integral T>
  void get(const std::string& key, T& out) {
    if (auto v = take(key)) out = static_cast<T>(as_uint(key, *v));
  }
  void get(const std::string& key, std::optional<std::size_t>& out) {
    if (auto v = take(key)) {
      if (v->is_null()) {
        out.reset();
      } else {
        out = static_cast<std::size_t>(as_uint(key, *v));
      }
    }
  }
  void get(const std::string& key, std::vector<double>& out) {
    if (auto v = take(key)) {
      if (!v->is_array()) fail(key, "expected an array of numbers");
      out.clear();
      for (const auto& e : *v) {
        if (!e.is_number()) fail(key, "expected an array of numbers");
        out.push_back(e.get<double>());
      }
    }
  }
  void get(const std::string& key, std::vector<std::string>& out) {
    if (auto v = take(key)) {
      if (!v->is_array()) fail(key, "expected an array of strings");
      out.clear();
      for (const auto& e : *v) {
        if (!e.is_string()) fail(key, "expected an array of strings");
        out.push_back(e.get<std::string>());
      }
    }
  }
  void get(const std::string& key, ScaleSchedule& out) {
    if (auto v = take(key)) {
      std::vector<Extent> ext;
      if (!v->is_array()) fail(key, "expected an array of [height, width] pairs");
      for (const auto& e : *v) {
        if (!e.is_array() || e.size() != 2) fail(key, "expected an array of [height, width] pairs");
        ext.push_back({static_cast<std::size_t>(as_uint(key, e[0])), static_cast<std::size_t>(as_uint(key, e[1]))});
      }
      try {
        out = ScaleSchedule(std::move(ext));
      } catch (const ContractError& e) {
        fail(key, e.what());
      }
    }
  }

  Section sub(const std::string& key) {
    static const json empty = json::object();
    auto v = take(key);
    return Section(v ? *v : empty, text_, key, v ? find_key(text_, key, start_) : start_);
  }

  // Rejects keys that no getter asked for.
  void finish() const {
    for (const auto& [key, value] : obj_.items()) {
      if (!seen_.count(key)) fail(key, "unknown key");
    }
  }

 private:
  Section(const json& obj, const std::string& text, std::string name, std::size_t start)
      : obj_(obj), text_(text), name_(std::move(name)), start_(start) {
    if (!obj_.is_object()) fail_at(start_, "must be a JSON object");
  }

  std::string qualified(const std::string& key) const { return name_.empty() ? key : name_ + "." + key; }

  std::uint64_t as_uint(const std::string& key, const json& v) const {
    if (!v.is_number_unsigned()) fail(key, "expected a nonnegative integer");
    return v.get<std::uint64_t>();
  }

  const json& obj_;
  const std::string& text_;
  std::string name_;
  std::size_t start_ = 0;
  std::set<std::string> seen_;
};

void read_sampler(Section& s, SamplerConfig& out) {
  s.get("cfg_scale", out.cfg_scale);
  s.get("temperature", out.temperature);
  s.get("top_k", out.top_k);
}

}  // namespace

const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names{"pretrain-tokenizer", "pretrain-var",   "finetune", "sample",
                                              "analyze-weights",    "analyze-scales", "evaluate", "selfcheck"};
  return names;
}

RunConfig parse_run_config(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    std::string what = e.what();
    if (auto p = what.find("parse error"); p != std::string::npos) what = what.substr(p);
    throw ConfigError(what, line_at(text, e.byte == 0 ? 0 : e.byte - 1));
  }
  RunConfig c;
  Section top(root, text);
  top.get("stage", c.stage);
  if (auto pos = find_key(text, "stage", 0); pos != std::string::npos) c.stage_line = line_at(text, pos);
  if (!c.stage.empty()) {
    const auto& names = stage_names();
    if (c.stage != "analyze" && std::find(names.begin(), names.end(), c.stage) == names.end()) {
      top.fail("stage", fmt::format("unknown stage '{}'", c.stage));
    }
  }
  top.get("seed", c.seed);
  top.get("out", c.out);

  auto data = top.sub("data");
  data.get("seed", c.data.seed);
  data.get("samples_per_class", c.data.samples_per_class);
  data.get("subject_class", c.data.subject.cls);
  data.get("subject_fill", c.data.subject.fill);
  data.get("subject_stroke", c.data.subject.stroke);
  data.get("subject_background", c.data.subject.background);
  data.get("subject_count", c.data.subject.count);
  data.finish();

  auto tok = top.sub("tokenizer");
  tok.get("patch", c.tokenizer.arch.patch);
  tok.get("channels", c.tokenizer.arch.channels);
  tok.get("hidden", c.tokenizer.arch.hidden);
  tok.get("vocab", c.tokenizer.arch.vocab);
  tok.get("schedule", c.tokenizer.arch.schedule);
  tok.get("iterations", c.tokenizer.train.iterations);
  tok.get("batch", c.tokenizer.train.batch);
  tok.get("lr", c.tokenizer.train.lr);
  tok.get("commitment", c.tokenizer.train.commitment);
  tok.get("restart_every", c.tokenizer.train.restart_every);
  tok.finish();

  auto var = top.sub("var");
  var.get("tokenizer", c.var.tokenizer);
  var.get("depth", c.var.depth);
  var.get("width", c.var.width);
  var.get("heads", c.var.heads);
  var.get("ffn", c.var.ffn);
  var.get("iterations", c.var.train.iterations);
  var.get("batch", c.var.train.batch);
  var.get("lr", c.var.train.lr);
  var.get("weight_decay", c.var.train.weight_decay);
  var.get("prompt_dropout", c.var.train.prompt_dropout);
  var.get("warmup", c.var.train.warmup);
  var.finish();

  auto ft = top.sub("finetune");
  auto& f = c.finetune.config;
  ft.get("model", c.finetune.model);
  ft.get("tokenizer", c.finetune.tokenizer);
  ft.get("scale_weights", f.scale_weights);
  ft.get("lambda", f.lambda);
  ft.get("distill_batch", f.distill_batch);
  ft.get("teacher_cfg_scale", f.teacher_sampler.cfg_scale);
  ft.get("teacher_temperature", f.teacher_sampler.temperature);
  ft.get("teacher_top_k", f.teacher_sampler.top_k);
  ft.get("iterations", f.iterations);
  ft.get("lr", f.lr);
  ft.get("weight_decay", f.weight_decay);
  ft.get("batch", f.batch);
  ft.get("augment", f.augment);
  std::string variant = variant_name(f.variant);
  ft.get("variant", variant);
  try {
    f.variant = parse_variant(variant);
  } catch (const ContractError& e) {
    ft.fail("variant", e.what());
  }
  ft.get("lora_rank", f.lora_rank);
  ft.get("roles", f.roles);
  ft.get("bank_size", f.bank_size);
  ft.finish();

  auto sm = top.sub("sample");
  sm.get("model", c.sample.model);
  sm.get("tokenizer", c.sample.tokenizer);
  sm.get("prompts", c.sample.prompts);
  sm.get("count", c.sample.count);
  read_sampler(sm, c.sample.sampler);
  sm.finish();

  auto aw = top.sub("analyze_weights");
  aw.get("original", c.analyze_weights.original);
  aw.get("tuned", c.analyze_weights.tuned);
  aw.get("epsilon", c.analyze_weights.epsilon);
  aw.finish();

  auto as = top.sub("analyze_scales");
  as.get("tokenizer", c.analyze_scales.tokenizer);
  as.get("images", c.analyze_scales.images);
  as.get("dump_images", c.analyze_scales.dump_images);
  as.finish();

  auto ev = top.sub("evaluate");
  ev.get("tokenizer", c.evaluate.tokenizer);
  ev.get("pretrained", c.evaluate.pretrained);
  ev.get("tuned", c.evaluate.tuned);
  ev.get("samples", c.evaluate.samples);
  ev.get("prompts", c.evaluate.prompts);
  read_sampler(ev, c.evaluate.sampler);
  ev.finish();
  top.finish();

  // Cross-field checks with the key's line.
  try {
    validate(f, c.tokenizer.arch.schedule.size());
  } catch (const ContractError& e) {
    ft.fail("scale_weights", e.what());
  }
  if (c.evaluate.samples < 2) ev.fail("samples", "at least two samples are needed for DIV");
  if (c.sample.count == 0) sm.fail("count", "must be positive");
  if (!(c.analyze_weights.epsilon > 0.0)) aw.fail("epsilon", "must be positive");
  if (c.analyze_scales.images == 0) as.fail("images", "must be positive");
  if (c.var.train.prompt_dropout < 0.0 || c.var.train.prompt_dropout > 1.0) {
    var.fail("prompt_dropout", "must lie in [0, 1]");
  }
  for (const auto& r : f.roles) {
    if (r != "SA" && r != "CA" && r != "FFN" && r != "NORM" && r != "subject_embedding") {
      ft.fail("roles", fmt::format("unknown role '{}'", r));
    }
  }
  try {
    validate(synthetic_spec(c));
  } catch (const ConfigError& e) {
    data.fail("subject_class", e.what());
  }
  return c;
}

RunConfig load_run_config(const fs::path& path) {
  std::string text;
  try {
    text = read_text(path);
  } catch (const std::runtime_error& e) {
    throw ConfigError(e.what(), 0);
  }
  return parse_run_config(text);
}

std::string RunConfig::subject_prompt() const {
  return fmt::format("<S*> {} on {}", data.subject.cls, data.subject.background);
}

std::string RunConfig::class_prompt() const { return fmt::format("a {} on {}", data.subject.cls, data.subject.background); }

fs::path RunConfig::resolve(const std::string& path) const {
  fs::path p(path);
  return p.is_absolute() ? p : fs::path(out) / p;
}

SyntheticSpec synthetic_spec(const RunConfig& c) {
  SyntheticSpec s;
  s.image_size = c.tokenizer.arch.image_size;
  s.samples_per_class = c.data.samples_per_class;
  s.subject = c.data.subject;
  return s;
}

PromptVocab prompt_vocab(const SyntheticSpec& spec) {
  std::vector<std::string> bgs;
  for (const auto& b : spec.backgrounds) bgs.push_back(b.name);
  return PromptVocab::from_lists(spec.classes, bgs);
}

// ---------------------------------------------------------------- evaluation

Image decode_tokens(const MultiScaleTokens& tokens, const AutoencoderWeights& tok) {
  return decode_feature(dequantize(tokens, tok.codebook, tok.config.schedule), tok);
}

namespace {

std::vector<Embedding> generate_embeddings(const VarModel& m, const AutoencoderWeights& tok, const std::string& prompt,
                                           std::size_t n, SamplerConfig sampler, std::uint64_t stream) {
  std::mt19937_64 rng(sampler.seed ^ (stream * 0x9e3779b97f4a7c15ULL));
  const auto ids = m.prompts.tokenize(prompt);
  std::vector<Embedding> out;
  for (std::size_t i = 0; i < n; ++i) {
    sampler.seed = rng();
    out.push_back(embed_for_eval(decode_tokens(sample(m, ids, sampler).tokens, tok), tok));
  }
  return out;
}

}  // namespace

EvalOutcome evaluate_models(const VarModel& pretrained, const VarModel& tuned, const AutoencoderWeights& tok,
                            const std::vector<Image>& subject_images, const EvalSettings& s) {
  if (s.subject_prompts.empty()) throw ContractError("evaluation needs at least one subject prompt");
  const auto refs = embed_all(subject_images, tok);
  EvalOutcome out;
  auto& rep = out.report;
  double fid = 0.0, fid_pre = 0.0, div = 0.0;
  for (std::size_t p = 0; p < s.subject_prompts.size(); ++p) {
    const auto& prompt = s.subject_prompts[p];
    auto gen = generate_embeddings(tuned, tok, prompt, s.samples, s.sampler, p + 1);
    auto gen_pre = generate_embeddings(pretrained, tok, prompt, s.samples, s.sampler, p + 1);
    const double f = subject_fidelity(gen, refs), fp = subject_fidelity(gen_pre, refs), d = div_metric(gen);
    rep.rows.push_back({"subject_fidelity", f, s.subject, prompt});
    rep.rows.push_back({"subject_fidelity_pretrained", fp, s.subject, prompt});
    rep.rows.push_back({"div", d, s.subject, prompt});
    fid += f;
    fid_pre += fp;
    div += d;
  }
  const double np = static_cast<double>(s.subject_prompts.size());
  rep.subject_fidelity = fid / np;
  rep.div = div / np;
  out.pretrained_fidelity = fid_pre / np;
  auto prior = generate_embeddings(tuned, tok, s.class_prompt, s.samples, s.sampler, 0);
  auto prior_pre = generate_embeddings(pretrained, tok, s.class_prompt, s.samples, s.sampler, 0);
  rep.pres = pres_metric(prior, refs);
  rep.rows.push_back({"pres", rep.pres, s.subject, s.class_prompt});
  rep.rows.push_back({"pres_pretrained", pres_metric(prior_pre, refs), s.subject, s.class_prompt});
  rep.rows.push_back({"subject_fidelity", rep.subject_fidelity, s.subject, "all"});
  rep.rows.push_back({"subject_fidelity_pretrained", out.pretrained_fidelity, s.subject, "all"});
  rep.rows.push_back({"div", rep.div, s.subject, "all"});
  return out;
}

// ---------------------------------------------------------------- stages

namespace {

void log(const std::string& msg) { fmt::print(stderr, "{}\n", msg); }

Dataset dataset_for(const RunConfig& c) { return generate_synthetic_dataset(synthetic_spec(c), c.data.seed); }

AutoencoderWeights checked_tokenizer(const RunConfig& c, const std::string& path) {
  auto tok = load_autoencoder(c.resolve(path).string());
  if (tok.config.image_size != c.tokenizer.arch.image_size) {
    throw ContractError("tokenizer image size differs from the configured data");
  }
  return tok;
}

std::vector<std::string> subject_prompts_on_all_backgrounds(const RunConfig& c) {
  std::vector<std::string> out{c.subject_prompt()};
  for (const auto& b : synthetic_spec(c).backgrounds) {
    if (b.name != c.data.subject.background) out.push_back(fmt::format("<S*> {} on {}", c.data.subject.cls, b.name));
  }
  return out;
}

}  // namespace

void run_pretrain_tokenizer(const RunConfig& c) {
  auto ds = dataset_for(c);
  std::vector<Image> images;
  for (const auto& s : ds.generic) images.push_back(s.image);
  auto train = c.tokenizer.train;
  train.seed = c.seed;
  log(fmt::format("training tokenizer on {} images for {} iterations", images.size(), train.iterations));
  auto res = train_autoencoder(images, c.tokenizer.arch, train);
  save_autoencoder(c.resolve("tokenizer.varp").string(), res.weights);
  std::string csv = "step,loss,recon,commit,codes_used\n";
  for (const auto& r : res.curve) {
    csv += fmt::format("{},{:.17g},{:.17g},{:.17g},{}\n", r.step, r.loss, r.recon, r.commit, r.codes_used);
  }
  write_text(c.resolve("tokenizer_curve.csv"), csv);
}

void run_pretrain_var(const RunConfig& c) {
  auto tok = checked_tokenizer(c, c.var.tokenizer);
  auto spec = synthetic_spec(c);
  auto ds = generate_synthetic_dataset(spec, c.data.seed);
  auto vocab = prompt_vocab(spec);
  std::vector<TokenizedSample> data;
  for (const auto& s : ds.generic) {
    data.push_back({quantize_multiscale(encode_image(s.image, tok), tok.codebook, tok.config.schedule),
                    vocab.tokenize(s.prompt)});
  }
  VarConfig vc{.vocab = tok.config.vocab, .channels = tok.config.channels, .schedule = tok.config.schedule,
               .depth = c.var.depth, .width = c.var.width, .heads = c.var.heads, .ffn = c.var.ffn};
  auto model = VarModel::init(vc, vocab, tok.codebook, c.seed);
  auto train = c.var.train;
  train.seed = c.seed;
  log(fmt::format("pretraining VAR ({} parameters) for {} iterations", model.parameter_count(), train.iterations));
  auto curve = pretrain(model, data, train);
  save_model(c.resolve("var.varp").string(), model);
  std::string csv = "step,loss,lr\n";
  for (const auto& r : curve) csv += fmt::format("{},{:.17g},{:.17g}\n", r.step, r.loss, r.lr);
  write_text(c.resolve("var_curve.csv"), csv);
}

void run_finetune(const RunConfig& c) {
  auto tok = checked_tokenizer(c, c.finetune.tokenizer);
  auto orig = load_model(c.resolve(c.finetune.model).string());
  auto ds = dataset_for(c);
  SubjectSet subjects{.images = {}, .subject_prompt = c.subject_prompt(), .class_prompt = c.class_prompt(),
                      .class_noun = c.data.subject.cls};
  for (const auto& s : ds.subject) subjects.images.push_back(s.image);
  auto cfg = c.finetune.config;
  cfg.seed = c.seed;
  log(fmt::format("fine-tuning on {} subject images for {} steps ({})", subjects.images.size(), cfg.iterations,
                  variant_name(cfg.variant)));
  auto res = finetune(orig, tok, subjects, cfg);
  save_model(c.resolve("finetuned.varp").string(), res.tuned);
  write_text(c.resolve("finetune_metrics.csv"), finetune_metrics_csv(res.log));
}

void run_sample(const RunConfig& c) {
  auto tok = checked_tokenizer(c, c.sample.tokenizer);
  auto model = load_model(c.resolve(c.sample.model).string());
  auto prompts = c.sample.prompts.empty() ? std::vector<std::string>{c.subject_prompt()} : c.sample.prompts;
  std::mt19937_64 rng(c.seed);
  for (std::size_t p = 0; p < prompts.size(); ++p) {
    const auto ids = model.prompts.tokenize(prompts[p]);
    for (std::size_t i = 0; i < c.sample.count; ++i) {
      auto sc = c.sample.sampler;
      sc.seed = rng();
      auto res = sample(model, ids, sc);
      const auto stem = c.resolve(fmt::format("samples/p{}_{}", p, i));
      write_ppm(stem.string() + ".ppm", decode_tokens(res.tokens, tok));
      json side{{"prompt", prompts[p]},
                {"seed", sc.seed},
                {"cfg_scale", sc.cfg_scale},
                {"temperature", sc.temperature},
                {"top_k", sc.top_k ? json(*sc.top_k) : json(nullptr)},
                {"entropy", res.entropy}};
      write_text(stem.string() + ".json", side.dump(2) + "\n");
      write_text(stem.string() + "_tokens.csv", token_dump_csv(res.tokens));
    }
  }
}

void run_analyze_weights(const RunConfig& c) {
  auto orig = load_model(c.resolve(c.analyze_weights.original).string());
  auto tuned = load_model(c.resolve(c.analyze_weights.tuned).string());
  auto rep = weight_diff_ratio(orig, tuned, c.analyze_weights.epsilon);
  write_text(c.resolve("weight_report.csv"), weight_report_csv(rep));
}

void run_analyze_scales(const RunConfig& c) {
  auto tok = checked_tokenizer(c, c.analyze_scales.tokenizer);
  auto ds = dataset_for(c);
  const std::size_t n = std::min(c.analyze_scales.images, ds.generic.size());
  std::vector<double> mean(tok.config.schedule.size() + 1, 0.0);
  std::string per_image = "image,k,mse\n";
  std::mt19937_64 rng(c.seed);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t idx = i * ds.generic.size() / n;
    const auto& img = ds.generic[idx].image;
    const std::uint64_t noise_seed = rng();
    auto decodes = corruption_decodes(tok, img, noise_seed);
    for (std::size_t k = 0; k < decodes.size(); ++k) {
      const double mse = pixel_mse(decodes[k], img);
      mean[k] += mse / static_cast<double>(n);
      per_image += fmt::format("g{},{},{:.17g}\n", idx, k, mse);
      if (i < c.analyze_scales.dump_images) write_ppm(c.resolve(fmt::format("corruption/g{}_k{}.ppm", idx, k)), decodes[k]);
    }
    if (i < c.analyze_scales.dump_images) write_ppm(c.resolve(fmt::format("corruption/g{}_original.ppm", idx)), img);
  }
  write_text(c.resolve("corruption_curve.csv"), corruption_curve_csv(mean));
  write_text(c.resolve("corruption_images.csv"), per_image);
}

void run_evaluate(const RunConfig& c) {
  auto tok = checked_tokenizer(c, c.evaluate.tokenizer);
  auto pre = load_model(c.resolve(c.evaluate.pretrained).string());
  auto tuned = load_model(c.resolve(c.evaluate.tuned).string());
  auto ds = dataset_for(c);
  std::vector<Image> refs;
  for (const auto& s : ds.subject) refs.push_back(s.image);
  EvalSettings s{.samples = c.evaluate.samples,
                 .subject_prompts = c.evaluate.prompts.empty() ? subject_prompts_on_all_backgrounds(c)
                                                               : c.evaluate.prompts,
                 .class_prompt = c.class_prompt(),
                 .subject = c.data.subject.cls,
                 .sampler = c.evaluate.sampler};
  s.sampler.seed = c.seed;
  auto out = evaluate_models(pre, tuned, tok, refs, s);
  write_text(c.resolve("eval_report.csv"), eval_report_csv(out.report));
}

// ---------------------------------------------------------------- selfcheck

namespace {

VarModel check_model(const ScaleSchedule& sched, std::size_t depth, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Codebook cb{Tensor::randn({8, 4}, rng, 1.0)};
  VarConfig cfg{.vocab = 8, .channels = 4, .schedule = sched, .depth = depth, .width = 8, .heads = 2, .ffn = 16};
  return VarModel::init(cfg, PromptVocab::from_lists({"circle", "square"}, {"white", "black"}), cb, seed + 1);
}

MultiScaleTokens check_tokens(const ScaleSchedule& sched, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> pick(0, 7);
  MultiScaleTokens out;
  for (const auto& e : sched.extents()) {
    TokenMap t{e.height, e.width, std::vector<int>(e.height * e.width)};
    for (auto& id : t.tokens) id = pick(rng);
    out.push_back(std::move(t));
  }
  return out;
}

std::vector<Tensor> all_params(VarModel& m) {
  std::vector<Tensor> out;
  for (auto& [name, p] : m.params) out.push_back(p.value);
  return out;
}

CheckLine fd_line(const std::string& name, const GradCheckResult& r) {
  return {name, r.max_rel_error < 1e-4, fmt::format("max rel err {:.3g} over {} coords", r.max_rel_error,
                                                     r.coords_checked)};
}

}  // namespace

std::vector<CheckLine> run_selfcheck() {
  std::vector<CheckLine> out;
  const std::vector<int> prompt{2, 4, 3, 6};
  std::mt19937_64 rng(2024);

  {
    auto sched = ScaleSchedule({{1, 1}, {2, 2}, {3, 3}});
    auto m = check_model(sched, 1, 1);
    m.set_requires_grad(true);
    auto toks = check_tokens(sched, rng);
    const std::vector<double> w{1.0, 1.0, 0.5};
    auto params = all_params(m);
    out.push_back(fd_line("gradient: weighted cross-entropy",
                          finite_diff_check([&] { return weighted_ce_loss(forward_logits(m, toks, prompt), toks, w); },
                                            params, GradCheckOptions{})));
  }
  {
    auto sched = ScaleSchedule({{1, 1}, {2, 2}, {3, 3}});
    auto teacher = check_model(sched, 1, 2);
    auto student = teacher.clone();
    for (auto& [name, p] : student.params) {
      for (double& v : p.value.mutable_data()) v += 0.02 * std::normal_distribution<double>(0.0, 1.0)(rng);
    }
    student.set_requires_grad(true);
    auto traj = check_tokens(sched, rng);
    auto params = all_params(student);
    out.push_back(fd_line("gradient: distillation (student)",
                          finite_diff_check([&] { return distill_loss_on(teacher, student, traj, prompt); }, params,
                                            GradCheckOptions{})));
  }
  {
    auto sched = ScaleSchedule({{1, 1}, {2, 2}});
    auto m = check_model(sched, 2, 3);
    m.set_requires_grad(true);
    TokenizedSample s{check_tokens(sched, rng), prompt};
    auto params = all_params(m);
    out.push_back(fd_line("gradient: 2-scale pretraining loss",
                          finite_diff_check([&] { return next_scale_loss(m, s); }, params, GradCheckOptions{})));
  }
  {
    auto sched = ScaleSchedule({{1, 1}, {2, 2}, {3, 3}});
    auto m = check_model(sched, 2, 4);
    MultiScaleTokens prefix{check_tokens(sched, rng)[0]};
    auto raw = [&](std::span<const int> p) {
      auto logits = forward_inputs(m, build_scale_inputs(prefix, m.codebook, sched), p);
      auto rows = rows_range(logits, sched.offset(1), sched.offset(2));
      auto d = rows.data();
      return std::vector<double>(d.begin(), d.end());
    };
    const std::vector<int> null_prompt{PromptVocab::kNull};
    bool ok = guided_scale_logits(m, prefix, prompt, 1.0) == raw(prompt) &&
              guided_scale_logits(m, prefix, prompt, 0.0) == raw(null_prompt);
    out.push_back({"guidance endpoints", ok, "s=1 conditional, s=0 unconditional, bitwise"});
  }
  {
    auto sched = ScaleSchedule({{1, 1}, {2, 2}, {3, 3}});
    auto teacher = check_model(sched, 2, 5);
    auto student = teacher.clone();
    SamplerConfig sc{.cfg_scale = 1.0, .temperature = 1.0, .top_k = std::nullopt, .seed = 6};
    const double d = prior_distill_loss(teacher, student, prompt, sc).item();
    out.push_back({"distillation zero at identity", d == 0.0, fmt::format("loss {}", d)});
  }
  {
    auto sched = ScaleSchedule::desk_default();
    bool ok = true;
    double worst = 0.0;
    for (int t = 0; t < 10; ++t) {
      Codebook cb{Tensor::randn({64, 16}, rng, 0.3)};
      FeatureMap f(8, 8, 16);
      for (double& v : f.values) v = std::normal_distribution<double>(0.0, 1.0)(rng);
      auto toks = quantize_multiscale(f, cb, sched);
      auto chain = residual_chain(f, toks, cb, sched);
      auto rec = dequantize(toks, cb, sched);
      for (std::size_t i = 0; i < f.values.size(); ++i) {
        worst = std::max(worst, std::abs(chain.back().values[i] - (f.values[i] - rec.values[i])));
      }
    }
    ok = worst < 1e-12;
    out.push_back({"residual telescoping", ok, fmt::format("max deviation {:.3g}", worst)});
  }
  return out;
}

}  // namespace varp
