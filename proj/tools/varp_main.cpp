#include <exception>
#include <functional>
#include <map>
#include <string>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "varp/errors.hpp"
#include "varp/workbench.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

bool stage_matches(const std::string& declared, const std::string& command) {
  return declared.empty() || declared == command || (declared == "analyze" && command.starts_with("analyze-"));
}

}  // namespace

int main(int argc, char** argv) {
  using namespace varp;
  CLI::App app{"Subject-driven fine-tuning of a next-scale visual autoregressive model"};
  app.require_subcommand(1);
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  const std::map<std::string, std::function<void(const RunConfig&)>> stages{
      {"pretrain-tokenizer", run_pretrain_tokenizer}, {"pretrain-var", run_pretrain_var},
      {"finetune", run_finetune},                     {"sample", run_sample},
      {"analyze-weights", run_analyze_weights},       {"analyze-scales", run_analyze_scales},
      {"evaluate", run_evaluate}};
  for (const auto& name : stage_names()) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "JSON run configuration");
    sub->add_option("--seed", seed, "Global seed (overrides the config)");
    sub->add_option("--out", out, "Output directory (overrides the config)");
  }
  CLI11_PARSE(app, argc, argv);
  const std::string command = app.get_subcommands().front()->get_name();

  RunConfig cfg;
  try {
    if (!config_path.empty()) cfg = load_run_config(config_path);
  } catch (const ConfigError& e) {
    fmt::print(stderr, "{}:{}: {}\n", config_path, e.line(), e.what());
    return kExitConfig;
  }
  if (!stage_matches(cfg.stage, command)) {
    fmt::print(stderr, "{}:{}: config is for stage '{}', not '{}'\n", config_path, cfg.stage_line, cfg.stage, command);
    return kExitConfig;
  }
  if (seed) cfg.seed = *seed;
  if (out) cfg.out = *out;

  try {
    if (command == "selfcheck") {
      bool ok = true;
      for (const auto& line : run_selfcheck()) {
        fmt::print("{} {}: {}\n", line.passed ? "PASS" : "FAIL", line.name, line.detail);
        ok = ok && line.passed;
      }
      return ok ? 0 : 1;
    }
    stages.at(command)(cfg);
  } catch (const NumericError& e) {
    fmt::print(stderr, "numeric abort: {}\n", e.what());
    return kExitNumeric;
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return 1;
  }
  return 0;
}
