#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "safer/pipeline.hpp"
#include "safer/remote_judge.hpp"

namespace {

std::unique_ptr<safer::Judge> make_judge(const safer::RunConfig& cfg) {
  if (cfg.judge == "mock") return safer::pipeline::mock_only_factory(cfg);
  safer::JudgeClientConfig jc;
  jc.url = cfg.judge_url;
  jc.api_key = cfg.judge_key;
  jc.timeout_seconds = cfg.judge_timeout;
  jc.retry.max_retries = cfg.judge_max_retries;
  jc.parallelism = cfg.judge_parallelism;
  jc.apply_environment();
  return std::make_unique<safer::RemoteJudge>(jc);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Reward-model safety audit: sparse autoencoder features, contrastive scoring and "
               "preference data poisoning/denoising"};
  app.require_subcommand(1, 1);

  std::string config_path;
  std::optional<std::string> run_dir, kind, mode, judge;
  std::optional<std::uint64_t> seed;
  std::optional<double> rate;
  std::vector<std::string> overrides;

  app.add_option("--config", config_path, "key=value config file");
  app.add_option("--run-dir", run_dir, "run directory holding all artifacts");
  app.add_option("--seed", seed, "random seed");
  app.add_option("--rate", rate, "manipulation rate in (0, 1)");
  app.add_option("--kind", kind, "manipulation kind")->check(CLI::IsMember({"poison", "denoise"}));
  app.add_option("--mode", mode, "aggregation mode")->check(CLI::IsMember({"last_token", "all_tokens"}));
  app.add_option("--judge", judge, "judge backend")->check(CLI::IsMember({"mock", "remote"}));
  app.add_option("--set", overrides, "override any config key (key=value), repeatable");

  struct Verb {
    const char* name;
    const char* help;
  };
  const Verb verbs[] = {
      {"synth", "generate a planted-dictionary corpus"},
      {"train-sae", "two-stage SAE training"},
      {"score-features", "aggregate features and compute contrastive scores"},
      {"interpret", "judge top-|s| features and select the safety feature set"},
      {"score-pairs", "compute score_safe for every preference triplet"},
      {"poison", "flip labels of the highest-scoring triplets"},
      {"denoise", "drop the lowest-scoring triplets"},
      {"report", "emit delimited report tables"},
  };
  for (const auto& v : verbs) app.add_subcommand(v.name, v.help)->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return safer::pipeline::kConfigError;
  }
  const std::string command = app.get_subcommands().front()->get_name();

  safer::RunConfig cfg;
  try {
    if (!config_path.empty()) cfg = safer::RunConfig::load(config_path);
    for (const auto& o : overrides) {
      const auto eq = o.find('=');
      if (eq == std::string::npos) throw safer::ConfigError("--set expects key=value, got '" + o + "'");
      cfg.set(o.substr(0, eq), o.substr(eq + 1));
    }
    if (run_dir) cfg.run_dir = *run_dir;
    if (seed) cfg.seed = *seed;
    if (rate) cfg.rate = *rate;
    if (kind) cfg.set("kind", *kind);
    if (mode) cfg.set("mode", *mode);
    if (judge) cfg.judge = *judge;
  } catch (const safer::Error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return safer::pipeline::kConfigError;
  }
  return safer::pipeline::run_command_status(command, cfg, std::cerr, make_judge);
}
