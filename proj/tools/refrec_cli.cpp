// refrec command-line front end.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "refrec/harness.hpp"
#include "refrec/kernels.hpp"

namespace fs = std::filesystem;
using refrec::harness::ExperimentConfig;
using json = nlohmann::json;

namespace {

struct Common {
  std::string config;
  std::string preset = "desk";
  int seeds = 0;
  std::string out;
  std::vector<std::string> sets;
  bool verbose = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "Flat JSON config file");
  cmd->add_option("--preset", c.preset, "Base preset when no config is given (desk, paper)");
  cmd->add_option("--seeds", c.seeds, "Run seeds 0..N-1 instead of the configured list");
  cmd->add_option("--out", c.out, "Output directory");
  cmd->add_option("--set", c.sets, "Override a config key, key=value (repeatable)");
  cmd->add_flag("-v,--verbose", c.verbose, "Progress on stderr");
}

ExperimentConfig resolve(const Common& c) {
  ExperimentConfig cfg = c.config.empty() ? refrec::harness::preset(c.preset) : refrec::harness::load_config(c.config);
  for (const auto& s : c.sets) cfg.set(s);
  if (c.seeds > 0) {
    cfg.seeds.clear();
    for (int i = 0; i < c.seeds; ++i) cfg.seeds.push_back(static_cast<std::uint64_t>(i));
  }
  if (!c.out.empty()) cfg.out = c.out;
  return cfg;
}

fs::path seed_dir(const ExperimentConfig& cfg, std::uint64_t seed) {
  const fs::path d = fs::path(cfg.out) / ("seed_" + std::to_string(seed));
  fs::create_directories(d);
  return d;
}

int fail(const std::string& command, const std::string& message) {
  std::cerr << json{{"error", message}, {"command", command}}.dump() << '\n';
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  refrec::kernels::configure_threads_from_env();
  CLI::App app{"RefRec domain adaptation pipeline for point-cloud classification"};
  app.require_subcommand(1);

  Common common;
  bool untrained = false;
  std::string axis;
  std::string config_out;

  auto* gen = app.add_subcommand("gen-data", "Generate source and target datasets");
  auto* warm = app.add_subcommand("warmup", "Reconstruction pre-training, source classifier, initial pseudo-labels");
  auto* ref = app.add_subcommand("refine", "Offline pseudo-label refinement");
  auto* self = app.add_subcommand("selftrain", "Dual-head self-training");
  auto* pipe = app.add_subcommand("pipeline", "All stages for every seed plus the aggregate report");
  auto* eval = app.add_subcommand("eval", "Target test accuracy of the self-trained model");
  auto* abl = app.add_subcommand("ablate", "Runs the pipeline with one component on and off");
  auto* rep = app.add_subcommand("report", "Aggregates seed reports into CSV, JSON and SVG");
  auto* cfgcmd = app.add_subcommand("config", "Prints (or writes) the resolved configuration");
  for (auto* cmd : {gen, warm, ref, self, pipe, eval, abl, rep, cfgcmd}) add_common(cmd, common);
  eval->add_flag("--untrained", untrained, "Evaluate a randomly initialised model");
  abl->add_option("--axis", axis, "Component to toggle")->required()->check(CLI::IsMember(refrec::harness::ablation_axes()));
  cfgcmd->add_option("--write", config_out, "Write the config to this path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("parse", e.what());
  }

  const std::string name = app.get_subcommands().front()->get_name();
  try {
    const ExperimentConfig cfg = resolve(common);
    if (name == "config") {
      if (config_out.empty()) std::cout << cfg.to_json().dump(2) << '\n';
      else refrec::harness::save_config(config_out, cfg);
      return 0;
    }
    if (name == "report") {
      std::cout << refrec::harness::aggregate_reports(cfg.out).dump(2) << '\n';
      return 0;
    }
    if (name == "ablate") {
      std::cout << refrec::harness::ablate(cfg, axis, common.verbose).dump(2) << '\n';
      return 0;
    }
    fs::create_directories(cfg.out);
    refrec::harness::save_config(fs::path(cfg.out) / "config.json", cfg);
    json results = json::array();
    for (auto seed : cfg.seeds) {
      const fs::path dir = seed_dir(cfg, seed);
      if (name == "gen-data") refrec::harness::stage_data(cfg, seed, dir);
      else if (name == "warmup") refrec::harness::stage_warmup(cfg, seed, dir, common.verbose);
      else if (name == "refine") refrec::harness::stage_refine(cfg, seed, dir);
      else if (name == "selftrain") refrec::harness::stage_selftrain(cfg, seed, dir, common.verbose);
      else if (name == "eval") {
        const auto acc = refrec::harness::stage_eval(cfg, seed, dir, untrained);
        results.push_back({{"seed", seed}, {"accuracy", acc.to_json()}});
      } else if (name == "pipeline") {
        const auto r = refrec::harness::run_pipeline(cfg, seed, dir, common.verbose);
        results.push_back({{"seed", seed},
                           {"final", r.metrics["final"]["target_test"]["overall"]},
                           {"no_adaptation", r.metrics["no_adaptation"]["overall"]}});
      }
    }
    if (name == "pipeline") results = {{"runs", results}, {"summary", refrec::harness::aggregate_reports(cfg.out)}};
    if (!results.empty()) std::cout << results.dump(2) << '\n';
    return 0;
  } catch (const std::exception& e) {
    return fail(name, e.what());
  }
}
