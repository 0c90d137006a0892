#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fedforge/fedforge.hpp"

namespace ff = fedforge;

namespace {

struct CommonOpts {
  std::string config_path;
  std::string out_dir;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string rule;
};

ff::ExperimentConfig load(const CommonOpts& opts) {
  ff::ExperimentConfig cfg = ff::load_config(opts.config_path);
  if (opts.seed_set) {
    cfg.seed = opts.seed;
    cfg.federation.seed = opts.seed;
    cfg.aggregator.noise_seed = opts.seed;
    cfg.attack.dopa.seed = opts.seed;
  }
  if (!opts.rule.empty()) cfg.aggregator.rule = ff::rule_from_name(opts.rule);
  if (!opts.out_dir.empty()) cfg.outputs.dir = opts.out_dir;
  return cfg;
}

void add_common(CLI::App* cmd, CommonOpts& opts, bool config_required = true) {
  auto* c = cmd->add_option("--config", opts.config_path, "experiment config file");
  if (config_required) c->required();
  cmd->add_option("--out", opts.out_dir, "output directory (overrides config)");
  cmd->add_option("--seed", opts.seed, "root seed override")
      ->each([&](const std::string&) { opts.seed_set = true; });
  cmd->add_option("--rule", opts.rule, "aggregation rule override");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fedforge: federated backdoor attack/defense simulator"};
  app.require_subcommand(1);

  CommonOpts run_opts, sweep_opts, ablate_opts;

  auto* run_cmd = app.add_subcommand("run", "execute one experiment");
  add_common(run_cmd, run_opts);

  auto* sweep_cmd = app.add_subcommand("sweep", "run one experiment per axis value");
  add_common(sweep_cmd, sweep_opts);
  std::string sweep_axis;
  std::vector<std::string> sweep_values;
  sweep_cmd->add_option("--axis", sweep_axis, "k|beta|lambda|alpha|rule")->required();
  sweep_cmd->add_option("--values", sweep_values, "axis values")->required();

  auto* ablate_cmd = app.add_subcommand("ablate", "drop one attack component");
  add_common(ablate_cmd, ablate_opts);
  std::string drop = "none";
  ablate_cmd->add_option("--drop", drop, "none|dopa|fedfusion")->required();

  auto* transfer_cmd =
      app.add_subcommand("transfer-eval", "evaluate a saved trigger on a clean model");
  std::string trig_file, ckpt_file, data_file;
  transfer_cmd->add_option("--trigger", trig_file, "FFTRIG1 file")->required();
  transfer_cmd->add_option("--checkpoint", ckpt_file, "FFCKPT1 file")->required();
  transfer_cmd->add_option("--dataset", data_file, "FFDATA1 file")->required();

  auto* gen_cmd = app.add_subcommand("gen-data", "write synthetic dataset files");
  CommonOpts gen_opts;
  add_common(gen_cmd, gen_opts);

  try {
    app.parse(argc, argv);

    if (*run_cmd) {
      ff::ExperimentConfig cfg = load(run_opts);
      auto result = ff::run_experiment(cfg, cfg.outputs.dir);
      std::printf("run complete: %zu rounds, final mta=%.4f asr=%.4f -> %s\n",
                  result.records.size(), result.records.back().mta,
                  result.records.back().asr, cfg.outputs.dir.c_str());
    } else if (*sweep_cmd) {
      ff::ExperimentConfig cfg = load(sweep_opts);
      auto axis = ff::sweep_axis_from_name(sweep_axis);
      auto results = ff::sweep(cfg, axis, sweep_values, cfg.outputs.dir);
      std::printf("sweep complete: %zu runs -> %s/comparison.csv\n",
                  results.size(), cfg.outputs.dir.c_str());
    } else if (*ablate_cmd) {
      ff::ExperimentConfig cfg = load(ablate_opts);
      auto result =
          ff::ablate(cfg, ff::ablate_drop_from_name(drop), cfg.outputs.dir);
      std::printf("ablate drop=%s complete: final asr=%.4f -> %s\n", drop.c_str(),
                  result.records.back().asr, cfg.outputs.dir.c_str());
    } else if (*transfer_cmd) {
      auto rep = ff::transfer_eval(trig_file, ckpt_file, data_file);
      std::printf("transfer-eval: asr=%.4f mta=%.4f over %zu non-target samples\n",
                  rep.asr, rep.mta, rep.evaluated);
    } else if (*gen_cmd) {
      ff::ExperimentConfig cfg = load(gen_opts);
      auto [train, test] = ff::generate_synthetic(
          cfg.dataset.classes, cfg.dataset.per_class, cfg.dataset.height,
          cfg.dataset.width, cfg.dataset.channels, cfg.seed,
          cfg.dataset.noise_sigma, cfg.dataset.test_per_class);
      std::filesystem::create_directories(cfg.outputs.dir);
      ff::save_dataset(std::filesystem::path(cfg.outputs.dir) / "train.ffdata", train);
      ff::save_dataset(std::filesystem::path(cfg.outputs.dir) / "test.ffdata", test);
      std::printf("gen-data: train N=%zu, test N=%zu -> %s\n", train.size(),
                  test.size(), cfg.outputs.dir.c_str());
    }
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
