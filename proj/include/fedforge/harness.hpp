#pragma once

#include <filesystem>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedforge/analytics.hpp"
#include "fedforge/config.hpp"
#include "fedforge/fed_engine.hpp"
#include "fedforge/io.hpp"

namespace fedforge {

struct RunResult {
  std::vector<RoundRecord> records;
  Model final_model;
  Trigger final_trigger;
  std::vector<double> path_update_norms;
  Dataset test;  // the test split the run was scored on
};

namespace detail {

inline std::pair<Dataset, Dataset> load_or_generate(const ExperimentConfig& cfg) {
  if (cfg.dataset.source == "file") {
    return {load_dataset(cfg.dataset.file), load_dataset(cfg.dataset.test_file)};
  }
  return generate_synthetic(cfg.dataset.classes, cfg.dataset.per_class,
                            cfg.dataset.height, cfg.dataset.width,
                            cfg.dataset.channels, cfg.seed,
                            cfg.dataset.noise_sigma, cfg.dataset.test_per_class);
}

inline Trigger initial_trigger(const ExperimentConfig& cfg, const Dataset& train) {
  const std::size_t side = std::min(train.height(), train.width());
  const std::size_t patch =
      cfg.attack.patch > 0 ? cfg.attack.patch : default_patch_side(side);
  return naive_trigger(train.height(), train.width(), train.channels(), patch,
                       cfg.attack.target_label);
}

}  // namespace detail

// Execute one experiment in memory. Deterministic given the config.
inline RunResult execute(const ExperimentConfig& cfg) {
  cfg.validate();
  auto [train, test] = detail::load_or_generate(cfg);

  PartitionConfig pcfg;
  pcfg.alpha = cfg.alpha;
  pcfg.clients = cfg.federation.clients;
  pcfg.seed = cfg.seed;
  auto partition = dirichlet_partition(train, pcfg);

  ModelSpec spec;
  spec.arch = arch_from_name(cfg.arch);
  spec.height = train.height();
  spec.width = train.width();
  spec.channels = train.channels();
  spec.classes = cfg.dataset.classes;
  spec.hidden = cfg.hidden;

  AttackConfig attack;
  attack.enabled = cfg.attack.enabled;
  attack.naive_baseline = cfg.attack.naive_baseline;
  attack.poison_fraction = cfg.attack.poison_fraction;
  attack.dopa = cfg.attack.dopa;
  attack.dopa.seed = stream(cfg.seed, "attack").next_u64();

  AggregatorConfig agg = cfg.aggregator;
  agg.noise_seed = cfg.seed;

  FederationConfig fed = cfg.federation;
  fed.seed = cfg.seed;

  Trigger trig = detail::initial_trigger(cfg, train);
  FedEngine engine(std::move(train), std::move(test), std::move(partition), spec,
                   fed, agg, attack, std::move(trig));

  engine.run_all();

  RunResult result;
  result.records = engine.records();
  result.final_model = engine.global_model();
  result.final_trigger = engine.trigger();
  result.path_update_norms = engine.path_update_norms();
  result.test = engine.test_set();
  return result;
}

inline nlohmann::json summary_json(const ExperimentConfig& cfg,
                                   const RunResult& run) {
  nlohmann::json j;
  j["rule"] = rule_name(cfg.aggregator.rule);
  j["seed"] = cfg.seed;
  j["rounds"] = run.records.size();
  const std::size_t ws = cfg.federation.attack_start;
  const std::size_t we = cfg.federation.attack_end;
  j["attack_window"] = {ws, we};
  if (!run.records.empty()) {
    j["final_mta"] = run.records.back().mta;
    j["final_asr"] = run.records.back().asr;
  }
  if (we > ws && we <= run.records.size()) {
    j["window_mean_mta"] = window_mean(run.records, ws, we, &RoundRecord::mta);
    j["window_mean_asr"] = window_mean(run.records, ws, we, &RoundRecord::asr);
  }
  const std::size_t post_end = std::min<std::size_t>(we + 10, run.records.size());
  if (post_end > we) {
    j["post_window_mean_asr"] =
        window_mean(run.records, we, post_end, &RoundRecord::asr);
  }
  double opt_seconds = 0.0;
  std::size_t opt_rounds = 0;
  for (const auto& r : run.records) {
    if (r.trig_opt_seconds > 0.0) {
      opt_seconds += r.trig_opt_seconds;
      ++opt_rounds;
    }
  }
  j["trigger_opt"]["total_seconds"] = opt_seconds;
  j["trigger_opt"]["rounds"] = opt_rounds;
  if (opt_rounds > 0) {
    j["trigger_opt"]["mean_seconds_per_round"] =
        opt_seconds / static_cast<double>(opt_rounds);
  }
  if (!run.path_update_norms.empty()) {
    const auto nq = norm_distribution_report(run.path_update_norms);
    j["path_update_norms"] = {
        {"p50", nq.p50}, {"p95", nq.p95}, {"max", nq.max}, {"count", nq.count}};
  }
  return j;
}

// run subcommand: execute + write csv, summary, checkpoint, trigger.
inline RunResult run_experiment(const ExperimentConfig& cfg,
                                const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  RunResult result = execute(cfg);
  io::atomic_write(out_dir / "rounds.csv",
                   rounds_csv(result.records, cfg.outputs.timing_in_csv));
  io::atomic_write(out_dir / "summary.json",
                   summary_json(cfg, result).dump(2) + "\n");
  save_checkpoint(out_dir / "model.ffckpt", result.final_model);
  save_trigger(out_dir / "trigger.fftrig", result.final_trigger);
  io::atomic_write(out_dir / "config.cfg", render_config(cfg));
  return result;
}

enum class SweepAxis { K, Beta, Lambda, Alpha, RuleAxis };

inline SweepAxis sweep_axis_from_name(const std::string& s) {
  if (s == "k") return SweepAxis::K;
  if (s == "beta") return SweepAxis::Beta;
  if (s == "lambda") return SweepAxis::Lambda;
  if (s == "alpha") return SweepAxis::Alpha;
  if (s == "rule") return SweepAxis::RuleAxis;
  throw Error("sweep: unknown axis '" + s + "' (k|beta|lambda|alpha|rule)");
}

inline ExperimentConfig apply_axis(ExperimentConfig cfg, SweepAxis axis,
                                   const std::string& value) {
  switch (axis) {
    case SweepAxis::K:
      cfg.attack.dopa.paths = detail::to_u64(value, "sweep.k");
      break;
    case SweepAxis::Beta:
      cfg.attack.dopa.beta = detail::to_double(value, "sweep.beta");
      break;
    case SweepAxis::Lambda:
      cfg.attack.dopa.lambda = detail::to_double(value, "sweep.lambda");
      break;
    case SweepAxis::Alpha:
      cfg.alpha = detail::to_double(value, "sweep.alpha");
      break;
    case SweepAxis::RuleAxis:
      cfg.aggregator.rule = rule_from_name(value);
      break;
  }
  return cfg;
}

// One run per value, shared seed; per-value subdirectories plus a combined
// per-round ASR comparison CSV.
inline std::vector<RunResult> sweep(const ExperimentConfig& base, SweepAxis axis,
                                    const std::vector<std::string>& values,
                                    const std::filesystem::path& out_dir) {
  if (values.empty()) throw Error("sweep: no values given");
  std::filesystem::create_directories(out_dir);
  std::vector<RunResult> results;
  for (const auto& v : values) {
    ExperimentConfig cfg = apply_axis(base, axis, v);
    results.push_back(run_experiment(cfg, out_dir / v));
  }
  std::ostringstream os;
  os << "round";
  for (const auto& v : values) os << ",asr_" << v;
  os << "\n";
  char buf[64];
  const std::size_t rounds = results.front().records.size();
  for (std::size_t r = 0; r < rounds; ++r) {
    os << r;
    for (const auto& res : results) {
      std::snprintf(buf, sizeof(buf), ",%.6f",
                    r < res.records.size() ? res.records[r].asr : 0.0);
      os << buf;
    }
    os << "\n";
  }
  io::atomic_write(out_dir / "comparison.csv", os.str());
  return results;
}

enum class AblateDrop { Nothing, Dopa, FedFusion };

inline AblateDrop ablate_drop_from_name(const std::string& s) {
  if (s == "none") return AblateDrop::Nothing;
  if (s == "dopa") return AblateDrop::Dopa;
  if (s == "fedfusion") return AblateDrop::FedFusion;
  throw Error("ablate: unknown drop '" + s + "' (none|dopa|fedfusion)");
}

inline ExperimentConfig apply_ablation(ExperimentConfig cfg, AblateDrop drop) {
  switch (drop) {
    case AblateDrop::Nothing:
      break;
    case AblateDrop::Dopa:
      cfg.attack.naive_baseline = true;  // fixed gray patch, no optimization
      break;
    case AblateDrop::FedFusion:
      cfg.attack.dopa.fusion_enabled = false;
      cfg.attack.dopa.fusion.weight = 0.0;
      break;
  }
  return cfg;
}

inline RunResult ablate(const ExperimentConfig& base, AblateDrop drop,
                        const std::filesystem::path& out_dir) {
  return run_experiment(apply_ablation(base, drop), out_dir);
}

struct TransferReport {
  double asr = 0.0;
  double mta = 0.0;
  std::size_t evaluated = 0;
};

// Evaluate a saved trigger against a saved model on a saved dataset;
// no training involved.
inline TransferReport transfer_eval(const std::filesystem::path& trigger_file,
                                    const std::filesystem::path& checkpoint_file,
                                    const std::filesystem::path& dataset_file) {
  const Trigger trig = load_trigger(trigger_file);
  const Model model = load_checkpoint(checkpoint_file);
  const Dataset ds = load_dataset(dataset_file);
  trig.validate(model.spec.classes);
  TransferReport rep;
  rep.asr = attack_success_rate(model, ds, trig);
  rep.mta = main_task_accuracy(model, ds);
  std::size_t non_target = 0;
  for (int lbl : ds.labels) non_target += (lbl != trig.target);
  rep.evaluated = non_target;
  return rep;
}

struct HeterogeneityReport {
  std::vector<double> gamma_grid;
  std::vector<double> gamma_median_variance;
  std::vector<double> alpha_grid;
  std::vector<double> alpha_median_variance;
  double gamma_spearman = 0.0;
  double alpha_spearman = 0.0;
  bool gamma_grid_sufficient = false;
  bool alpha_grid_sufficient = false;
};

namespace detail {

// Per-client update variance for one benign round: mean squared deviation
// of each client's delta from the round-mean delta, per coordinate.
inline std::vector<double> client_update_variances(const ExperimentConfig& cfg,
                                                   double gamma, double alpha) {
  ExperimentConfig c = cfg;
  c.attack.enabled = false;
  c.alpha = alpha;
  c.federation.lr = cfg.federation.lr * gamma;
  c.federation.participation = 1.0;  // every client contributes one update
  c.validate();
  auto [train, test] = load_or_generate(c);
  PartitionConfig pcfg{c.alpha, c.federation.clients, c.seed};
  auto partition = dirichlet_partition(train, pcfg);

  ModelSpec spec;
  spec.arch = arch_from_name(c.arch);
  spec.height = train.height();
  spec.width = train.width();
  spec.channels = train.channels();
  spec.classes = c.dataset.classes;
  spec.hidden = c.hidden;
  Rng init_rng = stream(c.seed, "init");
  Model global = Model::init(spec, init_rng);

  std::vector<ParamVector> deltas;
  for (std::size_t i = 0; i < c.federation.clients; ++i) {
    ClientState cs;
    cs.id = static_cast<int>(i);
    cs.indices = partition[i];
    Rng trng = stream(c.seed, "client-train", i);
    deltas.push_back(local_train_benign(global, cs, train,
                                        c.federation.benign_epochs,
                                        c.federation.lr, c.federation.batch_size,
                                        trng)
                         .delta);
  }
  ParamVector mean(deltas.front().size());
  for (const auto& d : deltas) mean += d;
  mean *= 1.0 / static_cast<double>(deltas.size());
  std::vector<double> variances;
  for (const auto& d : deltas) {
    ParamVector dev = d - mean;
    variances.push_back(dev.dot(dev) / static_cast<double>(dev.size()));
  }
  return variances;
}

inline double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return (n % 2 == 1) ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace detail

// One benign desk-scale round per grid point; reports how the median
// client-update variance orders against gamma (expected rising) and
// alpha (expected falling).
inline HeterogeneityReport heterogeneity_sweep(const ExperimentConfig& base,
                                               const std::vector<double>& gammas,
                                               const std::vector<double>& alphas) {
  HeterogeneityReport rep;
  rep.gamma_grid = gammas;
  rep.alpha_grid = alphas;
  const double base_alpha = base.alpha;
  for (double g : gammas) {
    rep.gamma_median_variance.push_back(
        detail::median_of(detail::client_update_variances(base, g, base_alpha)));
  }
  for (double a : alphas) {
    rep.alpha_median_variance.push_back(
        detail::median_of(detail::client_update_variances(base, 1.0, a)));
  }
  rep.gamma_grid_sufficient = gammas.size() >= 2;
  rep.alpha_grid_sufficient = alphas.size() >= 2;
  if (rep.gamma_grid_sufficient) {
    rep.gamma_spearman = spearman(gammas, rep.gamma_median_variance);
  }
  if (rep.alpha_grid_sufficient) {
    rep.alpha_spearman = spearman(alphas, rep.alpha_median_variance);
  }
  return rep;
}

}  // namespace fedforge
