#include <catch2/catch_amalgamated.hpp>

#include <unistd.h>

#include <filesystem>
#include <fstream>

#include "fedforge/harness.hpp"

using namespace fedforge;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("fedforge-test-" + std::to_string(::getpid()) + "-" +
            std::to_string(counter()++));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  static int& counter() {
    static int c = 0;
    return c;
  }
};

// tiny but complete experiment that runs in a couple of seconds
ExperimentConfig tiny_config() {
  ExperimentConfig cfg;
  cfg.seed = 20;
  cfg.hidden = 8;
  cfg.dataset.classes = 3;
  cfg.dataset.per_class = 20;
  cfg.dataset.height = 8;
  cfg.dataset.width = 8;
  cfg.dataset.test_per_class = 8;
  cfg.alpha = 1.0;
  cfg.federation.clients = 5;
  cfg.federation.participation = 0.4;
  cfg.federation.rounds = 4;
  cfg.federation.attack_start = 1;
  cfg.federation.attack_end = 3;
  cfg.federation.benign_epochs = 1;
  cfg.federation.malicious_epochs = 1;
  cfg.federation.lr = 0.05;
  cfg.federation.batch_size = 8;
  cfg.attack.enabled = true;
  cfg.attack.target_label = 1;
  cfg.attack.dopa.paths = 2;
  cfg.attack.dopa.sim_epochs = 1;
  cfg.attack.dopa.trigger_epochs = 2;
  cfg.attack.dopa.batch_size = 8;
  // keep the derived sub-seeds consistent with what parse_config produces
  cfg.federation.seed = cfg.seed;
  cfg.aggregator.noise_seed = cfg.seed;
  cfg.attack.dopa.seed = cfg.seed;
  return cfg;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  REQUIRE(is);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("config render/parse round trip is exact") {
  ExperimentConfig cfg = tiny_config();
  cfg.aggregator.rule = Rule::TrimmedMean;
  cfg.aggregator.trim_ratio = 0.25;
  cfg.attack.dopa.lambda = 1.75;
  cfg.attack.dopa.eta_delta = 0.037;
  cfg.federation.malicious_ids = {0, 3};
  cfg.outputs.dir = "elsewhere";
  cfg.outputs.timing_in_csv = true;

  ExperimentConfig back = parse_config(render_config(cfg));
  // derived seeds follow cfg.seed, which survives the round trip
  REQUIRE(back == cfg);
  // and a second round trip is textually identical
  REQUIRE(render_config(back) == render_config(cfg));
}

TEST_CASE("config defaults") {
  ExperimentConfig cfg = parse_config("");
  REQUIRE(cfg.seed == 20);
  REQUIRE(cfg.arch == "mlp");
  REQUIRE(cfg.hidden == 32);
  REQUIRE(cfg.dataset.height == 16);
  REQUIRE(cfg.alpha == 0.5);
  REQUIRE(cfg.federation.clients == 20);
  REQUIRE(cfg.federation.participation == 0.1);
  REQUIRE(cfg.federation.attack_start == 30);
  REQUIRE(cfg.federation.attack_end == 60);
  REQUIRE(cfg.aggregator.rule == Rule::FedAvg);
  REQUIRE(cfg.aggregator.dp_sigma == 0.0015);
  REQUIRE(cfg.attack.dopa.paths == 3);
  REQUIRE(cfg.attack.dopa.fusion.weight == 0.1);
  REQUIRE(cfg.attack.dopa.fusion_mode == FusionMode::Simultaneous);
  // derived sub-seeds
  REQUIRE(cfg.federation.seed == 20);
  REQUIRE(cfg.aggregator.noise_seed == 20);
  REQUIRE(cfg.attack.dopa.seed == 20);
}

TEST_CASE("config parsing errors") {
  REQUIRE_THROWS_WITH(parse_config("[aggregator]\nbogus_key = 1\n"),
                      Catch::Matchers::ContainsSubstring("unknown key"));
  REQUIRE_THROWS_WITH(parse_config("[federation]\nclients = many\n"),
                      Catch::Matchers::ContainsSubstring("federation.clients"));
  REQUIRE_THROWS_WITH(parse_config("key_without_section = 1\n"),
                      Catch::Matchers::ContainsSubstring("line 1"));
  REQUIRE_THROWS_WITH(parse_config("[attack]\nfusion_mode = sideways\n"),
                      Catch::Matchers::ContainsSubstring("fusion_mode"));
  REQUIRE_THROWS_AS(parse_config("[aggregator]\nrule = nosuchrule\n"), Error);
  // comments and blank lines are fine
  REQUIRE_NOTHROW(parse_config("# top comment\n\n[experiment]\nseed = 3 # inline\n"));
  REQUIRE(parse_config("[experiment]\nseed = 3\n").seed == 3);
}

TEST_CASE("config cross-field validation") {
  ExperimentConfig cfg = tiny_config();
  SECTION("krum needs enough sampled clients") {
    cfg.aggregator.rule = Rule::Krum;  // f = 2 needs 7 sampled, we sample 2
    REQUIRE_THROWS_WITH(cfg.validate(),
                        Catch::Matchers::ContainsSubstring("krum"));
  }
  SECTION("target label range") {
    cfg.attack.target_label = 99;
    REQUIRE_THROWS_AS(cfg.validate(), Error);
  }
  SECTION("file source demands existing files") {
    cfg.dataset.source = "file";
    cfg.dataset.file = "/nonexistent/a.ffdata";
    cfg.dataset.test_file = "/nonexistent/b.ffdata";
    REQUIRE_THROWS_WITH(cfg.validate(),
                        Catch::Matchers::ContainsSubstring("not found"));
  }
  SECTION("valid baseline passes") { REQUIRE_NOTHROW(cfg.validate()); }
}

TEST_CASE("checkpoint round trip") {
  TempDir dir;
  ModelSpec spec;
  spec.arch = Arch::Cnn;
  spec.height = spec.width = 8;
  spec.classes = 3;
  spec.hidden = 4;
  Rng rng(8);
  Model m = Model::init(spec, rng);
  const fs::path file = dir.path / "model.ffckpt";
  save_checkpoint(file, m);
  Model back = load_checkpoint(file);
  REQUIRE(back.spec == spec);
  REQUIRE(back.params.values() == m.params.values());
  REQUIRE_THROWS_AS(load_checkpoint(dir.path / "missing.ffckpt"), Error);

  // corrupt magic
  io::atomic_write(dir.path / "bad.ffckpt", "NOTCKPT mlp 8 8 1 3 4\n");
  REQUIRE_THROWS_WITH(load_checkpoint(dir.path / "bad.ffckpt"),
                      Catch::Matchers::ContainsSubstring("header"));
  // truncated payload
  io::atomic_write(dir.path / "trunc.ffckpt", "FFCKPT1 mlp 8 8 1 3 4\n\x01\x02");
  REQUIRE_THROWS_WITH(load_checkpoint(dir.path / "trunc.ffckpt"),
                      Catch::Matchers::ContainsSubstring("truncated"));
}

TEST_CASE("dataset round trip") {
  TempDir dir;
  auto [train, test] = generate_synthetic(3, 6, 8, 8, 1, 44);
  const fs::path file = dir.path / "data.ffdata";
  save_dataset(file, train);
  Dataset back = load_dataset(file);
  REQUIRE(back.labels == train.labels);
  REQUIRE(back.classes == train.classes);
  REQUIRE(back.images.values() == train.images.values());
  REQUIRE(back.images.shape() == train.images.shape());
}

TEST_CASE("trigger round trip") {
  TempDir dir;
  Trigger t = naive_trigger(8, 8, 1, 3, 2);
  Rng rng(5);
  for (std::size_t i = 0; i < t.pattern.size(); ++i) {
    if (t.mask[i] != 0.0) t.pattern[i] = rng.uniform();
  }
  const fs::path file = dir.path / "t.fftrig";
  save_trigger(file, t);
  Trigger back = load_trigger(file);
  REQUIRE(back.target == 2);
  REQUIRE(back.pattern.values() == t.pattern.values());
  REQUIRE(back.mask.values() == t.mask.values());
  REQUIRE_NOTHROW(back.validate(3));

  // header advertises the mask bounding box
  std::string header = slurp(file).substr(0, 32);
  REQUIRE(header.rfind("FFTRIG1 8 8 1 2 3 3", 0) == 0);
}

TEST_CASE("rounds csv format and timing suppression") {
  std::vector<RoundRecord> recs(2);
  recs[0].round = 0;
  recs[0].mta = 0.5;
  recs[0].asr = 0.25;
  recs[0].update_norm = 1.5;
  recs[1].round = 1;
  recs[1].malicious_selected = true;
  recs[1].trig_opt_seconds = 3.25;

  const std::string without = rounds_csv(recs, false);
  REQUIRE(without.find("round,mta,asr,update_norm,malicious_selected,"
                       "mean_C,mean_eta_eff,trig_opt_seconds") == 0);
  REQUIRE(without.find("0,0.500000,0.250000,1.5,0,0.000000,0.000000,0.000") !=
          std::string::npos);
  // wall-clock column suppressed for byte-stable outputs
  REQUIRE(without.find("3.250") == std::string::npos);
  const std::string with = rounds_csv(recs, true);
  REQUIRE(with.find("3.250") != std::string::npos);
}

TEST_CASE("atomic write leaves no temp file and replaces content") {
  TempDir dir;
  const fs::path file = dir.path / "x.txt";
  io::atomic_write(file, "first");
  io::atomic_write(file, "second");
  REQUIRE(slurp(file) == "second");
  REQUIRE(!fs::exists(dir.path / "x.txt.tmp"));
}

TEST_CASE("run_experiment writes the full artifact set deterministically") {
  TempDir dir;
  ExperimentConfig cfg = tiny_config();
  auto r1 = run_experiment(cfg, dir.path / "a");
  auto r2 = run_experiment(cfg, dir.path / "b");

  for (const char* name :
       {"rounds.csv", "summary.json", "model.ffckpt", "trigger.fftrig", "config.cfg"}) {
    REQUIRE(fs::exists(dir.path / "a" / name));
  }
  // identical seeds give byte-identical CSV and config
  REQUIRE(slurp(dir.path / "a" / "rounds.csv") == slurp(dir.path / "b" / "rounds.csv"));
  REQUIRE(slurp(dir.path / "a" / "config.cfg") == slurp(dir.path / "b" / "config.cfg"));
  REQUIRE(slurp(dir.path / "a" / "model.ffckpt") ==
          slurp(dir.path / "b" / "model.ffckpt"));

  // summary carries the rule tag and round count
  auto j = nlohmann::json::parse(slurp(dir.path / "a" / "summary.json"));
  REQUIRE(j["rule"] == "fedavg");
  REQUIRE(j["rounds"] == 4);
  REQUIRE(j.contains("window_mean_asr"));

  // a different seed changes the csv
  ExperimentConfig other = cfg;
  other.seed = 21;
  run_experiment(other, dir.path / "c");
  REQUIRE(slurp(dir.path / "a" / "rounds.csv") != slurp(dir.path / "c" / "rounds.csv"));
  REQUIRE(r1.records.size() == r2.records.size());
}

TEST_CASE("sweep writes per-value outputs and a comparison csv") {
  TempDir dir;
  ExperimentConfig cfg = tiny_config();
  auto results = sweep(cfg, SweepAxis::K, {"2", "3"}, dir.path);
  REQUIRE(results.size() == 2);
  REQUIRE(fs::exists(dir.path / "2" / "rounds.csv"));
  REQUIRE(fs::exists(dir.path / "3" / "rounds.csv"));
  const std::string cmp = slurp(dir.path / "comparison.csv");
  REQUIRE(cmp.find("round,asr_2,asr_3") == 0);
  // one line per round plus header
  REQUIRE(std::count(cmp.begin(), cmp.end(), '\n') ==
          1 + static_cast<long>(cfg.federation.rounds));
  REQUIRE_THROWS_AS(sweep(cfg, SweepAxis::K, {}, dir.path), Error);
}

TEST_CASE("ablation mapping") {
  ExperimentConfig cfg = tiny_config();
  auto none = apply_ablation(cfg, AblateDrop::Nothing);
  REQUIRE(none == cfg);
  auto no_dopa = apply_ablation(cfg, AblateDrop::Dopa);
  REQUIRE(no_dopa.attack.naive_baseline);
  auto no_fusion = apply_ablation(cfg, AblateDrop::FedFusion);
  REQUIRE(!no_fusion.attack.dopa.fusion_enabled);
  REQUIRE(no_fusion.attack.dopa.fusion.weight == 0.0);
  REQUIRE(ablate_drop_from_name("dopa") == AblateDrop::Dopa);
  REQUIRE_THROWS_AS(ablate_drop_from_name("what"), Error);
  REQUIRE(sweep_axis_from_name("lambda") == SweepAxis::Lambda);
  REQUIRE_THROWS_AS(sweep_axis_from_name("what"), Error);
}

TEST_CASE("transfer eval agrees with in-memory scoring") {
  TempDir dir;
  ExperimentConfig cfg = tiny_config();
  auto run = run_experiment(cfg, dir.path / "run");
  save_dataset(dir.path / "test.ffdata", run.test);

  auto rep = transfer_eval(dir.path / "run" / "trigger.fftrig",
                           dir.path / "run" / "model.ffckpt",
                           dir.path / "test.ffdata");
  REQUIRE(rep.asr ==
          Catch::Approx(attack_success_rate(run.final_model, run.test,
                                            run.final_trigger)));
  REQUIRE(rep.mta == Catch::Approx(main_task_accuracy(run.final_model, run.test)));
  std::size_t expected = 0;
  for (int y : run.test.labels) expected += (y != run.final_trigger.target);
  REQUIRE(rep.evaluated == expected);
}

TEST_CASE("heterogeneity sweep reports monotone orderings on a toy grid") {
  ExperimentConfig cfg = tiny_config();
  cfg.federation.clients = 4;
  auto rep = heterogeneity_sweep(cfg, {1.0, 2.0}, {0.2, 2.0});
  REQUIRE(rep.gamma_grid_sufficient);
  REQUIRE(rep.alpha_grid_sufficient);
  REQUIRE(rep.gamma_median_variance.size() == 2);
  REQUIRE(rep.alpha_median_variance.size() == 2);
  // larger local lr scales updates and their dispersion up
  REQUIRE(rep.gamma_median_variance[1] > rep.gamma_median_variance[0]);

  auto single = heterogeneity_sweep(cfg, {1.0}, {0.5});
  REQUIRE(!single.gamma_grid_sufficient);
  REQUIRE(!single.alpha_grid_sufficient);
}
