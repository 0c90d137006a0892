#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "fedforge/aggregation.hpp"
#include "fedforge/data.hpp"
#include "fedforge/dopa.hpp"
#include "fedforge/fed_engine.hpp"
#include "fedforge/tensor.hpp"

namespace fedforge {

struct DatasetSection {
  std::string source = "synthetic";  // synthetic | file
  std::string file;
  std::string test_file;
  std::size_t classes = 10;
  std::size_t per_class = 100;
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t channels = 1;
  std::size_t test_per_class = 20;
  double noise_sigma = 0.15;

  bool operator==(const DatasetSection&) const = default;
};

struct AttackSection {
  bool enabled = true;
  bool naive_baseline = false;
  double poison_fraction = 0.3;
  int target_label = 0;
  std::size_t patch = 0;  // 0 = scale with image side
  DopaConfig dopa;

  bool operator==(const AttackSection&) const = default;
};

struct OutputSection {
  std::string dir = "out";
  bool timing_in_csv = false;  // wall-clock stays in summary.json by default

  bool operator==(const OutputSection&) const = default;
};

struct ExperimentConfig {
  std::uint64_t seed = 20;
  std::string arch = "mlp";
  std::size_t hidden = 32;
  DatasetSection dataset;
  double alpha = 0.5;
  FederationConfig federation;
  AggregatorConfig aggregator;
  AttackSection attack;
  OutputSection outputs;

  bool operator==(const ExperimentConfig& o) const {
    return seed == o.seed && arch == o.arch && hidden == o.hidden &&
           dataset == o.dataset && alpha == o.alpha &&
           fed_eq(federation, o.federation) && agg_eq(aggregator, o.aggregator) &&
           attack_eq(attack, o.attack) && outputs == o.outputs;
  }

  void validate() const {
    if (arch != "mlp" && arch != "cnn") {
      throw Error("config: model.arch must be mlp or cnn");
    }
    if (dataset.source != "synthetic" && dataset.source != "file") {
      throw Error("config: dataset.source must be synthetic or file");
    }
    if (dataset.source == "file") {
      if (dataset.file.empty() || dataset.test_file.empty()) {
        throw Error("config: dataset.file and dataset.test_file required");
      }
      if (!std::filesystem::exists(dataset.file)) {
        throw Error("config: dataset.file not found: " + dataset.file);
      }
      if (!std::filesystem::exists(dataset.test_file)) {
        throw Error("config: dataset.test_file not found: " + dataset.test_file);
      }
    }
    if (alpha <= 0.0) throw Error("config: partition.alpha must be > 0");
    federation.validate();
    aggregator.validate();
    if (attack.enabled && !attack.naive_baseline) attack.dopa.validate();
    if (attack.poison_fraction < 0.0 || attack.poison_fraction > 1.0) {
      throw Error("config: attack.poison_fraction must be in [0,1]");
    }
    if (attack.target_label < 0 ||
        static_cast<std::size_t>(attack.target_label) >= dataset.classes) {
      throw Error("config: attack.target_label out of class range");
    }
    if (aggregator.rule == Rule::Krum) {
      const auto sampled = static_cast<std::size_t>(std::ceil(
          federation.participation * static_cast<double>(federation.clients)));
      if (sampled < 2 * aggregator.krum_f + 3) {
        throw Error("config: krum needs sampled clients >= 2f+3 (sampled=" +
                    std::to_string(sampled) +
                    ", f=" + std::to_string(aggregator.krum_f) + ")");
      }
    }
  }

 private:
  static bool fed_eq(const FederationConfig& a, const FederationConfig& b) {
    return a.clients == b.clients && a.participation == b.participation &&
           a.rounds == b.rounds && a.attack_start == b.attack_start &&
           a.attack_end == b.attack_end && a.malicious_ids == b.malicious_ids &&
           a.benign_epochs == b.benign_epochs &&
           a.malicious_epochs == b.malicious_epochs && a.lr == b.lr &&
           a.batch_size == b.batch_size && a.seed == b.seed;
  }
  static bool agg_eq(const AggregatorConfig& a, const AggregatorConfig& b) {
    return a.rule == b.rule && a.trim_ratio == b.trim_ratio &&
           a.krum_f == b.krum_f && a.weiszfeld_iters == b.weiszfeld_iters &&
           a.weiszfeld_eps == b.weiszfeld_eps && a.clip_norm == b.clip_norm &&
           a.dp_sigma == b.dp_sigma && a.zeno_rho == b.zeno_rho &&
           a.zeno_b == b.zeno_b && a.zeno_nr == b.zeno_nr &&
           a.flame_lambda == b.flame_lambda && a.manc_tau == b.manc_tau &&
           a.noise_seed == b.noise_seed;
  }
  static bool attack_eq(const AttackSection& a, const AttackSection& b) {
    const auto& x = a.dopa;
    const auto& y = b.dopa;
    return a.enabled == b.enabled && a.naive_baseline == b.naive_baseline &&
           a.poison_fraction == b.poison_fraction &&
           a.target_label == b.target_label && a.patch == b.patch &&
           x.paths == y.paths && x.eta0 == y.eta0 && x.beta == y.beta &&
           x.eta_delta == y.eta_delta && x.lambda == y.lambda &&
           x.sim_epochs == y.sim_epochs && x.trigger_epochs == y.trigger_epochs &&
           x.path_subset_fraction == y.path_subset_fraction &&
           x.dsub_fraction == y.dsub_fraction && x.batch_size == y.batch_size &&
           x.fusion_enabled == y.fusion_enabled &&
           x.fusion_mode == y.fusion_mode &&
           x.fusion.weight == y.fusion.weight && x.seed == y.seed;
  }
};

namespace detail {

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

struct IniValue {
  std::string value;
  bool consumed = false;
};

class Ini {
 public:
  void set(const std::string& section, const std::string& key,
           const std::string& value) {
    data_[section][key] = {value, false};
  }

  bool has(const std::string& section, const std::string& key) const {
    auto s = data_.find(section);
    return s != data_.end() && s->second.count(key) > 0;
  }

  std::string get(const std::string& section, const std::string& key) {
    auto s = data_.find(section);
    if (s == data_.end() || !s->second.count(key)) {
      throw Error("config: missing key " + section + "." + key);
    }
    s->second[key].consumed = true;
    return s->second[key].value;
  }

  std::string get_or(const std::string& section, const std::string& key,
                     const std::string& fallback) {
    if (!has(section, key)) return fallback;
    return get(section, key);
  }

  // unknown keys are hard errors
  void check_all_consumed() const {
    for (const auto& [sec, kv] : data_) {
      for (const auto& [key, v] : kv) {
        if (!v.consumed) throw Error("config: unknown key " + sec + "." + key);
      }
    }
  }

 private:
  std::map<std::string, std::map<std::string, IniValue>> data_;
};

inline Ini parse_ini(const std::string& text) {
  Ini ini;
  std::istringstream is(text);
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') {
        throw Error("config: bad section header at line " + std::to_string(lineno));
      }
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw Error("config: expected key = value at line " + std::to_string(lineno));
    }
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    if (section.empty() || key.empty()) {
      throw Error("config: key outside section at line " + std::to_string(lineno));
    }
    ini.set(section, key, value);
  }
  return ini;
}

inline std::uint64_t to_u64(const std::string& s, const std::string& field) {
  try {
    std::size_t pos = 0;
    const auto v = std::stoull(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (...) {
    throw Error("config: " + field + " must be a non-negative integer, got '" + s + "'");
  }
}

inline double to_double(const std::string& s, const std::string& field) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (...) {
    throw Error("config: " + field + " must be a number, got '" + s + "'");
  }
}

inline bool to_bool(const std::string& s, const std::string& field) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw Error("config: " + field + " must be true or false, got '" + s + "'");
}

inline std::vector<int> to_int_list(const std::string& s, const std::string& field) {
  std::vector<int> out;
  std::istringstream is(s);
  std::string tok;
  while (std::getline(is, tok, ',')) {
    tok = trim(tok);
    if (tok.empty()) continue;
    out.push_back(static_cast<int>(to_u64(tok, field)));
  }
  return out;
}

}  // namespace detail

inline std::string render_config(const ExperimentConfig& c) {
  using detail::fmt_double;
  std::ostringstream os;
  os << "[experiment]\n";
  os << "seed = " << c.seed << "\n";
  os << "\n[model]\n";
  os << "arch = " << c.arch << "\n";
  os << "hidden = " << c.hidden << "\n";
  os << "\n[dataset]\n";
  os << "source = " << c.dataset.source << "\n";
  if (c.dataset.source == "file") {
    os << "file = " << c.dataset.file << "\n";
    os << "test_file = " << c.dataset.test_file << "\n";
  }
  os << "classes = " << c.dataset.classes << "\n";
  os << "per_class = " << c.dataset.per_class << "\n";
  os << "height = " << c.dataset.height << "\n";
  os << "width = " << c.dataset.width << "\n";
  os << "channels = " << c.dataset.channels << "\n";
  os << "test_per_class = " << c.dataset.test_per_class << "\n";
  os << "noise_sigma = " << fmt_double(c.dataset.noise_sigma) << "\n";
  os << "\n[partition]\n";
  os << "alpha = " << fmt_double(c.alpha) << "\n";
  os << "\n[federation]\n";
  os << "clients = " << c.federation.clients << "\n";
  os << "participation = " << fmt_double(c.federation.participation) << "\n";
  os << "rounds = " << c.federation.rounds << "\n";
  os << "attack_start = " << c.federation.attack_start << "\n";
  os << "attack_end = " << c.federation.attack_end << "\n";
  os << "malicious_ids = ";
  for (std::size_t i = 0; i < c.federation.malicious_ids.size(); ++i) {
    if (i) os << ",";
    os << c.federation.malicious_ids[i];
  }
  os << "\n";
  os << "benign_epochs = " << c.federation.benign_epochs << "\n";
  os << "malicious_epochs = " << c.federation.malicious_epochs << "\n";
  os << "lr = " << fmt_double(c.federation.lr) << "\n";
  os << "batch_size = " << c.federation.batch_size << "\n";
  os << "\n[aggregator]\n";
  os << "rule = " << rule_name(c.aggregator.rule) << "\n";
  os << "trim_ratio = " << fmt_double(c.aggregator.trim_ratio) << "\n";
  os << "krum_f = " << c.aggregator.krum_f << "\n";
  os << "weiszfeld_iters = " << c.aggregator.weiszfeld_iters << "\n";
  os << "weiszfeld_eps = " << fmt_double(c.aggregator.weiszfeld_eps) << "\n";
  os << "clip_norm = " << fmt_double(c.aggregator.clip_norm) << "\n";
  os << "dp_sigma = " << fmt_double(c.aggregator.dp_sigma) << "\n";
  os << "zeno_rho = " << fmt_double(c.aggregator.zeno_rho) << "\n";
  os << "zeno_b = " << c.aggregator.zeno_b << "\n";
  os << "zeno_nr = " << c.aggregator.zeno_nr << "\n";
  os << "flame_lambda = " << fmt_double(c.aggregator.flame_lambda) << "\n";
  os << "manc_tau = " << fmt_double(c.aggregator.manc_tau) << "\n";
  os << "\n[attack]\n";
  os << "enabled = " << (c.attack.enabled ? "true" : "false") << "\n";
  os << "naive_baseline = " << (c.attack.naive_baseline ? "true" : "false") << "\n";
  os << "poison_fraction = " << fmt_double(c.attack.poison_fraction) << "\n";
  os << "target_label = " << c.attack.target_label << "\n";
  os << "patch = " << c.attack.patch << "\n";
  os << "k = " << c.attack.dopa.paths << "\n";
  os << "eta0 = " << fmt_double(c.attack.dopa.eta0) << "\n";
  os << "beta = " << fmt_double(c.attack.dopa.beta) << "\n";
  os << "eta_delta = " << fmt_double(c.attack.dopa.eta_delta) << "\n";
  os << "lambda = " << fmt_double(c.attack.dopa.lambda) << "\n";
  os << "sim_epochs = " << c.attack.dopa.sim_epochs << "\n";
  os << "trigger_epochs = " << c.attack.dopa.trigger_epochs << "\n";
  os << "path_subset_fraction = " << fmt_double(c.attack.dopa.path_subset_fraction)
     << "\n";
  os << "dsub_fraction = " << fmt_double(c.attack.dopa.dsub_fraction) << "\n";
  os << "dopa_batch = " << c.attack.dopa.batch_size << "\n";
  os << "fusion_enabled = " << (c.attack.dopa.fusion_enabled ? "true" : "false")
     << "\n";
  os << "fusion_mode = "
     << (c.attack.dopa.fusion_mode == FusionMode::Simultaneous ? "simultaneous"
                                                               : "pre")
     << "\n";
  os << "fusion_weight = " << fmt_double(c.attack.dopa.fusion.weight) << "\n";
  os << "\n[outputs]\n";
  os << "dir = " << c.outputs.dir << "\n";
  os << "timing_in_csv = " << (c.outputs.timing_in_csv ? "true" : "false") << "\n";
  return os.str();
}

inline ExperimentConfig parse_config(const std::string& text) {
  using namespace detail;
  Ini ini = parse_ini(text);
  ExperimentConfig c;
  c.seed = to_u64(ini.get_or("experiment", "seed", "20"), "experiment.seed");
  c.arch = ini.get_or("model", "arch", "mlp");
  c.hidden = to_u64(ini.get_or("model", "hidden", "32"), "model.hidden");

  c.dataset.source = ini.get_or("dataset", "source", "synthetic");
  if (ini.has("dataset", "file")) c.dataset.file = ini.get("dataset", "file");
  if (ini.has("dataset", "test_file")) {
    c.dataset.test_file = ini.get("dataset", "test_file");
  }
  c.dataset.classes = to_u64(ini.get_or("dataset", "classes", "10"), "dataset.classes");
  c.dataset.per_class =
      to_u64(ini.get_or("dataset", "per_class", "100"), "dataset.per_class");
  c.dataset.height = to_u64(ini.get_or("dataset", "height", "16"), "dataset.height");
  c.dataset.width = to_u64(ini.get_or("dataset", "width", "16"), "dataset.width");
  c.dataset.channels =
      to_u64(ini.get_or("dataset", "channels", "1"), "dataset.channels");
  c.dataset.test_per_class = to_u64(ini.get_or("dataset", "test_per_class", "20"),
                                    "dataset.test_per_class");
  c.dataset.noise_sigma =
      to_double(ini.get_or("dataset", "noise_sigma", "0.15"), "dataset.noise_sigma");

  c.alpha = to_double(ini.get_or("partition", "alpha", "0.5"), "partition.alpha");

  auto& f = c.federation;
  f.clients = to_u64(ini.get_or("federation", "clients", "20"), "federation.clients");
  f.participation = to_double(ini.get_or("federation", "participation", "0.1"),
                              "federation.participation");
  f.rounds = to_u64(ini.get_or("federation", "rounds", "100"), "federation.rounds");
  f.attack_start =
      to_u64(ini.get_or("federation", "attack_start", "30"), "federation.attack_start");
  f.attack_end =
      to_u64(ini.get_or("federation", "attack_end", "60"), "federation.attack_end");
  f.malicious_ids = to_int_list(ini.get_or("federation", "malicious_ids", "0"),
                                "federation.malicious_ids");
  f.benign_epochs =
      to_u64(ini.get_or("federation", "benign_epochs", "2"), "federation.benign_epochs");
  f.malicious_epochs = to_u64(ini.get_or("federation", "malicious_epochs", "5"),
                              "federation.malicious_epochs");
  f.lr = to_double(ini.get_or("federation", "lr", "0.1"), "federation.lr");
  f.batch_size =
      to_u64(ini.get_or("federation", "batch_size", "16"), "federation.batch_size");
  f.seed = c.seed;

  auto& a = c.aggregator;
  a.rule = rule_from_name(ini.get_or("aggregator", "rule", "fedavg"));
  a.trim_ratio =
      to_double(ini.get_or("aggregator", "trim_ratio", "0.2"), "aggregator.trim_ratio");
  a.krum_f = to_u64(ini.get_or("aggregator", "krum_f", "2"), "aggregator.krum_f");
  a.weiszfeld_iters = to_u64(ini.get_or("aggregator", "weiszfeld_iters", "10"),
                             "aggregator.weiszfeld_iters");
  a.weiszfeld_eps = to_double(ini.get_or("aggregator", "weiszfeld_eps", "1e-05"),
                              "aggregator.weiszfeld_eps");
  a.clip_norm =
      to_double(ini.get_or("aggregator", "clip_norm", "1"), "aggregator.clip_norm");
  a.dp_sigma =
      to_double(ini.get_or("aggregator", "dp_sigma", "0.0015"), "aggregator.dp_sigma");
  a.zeno_rho =
      to_double(ini.get_or("aggregator", "zeno_rho", "0.0005"), "aggregator.zeno_rho");
  a.zeno_b = to_u64(ini.get_or("aggregator", "zeno_b", "1"), "aggregator.zeno_b");
  a.zeno_nr = to_u64(ini.get_or("aggregator", "zeno_nr", "4"), "aggregator.zeno_nr");
  a.flame_lambda = to_double(ini.get_or("aggregator", "flame_lambda", "0.001"),
                             "aggregator.flame_lambda");
  a.manc_tau =
      to_double(ini.get_or("aggregator", "manc_tau", "2"), "aggregator.manc_tau");
  a.noise_seed = c.seed;

  auto& atk = c.attack;
  atk.enabled = to_bool(ini.get_or("attack", "enabled", "true"), "attack.enabled");
  atk.naive_baseline =
      to_bool(ini.get_or("attack", "naive_baseline", "false"), "attack.naive_baseline");
  atk.poison_fraction = to_double(ini.get_or("attack", "poison_fraction", "0.3"),
                                  "attack.poison_fraction");
  atk.target_label = static_cast<int>(
      to_u64(ini.get_or("attack", "target_label", "0"), "attack.target_label"));
  atk.patch = to_u64(ini.get_or("attack", "patch", "0"), "attack.patch");
  auto& d = atk.dopa;
  d.paths = to_u64(ini.get_or("attack", "k", "3"), "attack.k");
  d.eta0 = to_double(ini.get_or("attack", "eta0", "0.1"), "attack.eta0");
  d.beta = to_double(ini.get_or("attack", "beta", "0.2"), "attack.beta");
  d.eta_delta = to_double(ini.get_or("attack", "eta_delta", "0.1"), "attack.eta_delta");
  d.lambda = to_double(ini.get_or("attack", "lambda", "1"), "attack.lambda");
  d.sim_epochs = to_u64(ini.get_or("attack", "sim_epochs", "1"), "attack.sim_epochs");
  d.trigger_epochs =
      to_u64(ini.get_or("attack", "trigger_epochs", "50"), "attack.trigger_epochs");
  d.path_subset_fraction =
      to_double(ini.get_or("attack", "path_subset_fraction", "0.5"),
                "attack.path_subset_fraction");
  d.dsub_fraction =
      to_double(ini.get_or("attack", "dsub_fraction", "0.25"), "attack.dsub_fraction");
  d.batch_size = to_u64(ini.get_or("attack", "dopa_batch", "32"), "attack.dopa_batch");
  d.fusion_enabled =
      to_bool(ini.get_or("attack", "fusion_enabled", "true"), "attack.fusion_enabled");
  const auto mode = ini.get_or("attack", "fusion_mode", "simultaneous");
  if (mode == "simultaneous") {
    d.fusion_mode = FusionMode::Simultaneous;
  } else if (mode == "pre") {
    d.fusion_mode = FusionMode::Pre;
  } else {
    throw Error("config: attack.fusion_mode must be simultaneous or pre");
  }
  d.fusion.weight =
      to_double(ini.get_or("attack", "fusion_weight", "0.1"), "attack.fusion_weight");
  d.seed = c.seed;

  c.outputs.dir = ini.get_or("outputs", "dir", "out");
  c.outputs.timing_in_csv =
      to_bool(ini.get_or("outputs", "timing_in_csv", "false"), "outputs.timing_in_csv");

  ini.check_all_consumed();
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open config: " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

}  // namespace fedforge
