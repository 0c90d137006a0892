#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "fedforge/data.hpp"
#include "fedforge/model.hpp"
#include "fedforge/rng.hpp"

namespace fedforge {

struct RoundRecord {
  std::size_t round = 0;
  double mta = 0.0;  // clean test accuracy
  double asr = 0.0;  // triggered misclassification rate
  double update_norm = 0.0;
  std::vector<int> selected;
  bool malicious_selected = false;
  double mean_consensus = 0.0;
  double mean_eta_eff = 0.0;
  double trig_opt_seconds = 0.0;
};

// Fraction of non-target-class test samples classified as the target after
// trigger application. True-target samples are excluded.
inline double attack_success_rate(const Model& model, const Dataset& test,
                                  const Trigger& trig) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < test.size(); ++i) {
    if (test.labels[i] != trig.target) idx.push_back(i);
  }
  if (idx.empty()) return 0.0;
  Tensor batch = apply_trigger(test.batch(idx), trig);
  const auto pred = predict(model, batch);
  std::size_t hits = 0;
  for (int p : pred) hits += (p == trig.target);
  return static_cast<double>(hits) / static_cast<double>(idx.size());
}

inline double main_task_accuracy(const Model& model, const Dataset& test) {
  if (test.size() == 0) throw Error("main_task_accuracy: empty test set");
  std::vector<std::size_t> idx(test.size());
  std::iota(idx.begin(), idx.end(), 0);
  const auto pred = predict(model, test.batch(idx));
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += (pred[i] == test.labels[i]);
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

inline double window_mean(const std::vector<RoundRecord>& run, std::size_t begin,
                          std::size_t end, double RoundRecord::* field) {
  if (begin >= end) throw Error("window_mean: empty window");
  double sum = 0.0;
  std::size_t count = 0;
  for (const auto& r : run) {
    if (r.round >= begin && r.round < end) {
      sum += r.*field;
      ++count;
    }
  }
  if (count == 0) throw Error("window_mean: no rounds in window");
  return sum / static_cast<double>(count);
}

// Difference of window-mean MTAs, in percentage points.
inline double delta_mta(const std::vector<RoundRecord>& attacked,
                        const std::vector<RoundRecord>& benign,
                        std::size_t window_begin, std::size_t window_end) {
  const double a = window_mean(attacked, window_begin, window_end, &RoundRecord::mta);
  const double b = window_mean(benign, window_begin, window_end, &RoundRecord::mta);
  return 100.0 * (a - b);
}

struct VarianceExperimentConfig {
  std::vector<double> etas = {0.05, 0.1, 0.15, 0.2};
  double sigma = 0.1;    // isotropic noise: C_k = sigma^2 I
  std::size_t dim = 10;
  std::size_t trials = 10000;
  std::uint64_t seed = 0;

  void validate() const {
    if (trials < 100) throw Error("variance check: trials must be >= 100");
    if (etas.empty()) throw Error("variance check: need at least one client");
  }
};

struct VarianceReport {
  double predicted = 0.0;
  double empirical = 0.0;
  double relative_error = 0.0;
};

// Monte-Carlo check of Var(mean update) = (1/K^2) sum eta_k^2 sigma^2 with
// update_k = -eta_k (g + noise), fixed g, isotropic Gaussian noise.
inline VarianceReport variance_law_check(const VarianceExperimentConfig& cfg) {
  cfg.validate();
  const std::size_t k = cfg.etas.size();
  double predicted = 0.0;
  for (double eta : cfg.etas) predicted += eta * eta * cfg.sigma * cfg.sigma;
  predicted /= static_cast<double>(k) * static_cast<double>(k);

  Rng rng = stream(cfg.seed, "variance-check");
  std::vector<double> g(cfg.dim);
  for (auto& x : g) x = rng.uniform(-1.0, 1.0);

  std::vector<double> sum(cfg.dim, 0.0), sumsq(cfg.dim, 0.0);
  std::vector<double> mean_update(cfg.dim);
  for (std::size_t t = 0; t < cfg.trials; ++t) {
    std::fill(mean_update.begin(), mean_update.end(), 0.0);
    for (std::size_t c = 0; c < k; ++c) {
      for (std::size_t i = 0; i < cfg.dim; ++i) {
        mean_update[i] += -cfg.etas[c] * (g[i] + rng.normal(0.0, cfg.sigma));
      }
    }
    for (std::size_t i = 0; i < cfg.dim; ++i) {
      mean_update[i] /= static_cast<double>(k);
      sum[i] += mean_update[i];
      sumsq[i] += mean_update[i] * mean_update[i];
    }
  }
  double empirical = 0.0;
  for (std::size_t i = 0; i < cfg.dim; ++i) {
    const double mean = sum[i] / static_cast<double>(cfg.trials);
    empirical += sumsq[i] / static_cast<double>(cfg.trials) - mean * mean;
  }
  empirical /= static_cast<double>(cfg.dim);

  VarianceReport rep;
  rep.predicted = predicted;
  rep.empirical = empirical;
  rep.relative_error =
      predicted > 0.0 ? std::abs(empirical - predicted) / predicted
                      : std::abs(empirical);
  return rep;
}

// Spearman rank correlation; ties get average ranks.
inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) {
    throw Error("spearman: need two equally sized samples of >= 2");
  }
  auto ranks = [](const std::vector<double>& v) {
    const std::size_t n = v.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(n);
    std::size_t i = 0;
    while (i < n) {
      std::size_t j = i;
      while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
      const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
      for (std::size_t t = i; t <= j; ++t) r[order[t]] = avg;
      i = j + 1;
    }
    return r;
  };
  const auto rx = ranks(x), ry = ranks(y);
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    mx += rx[i];
    my += ry[i];
  }
  mx /= static_cast<double>(rx.size());
  my /= static_cast<double>(ry.size());
  double num = 0.0, dx = 0.0, dy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    num += (rx[i] - mx) * (ry[i] - my);
    dx += (rx[i] - mx) * (rx[i] - mx);
    dy += (ry[i] - my) * (ry[i] - my);
  }
  if (dx == 0.0 || dy == 0.0) return 0.0;
  return num / std::sqrt(dx * dy);
}

struct NormQuantiles {
  double p50 = 0.0;
  double p95 = 0.0;
  double max = 0.0;
  std::size_t count = 0;
};

inline NormQuantiles norm_distribution_report(std::vector<double> norms) {
  if (norms.empty()) throw Error("norm_distribution_report: empty input");
  std::sort(norms.begin(), norms.end());
  auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(norms.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, norms.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return norms[lo] * (1.0 - frac) + norms[hi] * frac;
  };
  NormQuantiles nq;
  nq.p50 = quantile(0.50);
  nq.p95 = quantile(0.95);
  nq.max = norms.back();
  nq.count = norms.size();
  return nq;
}

}  // namespace fedforge
