#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fedforge/data.hpp"
#include "fedforge/model.hpp"
#include "fedforge/rng.hpp"
#include "fedforge/tensor.hpp"

namespace fedforge {

struct ClientUpdate {
  int client_id = 0;
  std::size_t sample_count = 1;  // n_k
  ParamVector delta;
};

enum class Rule {
  FedAvg,
  NormClip,
  Dp,
  Median,
  TrimmedMean,
  Krum,
  Rfa,
  FoolsGold,
  FlTrust,
  Zeno,
  Manc,
  Flame,
};

inline const std::vector<std::pair<Rule, std::string>>& rule_tags() {
  static const std::vector<std::pair<Rule, std::string>> tags = {
      {Rule::FedAvg, "fedavg"}, {Rule::NormClip, "nc"},
      {Rule::Dp, "dp"},         {Rule::Median, "median"},
      {Rule::TrimmedMean, "tm"}, {Rule::Krum, "krum"},
      {Rule::Rfa, "rfa"},       {Rule::FoolsGold, "fsg"},
      {Rule::FlTrust, "fltrust"}, {Rule::Zeno, "zeno"},
      {Rule::Manc, "manc"},     {Rule::Flame, "flame"},
  };
  return tags;
}

inline std::string rule_name(Rule r) {
  for (const auto& [rule, tag] : rule_tags())
    if (rule == r) return tag;
  throw Error("unknown rule");
}

inline Rule rule_from_name(const std::string& s) {
  for (const auto& [rule, tag] : rule_tags())
    if (tag == s) return rule;
  throw Error("unknown aggregation rule tag: " + s);
}

struct AggregatorConfig {
  Rule rule = Rule::FedAvg;
  double trim_ratio = 0.2;
  std::size_t krum_f = 2;
  std::size_t weiszfeld_iters = 10;
  double weiszfeld_eps = 1e-5;
  double clip_norm = 1.0;
  double dp_sigma = 0.0015;
  double zeno_rho = 0.0005;
  std::size_t zeno_b = 1;
  std::size_t zeno_nr = 4;
  double flame_lambda = 0.001;
  double manc_tau = 2.0;
  std::uint64_t noise_seed = 0;

  void validate() const {
    if (trim_ratio < 0.0 || trim_ratio >= 0.5)
      throw Error("aggregator: trim_ratio must be in [0, 0.5)");
    if (clip_norm <= 0.0) throw Error("aggregator: clip_norm must be > 0");
    if (dp_sigma < 0.0) throw Error("aggregator: dp_sigma must be >= 0");
    if (manc_tau <= 0.0) throw Error("aggregator: manc_tau must be > 0");
  }
};

// Per-round server state the rules may consult. The attack side never sees
// this type; only the engine constructs it.
struct ServerContext {
  ParamVector global_params;
  const ModelSpec* spec = nullptr;
  std::optional<ParamVector> server_reference;  // FLTrust
  const Dataset* validation = nullptr;          // Zeno
  std::map<int, ParamVector>* history = nullptr;  // FoolsGold cumulative
  std::size_t round = 0;
  Rng* server_rng = nullptr;  // DP / Flame noise stream
};

inline ParamVector fedavg(const std::vector<ClientUpdate>& updates) {
  if (updates.empty()) throw Error("fedavg: empty update set");
  double n = 0.0;
  for (const auto& u : updates) n += static_cast<double>(u.sample_count);
  ParamVector out(updates.front().delta.size());
  for (const auto& u : updates) {
    const double w = static_cast<double>(u.sample_count) / n;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += w * u.delta[i];
  }
  return out;
}

inline std::vector<ClientUpdate> clip_updates(
    const std::vector<ClientUpdate>& updates, double clip_norm) {
  std::vector<ClientUpdate> clipped = updates;
  for (auto& u : clipped) {
    const double nrm = u.delta.norm();
    if (nrm > clip_norm) u.delta *= clip_norm / nrm;
  }
  return clipped;
}

inline ParamVector norm_clip(const std::vector<ClientUpdate>& updates,
                             double clip_norm) {
  if (clip_norm <= 0.0) throw Error("norm_clip: clip_norm must be > 0");
  return fedavg(clip_updates(updates, clip_norm));
}

inline ParamVector dp_aggregate(const std::vector<ClientUpdate>& updates,
                                double clip_norm, double dp_sigma, Rng& rng) {
  ParamVector out = norm_clip(updates, clip_norm);
  if (dp_sigma > 0.0) {
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] += rng.normal(0.0, dp_sigma);
    }
  }
  return out;
}

inline ParamVector coordinate_median(const std::vector<ClientUpdate>& updates) {
  if (updates.empty()) throw Error("median: empty update set");
  const std::size_t m = updates.size(), d = updates.front().delta.size();
  ParamVector out(d);
  std::vector<double> col(m);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t k = 0; k < m; ++k) col[k] = updates[k].delta[i];
    std::sort(col.begin(), col.end());
    out[i] = (m % 2 == 1) ? col[m / 2] : 0.5 * (col[m / 2 - 1] + col[m / 2]);
  }
  return out;
}

inline ParamVector trimmed_mean(const std::vector<ClientUpdate>& updates,
                                double trim_ratio) {
  if (updates.empty()) throw Error("trimmed_mean: empty update set");
  const std::size_t m = updates.size(), d = updates.front().delta.size();
  const std::size_t k = static_cast<std::size_t>(
      std::floor(trim_ratio * static_cast<double>(m)));
  if (2 * k >= m) {
    throw Error("trimmed_mean: trimming " + std::to_string(k) +
                " from each end of " + std::to_string(m) + " leaves nothing");
  }
  ParamVector out(d);
  std::vector<double> col(m);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < m; ++j) col[j] = updates[j].delta[i];
    std::sort(col.begin(), col.end());
    double sum = 0.0;
    for (std::size_t j = k; j < m - k; ++j) sum += col[j];
    out[i] = sum / static_cast<double>(m - 2 * k);
  }
  return out;
}

// Returns the single update whose sum of squared distances to its m-f-2
// nearest neighbors is minimal; ties go to the lowest client id.
inline ParamVector krum(const std::vector<ClientUpdate>& updates, std::size_t f) {
  const std::size_t m = updates.size();
  if (m < 2 * f + 3) {
    throw Error("krum: needs n >= 2f+3 clients (n=" + std::to_string(m) +
                ", f=" + std::to_string(f) + ")");
  }
  const std::size_t neighbors = m - f - 2;
  std::vector<std::vector<double>> dist(m, std::vector<double>(m, 0.0));
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = i + 1; j < m; ++j) {
      ParamVector diff = updates[i].delta - updates[j].delta;
      const double d2 = diff.dot(diff);
      dist[i][j] = dist[j][i] = d2;
    }
  }
  std::size_t best = 0;
  double best_score = 0.0;
  bool have = false;
  for (std::size_t i = 0; i < m; ++i) {
    std::vector<double> others;
    for (std::size_t j = 0; j < m; ++j)
      if (j != i) others.push_back(dist[i][j]);
    std::sort(others.begin(), others.end());
    double score = 0.0;
    for (std::size_t j = 0; j < neighbors; ++j) score += others[j];
    const bool better =
        !have || score < best_score ||
        (score == best_score && updates[i].client_id < updates[best].client_id);
    if (better) {
      best = i;
      best_score = score;
      have = true;
    }
  }
  return updates[best].delta;
}

// Weiszfeld iterations from the weighted mean; distances floored at 1e-10.
inline ParamVector rfa_geometric_median(const std::vector<ClientUpdate>& updates,
                                        std::size_t iters, double eps) {
  if (updates.empty()) throw Error("rfa: empty update set");
  ParamVector x = fedavg(updates);
  const std::size_t m = updates.size();
  for (std::size_t it = 0; it < iters; ++it) {
    ParamVector next(x.size());
    double wsum = 0.0;
    for (std::size_t k = 0; k < m; ++k) {
      ParamVector diff = updates[k].delta - x;
      const double d = std::max(diff.norm(), 1e-10);
      const double w = 1.0 / d;
      wsum += w;
      for (std::size_t i = 0; i < x.size(); ++i) {
        next[i] += w * updates[k].delta[i];
      }
    }
    next *= 1.0 / wsum;
    ParamVector step = next - x;
    x = next;
    if (step.norm() < eps) break;
  }
  return x;
}

// FoolsGold reweighting over cumulative histories: max pairwise cosine,
// pardoning, inverse, rescale, logit map, all clamped to [0,1].
inline ParamVector foolsgold(const std::vector<ClientUpdate>& updates,
                             std::map<int, ParamVector>& history) {
  if (updates.empty()) throw Error("foolsgold: empty update set");
  for (const auto& u : updates) {
    auto it = history.find(u.client_id);
    if (it == history.end()) {
      history.emplace(u.client_id, u.delta);
    } else {
      it->second += u.delta;
    }
  }
  const std::size_t m = updates.size();
  if (m == 1) return updates.front().delta;

  std::vector<const ParamVector*> hist(m);
  for (std::size_t i = 0; i < m; ++i) {
    hist[i] = &history.at(updates[i].client_id);
  }
  std::vector<std::vector<double>> cs(m, std::vector<double>(m, 0.0));
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = i + 1; j < m; ++j) {
      cs[i][j] = cs[j][i] = cosine_similarity(hist[i]->values(), hist[j]->values());
    }
  }
  std::vector<double> v(m, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < m; ++j)
      if (j != i) v[i] = std::max(v[i], cs[i][j]);
  }
  // pardoning: scale down similarity to clients that look more "benign"
  std::vector<double> wv(m);
  for (std::size_t i = 0; i < m; ++i) {
    double maxcs = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      if (j == i) continue;
      double c = cs[i][j];
      if (v[i] != 0.0 && v[j] > v[i]) c *= v[i] / v[j];
      maxcs = std::max(maxcs, c);
    }
    wv[i] = std::clamp(1.0 - maxcs, 0.0, 1.0);
  }
  const double mx = *std::max_element(wv.begin(), wv.end());
  if (mx > 0.0) {
    for (auto& w : wv) w /= mx;
  }
  for (auto& w : wv) {
    if (w >= 1.0) w = 0.99;
    if (w > 0.0) {
      w = std::log(w / (1.0 - w)) + 0.5;
    }
    w = std::clamp(w, 0.0, 1.0);
  }
  double sum = 0.0;
  for (double w : wv) sum += w;
  ParamVector out(updates.front().delta.size());
  if (sum <= 0.0) return out;
  for (std::size_t i = 0; i < m; ++i) {
    const double w = wv[i] / sum;
    for (std::size_t k = 0; k < out.size(); ++k) out[k] += w * updates[i].delta[k];
  }
  return out;
}

inline ParamVector fltrust(const std::vector<ClientUpdate>& updates,
                           const ParamVector& server_reference) {
  if (updates.empty()) throw Error("fltrust: empty update set");
  const double ref_norm = server_reference.norm();
  ParamVector out(updates.front().delta.size());
  double score_sum = 0.0;
  std::vector<double> scores(updates.size());
  for (std::size_t i = 0; i < updates.size(); ++i) {
    scores[i] = std::max(
        0.0, cosine_similarity(updates[i].delta.values(), server_reference.values()));
    score_sum += scores[i];
  }
  if (score_sum <= 0.0) return out;  // all-zero trust: no movement
  for (std::size_t i = 0; i < updates.size(); ++i) {
    if (scores[i] == 0.0) continue;
    const double nrm = updates[i].delta.norm();
    const double rescale = nrm > 0.0 ? ref_norm / nrm : 0.0;
    const double w = scores[i] / score_sum;
    for (std::size_t k = 0; k < out.size(); ++k) {
      out[k] += w * rescale * updates[i].delta[k];
    }
  }
  return out;
}

// Mean loss of a parameter vector on the server validation mini-batches.
inline double validation_loss(const ModelSpec& spec, const ParamVector& params,
                              const Dataset& val,
                              const std::vector<std::vector<std::size_t>>& batches) {
  Model m;
  m.spec = spec;
  m.params = params;
  double total = 0.0;
  for (const auto& idx : batches) {
    total += mean_loss(m, val.batch(idx), val.batch_labels(idx));
  }
  return total / static_cast<double>(batches.size());
}

inline ParamVector zeno(const std::vector<ClientUpdate>& updates,
                        const ServerContext& ctx, double rho, std::size_t b,
                        std::size_t n_r, std::size_t batch_size,
                        std::uint64_t seed = 0) {
  if (updates.empty()) throw Error("zeno: empty update set");
  if (!ctx.validation || !ctx.spec) {
    throw Error("zeno: server validation split required");
  }
  if (b >= updates.size()) {
    if (b == updates.size()) {
      // keep at least the single best update
      b = updates.size() - 1;
    } else {
      throw Error("zeno: b exceeds update count");
    }
  }
  // fixed per-round validation mini-batches
  Rng rng = stream(seed, "zeno-batches", ctx.round);
  const std::size_t n = ctx.validation->size();
  std::vector<std::vector<std::size_t>> batches(n_r);
  for (auto& batch : batches) {
    const std::size_t bs = std::min(batch_size, n);
    batch.resize(bs);
    for (auto& i : batch) i = rng.below(n);
  }
  const double base = validation_loss(*ctx.spec, ctx.global_params,
                                      *ctx.validation, batches);
  std::vector<std::pair<double, std::size_t>> scored(updates.size());
  for (std::size_t i = 0; i < updates.size(); ++i) {
    const ParamVector cand = ctx.global_params + updates[i].delta;
    const double after = validation_loss(*ctx.spec, cand, *ctx.validation, batches);
    const double nrm = updates[i].delta.norm();
    scored[i] = {base - after - rho * nrm * nrm, i};
  }
  std::sort(scored.begin(), scored.end(), [&](const auto& a, const auto& c) {
    if (a.first != c.first) return a.first > c.first;
    return updates[a.second].client_id < updates[c.second].client_id;
  });
  std::vector<ClientUpdate> kept;
  for (std::size_t i = 0; i + b < scored.size(); ++i) {
    kept.push_back(updates[scored[i].second]);
  }
  return fedavg(kept);
}

// Median-anchored norm clipping: deviations from the coordinate-wise median
// are clipped to tau times the median deviation radius.
inline ParamVector manc(const std::vector<ClientUpdate>& updates, double tau) {
  if (updates.empty()) throw Error("manc: empty update set");
  const ParamVector anchor = coordinate_median(updates);
  std::vector<double> radii(updates.size());
  for (std::size_t i = 0; i < updates.size(); ++i) {
    radii[i] = (updates[i].delta - anchor).norm();
  }
  std::vector<double> sorted = radii;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t m = sorted.size();
  const double r = (m % 2 == 1) ? sorted[m / 2]
                                : 0.5 * (sorted[m / 2 - 1] + sorted[m / 2]);
  const double limit = tau * r;
  std::vector<ClientUpdate> clipped = updates;
  for (std::size_t i = 0; i < clipped.size(); ++i) {
    if (radii[i] > limit && radii[i] > 0.0) {
      ParamVector dev = clipped[i].delta - anchor;
      dev *= limit / radii[i];
      clipped[i].delta = anchor + dev;
    }
  }
  return fedavg(clipped);
}

namespace detail {

// Complete-linkage agglomerative clustering on a distance matrix, merged
// down to at most two clusters. Returns per-point cluster labels {0,1}.
inline std::vector<int> complete_linkage_two(
    const std::vector<std::vector<double>>& dist) {
  const std::size_t m = dist.size();
  std::vector<std::vector<std::size_t>> clusters(m);
  for (std::size_t i = 0; i < m; ++i) clusters[i] = {i};
  while (clusters.size() > 2) {
    std::size_t bi = 0, bj = 1;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < clusters.size(); ++i) {
      for (std::size_t j = i + 1; j < clusters.size(); ++j) {
        double d = 0.0;  // complete linkage: max pairwise distance
        for (auto a : clusters[i])
          for (auto b : clusters[j]) d = std::max(d, dist[a][b]);
        if (d < best) {
          best = d;
          bi = i;
          bj = j;
        }
      }
    }
    clusters[bi].insert(clusters[bi].end(), clusters[bj].begin(),
                        clusters[bj].end());
    clusters.erase(clusters.begin() + static_cast<long>(bj));
  }
  std::vector<int> labels(m, 0);
  if (clusters.size() == 2) {
    for (auto i : clusters[1]) labels[i] = 1;
  }
  return labels;
}

}  // namespace detail

// Flame with the clustering backend simplified to complete linkage on
// cosine distance; keeps the n-f size check, median-norm clipping, and
// adaptive Gaussian noise.
inline ParamVector flame_simplified(const std::vector<ClientUpdate>& updates,
                                    std::size_t f, double lambda, Rng& rng) {
  if (updates.empty()) throw Error("flame: empty update set");
  const std::size_t m = updates.size();
  std::vector<const ClientUpdate*> kept;
  if (m >= 2) {
    std::vector<std::vector<double>> dist(m, std::vector<double>(m, 0.0));
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = i + 1; j < m; ++j) {
        const double d = 1.0 - cosine_similarity(updates[i].delta.values(),
                                                 updates[j].delta.values());
        dist[i][j] = dist[j][i] = d;
      }
    }
    const auto labels = detail::complete_linkage_two(dist);
    std::size_t count[2] = {0, 0};
    int lowest_id_label = 0;
    int lowest_id = std::numeric_limits<int>::max();
    for (std::size_t i = 0; i < m; ++i) {
      ++count[labels[i]];
      if (updates[i].client_id < lowest_id) {
        lowest_id = updates[i].client_id;
        lowest_id_label = labels[i];
      }
    }
    int keep_label;
    if (count[0] != count[1]) {
      keep_label = count[0] > count[1] ? 0 : 1;
    } else {
      keep_label = lowest_id_label;
    }
    for (std::size_t i = 0; i < m; ++i) {
      if (labels[i] == keep_label) kept.push_back(&updates[i]);
    }
    if (kept.size() < m - std::min(f, m)) {
      kept.clear();  // cluster too small: fall back to all updates
    }
  }
  if (kept.empty()) {
    for (const auto& u : updates) kept.push_back(&u);
  }
  std::vector<double> norms;
  for (const auto* u : kept) norms.push_back(u->delta.norm());
  std::sort(norms.begin(), norms.end());
  const std::size_t s = norms.size();
  const double clip = (s % 2 == 1) ? norms[s / 2]
                                   : 0.5 * (norms[s / 2 - 1] + norms[s / 2]);
  ParamVector out(updates.front().delta.size());
  for (const auto* u : kept) {
    const double nrm = u->delta.norm();
    const double scale = (clip > 0.0 && nrm > clip) ? clip / nrm : 1.0;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += scale * u->delta[i];
  }
  out *= 1.0 / static_cast<double>(kept.size());
  if (lambda > 0.0 && clip > 0.0) {
    const double sigma = lambda * clip;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += rng.normal(0.0, sigma);
  }
  return out;
}

// Dispatch on the configured rule. FoolsGold mutates the history held by
// the server context; noise rules draw from the server RNG stream.
inline ParamVector aggregate(const std::vector<ClientUpdate>& updates,
                             const AggregatorConfig& cfg, ServerContext& ctx,
                             std::size_t batch_size = 16) {
  cfg.validate();
  switch (cfg.rule) {
    case Rule::FedAvg:
      return fedavg(updates);
    case Rule::NormClip:
      return norm_clip(updates, cfg.clip_norm);
    case Rule::Dp: {
      if (!ctx.server_rng) throw Error("dp: server rng required");
      return dp_aggregate(updates, cfg.clip_norm, cfg.dp_sigma, *ctx.server_rng);
    }
    case Rule::Median:
      return coordinate_median(updates);
    case Rule::TrimmedMean:
      return trimmed_mean(updates, cfg.trim_ratio);
    case Rule::Krum:
      return krum(updates, cfg.krum_f);
    case Rule::Rfa:
      return rfa_geometric_median(updates, cfg.weiszfeld_iters, cfg.weiszfeld_eps);
    case Rule::FoolsGold: {
      if (!ctx.history) throw Error("fsg: history map required");
      return foolsgold(updates, *ctx.history);
    }
    case Rule::FlTrust: {
      if (!ctx.server_reference) throw Error("fltrust: server reference required");
      return fltrust(updates, *ctx.server_reference);
    }
    case Rule::Zeno:
      return zeno(updates, ctx, cfg.zeno_rho, cfg.zeno_b, cfg.zeno_nr, batch_size,
                  cfg.noise_seed);
    case Rule::Manc:
      return manc(updates, cfg.manc_tau);
    case Rule::Flame: {
      if (!ctx.server_rng) throw Error("flame: server rng required");
      return flame_simplified(updates, cfg.krum_f, cfg.flame_lambda,
                              *ctx.server_rng);
    }
  }
  throw Error("aggregate: unhandled rule");
}

}  // namespace fedforge
