#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "fedforge/data.hpp"
#include "fedforge/model.hpp"
#include "fedforge/parallel.hpp"
#include "fedforge/rng.hpp"
#include "fedforge/training.hpp"

namespace fedforge {

struct FusionConfig {
  double mu_target = 0.5;
  double sigma_target = 0.288;
  double c_budget = 1.0;
  double weight = 0.1;  // share of the fusion gradient in the total step
};

enum class FusionMode { Simultaneous, Pre };

struct DopaConfig {
  std::size_t paths = 3;            // K
  double eta0 = 0.1;                // base local lr for reference paths
  double beta = 0.2;                // lr heterogeneity factor
  double eta_delta = 0.1;           // trigger lr
  double lambda = 1.0;              // consensus gain
  std::size_t sim_epochs = 1;       // E_sim
  std::size_t trigger_epochs = 50;  // E_delta
  double path_subset_fraction = 0.5;   // |D_k| / |local data|
  double dsub_fraction = 0.25;         // |D_sub| / |local data|
  std::size_t batch_size = 32;
  bool fusion_enabled = true;
  FusionMode fusion_mode = FusionMode::Simultaneous;
  FusionConfig fusion;
  std::uint64_t seed = 0;

  void validate() const {
    if (paths < 2) throw Error("dopa: path count K must be >= 2");
    if (beta < 0.0 || beta >= 1.0) throw Error("dopa: beta must be in [0,1)");
    if (eta_delta <= 0.0) throw Error("dopa: eta_delta must be > 0");
    if (lambda < 0.0) throw Error("dopa: lambda must be >= 0");
  }
};

struct ReferencePath {
  Model model;
  double lr = 0.0;                    // eta_k
  std::vector<std::size_t> subset;    // D_k indices into the local dataset
};

// eta_k on a deterministic linear grid over [eta0*(1-beta), eta0*(1+beta)].
inline std::vector<double> path_learning_rates(double eta0, double beta,
                                               std::size_t k) {
  std::vector<double> etas(k);
  for (std::size_t i = 0; i < k; ++i) {
    const double frac = k > 1 ? static_cast<double>(i) / static_cast<double>(k - 1)
                              : 0.5;
    etas[i] = eta0 * (1.0 - beta + 2.0 * beta * frac);
  }
  return etas;
}

// K replicas of theta0, each fine-tuned on a disjoint-as-possible random
// subset of the attacker's local data with its own learning rate.
inline std::vector<ReferencePath> build_reference_paths(const Model& theta0,
                                                        const Dataset& local_data,
                                                        const DopaConfig& cfg) {
  cfg.validate();
  const auto etas = path_learning_rates(cfg.eta0, cfg.beta, cfg.paths);
  std::vector<std::size_t> order(local_data.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng = stream(cfg.seed, "attack-paths");
  rng.shuffle(order);
  const std::size_t subset_size = std::max<std::size_t>(
      1, static_cast<std::size_t>(cfg.path_subset_fraction *
                                  static_cast<double>(local_data.size())));
  std::vector<ReferencePath> paths(cfg.paths);
  for (std::size_t k = 0; k < cfg.paths; ++k) {
    paths[k].model = theta0;
    paths[k].lr = etas[k];
    paths[k].subset.reserve(subset_size);
    for (std::size_t i = 0; i < subset_size; ++i) {
      paths[k].subset.push_back(order[(k * subset_size + i) % order.size()]);
    }
    if (cfg.sim_epochs > 0) {
      Dataset sub = local_data.subset(paths[k].subset);
      Rng trng = stream(cfg.seed, "attack-path-train", k);
      train_sgd(paths[k].model, sub, cfg.sim_epochs, etas[k], cfg.batch_size, trng);
    }
  }
  return paths;
}

struct GradientSet {
  std::vector<Tensor> grads;       // g_k, mask-supported
  std::vector<double> successes;   // a_k in [0,1]
  std::vector<double> weights;     // w_k, sum to 1
  double consensus = 0.0;          // C in [0,1]
  Tensor aggregated;               // g_agg = sum w_k g_k
};

// C = (2/(K(K-1))) * sum_{i<j} max(0, cos(g_i, g_j)); zero-norm gradients
// contribute cosine 0.
inline double consensus_factor(const std::vector<Tensor>& grads) {
  const std::size_t k = grads.size();
  if (k < 2) throw Error("consensus_factor: needs K >= 2 gradients");
  double sum = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = i + 1; j < k; ++j) {
      sum += std::max(0.0, cosine_similarity(grads[i].values(), grads[j].values()));
    }
  }
  return 2.0 * sum / (static_cast<double>(k) * static_cast<double>(k - 1));
}

// w_k = (a_k + eps) / sum_j (a_j + eps); the floor keeps all-zero success
// sets well defined.
inline std::vector<double> path_weights(const std::vector<double>& successes,
                                        double eps = 1e-3) {
  std::vector<double> w(successes.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    w[i] = successes[i] + eps;
    sum += w[i];
  }
  for (auto& x : w) x /= sum;
  return w;
}

struct FusionGrad {
  double loss = 0.0;
  Tensor grad;  // over mask support
};

// L = (mu - mu_t)^2 + (sigma - sigma_t)^2 + relu(||delta|| - budget)^2,
// statistics over mask-supported pixels only; population sigma.
inline FusionGrad fusion_loss(const Tensor& delta, const Tensor& mask,
                              const FusionConfig& cfg) {
  if (!delta.same_shape(mask)) throw Error("fusion_loss: shape mismatch");
  FusionGrad out;
  out.grad = Tensor(delta.shape());
  std::vector<std::size_t> support;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i] != 0.0) support.push_back(i);
  }
  if (support.empty()) return out;
  const double n = static_cast<double>(support.size());

  double mu = 0.0, norm2 = 0.0;
  for (auto i : support) {
    mu += delta[i];
    norm2 += delta[i] * delta[i];
  }
  mu /= n;
  double var = 0.0;
  for (auto i : support) var += (delta[i] - mu) * (delta[i] - mu);
  var /= n;
  const double sigma = std::sqrt(var);
  const double norm = std::sqrt(norm2);
  const double over = std::max(0.0, norm - cfg.c_budget);

  out.loss = (mu - cfg.mu_target) * (mu - cfg.mu_target) +
             (sigma - cfg.sigma_target) * (sigma - cfg.sigma_target) +
             over * over;

  const double dmu = 2.0 * (mu - cfg.mu_target) / n;
  const double dsig_coeff =
      sigma > 1e-12 ? 2.0 * (sigma - cfg.sigma_target) / (n * sigma) : 0.0;
  const double dnorm_coeff = (over > 0.0 && norm > 0.0) ? 2.0 * over / norm : 0.0;
  for (auto i : support) {
    out.grad[i] = dmu + dsig_coeff * (delta[i] - mu) + dnorm_coeff * delta[i];
  }
  return out;
}

struct TriggerOptIteration {
  double mean_attack_loss = 0.0;  // mean over paths
  double consensus = 0.0;
  double eta_eff = 0.0;
  double mean_success = 0.0;      // mean a_k
  std::vector<double> grad_norms; // ||g_k|| per path
};

struct TriggerOptResult {
  Trigger trigger;
  std::vector<TriggerOptIteration> trace;
  double final_sim_asr = 0.0;          // in-simulation ASR over all paths
  std::vector<double> path_update_norms;  // post-opt poisoned fine-tune norms
};

namespace detail {

inline std::vector<std::size_t> sample_indices(Rng& rng,
                                               const std::vector<std::size_t>& pool,
                                               std::size_t count) {
  std::vector<std::size_t> out(count);
  for (auto& i : out) i = pool[rng.below(pool.size())];
  return out;
}

// Norm of a parameter change restricted to the weights fed directly by the
// trigger region: the amplitude of the trigger pixels scales the gradient of
// exactly these coordinates, so this is where an unregularized trigger
// concentrates high-magnitude perturbations. For the mlp these are the
// first-layer rows of masked pixels; the cnn shares its input kernel across
// positions, so the whole kernel is used.
inline double trigger_region_update_norm(const ModelSpec& spec,
                                         const Tensor& mask,
                                         const ParamVector& delta) {
  double s = 0.0;
  if (spec.arch == Arch::Mlp) {
    const auto o = mlp_offsets(spec);
    const std::size_t hid = spec.hidden;
    for (std::size_t i = 0; i < spec.input_size(); ++i) {
      if (mask[i] == 0.0) continue;
      for (std::size_t u = 0; u < hid; ++u) {
        const double v = delta[o.w1 + i * hid + u];
        s += v * v;
      }
    }
  } else {
    const auto o = cnn_offsets(spec);
    for (std::size_t i = o.wc; i < o.bc; ++i) s += delta[i] * delta[i];
  }
  return std::sqrt(s);
}

}  // namespace detail

// Algorithm: per iteration, per-path trigger gradients on a poisoned
// mini-batch relabeled to the target, ASR-based weights, consensus-scaled
// step, optional fusion penalty, clamp to [0,1].
inline TriggerOptResult optimize_trigger(const Model& theta0,
                                         const Dataset& local_data,
                                         const DopaConfig& cfg,
                                         const Trigger& init,
                                         double poison_fraction = 0.3) {
  cfg.validate();
  init.validate(theta0.spec.classes);
  TriggerOptResult result;
  result.trigger = init;
  Trigger& trig = result.trigger;

  auto paths = build_reference_paths(theta0, local_data, cfg);

  // D_sub: fixed random split of the attacker's local data
  std::vector<std::size_t> all(local_data.size());
  std::iota(all.begin(), all.end(), 0);
  Rng srng = stream(cfg.seed, "attack-dsub");
  srng.shuffle(all);
  const std::size_t dsub_size = std::max<std::size_t>(
      1, static_cast<std::size_t>(cfg.dsub_fraction *
                                  static_cast<double>(local_data.size())));
  std::vector<std::size_t> dsub(all.begin(),
                                all.begin() + static_cast<long>(dsub_size));

  Rng brng = stream(cfg.seed, "attack-batches");

  auto fusion_only_step = [&](std::size_t iters) {
    for (std::size_t e = 0; e < iters; ++e) {
      auto f = fusion_loss(trig.pattern, trig.mask, cfg.fusion);
      for (std::size_t i = 0; i < trig.pattern.size(); ++i) {
        trig.pattern[i] -= cfg.eta_delta * f.grad[i];
        if (trig.mask[i] != 0.0) {
          trig.pattern[i] = std::clamp(trig.pattern[i], 0.0, 1.0);
        }
      }
    }
  };
  if (cfg.fusion_enabled && cfg.fusion_mode == FusionMode::Pre) {
    fusion_only_step(cfg.trigger_epochs);
  }

  for (std::size_t e = 0; e < cfg.trigger_epochs; ++e) {
    const std::size_t bs = std::min(cfg.batch_size, dsub.size());
    const auto idx = detail::sample_indices(brng, dsub, bs);
    Tensor clean = local_data.batch(idx);
    Tensor poisoned = apply_trigger(clean, trig);
    std::vector<int> ytgt(idx.size(), trig.target);

    TriggerOptIteration it;
    std::vector<Tensor> grads(paths.size());
    std::vector<double> successes(paths.size());
    std::vector<double> losses(paths.size());
    it.grad_norms.resize(paths.size());
    // per-path gradients are independent; results land in per-index slots
    parallel_for(paths.size(), [&](std::size_t k) {
      auto g = loss_and_trigger_grad(paths[k].model, poisoned, ytgt, trig.mask);
      losses[k] = g.loss;
      const auto pred = predict(paths[k].model, poisoned);
      std::size_t hits = 0;
      for (int p : pred) hits += (p == trig.target);
      successes[k] = static_cast<double>(hits) / static_cast<double>(pred.size());
      double gn = 0.0;
      for (double v : g.grad.values()) gn += v * v;
      it.grad_norms[k] = std::sqrt(gn);
      grads[k] = std::move(g.grad);
    });
    double loss_sum = 0.0;
    for (std::size_t k = 0; k < paths.size(); ++k) {
      loss_sum += losses[k];
      if (!std::all_of(grads[k].values().begin(), grads[k].values().end(),
                       [](double v) { return std::isfinite(v); })) {
        throw Error("optimize_trigger: non-finite gradient at iteration " +
                    std::to_string(e));
      }
    }

    const auto weights = path_weights(successes);
    const double consensus = consensus_factor(grads);
    const double eta_eff = cfg.eta_delta * (1.0 + cfg.lambda * consensus);

    Tensor step(trig.pattern.shape());
    for (std::size_t k = 0; k < grads.size(); ++k) {
      for (std::size_t i = 0; i < step.size(); ++i) {
        step[i] += weights[k] * grads[k][i];
      }
    }
    if (cfg.fusion_enabled && cfg.fusion_mode == FusionMode::Simultaneous) {
      auto f = fusion_loss(trig.pattern, trig.mask, cfg.fusion);
      for (std::size_t i = 0; i < step.size(); ++i) {
        step[i] += cfg.fusion.weight * f.grad[i];
      }
    }
    for (std::size_t i = 0; i < trig.pattern.size(); ++i) {
      trig.pattern[i] -= eta_eff * step[i];
      if (trig.mask[i] != 0.0) {
        trig.pattern[i] = std::clamp(trig.pattern[i], 0.0, 1.0);
      }
    }

    it.mean_attack_loss = loss_sum / static_cast<double>(paths.size());
    it.consensus = consensus;
    it.eta_eff = eta_eff;
    it.mean_success = 0.0;
    for (double a : successes) it.mean_success += a;
    it.mean_success /= static_cast<double>(successes.size());
    result.trace.push_back(std::move(it));
  }

  // in-simulation ASR over all paths on the full D_sub
  {
    Tensor sub = local_data.batch(dsub);
    Tensor poisoned = apply_trigger(sub, trig);
    std::size_t hits = 0, total = 0;
    for (const auto& path : paths) {
      const auto pred = predict(path.model, poisoned);
      for (int p : pred) {
        ++total;
        hits += (p == trig.target);
      }
    }
    result.final_sim_asr = total ? static_cast<double>(hits) / total : 0.0;
  }

  // Reference-path update norms under the final trigger: fine-tune each
  // replica one epoch on its poisoned subset and record the delta norm.
  for (std::size_t k = 0; k < paths.size(); ++k) {
    Dataset sub = local_data.subset(paths[k].subset);
    Dataset poisoned = poison_dataset(sub, trig, poison_fraction,
                                      cfg.seed ^ (0xABCDULL + k));
    Model replica = paths[k].model;
    Rng trng = stream(cfg.seed, "attack-path-norm", k);
    train_sgd(replica, poisoned, 1, paths[k].lr, cfg.batch_size, trng);
    result.path_update_norms.push_back(detail::trigger_region_update_norm(
        theta0.spec, trig.mask, replica.params - paths[k].model.params));
  }

  return result;
}

}  // namespace fedforge
