#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <set>
#include <vector>

#include "fedforge/aggregation.hpp"
#include "fedforge/analytics.hpp"
#include "fedforge/data.hpp"
#include "fedforge/dopa.hpp"
#include "fedforge/model.hpp"
#include "fedforge/rng.hpp"
#include "fedforge/training.hpp"

namespace fedforge {

struct FederationConfig {
  std::size_t clients = 20;
  double participation = 0.1;
  std::size_t rounds = 100;
  std::size_t attack_start = 30;  // window [start, end)
  std::size_t attack_end = 60;
  std::vector<int> malicious_ids = {0};
  std::size_t benign_epochs = 2;
  std::size_t malicious_epochs = 5;
  double lr = 0.1;
  std::size_t batch_size = 16;
  std::uint64_t seed = 20;

  void validate() const {
    if (participation <= 0.0 || participation > 1.0) {
      throw Error("federation: participation must be in (0,1]");
    }
    if (clients == 0) throw Error("federation: need >= 1 client");
    if (attack_start > attack_end || attack_end > rounds) {
      throw Error("federation: attack window must satisfy start <= end <= rounds");
    }
    for (int id : malicious_ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= clients) {
        throw Error("federation: malicious id " + std::to_string(id) +
                    " outside client range");
      }
    }
  }
};

struct ClientState {
  int id = 0;
  std::vector<std::size_t> indices;
  bool is_malicious = false;
};

struct AttackConfig {
  bool enabled = false;
  bool naive_baseline = false;  // fixed gray patch instead of DOPA
  double poison_fraction = 0.3;
  DopaConfig dopa;
};

inline std::vector<int> sample_clients(std::size_t round,
                                       const FederationConfig& cfg) {
  const std::size_t count = std::min<std::size_t>(
      cfg.clients, static_cast<std::size_t>(std::ceil(
                       cfg.participation * static_cast<double>(cfg.clients))));
  std::vector<int> ids(cfg.clients);
  std::iota(ids.begin(), ids.end(), 0);
  Rng rng = stream(cfg.seed, "sampling", round);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + rng.below(cfg.clients - i);
    std::swap(ids[i], ids[j]);
  }
  ids.resize(count);
  std::sort(ids.begin(), ids.end());
  return ids;
}

inline ClientUpdate local_train_benign(const Model& global,
                                       const ClientState& client,
                                       const Dataset& train,
                                       std::size_t epochs, double lr,
                                       std::size_t batch_size, Rng& rng) {
  Model local = global;
  Dataset ds = train.subset(client.indices);
  train_sgd(local, ds, epochs, lr, batch_size, rng);
  ClientUpdate u;
  u.client_id = client.id;
  u.sample_count = client.indices.size();
  u.delta = local.params - global.params;
  return u;
}

// Malicious path: sees only the broadcast global model and its own data.
inline ClientUpdate local_train_malicious(const Model& global,
                                          const ClientState& client,
                                          const Dataset& train,
                                          const Trigger& trig,
                                          std::size_t epochs, double lr,
                                          double poison_fraction,
                                          std::size_t batch_size, Rng& rng,
                                          std::uint64_t poison_seed) {
  Model local = global;
  Dataset ds = train.subset(client.indices);
  Dataset poisoned = poison_dataset(ds, trig, poison_fraction, poison_seed);
  train_sgd(local, poisoned, epochs, lr, batch_size, rng);
  ClientUpdate u;
  u.client_id = client.id;
  u.sample_count = client.indices.size();
  u.delta = local.params - global.params;
  return u;
}

class FedEngine {
 public:
  FedEngine(Dataset train, Dataset test, std::vector<std::vector<std::size_t>> partition,
            ModelSpec spec, FederationConfig fed, AggregatorConfig agg,
            AttackConfig attack, Trigger initial_trigger)
      : train_(std::move(train)),
        test_(std::move(test)),
        spec_(spec),
        fed_(std::move(fed)),
        agg_(agg),
        attack_(std::move(attack)),
        trigger_(std::move(initial_trigger)) {
    fed_.validate();
    agg_.validate();
    spec_.validate();
    trigger_.validate(spec_.classes);
    if (partition.size() != fed_.clients) {
      throw Error("engine: partition size != client count");
    }
    clients_.resize(fed_.clients);
    for (std::size_t i = 0; i < fed_.clients; ++i) {
      clients_[i].id = static_cast<int>(i);
      clients_[i].indices = std::move(partition[i]);
      clients_[i].is_malicious =
          std::find(fed_.malicious_ids.begin(), fed_.malicious_ids.end(),
                    static_cast<int>(i)) != fed_.malicious_ids.end();
      if (clients_[i].indices.empty()) {
        throw Error("engine: client " + std::to_string(i) + " has no samples");
      }
    }
    Rng init_rng = stream(fed_.seed, "init");
    global_ = Model::init(spec_, init_rng);
    server_rng_ = std::make_unique<Rng>(stream(fed_.seed, "dp-noise"));

    // server-held splits, carved from the test set once per experiment
    if (agg_.rule == Rule::Zeno) {
      std::vector<std::size_t> idx(test_.size());
      std::iota(idx.begin(), idx.end(), 0);
      Rng r = stream(fed_.seed, "server-val");
      r.shuffle(idx);
      const std::size_t n = std::max<std::size_t>(1, test_.size() / 20);  // 5%
      idx.resize(n);
      validation_ = test_.subset(idx);
    }
    if (agg_.rule == Rule::FlTrust) {
      std::vector<std::size_t> idx(test_.size());
      std::iota(idx.begin(), idx.end(), 0);
      Rng r = stream(fed_.seed, "server-root");
      r.shuffle(idx);
      idx.resize(std::min<std::size_t>(100, test_.size()));
      root_split_ = test_.subset(idx);
    }
  }

  const Model& global_model() const { return global_; }
  const Trigger& trigger() const { return trigger_; }
  const Dataset& test_set() const { return test_; }
  const std::vector<RoundRecord>& records() const { return records_; }
  std::vector<double>& path_update_norms() { return path_update_norms_; }
  const std::vector<double>& path_update_norms() const {
    return path_update_norms_;
  }

  RoundRecord run_round() {
    const std::size_t round = records_.size();
    RoundRecord rec;
    rec.round = round;
    rec.selected = sample_clients(round, fed_);

    const bool in_window = round >= fed_.attack_start && round < fed_.attack_end;
    std::vector<ClientUpdate> updates;
    try {
      for (int id : rec.selected) {
        const ClientState& client = clients_[static_cast<std::size_t>(id)];
        const bool attack_now =
            attack_.enabled && client.is_malicious && in_window;
        Rng trng = stream(fed_.seed, "client-train",
                          round * fed_.clients + static_cast<std::size_t>(id));
        if (!attack_now) {
          updates.push_back(local_train_benign(global_, client, train_,
                                               fed_.benign_epochs, fed_.lr,
                                               fed_.batch_size, trng));
          continue;
        }
        rec.malicious_selected = true;
        if (!attack_.naive_baseline) {
          // re-optimize the trigger, warm-started from the previous one
          const auto t0 = std::chrono::steady_clock::now();
          DopaConfig dcfg = attack_.dopa;
          dcfg.seed = splitmix_round(attack_.dopa.seed, round);
          Dataset local = train_.subset(client.indices);
          auto opt = optimize_trigger(global_, local, dcfg, trigger_,
                                      attack_.poison_fraction);
          trigger_ = opt.trigger;
          const auto t1 = std::chrono::steady_clock::now();
          rec.trig_opt_seconds =
              std::chrono::duration<double>(t1 - t0).count();
          if (!opt.trace.empty()) {
            double csum = 0.0, esum = 0.0;
            for (const auto& it : opt.trace) {
              csum += it.consensus;
              esum += it.eta_eff;
            }
            rec.mean_consensus = csum / static_cast<double>(opt.trace.size());
            rec.mean_eta_eff = esum / static_cast<double>(opt.trace.size());
          }
          path_update_norms_.insert(path_update_norms_.end(),
                                    opt.path_update_norms.begin(),
                                    opt.path_update_norms.end());
        }
        updates.push_back(local_train_malicious(
            global_, client, train_, trigger_, fed_.malicious_epochs, fed_.lr,
            attack_.poison_fraction, fed_.batch_size, trng,
            splitmix_round(fed_.seed, round)));
      }

      ServerContext ctx;
      ctx.global_params = global_.params;
      ctx.spec = &spec_;
      ctx.validation = validation_ ? &*validation_ : nullptr;
      ctx.history = &fsg_history_;
      ctx.round = round;
      ctx.server_rng = server_rng_.get();
      if (agg_.rule == Rule::FlTrust) {
        ctx.server_reference = compute_server_reference(round);
      }
      ParamVector agg = aggregate(updates, agg_, ctx, fed_.batch_size);
      rec.update_norm = agg.norm();
      global_.params += agg;
    } catch (const Error& e) {
      throw Error("round " + std::to_string(round) + ": " + e.what());
    }

    rec.mta = main_task_accuracy(global_, test_);
    rec.asr = attack_success_rate(global_, test_, trigger_);
    records_.push_back(rec);
    return rec;
  }

  std::vector<RoundRecord> run_all() {
    while (records_.size() < fed_.rounds) run_round();
    return records_;
  }

 private:
  static std::uint64_t splitmix_round(std::uint64_t seed, std::size_t round) {
    std::uint64_t s = seed ^ (0x51ed270b4851ab2dULL * (round + 1));
    return splitmix64(s);
  }

  ParamVector compute_server_reference(std::size_t round) {
    Model ref = global_;
    Rng rng = stream(fed_.seed, "server-ref", round);
    train_sgd(ref, *root_split_, 1, fed_.lr, fed_.batch_size, rng);
    return ref.params - global_.params;
  }

  Dataset train_;
  Dataset test_;
  ModelSpec spec_;
  FederationConfig fed_;
  AggregatorConfig agg_;
  AttackConfig attack_;
  Trigger trigger_;
  Model global_;
  std::vector<ClientState> clients_;
  std::vector<RoundRecord> records_;
  std::map<int, ParamVector> fsg_history_;
  std::optional<Dataset> validation_;
  std::optional<Dataset> root_split_;
  std::unique_ptr<Rng> server_rng_;
  std::vector<double> path_update_norms_;
};

}  // namespace fedforge
