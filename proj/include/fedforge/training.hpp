#pragma once

#include <cstddef>
#include <numeric>
#include <vector>

#include "fedforge/data.hpp"
#include "fedforge/model.hpp"
#include "fedforge/rng.hpp"

namespace fedforge {

// Plain mini-batch SGD, in place. Shuffle order comes from the caller's rng.
inline void train_sgd(Model& model, const Dataset& ds, std::size_t epochs,
                      double lr, std::size_t batch_size, Rng& rng) {
  if (epochs == 0 || lr == 0.0 || ds.size() == 0) return;
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t e = 0; e < epochs; ++e) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      const std::size_t end = std::min(start + batch_size, order.size());
      std::vector<std::size_t> idx(order.begin() + static_cast<long>(start),
                                   order.begin() + static_cast<long>(end));
      auto g = loss_and_param_grads(model, ds.batch(idx), ds.batch_labels(idx));
      sgd_step(model, g.grad, lr);
    }
  }
}

}  // namespace fedforge
