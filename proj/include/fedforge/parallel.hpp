#pragma once

#include <algorithm>
#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace fedforge {

// Worker cap: FEDFORGE_THREADS if set, else hardware concurrency.
inline std::size_t max_threads() {
  if (const char* env = std::getenv("FEDFORGE_THREADS")) {
    const long v = std::atol(env);
    if (v >= 1) return static_cast<std::size_t>(v);
  }
  const unsigned hc = std::thread::hardware_concurrency();
  return hc > 0 ? hc : 1;
}

// Index-addressed parallel loop; results must be written to per-index slots
// so the outcome is independent of scheduling.
inline void parallel_for(std::size_t count,
                         const std::function<void(std::size_t)>& body) {
  const std::size_t workers = std::min(max_threads(), count);
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) body(i);
    return;
  }
  std::vector<std::thread> threads;
  threads.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    threads.emplace_back([&, w] {
      for (std::size_t i = w; i < count; i += workers) body(i);
    });
  }
  for (auto& t : threads) t.join();
}

}  // namespace fedforge
