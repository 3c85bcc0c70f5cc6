#pragma once

#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace pvmc {

/// Worker cap: PVMC_THREADS when set, hardware concurrency otherwise.
inline int worker_threads() {
  if (const char* env = std::getenv("PVMC_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

/// Runs fn(i) for i in [0, n). Results must go to disjoint slots; the output
/// is then identical for any thread count. Used for per-image work where
/// each item derives its own RNG stream.
inline void parallel_for(int n, const std::function<void(int)>& fn) {
  const int threads = std::min(worker_threads(), n);
  if (threads <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(threads));
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      for (int i = t; i < n; i += threads) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace pvmc
