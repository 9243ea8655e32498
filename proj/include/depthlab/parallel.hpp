#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <thread>
#include <vector>

namespace depthlab {

// Splits [0, n) into one contiguous chunk per worker. The chunking depends
// only on n and threads, never on scheduling, so results that write disjoint
// ranges are identical for any thread count.
inline void parallel_for(int64_t n, int threads,
                         const std::function<void(int64_t, int64_t)>& fn) {
  if (threads <= 1 || n < 2 * threads) {
    fn(0, n);
    return;
  }
  const int64_t chunk = (n + threads - 1) / threads;
  std::vector<std::thread> pool;
  for (int k = 0; k < threads; ++k) {
    const int64_t lo = k * chunk;
    const int64_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn] { fn(lo, hi); });
  }
  for (std::thread& th : pool) th.join();
}

}  // namespace depthlab
