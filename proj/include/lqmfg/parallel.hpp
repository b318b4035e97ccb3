#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace lqmfg {

/// Resolves a requested worker count; 0 means one per hardware thread.
inline unsigned worker_count(unsigned requested) {
  if (requested > 0) return requested;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw > 0 ? hw : 1;
}

/// Runs body(i) for i in [0, count) on up to `threads` workers. Work is claimed
/// dynamically; callers write results into per-index slots, so the outcome does
/// not depend on scheduling. The first exception thrown by any body is rethrown.
inline void parallel_for(std::size_t count, unsigned threads, const std::function<void(std::size_t)>& body) {
  const unsigned workers = std::min<std::size_t>(worker_count(threads), std::max<std::size_t>(count, 1));
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto run = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < count;) {
      try {
        body(i);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
        next = count;
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (unsigned w = 0; w < workers; ++w) pool.emplace_back(run);
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

/// Pairwise (cascade) summation in fixed index order.
template <class T, class Get>
T pairwise_sum(std::size_t lo, std::size_t hi, const Get& get, T zero) {
  if (hi <= lo) return zero;
  if (hi - lo <= 8) {
    T s = zero;
    for (std::size_t i = lo; i < hi; ++i) s = s + get(i);
    return s;
  }
  const std::size_t mid = lo + (hi - lo) / 2;
  return pairwise_sum<T>(lo, mid, get, zero) + pairwise_sum<T>(mid, hi, get, zero);
}

}  // namespace lqmfg
