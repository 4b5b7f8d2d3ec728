#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <thread>
#include <vector>

namespace meshreg {

/// Worker count for data-parallel maps. Defaults to the hardware count;
/// override with the MESHREG_THREADS environment variable (1 = serial).
inline unsigned thread_count() {
  static const unsigned n = [] {
    if (const char* env = std::getenv("MESHREG_THREADS")) {
      const long v = std::strtol(env, nullptr, 10);
      if (v >= 1) return static_cast<unsigned>(v);
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1u : hw;
  }();
  return n;
}

/// Data-parallel map over [0, n). The callable must write only to
/// locations owned by index i, so the result is schedule-independent.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  const unsigned workers = std::min<std::size_t>(thread_count(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> threads;
  threads.reserve(workers);
  const std::size_t chunk = (n + workers - 1) / workers;
  for (unsigned w = 0; w < workers; ++w) {
    const std::size_t lo = w * chunk;
    const std::size_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    threads.emplace_back([lo, hi, &fn] {
      for (std::size_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& t : threads) t.join();
}

/// Chunked reduction with a fixed chunk layout: partials are combined in
/// chunk order, so results are bitwise-reproducible for a fixed thread count.
template <typename Acc, typename Map, typename Combine>
Acc parallel_reduce(std::size_t n, Acc init, Map&& map, Combine&& combine) {
  const unsigned workers = std::min<std::size_t>(thread_count(), n);
  if (workers <= 1) {
    Acc acc = init;
    for (std::size_t i = 0; i < n; ++i) acc = combine(std::move(acc), map(i));
    return acc;
  }
  const std::size_t chunk = (n + workers - 1) / workers;
  std::vector<Acc> partials(workers, init);
  std::vector<std::thread> threads;
  threads.reserve(workers);
  for (unsigned w = 0; w < workers; ++w) {
    const std::size_t lo = w * chunk;
    const std::size_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    threads.emplace_back([lo, hi, w, &partials, &map, &combine] {
      Acc acc = partials[w];
      for (std::size_t i = lo; i < hi; ++i) acc = combine(std::move(acc), map(i));
      partials[w] = std::move(acc);
    });
  }
  for (auto& t : threads) t.join();
  Acc acc = std::move(partials[0]);
  for (unsigned w = 1; w < workers; ++w) acc = combine(std::move(acc), std::move(partials[w]));
  return acc;
}

}  // namespace meshreg
