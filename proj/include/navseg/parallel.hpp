#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace navseg {

namespace detail {
inline std::atomic<std::size_t>& requested_threads() {
  static std::atomic<std::size_t> n{1};
  return n;
}
inline std::atomic<bool>& deterministic_flag() {
  static std::atomic<bool> on{false};
  return on;
}
}  // namespace detail

// Upper bound from NAVSEG_THREADS, 0 when unset or unparsable.
inline std::size_t env_thread_cap() {
  const char* s = std::getenv("NAVSEG_THREADS");
  if (s == nullptr || *s == '\0') return 0;
  char* end = nullptr;
  const unsigned long v = std::strtoul(s, &end, 10);
  return (end != nullptr && *end == '\0' && v > 0) ? static_cast<std::size_t>(v) : 0;
}

inline void set_num_threads(std::size_t n) { detail::requested_threads() = std::max<std::size_t>(n, 1); }

// Forces sequential execution of every kernel regardless of set_num_threads.
inline void set_deterministic(bool on) { detail::deterministic_flag() = on; }
inline bool deterministic() { return detail::deterministic_flag(); }

inline std::size_t num_threads() {
  if (deterministic()) return 1;
  std::size_t n = detail::requested_threads();
  if (const std::size_t cap = env_thread_cap(); cap != 0) n = std::min(n, cap);
  return std::max<std::size_t>(n, 1);
}

// Runs fn(i) for i in [0, count). Work items are split into contiguous ranges;
// each item is processed by exactly one thread, so per-item results do not
// depend on the thread count.
template <class Fn>
void parallel_for(std::size_t count, Fn&& fn) {
  const std::size_t workers = std::min(num_threads(), count);
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::jthread> pool;
  pool.reserve(workers - 1);
  const std::size_t chunk = (count + workers - 1) / workers;
  for (std::size_t t = 1; t < workers; ++t) {
    const std::size_t lo = t * chunk;
    const std::size_t hi = std::min(count, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&fn, lo, hi] {
      for (std::size_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (std::size_t i = 0; i < std::min(count, chunk); ++i) fn(i);
}

}  // namespace navseg
