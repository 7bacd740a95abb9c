#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <random>
#include <string>
#include <vector>

#include "navseg/blocks.hpp"

namespace navseg {

struct BenchResult {
  std::size_t iterations = 0;
  std::size_t warmup = 0;
  double mean_ms = 0.0;
  double p50_ms = 0.0;
  double p95_ms = 0.0;
  double max_fps = 0.0;
};

inline double fps_from_ms(double mean_ms) { return 1000.0 / mean_ms; }

/// One decimal, as frame rates are usually tabulated.
inline std::string format_fps(double fps) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", fps);
  return buf;
}

// Nearest-rank percentile of an ascending sample.
inline double percentile(const std::vector<double>& sorted, double q) {
  const auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(sorted.size())));
  return sorted[std::clamp<std::size_t>(rank, 1, sorted.size()) - 1];
}

/// Statistics over per-frame times, warmup already excluded.
inline BenchResult summarize(std::vector<double> frame_ms, std::size_t warmup) {
  if (frame_ms.empty()) throw std::invalid_argument("bench: need at least one timed iteration");
  BenchResult r;
  r.iterations = frame_ms.size();
  r.warmup = warmup;
  double sum = 0.0;
  for (double t : frame_ms) sum += t;
  r.mean_ms = sum / static_cast<double>(frame_ms.size());
  std::sort(frame_ms.begin(), frame_ms.end());
  r.p50_ms = percentile(frame_ms, 0.50);
  r.p95_ms = percentile(frame_ms, 0.95);
  r.max_fps = fps_from_ms(r.mean_ms);
  return r;
}

/// Times inference forward passes on a fixed random input.
template <class T>
BenchResult bench(const Network<T>& net, const Shape& input, std::size_t iterations, std::size_t warmup,
                  std::uint64_t seed = 0) {
  if (iterations == 0) throw std::invalid_argument("bench: iterations must be >= 1");
  std::mt19937_64 rng(seed);
  const Tensor<T> x = random_tensor<T>(input, rng, 0.0, 1.0);
  std::vector<double> times;
  for (std::size_t i = 0; i < warmup + iterations; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    const Tensor<T> y = net.forward(x);
    const auto t1 = std::chrono::steady_clock::now();
    if (i >= warmup) times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  return summarize(std::move(times), warmup);
}

}  // namespace navseg
