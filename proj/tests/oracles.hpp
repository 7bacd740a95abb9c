#pragma once

// Brute-force reference implementations used only by tests. Each one is a
// literal transcription of the defining sum with no shared code paths with
// the kernels under test.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "navseg/tensor.hpp"

namespace navseg::oracle {

// out[n,o,y,x] = b[o] + sum_{c,ky,kx} in[n,c,y*s+ky-p,x*s+kx-p] * k[o,c,ky,kx]
template <class T>
Tensor<T> conv2d(const Tensor<T>& in, const Tensor<T>& k, const std::vector<T>& bias, int s, int p) {
  const Shape is = in.shape();
  const Shape ks = k.shape();
  const int K = static_cast<int>(ks.h);
  const int oh = (static_cast<int>(is.h) + 2 * p - K) / s + 1;
  const int ow = (static_cast<int>(is.w) + 2 * p - K) / s + 1;
  Tensor<T> out({is.n, ks.n, static_cast<std::size_t>(oh), static_cast<std::size_t>(ow)});
  for (std::size_t n = 0; n < is.n; ++n)
    for (std::size_t o = 0; o < ks.n; ++o)
      for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
          double acc = bias.empty() ? 0.0 : bias[o];
          for (std::size_t c = 0; c < is.c; ++c)
            for (int ky = 0; ky < K; ++ky)
              for (int kx = 0; kx < K; ++kx) {
                const int iy = y * s + ky - p;
                const int ix = x * s + kx - p;
                if (iy < 0 || ix < 0 || iy >= static_cast<int>(is.h) || ix >= static_cast<int>(is.w)) continue;
                acc += static_cast<double>(in(n, c, iy, ix)) * k(o, c, ky, kx);
              }
          out(n, o, y, x) = static_cast<T>(acc);
        }
  return out;
}

// Channel c of the output only reads channel c of the input.
template <class T>
Tensor<T> depthwise(const Tensor<T>& in, const Tensor<T>& k, const std::vector<T>& bias, int s, int p) {
  const Shape is = in.shape();
  const int K = static_cast<int>(k.shape().h);
  const int oh = (static_cast<int>(is.h) + 2 * p - K) / s + 1;
  const int ow = (static_cast<int>(is.w) + 2 * p - K) / s + 1;
  Tensor<T> out({is.n, is.c, static_cast<std::size_t>(oh), static_cast<std::size_t>(ow)});
  for (std::size_t n = 0; n < is.n; ++n)
    for (std::size_t c = 0; c < is.c; ++c)
      for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
          double acc = bias.empty() ? 0.0 : bias[c];
          for (int ky = 0; ky < K; ++ky)
            for (int kx = 0; kx < K; ++kx) {
              const int iy = y * s + ky - p;
              const int ix = x * s + kx - p;
              if (iy < 0 || ix < 0 || iy >= static_cast<int>(is.h) || ix >= static_cast<int>(is.w)) continue;
              acc += static_cast<double>(in(n, c, iy, ix)) * k(c, 0, ky, kx);
            }
          out(n, c, y, x) = static_cast<T>(acc);
        }
  return out;
}

// Explicit scatter: every input pixel stamps its kernel-weighted window onto
// the (s*H, s*W) output; stamps falling outside are dropped.
template <class T>
Tensor<T> transposed(const Tensor<T>& in, const Tensor<T>& k, const std::vector<T>& bias, int s, int p) {
  const Shape is = in.shape();
  const Shape ks = k.shape();
  const int K = static_cast<int>(ks.h);
  const int oh = static_cast<int>(is.h) * s;
  const int ow = static_cast<int>(is.w) * s;
  std::vector<double> acc(is.n * ks.n * oh * ow, 0.0);
  auto at = [&](std::size_t n, std::size_t o, int y, int x) -> double& {
    return acc[((n * ks.n + o) * oh + y) * ow + x];
  };
  for (std::size_t n = 0; n < is.n; ++n)
    for (std::size_t o = 0; o < ks.n; ++o)
      for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) at(n, o, y, x) = bias.empty() ? 0.0 : bias[o];
  for (std::size_t n = 0; n < is.n; ++n)
    for (std::size_t c = 0; c < is.c; ++c)
      for (int iy = 0; iy < static_cast<int>(is.h); ++iy)
        for (int ix = 0; ix < static_cast<int>(is.w); ++ix)
          for (std::size_t o = 0; o < ks.n; ++o)
            for (int ky = 0; ky < K; ++ky)
              for (int kx = 0; kx < K; ++kx) {
                const int y = iy * s + ky - p;
                const int x = ix * s + kx - p;
                if (y < 0 || x < 0 || y >= oh || x >= ow) continue;
                at(n, o, y, x) += static_cast<double>(in(n, c, iy, ix)) * k(o, c, ky, kx);
              }
  Tensor<T> out({is.n, ks.n, static_cast<std::size_t>(oh), static_cast<std::size_t>(ow)});
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(acc[i]);
  return out;
}

// Scans every 2x2 window.
template <class T>
Tensor<T> maxpool(const Tensor<T>& in) {
  const Shape s = in.shape();
  Tensor<T> out({s.n, s.c, s.h / 2, s.w / 2});
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t y = 0; y < s.h / 2; ++y)
        for (std::size_t x = 0; x < s.w / 2; ++x) {
          T m = in(n, c, 2 * y, 2 * x);
          m = std::max(m, in(n, c, 2 * y, 2 * x + 1));
          m = std::max(m, in(n, c, 2 * y + 1, 2 * x));
          m = std::max(m, in(n, c, 2 * y + 1, 2 * x + 1));
          out(n, c, y, x) = m;
        }
  return out;
}

// Largest |a-b| / max(1, |b|).
template <class T>
double max_rel_error(const Tensor<T>& a, const Tensor<T>& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i]));
    worst = std::max(worst, d / std::max(1.0, std::abs(static_cast<double>(b[i]))));
  }
  return worst;
}

// Central difference of f with respect to element i of x.
template <class T>
double central_difference(Tensor<T>& x, std::size_t i, double h, const std::function<double()>& f) {
  const T saved = x[i];
  x[i] = static_cast<T>(saved + h);
  const double up = f();
  x[i] = static_cast<T>(saved - h);
  const double down = f();
  x[i] = saved;
  return (up - down) / (2.0 * h);
}

// |analytic - numeric| / max(scale, |analytic|, |numeric|)
inline double grad_rel_error(double analytic, double numeric, double scale) {
  return std::abs(analytic - numeric) / std::max({scale, std::abs(analytic), std::abs(numeric)});
}

}  // namespace navseg::oracle
