#pragma once

// Forward and backward numerical kernels on dense NCHW tensors.
//
// All reductions run in a fixed sequential order per output element, so results
// are bit-identical across runs and across thread counts.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "navseg/error.hpp"
#include "navseg/parallel.hpp"
#include "navseg/tensor.hpp"

namespace navseg {

enum class ConvKind : std::uint8_t { standard = 0, depthwise = 1, pointwise = 2, transposed = 3 };

inline const char* to_string(ConvKind k) {
  switch (k) {
    case ConvKind::standard: return "standard";
    case ConvKind::depthwise: return "depthwise";
    case ConvKind::pointwise: return "pointwise";
    case ConvKind::transposed: return "transposed";
  }
  return "?";
}

/// Filter bank plus geometry for one convolution.
///
/// kernel is (C_out, C_in, K, K) for standard, pointwise and transposed kinds and
/// (C, 1, K, K) for depthwise. bias is empty or has C_out entries.
template <class T>
struct ConvWeights {
  ConvKind kind = ConvKind::standard;
  Tensor<T> kernel;
  std::vector<T> bias;
  std::size_t stride = 1;
  std::size_t padding = 0;

  std::size_t out_channels() const noexcept { return kernel.shape().n; }
  std::size_t in_channels() const noexcept {
    return kind == ConvKind::depthwise ? kernel.shape().n : kernel.shape().c;
  }
  std::size_t kernel_size() const noexcept { return kernel.shape().h; }

  void validate() const {
    const std::string tag = to_string(kind);
    if (kernel.empty()) throw ShapeError(tag + " conv: empty kernel");
    const Shape& k = kernel.shape();
    if (k.h != k.w) throw ShapeError(tag + " conv: kernel must be square, got " + k.str());
    if (stride == 0) throw ShapeError(tag + " conv: stride must be positive");
    if (kind == ConvKind::depthwise && k.c != 1) {
      throw ShapeError("depthwise conv: expected one filter per channel (C_in=1), got C_in=" +
                       std::to_string(k.c));
    }
    if (kind == ConvKind::pointwise && (k.h != 1 || stride != 1 || padding != 0)) {
      throw ShapeError("pointwise conv: requires K=1, stride 1, padding 0");
    }
    if (!bias.empty() && bias.size() != k.n) {
      throw ShapeError(tag + " conv: bias length " + std::to_string(bias.size()) +
                       " != C_out " + std::to_string(k.n));
    }
    const bool bias_finite =
        std::all_of(bias.begin(), bias.end(), [](T v) { return std::isfinite(v); });
    if (!kernel.all_finite() || !bias_finite) {
      throw NumericError(tag + " conv: non-finite weights");
    }
  }
};

/// Per-channel affine normalization parameters.
template <class T>
struct BatchNormParams {
  std::vector<T> gamma, beta, running_mean, running_var;
  T eps = T(1e-5);

  static BatchNormParams identity(std::size_t channels, T eps = T(1e-5)) {
    return {std::vector<T>(channels, T(1)), std::vector<T>(channels, T(0)),
            std::vector<T>(channels, T(0)), std::vector<T>(channels, T(1)), eps};
  }

  std::size_t channels() const noexcept { return gamma.size(); }

  void validate(std::size_t c) const {
    if (gamma.size() != c || beta.size() != c || running_mean.size() != c ||
        running_var.size() != c) {
      throw ShapeError("batchnorm: parameter lengths must all equal C=" + std::to_string(c));
    }
    if (std::any_of(running_var.begin(), running_var.end(), [](T v) { return v < T(0); })) {
      throw NumericError("batchnorm: negative running variance");
    }
  }
};

enum class BnMode { train, infer };

namespace detail {

// Output positions o in [lo, hi) whose input index o*stride + offset lies in [0, in_extent).
inline std::pair<std::size_t, std::size_t> valid_range(std::ptrdiff_t offset, std::size_t stride,
                                                       std::size_t in_extent,
                                                       std::size_t out_extent) {
  const auto s = static_cast<std::ptrdiff_t>(stride);
  const std::ptrdiff_t lo = offset >= 0 ? 0 : (-offset + s - 1) / s;
  const std::ptrdiff_t last = static_cast<std::ptrdiff_t>(in_extent) - 1 - offset;
  if (last < 0) return {0, 0};
  const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(last / s + 1, static_cast<std::ptrdiff_t>(out_extent));
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(std::max(lo, hi))};
}

// dst[n,o,y,x] = bias[o] + sum_{c,ky,kx} src[n,c,y*s+ky-p,x*s+kx-p] * weight(o,c,ky,kx)
// per_channel restricts the c sum to c = o.
template <class T, class WeightFn>
void gather(const Tensor<T>& src, Tensor<T>& dst, std::size_t k, std::size_t s, std::size_t p,
            std::span<const T> bias, bool per_channel, WeightFn&& weight) {
  const Shape is = src.shape();
  const Shape os = dst.shape();
  parallel_for(os.n * os.c, [&](std::size_t job) {
    const std::size_t n = job / os.c;
    const std::size_t o = job % os.c;
    T* out = dst.plane(n, o);
    std::fill(out, out + os.plane(), bias.empty() ? T(0) : bias[o]);
    const std::size_t c_lo = per_channel ? o : 0;
    const std::size_t c_hi = per_channel ? o + 1 : is.c;
    for (std::size_t c = c_lo; c < c_hi; ++c) {
      const T* in = src.plane(n, c);
      for (std::size_t ky = 0; ky < k; ++ky) {
        const auto dy = static_cast<std::ptrdiff_t>(ky) - static_cast<std::ptrdiff_t>(p);
        const auto [y0, y1] = valid_range(dy, s, is.h, os.h);
        for (std::size_t kx = 0; kx < k; ++kx) {
          const auto dx = static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(p);
          const auto [x0, x1] = valid_range(dx, s, is.w, os.w);
          const T wv = weight(o, c, ky, kx);
          for (std::size_t y = y0; y < y1; ++y) {
            const T* row = in + static_cast<std::size_t>(static_cast<std::ptrdiff_t>(y * s) + dy) * is.w;
            T* orow = out + y * os.w;
            if (s == 1) {
              const T* r = row + dx;
              for (std::size_t x = x0; x < x1; ++x) orow[x] += wv * r[x];
            } else {
              for (std::size_t x = x0; x < x1; ++x) {
                orow[x] += wv * row[static_cast<std::ptrdiff_t>(x * s) + dx];
              }
            }
          }
        }
      }
    }
  });
}

// dst[n,d,y*s+ky-p,x*s+kx-p] += src[n,c,y,x] * weight(d,c,ky,kx), dst planes
// initialised to bias[d]. per_channel restricts c to d.
template <class T, class WeightFn>
void scatter(const Tensor<T>& src, Tensor<T>& dst, std::size_t k, std::size_t s, std::size_t p,
             std::span<const T> bias, bool per_channel, WeightFn&& weight) {
  const Shape ss = src.shape();
  const Shape ds = dst.shape();
  parallel_for(ds.n * ds.c, [&](std::size_t job) {
    const std::size_t n = job / ds.c;
    const std::size_t d = job % ds.c;
    T* out = dst.plane(n, d);
    std::fill(out, out + ds.plane(), bias.empty() ? T(0) : bias[d]);
    const std::size_t c_lo = per_channel ? d : 0;
    const std::size_t c_hi = per_channel ? d + 1 : ss.c;
    for (std::size_t c = c_lo; c < c_hi; ++c) {
      const T* in = src.plane(n, c);
      for (std::size_t ky = 0; ky < k; ++ky) {
        const auto dy = static_cast<std::ptrdiff_t>(ky) - static_cast<std::ptrdiff_t>(p);
        const auto [y0, y1] = valid_range(dy, s, ds.h, ss.h);
        for (std::size_t kx = 0; kx < k; ++kx) {
          const auto dx = static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(p);
          const auto [x0, x1] = valid_range(dx, s, ds.w, ss.w);
          const T wv = weight(d, c, ky, kx);
          for (std::size_t y = y0; y < y1; ++y) {
            const T* irow = in + y * ss.w;
            T* orow = out + static_cast<std::size_t>(static_cast<std::ptrdiff_t>(y * s) + dy) * ds.w;
            for (std::size_t x = x0; x < x1; ++x) {
              orow[static_cast<std::ptrdiff_t>(x * s) + dx] += wv * irow[x];
            }
          }
        }
      }
    }
  });
}

// grad(o,c,ky,kx) = sum_{n,y,x} big[n,bc,y*s+ky-p,x*s+kx-p] * small[n,sc,y,x]
// where (bc, sc) = channels(o, c). Visits every filter tap of a kernel of
// extents (filters, taps_c, k, k).
template <class T, class ChannelFn>
Tensor<T> correlate(const Tensor<T>& big, const Tensor<T>& small, Shape kshape, std::size_t s,
                    std::size_t p, ChannelFn&& channels) {
  Tensor<T> grad(kshape);
  const Shape bs = big.shape();
  const Shape ss = small.shape();
  const std::size_t k = kshape.h;
  parallel_for(kshape.n, [&](std::size_t o) {
    for (std::size_t c = 0; c < kshape.c; ++c) {
      const auto [bc, sc] = channels(o, c);
      for (std::size_t ky = 0; ky < k; ++ky) {
        const auto dy = static_cast<std::ptrdiff_t>(ky) - static_cast<std::ptrdiff_t>(p);
        const auto [y0, y1] = valid_range(dy, s, bs.h, ss.h);
        for (std::size_t kx = 0; kx < k; ++kx) {
          const auto dx = static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(p);
          const auto [x0, x1] = valid_range(dx, s, bs.w, ss.w);
          T acc = T(0);
          for (std::size_t n = 0; n < bs.n; ++n) {
            const T* bp = big.plane(n, bc);
            const T* sp = small.plane(n, sc);
            for (std::size_t y = y0; y < y1; ++y) {
              const T* brow = bp + static_cast<std::size_t>(static_cast<std::ptrdiff_t>(y * s) + dy) * bs.w;
              const T* srow = sp + y * ss.w;
              for (std::size_t x = x0; x < x1; ++x) {
                acc += brow[static_cast<std::ptrdiff_t>(x * s) + dx] * srow[x];
              }
            }
          }
          grad(o, c, ky, kx) = acc;
        }
      }
    }
  });
  return grad;
}

template <class T>
std::vector<T> channel_sums(const Tensor<T>& t) {
  const Shape s = t.shape();
  std::vector<T> out(s.c, T(0));
  for (std::size_t c = 0; c < s.c; ++c) {
    T acc = T(0);
    for (std::size_t n = 0; n < s.n; ++n) {
      const T* p = t.plane(n, c);
      for (std::size_t i = 0; i < s.plane(); ++i) acc += p[i];
    }
    out[c] = acc;
  }
  return out;
}

inline void require_same(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw ShapeError(std::string(op) + ": shape mismatch " + a.str() + " vs " + b.str());
}

}  // namespace detail

// Number of kernel placements along one axis; rejects kernels larger than the
// padded extent.
inline std::size_t conv_extent(std::size_t in, std::size_t k, std::size_t stride,
                               std::size_t padding, const char* axis) {
  if (in + 2 * padding < k) {
    throw ShapeError(std::string("conv: padded ") + axis + " " + std::to_string(in + 2 * padding) +
                     " is smaller than kernel " + std::to_string(k));
  }
  return (in + 2 * padding - k) / stride + 1;
}

// Transposed convolutions here always emit exactly stride x the input extent.
// Valid iff an output padding in [0, stride) reconciles the geometry.
inline std::size_t transposed_extent(std::size_t in, std::size_t k, std::size_t stride,
                                     std::size_t padding, const char* axis) {
  const auto natural = static_cast<std::ptrdiff_t>((in - 1) * stride + k) -
                       2 * static_cast<std::ptrdiff_t>(padding);
  const auto target = static_cast<std::ptrdiff_t>(in * stride);
  const std::ptrdiff_t extra = target - natural;
  if (extra < 0 || extra >= static_cast<std::ptrdiff_t>(stride)) {
    throw ShapeError(std::string("transposed conv: K=") + std::to_string(k) + " stride " +
                     std::to_string(stride) + " padding " + std::to_string(padding) +
                     " cannot produce exactly " + std::to_string(stride) + "x " + axis);
  }
  return static_cast<std::size_t>(target);
}

template <class T>
Shape conv_output_shape(const Shape& in, const ConvWeights<T>& w) {
  const std::string tag = to_string(w.kind);
  if (in.c != w.in_channels()) {
    throw ShapeError(tag + " conv: input channels C=" + std::to_string(in.c) +
                     " but kernel expects C_in=" + std::to_string(w.in_channels()));
  }
  const std::size_t k = w.kernel_size();
  if (w.kind == ConvKind::transposed) {
    return {in.n, w.out_channels(), transposed_extent(in.h, k, w.stride, w.padding, "height"),
            transposed_extent(in.w, k, w.stride, w.padding, "width")};
  }
  return {in.n, w.out_channels(), conv_extent(in.h, k, w.stride, w.padding, "height"),
          conv_extent(in.w, k, w.stride, w.padding, "width")};
}

/// Applies any convolution kind.
template <class T>
Tensor<T> apply_conv(const Tensor<T>& x, const ConvWeights<T>& w) {
  w.validate();
  Tensor<T> y(conv_output_shape(x.shape(), w));
  const std::size_t k = w.kernel_size();
  const std::span<const T> bias(w.bias);
  const Tensor<T>& ker = w.kernel;
  switch (w.kind) {
    case ConvKind::standard:
    case ConvKind::pointwise:
      detail::gather(x, y, k, w.stride, w.padding, bias, false,
                     [&](std::size_t o, std::size_t c, std::size_t ky, std::size_t kx) {
                       return ker(o, c, ky, kx);
                     });
      break;
    case ConvKind::depthwise:
      detail::gather(x, y, k, w.stride, w.padding, bias, true,
                     [&](std::size_t o, std::size_t, std::size_t ky, std::size_t kx) {
                       return ker(o, 0, ky, kx);
                     });
      break;
    case ConvKind::transposed:
      detail::scatter(x, y, k, w.stride, w.padding, bias, false,
                      [&](std::size_t d, std::size_t c, std::size_t ky, std::size_t kx) {
                        return ker(d, c, ky, kx);
                      });
      break;
  }
  return y;
}

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const ConvWeights<T>& w) {
  if (w.kind != ConvKind::standard) throw ShapeError("conv2d: expected standard weights");
  return apply_conv(x, w);
}

template <class T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const ConvWeights<T>& w) {
  if (w.kind != ConvKind::depthwise) throw ShapeError("depthwise_conv2d: expected depthwise weights");
  if (w.out_channels() != x.shape().c) {
    throw ShapeError("depthwise conv: " + std::to_string(w.out_channels()) +
                     " filters for C=" + std::to_string(x.shape().c) + " input channels");
  }
  return apply_conv(x, w);
}

template <class T>
Tensor<T> pointwise_conv2d(const Tensor<T>& x, const ConvWeights<T>& w) {
  if (w.kind != ConvKind::pointwise) throw ShapeError("pointwise_conv2d: expected pointwise weights");
  return apply_conv(x, w);
}

template <class T>
Tensor<T> transposed_conv2d(const Tensor<T>& x, const ConvWeights<T>& w) {
  if (w.kind != ConvKind::transposed) {
    throw ShapeError("transposed_conv2d: expected transposed weights");
  }
  return apply_conv(x, w);
}

template <class T>
struct ConvGrads {
  Tensor<T> input;
  Tensor<T> kernel;
  std::vector<T> bias;
};

/// Gradients of a convolution given the upstream gradient dy.
template <class T>
ConvGrads<T> conv_backward(const Tensor<T>& x, const ConvWeights<T>& w, const Tensor<T>& dy) {
  const std::size_t k = w.kernel_size();
  const std::size_t s = w.stride;
  const std::size_t p = w.padding;
  const Tensor<T>& ker = w.kernel;
  const std::span<const T> no_bias;
  ConvGrads<T> g{Tensor<T>(x.shape()), Tensor<T>(), detail::channel_sums(dy)};
  switch (w.kind) {
    case ConvKind::standard:
    case ConvKind::pointwise:
      detail::scatter(dy, g.input, k, s, p, no_bias, false,
                      [&](std::size_t c, std::size_t o, std::size_t ky, std::size_t kx) {
                        return ker(o, c, ky, kx);
                      });
      g.kernel = detail::correlate(x, dy, ker.shape(), s, p, [](std::size_t o, std::size_t c) {
        return std::pair{c, o};
      });
      break;
    case ConvKind::depthwise:
      detail::scatter(dy, g.input, k, s, p, no_bias, true,
                      [&](std::size_t c, std::size_t, std::size_t ky, std::size_t kx) {
                        return ker(c, 0, ky, kx);
                      });
      g.kernel = detail::correlate(x, dy, ker.shape(), s, p, [](std::size_t o, std::size_t) {
        return std::pair{o, o};
      });
      break;
    case ConvKind::transposed:
      detail::gather(dy, g.input, k, s, p, no_bias, false,
                     [&](std::size_t c, std::size_t o, std::size_t ky, std::size_t kx) {
                       return ker(o, c, ky, kx);
                     });
      g.kernel = detail::correlate(dy, x, ker.shape(), s, p, [](std::size_t o, std::size_t c) {
        return std::pair{o, c};
      });
      break;
  }
  return g;
}

// ---------------------------------------------------------------------------
// Pooling

template <class T>
struct PoolResult {
  Tensor<T> output;
  std::vector<std::uint32_t> argmax;  // flat input offset per output element
};

/// 2x2 stride-2 max pooling. First maximum in row-major window order wins.
template <class T>
PoolResult<T> maxpool2d_with_indices(const Tensor<T>& x) {
  const Shape s = x.shape();
  if (s.h % 2 != 0 || s.w % 2 != 0) {
    throw ShapeError("maxpool2d: spatial dims must be even, got H=" + std::to_string(s.h) +
                     " W=" + std::to_string(s.w));
  }
  PoolResult<T> r{Tensor<T>({s.n, s.c, s.h / 2, s.w / 2}), {}};
  r.argmax.resize(r.output.size());
  std::size_t i = 0;
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      for (std::size_t y = 0; y < s.h / 2; ++y) {
        for (std::size_t xx = 0; xx < s.w / 2; ++xx, ++i) {
          std::size_t best = x.offset(n, c, 2 * y, 2 * xx);
          for (std::size_t dy = 0; dy < 2; ++dy) {
            for (std::size_t dx = 0; dx < 2; ++dx) {
              const std::size_t at = x.offset(n, c, 2 * y + dy, 2 * xx + dx);
              if (x[at] > x[best]) best = at;
            }
          }
          r.output[i] = x[best];
          r.argmax[i] = static_cast<std::uint32_t>(best);
        }
      }
    }
  }
  return r;
}

template <class T>
Tensor<T> maxpool2d(const Tensor<T>& x) {
  return maxpool2d_with_indices(x).output;
}

template <class T>
Tensor<T> maxpool2d_backward(const Tensor<T>& dy, std::span<const std::uint32_t> argmax,
                             const Shape& in_shape) {
  Tensor<T> dx(in_shape);
  for (std::size_t i = 0; i < dy.size(); ++i) dx[argmax[i]] += dy[i];
  return dx;
}

// ---------------------------------------------------------------------------
// Batch normalization

template <class T>
Tensor<T> batchnorm_infer(const Tensor<T>& x, const BatchNormParams<T>& p) {
  const Shape s = x.shape();
  p.validate(s.c);
  Tensor<T> y(s);
  for (std::size_t c = 0; c < s.c; ++c) {
    const T scale = p.gamma[c] / std::sqrt(p.running_var[c] + p.eps);
    for (std::size_t n = 0; n < s.n; ++n) {
      const T* in = x.plane(n, c);
      T* out = y.plane(n, c);
      for (std::size_t i = 0; i < s.plane(); ++i) {
        out[i] = (in[i] - p.running_mean[c]) * scale + p.beta[c];
      }
    }
  }
  return y;
}

template <class T>
struct BatchStats {
  std::vector<T> mean, var, inv_std;
  Tensor<T> xhat;
};

// Normalizes with batch statistics (biased variance over N, H, W).
template <class T>
Tensor<T> batchnorm_train(const Tensor<T>& x, std::span<const T> gamma, std::span<const T> beta,
                          T eps, BatchStats<T>& stats) {
  const Shape s = x.shape();
  if (gamma.size() != s.c || beta.size() != s.c) {
    throw ShapeError("batchnorm: parameter lengths must all equal C=" + std::to_string(s.c));
  }
  const double count = static_cast<double>(s.n * s.plane());
  stats.mean.assign(s.c, T(0));
  stats.var.assign(s.c, T(0));
  stats.inv_std.assign(s.c, T(0));
  stats.xhat = Tensor<T>(s);
  Tensor<T> y(s);
  for (std::size_t c = 0; c < s.c; ++c) {
    double sum = 0.0;
    for (std::size_t n = 0; n < s.n; ++n) {
      const T* in = x.plane(n, c);
      for (std::size_t i = 0; i < s.plane(); ++i) sum += in[i];
    }
    const double mean = sum / count;
    double sq = 0.0;
    for (std::size_t n = 0; n < s.n; ++n) {
      const T* in = x.plane(n, c);
      for (std::size_t i = 0; i < s.plane(); ++i) sq += (in[i] - mean) * (in[i] - mean);
    }
    const double var = sq / count;
    const T inv = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
    stats.mean[c] = static_cast<T>(mean);
    stats.var[c] = static_cast<T>(var);
    stats.inv_std[c] = inv;
    for (std::size_t n = 0; n < s.n; ++n) {
      const T* in = x.plane(n, c);
      T* xh = stats.xhat.plane(n, c);
      T* out = y.plane(n, c);
      for (std::size_t i = 0; i < s.plane(); ++i) {
        xh[i] = (in[i] - stats.mean[c]) * inv;
        out[i] = gamma[c] * xh[i] + beta[c];
      }
    }
  }
  return y;
}

// running <- momentum * running + (1 - momentum) * batch
template <class T>
void update_running_stats(std::vector<T>& running_mean, std::vector<T>& running_var,
                          const BatchStats<T>& stats, T momentum) {
  for (std::size_t c = 0; c < running_mean.size(); ++c) {
    running_mean[c] = momentum * running_mean[c] + (T(1) - momentum) * stats.mean[c];
    running_var[c] = momentum * running_var[c] + (T(1) - momentum) * stats.var[c];
  }
}

template <class T>
Tensor<T> batchnorm(const Tensor<T>& x, BatchNormParams<T>& p, BnMode mode, T momentum = T(0.9)) {
  if (mode == BnMode::infer) return batchnorm_infer(x, p);
  p.validate(x.shape().c);
  BatchStats<T> stats;
  Tensor<T> y = batchnorm_train<T>(x, p.gamma, p.beta, p.eps, stats);
  update_running_stats(p.running_mean, p.running_var, stats, momentum);
  return y;
}

template <class T>
struct BatchNormGrads {
  Tensor<T> input;
  std::vector<T> gamma, beta;
};

template <class T>
BatchNormGrads<T> batchnorm_train_backward(const Tensor<T>& dy, const BatchStats<T>& stats,
                                           std::span<const T> gamma) {
  const Shape s = dy.shape();
  const double count = static_cast<double>(s.n * s.plane());
  BatchNormGrads<T> g{Tensor<T>(s), std::vector<T>(s.c), std::vector<T>(s.c)};
  for (std::size_t c = 0; c < s.c; ++c) {
    double sum_dy = 0.0;
    double sum_dy_xhat = 0.0;
    for (std::size_t n = 0; n < s.n; ++n) {
      const T* d = dy.plane(n, c);
      const T* xh = stats.xhat.plane(n, c);
      for (std::size_t i = 0; i < s.plane(); ++i) {
        sum_dy += d[i];
        sum_dy_xhat += static_cast<double>(d[i]) * xh[i];
      }
    }
    g.beta[c] = static_cast<T>(sum_dy);
    g.gamma[c] = static_cast<T>(sum_dy_xhat);
    const double scale = static_cast<double>(gamma[c]) * stats.inv_std[c] / count;
    for (std::size_t n = 0; n < s.n; ++n) {
      const T* d = dy.plane(n, c);
      const T* xh = stats.xhat.plane(n, c);
      T* out = g.input.plane(n, c);
      for (std::size_t i = 0; i < s.plane(); ++i) {
        out[i] = static_cast<T>(scale * (count * d[i] - sum_dy - xh[i] * sum_dy_xhat));
      }
    }
  }
  return g;
}

template <class T>
BatchNormGrads<T> batchnorm_infer_backward(const Tensor<T>& dy, const Tensor<T>& x,
                                           const BatchNormParams<T>& p) {
  const Shape s = dy.shape();
  BatchNormGrads<T> g{Tensor<T>(s), std::vector<T>(s.c), std::vector<T>(s.c)};
  for (std::size_t c = 0; c < s.c; ++c) {
    const T inv = T(1) / std::sqrt(p.running_var[c] + p.eps);
    T sum_dy = T(0);
    T sum_dy_xhat = T(0);
    for (std::size_t n = 0; n < s.n; ++n) {
      const T* d = dy.plane(n, c);
      const T* in = x.plane(n, c);
      T* out = g.input.plane(n, c);
      for (std::size_t i = 0; i < s.plane(); ++i) {
        sum_dy += d[i];
        sum_dy_xhat += d[i] * (in[i] - p.running_mean[c]) * inv;
        out[i] = d[i] * p.gamma[c] * inv;
      }
    }
    g.beta[c] = sum_dy;
    g.gamma[c] = sum_dy_xhat;
  }
  return g;
}

// ---------------------------------------------------------------------------
// Elementwise and structural ops

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
  return y;
}

// Gradient of relu given its output; the subgradient at 0 is 0.
template <class T>
Tensor<T> relu_backward(const Tensor<T>& dy, const Tensor<T>& y) {
  Tensor<T> dx(dy.shape());
  for (std::size_t i = 0; i < dy.size(); ++i) dx[i] = y[i] > T(0) ? dy[i] : T(0);
  return dx;
}

template <class T>
Tensor<T> add_elementwise(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same(a.shape(), b.shape(), "add_elementwise");
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) y[i] = a[i] + b[i];
  return y;
}

/// Stacks a's channels followed by b's.
template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape sa = a.shape();
  const Shape sb = b.shape();
  if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w) {
    throw ShapeError("concat_channels: N,H,W must agree, got " + sa.str() + " and " + sb.str());
  }
  Tensor<T> y({sa.n, sa.c + sb.c, sa.h, sa.w});
  for (std::size_t n = 0; n < sa.n; ++n) {
    std::copy_n(a.plane(n, 0), sa.c * sa.plane(), y.plane(n, 0));
    std::copy_n(b.plane(n, 0), sb.c * sb.plane(), y.plane(n, sa.c));
  }
  return y;
}

// Splits a concat gradient back into its two parts.
template <class T>
std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& y, std::size_t first) {
  const Shape s = y.shape();
  Tensor<T> a({s.n, first, s.h, s.w});
  Tensor<T> b({s.n, s.c - first, s.h, s.w});
  for (std::size_t n = 0; n < s.n; ++n) {
    std::copy_n(y.plane(n, 0), first * s.plane(), a.plane(n, 0));
    std::copy_n(y.plane(n, first), (s.c - first) * s.plane(), b.plane(n, 0));
  }
  return {std::move(a), std::move(b)};
}

template <class T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x) {
  const Shape s = x.shape();
  Tensor<T> y({s.n, s.c, 2 * s.h, 2 * s.w});
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const T* in = x.plane(n, c);
      T* out = y.plane(n, c);
      for (std::size_t yy = 0; yy < 2 * s.h; ++yy) {
        const T* row = in + (yy / 2) * s.w;
        T* orow = out + yy * 2 * s.w;
        for (std::size_t xx = 0; xx < 2 * s.w; ++xx) orow[xx] = row[xx / 2];
      }
    }
  }
  return y;
}

template <class T>
Tensor<T> upsample_nearest2x_backward(const Tensor<T>& dy) {
  const Shape s = dy.shape();
  Tensor<T> dx({s.n, s.c, s.h / 2, s.w / 2});
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      for (std::size_t y = 0; y < s.h; ++y) {
        for (std::size_t x = 0; x < s.w; ++x) dx(n, c, y / 2, x / 2) += dy(n, c, y, x);
      }
    }
  }
  return dx;
}

/// Output channel k copies input channel map[k], or is zero when map[k] < 0.
/// Used for the parameter-free shortcut of channel-changing blocks.
template <class T>
Tensor<T> remap_channels(const Tensor<T>& x, std::span<const std::int32_t> map) {
  const Shape s = x.shape();
  Tensor<T> y({s.n, map.size(), s.h, s.w});
  for (std::size_t k = 0; k < map.size(); ++k) {
    if (map[k] >= static_cast<std::int32_t>(s.c)) {
      throw ShapeError("remap_channels: source channel " + std::to_string(map[k]) +
                       " out of range for C=" + std::to_string(s.c));
    }
  }
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t k = 0; k < map.size(); ++k) {
      if (map[k] < 0) continue;
      std::copy_n(x.plane(n, static_cast<std::size_t>(map[k])), s.plane(), y.plane(n, k));
    }
  }
  return y;
}

template <class T>
Tensor<T> remap_channels_backward(const Tensor<T>& dy, std::span<const std::int32_t> map,
                                  const Shape& in_shape) {
  Tensor<T> dx(in_shape);
  for (std::size_t n = 0; n < in_shape.n; ++n) {
    for (std::size_t k = 0; k < map.size(); ++k) {
      if (map[k] < 0) continue;
      T* out = dx.plane(n, static_cast<std::size_t>(map[k]));
      const T* in = dy.plane(n, k);
      for (std::size_t i = 0; i < in_shape.plane(); ++i) out[i] += in[i];
    }
  }
  return dx;
}

/// Per-pixel softmax across channels, max-subtracted.
template <class T>
Tensor<T> softmax_channels(const Tensor<T>& x) {
  const Shape s = x.shape();
  if (s.c < 2) throw ShapeError("softmax_channels: need C >= 2, got C=" + std::to_string(s.c));
  Tensor<T> y(s);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t i = 0; i < s.plane(); ++i) {
      T mx = x.plane(n, 0)[i];
      for (std::size_t c = 1; c < s.c; ++c) mx = std::max(mx, x.plane(n, c)[i]);
      T sum = T(0);
      for (std::size_t c = 0; c < s.c; ++c) {
        const T e = std::exp(x.plane(n, c)[i] - mx);
        y.plane(n, c)[i] = e;
        sum += e;
      }
      for (std::size_t c = 0; c < s.c; ++c) y.plane(n, c)[i] /= sum;
    }
  }
  return y;
}

template <class T>
struct LossResult {
  double loss = 0.0;
  Tensor<T> grad;  // d loss / d logits
};

/// Mean over pixels of -log softmax(logits)[label], computed in log space.
/// labels holds one class index per (n, y, x) in NHW order.
template <class T>
LossResult<T> cross_entropy(const Tensor<T>& logits, std::span<const std::uint8_t> labels) {
  const Shape s = logits.shape();
  if (s.c < 2) throw ShapeError("cross_entropy: need C >= 2 logits, got C=" + std::to_string(s.c));
  if (labels.size() != s.n * s.plane()) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(s.n * s.plane()) + " pixels");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= s.c) {
      throw ShapeError("cross_entropy: label " + std::to_string(labels[i]) + " at pixel " +
                       std::to_string(i) + " outside [0," + std::to_string(s.c) + ")");
    }
  }
  const double count = static_cast<double>(labels.size());
  LossResult<T> r{0.0, Tensor<T>(s)};
  std::vector<double> z(s.c);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t i = 0; i < s.plane(); ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < s.c; ++c) {
        z[c] = logits.plane(n, c)[i];
        mx = std::max(mx, z[c]);
      }
      double sum = 0.0;
      for (std::size_t c = 0; c < s.c; ++c) sum += std::exp(z[c] - mx);
      const double lse = mx + std::log(sum);
      const std::uint8_t label = labels[n * s.plane() + i];
      r.loss += lse - z[label];
      for (std::size_t c = 0; c < s.c; ++c) {
        const double prob = std::exp(z[c] - lse);
        r.grad.plane(n, c)[i] = static_cast<T>((prob - (c == label ? 1.0 : 0.0)) / count);
      }
    }
  }
  r.loss /= count;
  return r;
}

}  // namespace navseg
