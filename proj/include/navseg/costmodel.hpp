#pragma once

// Closed-form multiply-accumulate and parameter accounting.
//
// Costs count kernel-application products only: bias, batchnorm, activation
// and pooling arithmetic are excluded from MACs but their stored scalars are
// included in parameter counts.

#include <cstddef>
#include <cstdint>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "navseg/blocks.hpp"

namespace navseg {

using Count = std::uint64_t;

namespace detail {
inline Count checked_mul(Count a, Count b) {
  Count r = 0;
  if (__builtin_mul_overflow(a, b, &r)) throw std::overflow_error("cost model: count overflow");
  return r;
}
inline Count checked_add(Count a, Count b) {
  Count r = 0;
  if (__builtin_add_overflow(a, b, &r)) throw std::overflow_error("cost model: count overflow");
  return r;
}
template <class... Args>
Count product(Args... args) {
  Count r = 1;
  ((r = checked_mul(r, static_cast<Count>(args))), ...);
  return r;
}
template <class... Args>
void require_positive(const char* op, Args... args) {
  if (((static_cast<Count>(args) == 0) || ...)) {
    throw std::invalid_argument(std::string(op) + ": all arguments must be positive");
  }
}
}  // namespace detail

/// K*K*C_in*C_out*H*W
inline Count standard_conv_cost(Count k, Count c_in, Count c_out, Count h, Count w) {
  detail::require_positive("standard_conv_cost", k, c_in, c_out, h, w);
  return detail::product(k, k, c_in, c_out, h, w);
}

/// Depthwise K*K*C_in*H*W plus pointwise C_in*C_out*H*W.
inline Count separable_conv_cost(Count k, Count c_in, Count c_out, Count h, Count w) {
  detail::require_positive("separable_conv_cost", k, c_in, c_out, h, w);
  return detail::checked_add(detail::product(k, k, c_in, h, w), detail::product(c_in, c_out, h, w));
}

/// separable / standard = 1/C_out + 1/K^2; spatial size and C_in cancel.
inline double cost_reduction_ratio(Count k, Count c_out) {
  detail::require_positive("cost_reduction_ratio", k, c_out);
  return 1.0 / static_cast<double>(c_out) + 1.0 / static_cast<double>(k * k);
}

struct Rational {
  Count num = 0;
  Count den = 1;

  static Rational make(Count num, Count den) {
    if (den == 0) throw std::invalid_argument("rational: zero denominator");
    const Count g = std::gcd(num, den);
    return {num / g, den / g};
  }
  bool operator==(const Rational&) const = default;
};

// (K^2 + C_out) / (C_out * K^2), reduced.
inline Rational cost_reduction_ratio_exact(Count k, Count c_out) {
  detail::require_positive("cost_reduction_ratio", k, c_out);
  return Rational::make(detail::checked_add(k * k, c_out), detail::product(c_out, k, k));
}

template <class T>
Count count_params(const Network<T>& net) {
  return net.param_count();
}

// Dense f32 storage of every counted parameter.
template <class T>
Count model_size_bytes(const Network<T>& net) {
  return detail::checked_mul(count_params(net), 4);
}

struct BlockCost {
  std::size_t block = 0;
  BlockKind kind = BlockKind::Standard;
  Shape input;
  Shape output;
  Count macs = 0;
  Count params = 0;
  Count bytes = 0;
};

struct CostReport {
  std::vector<BlockCost> per_block;
  Count total_macs = 0;
  Count total_params = 0;
  Count total_bytes = 0;
};

/// Parameters a block of this geometry stores (conv kernels and biases,
/// batchnorm gamma/beta/mean/var).
inline Count block_param_count(const BlockSpec& b) {
  using detail::product;
  const Count in = b.in_channels;
  const Count out = b.out_channels;
  const Count mid = b.internal_channels;
  switch (b.kind) {
    case BlockKind::Initial: return product(9, in, out - in) + (out - in);
    case BlockKind::Downsample:
    case BlockKind::Standard:
      return product(in, mid) + mid + product(9, mid) + mid + product(mid, out) + out + 4 * out;
    case BlockKind::Upsample:
      return product(in, mid) + mid + product(9, mid, mid) + mid + product(mid, out) + out + 4 * out +
             product(in, out) + out;
    case BlockKind::LastConv: return product(9, in, out) + out;
  }
  return 0;
}

/// MACs of a block given its input and output shapes (per batch item x N).
///
/// Strided or transposed kernels are charged per kernel application: the
/// output grid for strided convs, the input grid for transposed convs.
inline Count block_macs(const BlockSpec& b, const Shape& in, const Shape& out) {
  const Count n = in.n;
  const Count mid = b.internal_channels;
  Count per_item = 0;
  switch (b.kind) {
    case BlockKind::Initial:
      per_item = standard_conv_cost(3, b.in_channels, b.out_channels - b.in_channels, out.h, out.w);
      break;
    case BlockKind::Downsample:
    case BlockKind::Standard:
      per_item = detail::checked_add(standard_conv_cost(1, b.in_channels, mid, in.h, in.w),
                                     separable_conv_cost(3, mid, b.out_channels, out.h, out.w));
      break;
    case BlockKind::Upsample:
      per_item = standard_conv_cost(1, b.in_channels, mid, in.h, in.w);
      per_item = detail::checked_add(per_item, standard_conv_cost(3, mid, mid, in.h, in.w));
      per_item = detail::checked_add(per_item, standard_conv_cost(1, mid, b.out_channels, out.h, out.w));
      per_item = detail::checked_add(per_item, standard_conv_cost(1, b.in_channels, b.out_channels, in.h, in.w));
      break;
    case BlockKind::LastConv:
      per_item = standard_conv_cost(3, b.in_channels, b.out_channels, in.h, in.w);
      break;
  }
  return detail::checked_mul(per_item, n);
}

inline CostReport network_cost_report(const NetworkSpec& spec, const Shape& input) {
  const std::vector<TraceRow> trace = shape_trace(spec, input);
  CostReport r;
  for (const TraceRow& row : trace) {
    const BlockSpec& b = spec.blocks[row.block - 1];
    BlockCost c{row.block, row.kind, row.input, row.output, block_macs(b, row.input, row.output),
                block_param_count(b), 0};
    c.bytes = detail::checked_mul(c.params, 4);
    r.total_macs = detail::checked_add(r.total_macs, c.macs);
    r.total_params = detail::checked_add(r.total_params, c.params);
    r.total_bytes = detail::checked_add(r.total_bytes, c.bytes);
    r.per_block.push_back(c);
  }
  return r;
}

// "512x256x16": width x height x channels, matching the architecture listing.
inline std::string size_label(const Shape& s) {
  return std::to_string(s.w) + "x" + std::to_string(s.h) + "x" + std::to_string(s.c);
}

inline nlohmann::json to_json(const CostReport& r) {
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& b : r.per_block) {
    blocks.push_back({{"block", b.block},
                      {"type", to_string(b.kind)},
                      {"input", size_label(b.input)},
                      {"output", size_label(b.output)},
                      {"macs", b.macs},
                      {"params", b.params},
                      {"bytes", b.bytes}});
  }
  return {{"per_block", blocks},
          {"totals", {{"macs", r.total_macs}, {"params", r.total_params}, {"bytes", r.total_bytes}}}};
}

inline std::string to_table(const CostReport& r) {
  std::ostringstream os;
  os << std::left << std::setw(6) << "Block" << std::setw(12) << "Type" << std::setw(16) << "Input"
     << std::setw(16) << "Output" << std::right << std::setw(14) << "MACs" << std::setw(10)
     << "Params" << std::setw(10) << "Bytes" << '\n';
  for (const auto& b : r.per_block) {
    os << std::left << std::setw(6) << b.block << std::setw(12) << to_string(b.kind) << std::setw(16)
       << size_label(b.input) << std::setw(16) << size_label(b.output) << std::right << std::setw(14)
       << b.macs << std::setw(10) << b.params << std::setw(10) << b.bytes << '\n';
  }
  os << std::left << std::setw(50) << "Total" << std::right << std::setw(14) << r.total_macs
     << std::setw(10) << r.total_params << std::setw(10) << r.total_bytes << '\n';
  return os.str();
}

}  // namespace navseg
