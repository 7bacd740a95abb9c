#pragma once

// Building blocks of the navigable-space segmentation network and the
// 30-block encoder-decoder assembled from them.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <random>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "navseg/autograd.hpp"
#include "navseg/error.hpp"
#include "navseg/kernels.hpp"
#include "navseg/tensor.hpp"

namespace navseg {

enum class BlockKind : std::uint8_t { Initial = 0, Downsample = 1, Standard = 2, Upsample = 3, LastConv = 4 };

inline const char* to_string(BlockKind k) {
  switch (k) {
    case BlockKind::Initial: return "Initial";
    case BlockKind::Downsample: return "Downsample";
    case BlockKind::Standard: return "Standard";
    case BlockKind::Upsample: return "Upsample";
    case BlockKind::LastConv: return "LastConv";
  }
  return "?";
}

enum class Variant { full, pruned };

inline const char* to_string(Variant v) { return v == Variant::full ? "full" : "pruned"; }

inline Variant parse_variant(const std::string& s) {
  if (s == "full") return Variant::full;
  if (s == "pruned") return Variant::pruned;
  throw std::invalid_argument("unknown variant '" + s + "' (expected full or pruned)");
}

/// Declarative description of one block.
///
/// internal_channels is the projection width for Downsample/Standard/Upsample,
/// the conv-branch filter count (out - in) for Initial, and the class count
/// for LastConv.
struct BlockSpec {
  BlockKind kind = BlockKind::Standard;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t internal_channels = 0;

  // Projection width: a quarter of the output width, at least 8.
  static std::size_t default_internal(std::size_t out) { return std::max<std::size_t>(out / 4, 8); }

  bool operator==(const BlockSpec&) const = default;
};

inline BlockSpec initial_spec(std::size_t in, std::size_t out) {
  return {BlockKind::Initial, in, out, out > in ? out - in : 0};
}
inline BlockSpec downsample_spec(std::size_t in, std::size_t out) {
  return {BlockKind::Downsample, in, out, BlockSpec::default_internal(out)};
}
inline BlockSpec standard_spec(std::size_t ch) {
  return {BlockKind::Standard, ch, ch, BlockSpec::default_internal(ch)};
}
inline BlockSpec upsample_spec(std::size_t in, std::size_t out) {
  return {BlockKind::Upsample, in, out, BlockSpec::default_internal(out)};
}
inline BlockSpec lastconv_spec(std::size_t in, std::size_t classes) {
  return {BlockKind::LastConv, in, classes, classes};
}

inline void validate_block(const BlockSpec& b, std::size_t index) {
  const std::string where = "block " + std::to_string(index) + " (" + to_string(b.kind) + ")";
  if (b.in_channels == 0 || b.out_channels == 0 || b.internal_channels == 0) {
    throw ShapeError(where + ": channel counts must be positive");
  }
  switch (b.kind) {
    case BlockKind::Initial:
      if (b.out_channels <= b.in_channels) {
        throw ShapeError(where + ": out_ch " + std::to_string(b.out_channels) +
                         " must exceed in_ch " + std::to_string(b.in_channels) +
                         " (conv branch needs out-in > 0 filters)");
      }
      if (b.internal_channels != b.out_channels - b.in_channels) {
        throw ShapeError(where + ": conv branch width must be out_ch - in_ch");
      }
      break;
    case BlockKind::Standard:
      if (b.in_channels != b.out_channels) {
        throw ShapeError(where + ": Standard blocks preserve channels, got " +
                         std::to_string(b.in_channels) + " -> " + std::to_string(b.out_channels));
      }
      [[fallthrough]];
    case BlockKind::Downsample:
      if (b.out_channels < b.in_channels) {
        throw ShapeError(where + ": Downsample cannot reduce channels");
      }
      if (b.internal_channels > b.out_channels) throw ShapeError(where + ": internal_ch exceeds out_ch");
      break;
    case BlockKind::Upsample:
      if (b.in_channels < b.out_channels) {
        throw ShapeError(where + ": Upsample requires in_ch >= out_ch");
      }
      if (b.internal_channels > b.out_channels) throw ShapeError(where + ": internal_ch exceeds out_ch");
      break;
    case BlockKind::LastConv:
      if (b.internal_channels != b.out_channels) throw ShapeError(where + ": class count mismatch");
      break;
  }
}

/// Ordered block list plus the class count.
struct NetworkSpec {
  std::vector<BlockSpec> blocks;
  std::size_t num_classes = 2;
  Variant variant = Variant::full;

  void validate() const {
    if (blocks.empty()) throw ShapeError("network spec has no blocks");
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      validate_block(blocks[i], i + 1);
      if (i > 0 && blocks[i].in_channels != blocks[i - 1].out_channels) {
        throw ShapeError("block " + std::to_string(i + 1) + ": in_ch " +
                         std::to_string(blocks[i].in_channels) + " does not match block " +
                         std::to_string(i) + " out_ch " + std::to_string(blocks[i - 1].out_channels));
      }
      if (blocks[i].kind == BlockKind::LastConv && i + 1 != blocks.size()) {
        throw ShapeError("block " + std::to_string(i + 1) + ": LastConv must be the final block");
      }
    }
    if (blocks.back().out_channels != num_classes) {
      throw ShapeError("final block emits " + std::to_string(blocks.back().out_channels) +
                       " channels, expected num_classes=" + std::to_string(num_classes));
    }
  }

  // Input H and W must be multiples of this.
  std::size_t required_divisor() const {
    std::size_t d = 1;
    for (const auto& b : blocks) {
      if (b.kind == BlockKind::Initial || b.kind == BlockKind::Downsample) d *= 2;
    }
    return d;
  }

  bool operator==(const NetworkSpec&) const = default;
};

/// The 30-block architecture. The pruned variant runs the bottleneck
/// (blocks 7-24) at 64 channels instead of 128.
inline NetworkSpec table_spec(Variant variant) {
  const std::size_t wide = variant == Variant::full ? 128 : 64;
  NetworkSpec s;
  s.variant = variant;
  s.num_classes = 2;
  s.blocks.push_back(initial_spec(3, 16));
  s.blocks.push_back(downsample_spec(16, 64));
  for (int i = 0; i < 4; ++i) s.blocks.push_back(standard_spec(64));
  s.blocks.push_back(downsample_spec(64, wide));
  for (int i = 0; i < 17; ++i) s.blocks.push_back(standard_spec(wide));
  s.blocks.push_back(upsample_spec(wide, 64));
  for (int i = 0; i < 2; ++i) s.blocks.push_back(standard_spec(64));
  s.blocks.push_back(upsample_spec(64, 16));
  s.blocks.push_back(standard_spec(16));
  s.blocks.push_back(lastconv_spec(16, 2));
  return s;
}

struct TraceRow {
  std::size_t block = 0;  // 1-based
  BlockKind kind = BlockKind::Standard;
  Shape input;
  Shape output;

  bool operator==(const TraceRow&) const = default;
};

inline Shape block_output_shape(const BlockSpec& b, const Shape& in, std::size_t index) {
  const std::string where = "block " + std::to_string(index) + " (" + to_string(b.kind) + ")";
  if (in.c != b.in_channels) {
    throw ShapeError(where + ": expects " + std::to_string(b.in_channels) + " input channels, got " +
                     std::to_string(in.c));
  }
  switch (b.kind) {
    case BlockKind::Initial:
    case BlockKind::Downsample:
      if (in.h % 2 != 0 || in.w % 2 != 0) {
        throw ShapeError(where + ": spatial dims " + std::to_string(in.h) + "x" +
                         std::to_string(in.w) + " must be even to downsample");
      }
      return {in.n, b.out_channels, in.h / 2, in.w / 2};
    case BlockKind::Standard: return in;
    case BlockKind::Upsample:
    case BlockKind::LastConv: return {in.n, b.out_channels, in.h * 2, in.w * 2};
  }
  return in;
}

/// Per-block output shapes, computed without touching any weights.
inline std::vector<TraceRow> shape_trace(const NetworkSpec& spec, const Shape& input) {
  spec.validate();
  std::vector<TraceRow> rows;
  Shape cur = input;
  for (std::size_t i = 0; i < spec.blocks.size(); ++i) {
    const Shape out = block_output_shape(spec.blocks[i], cur, i + 1);
    rows.push_back({i + 1, spec.blocks[i].kind, cur, out});
    cur = out;
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Concrete layers

template <class T>
struct ConvLayer {
  ConvKind kind = ConvKind::standard;
  std::size_t in_ch = 0;
  std::size_t out_ch = 0;
  std::size_t k = 1;
  std::size_t stride = 1;
  std::size_t pad = 0;
  Var<T> weight;  // (out, in, k, k); depthwise (ch, 1, k, k)
  Var<T> bias;    // (1, out, 1, 1)

  Var<T> forward(const Var<T>& x) const { return conv(x, weight, bias, kind, stride, pad); }

  ConvWeights<T> weights() const {
    return {kind, weight.value(), bias.value().vec(), stride, pad};
  }

  std::size_t param_count() const { return weight.value().size() + bias.value().size(); }
};

template <class T>
struct BatchNormLayer {
  std::size_t channels = 0;
  Var<T> gamma, beta;  // (1, C, 1, 1)
  std::vector<T> running_mean, running_var;
  T eps = T(1e-5);
  T momentum = T(0.9);

  Var<T> forward(const Var<T>& x, BnMode mode) {
    return batchnorm(x, gamma, beta, running_mean, running_var, eps, mode, momentum);
  }

  // Read-only path; train mode needs the mutable overload.
  Var<T> forward(const Var<T>& x, BnMode mode) const {
    if (mode == BnMode::train) throw std::logic_error("batchnorm: train mode on a const layer");
    std::vector<T> mean = running_mean;
    std::vector<T> var = running_var;
    return batchnorm(x, gamma, beta, mean, var, eps, BnMode::infer, momentum);
  }

  BatchNormParams<T> params() const {
    return {gamma.value().vec(), beta.value().vec(), running_mean, running_var, eps};
  }

  // gamma, beta, running mean and running variance
  std::size_t param_count() const { return 4 * channels; }
};

// Uniform in +-sqrt(6 / fan_in); zero bias.
template <class T>
ConvLayer<T> make_conv(ConvKind kind, std::size_t in_ch, std::size_t out_ch, std::size_t k,
                       std::size_t stride, std::size_t pad, std::mt19937_64& rng) {
  ConvLayer<T> layer{kind, in_ch, out_ch, k, stride, pad, {}, {}};
  const std::size_t taps_c = kind == ConvKind::depthwise ? 1 : in_ch;
  const double bound = std::sqrt(6.0 / static_cast<double>(taps_c * k * k));
  layer.weight = Var<T>::parameter(random_tensor<T>({out_ch, taps_c, k, k}, rng, -bound, bound));
  layer.bias = Var<T>::parameter(Tensor<T>::zeros({1, out_ch, 1, 1}));
  return layer;
}

template <class T>
BatchNormLayer<T> make_batchnorm(std::size_t channels) {
  BatchNormLayer<T> bn;
  bn.channels = channels;
  bn.gamma = Var<T>::parameter(Tensor<T>({1, channels, 1, 1}, T(1)));
  bn.beta = Var<T>::parameter(Tensor<T>::zeros({1, channels, 1, 1}));
  bn.running_mean.assign(channels, T(0));
  bn.running_var.assign(channels, T(1));
  return bn;
}

// ---------------------------------------------------------------------------
// Blocks

/// concat(conv3x3/s2(x), maxpool(x))
template <class T>
struct InitialBlock {
  ConvLayer<T> conv;
  std::size_t in_ch = 0;

  template <class Self>
  static Var<T> run(Self& self, const Var<T>& x, BnMode) {
    return concat(self.conv.forward(x), maxpool(x));
  }
};

/// Branch A: 1x1 projection, relu, 3x3 depthwise (stride 2 when downsampling),
/// 1x1 expansion, batchnorm. Branch B: identity, or maxpool followed by the
/// channel map `shortcut`. Output relu(A + B).
template <class T>
struct FactorizedBlock {
  bool downsample = false;
  ConvLayer<T> project, depthwise, expand;
  BatchNormLayer<T> bn;
  // Downsample only: output channel k takes input channel shortcut[k], or zero when negative.
  std::vector<std::int32_t> shortcut;

  template <class Self>
  static Var<T> run(Self& self, const Var<T>& x, BnMode mode) {
    Var<T> a = self.project.forward(x);
    a = relu(a);
    a = self.depthwise.forward(a);
    a = self.expand.forward(a);
    a = self.bn.forward(a, mode);
    Var<T> b = self.downsample ? remap(maxpool(x), self.shortcut) : x;
    return relu(add(a, b));
  }
};

/// Branch A: 1x1 projection, 3x3 stride-2 transposed conv, 1x1 expansion,
/// batchnorm. Branch B: 1x1 conv then nearest 2x upsampling. Output relu(A + B).
template <class T>
struct UpsampleBlock {
  ConvLayer<T> project, transposed, expand;
  BatchNormLayer<T> bn;
  ConvLayer<T> shortcut;

  template <class Self>
  static Var<T> run(Self& self, const Var<T>& x, BnMode mode) {
    Var<T> a = self.project.forward(x);
    a = self.transposed.forward(a);
    a = self.expand.forward(a);
    a = self.bn.forward(a, mode);
    Var<T> b = upsample2x(self.shortcut.forward(x));
    return relu(add(a, b));
  }
};

/// Single 3x3 stride-2 transposed conv emitting class logits.
template <class T>
struct LastConvBlock {
  ConvLayer<T> transposed;

  template <class Self>
  static Var<T> run(Self& self, const Var<T>& x, BnMode) {
    return self.transposed.forward(x);
  }
};

template <class T>
using Block = std::variant<InitialBlock<T>, FactorizedBlock<T>, UpsampleBlock<T>, LastConvBlock<T>>;

template <class T>
Block<T> build_initial_block(std::size_t in_ch, std::size_t out_ch, std::mt19937_64& rng) {
  validate_block(initial_spec(in_ch, out_ch), 1);
  return InitialBlock<T>{make_conv<T>(ConvKind::standard, in_ch, out_ch - in_ch, 3, 2, 1, rng), in_ch};
}

template <class T>
Block<T> build_factorized_block(BlockKind kind, std::size_t in_ch, std::size_t out_ch,
                                std::size_t internal_ch, std::mt19937_64& rng) {
  if (kind != BlockKind::Standard && kind != BlockKind::Downsample) {
    throw ShapeError("build_factorized_block: kind must be Standard or Downsample");
  }
  validate_block({kind, in_ch, out_ch, internal_ch}, 0);
  const bool down = kind == BlockKind::Downsample;
  FactorizedBlock<T> b;
  b.downsample = down;
  b.project = make_conv<T>(ConvKind::pointwise, in_ch, internal_ch, 1, 1, 0, rng);
  b.depthwise = make_conv<T>(ConvKind::depthwise, internal_ch, internal_ch, 3, down ? 2 : 1, 1, rng);
  b.expand = make_conv<T>(ConvKind::pointwise, internal_ch, out_ch, 1, 1, 0, rng);
  b.bn = make_batchnorm<T>(out_ch);
  if (down) {
    for (std::size_t k = 0; k < out_ch; ++k) {
      b.shortcut.push_back(k < in_ch ? static_cast<std::int32_t>(k) : -1);
    }
  }
  return b;
}

template <class T>
Block<T> build_upsample_block(std::size_t in_ch, std::size_t out_ch, std::size_t internal_ch,
                              std::mt19937_64& rng) {
  validate_block({BlockKind::Upsample, in_ch, out_ch, internal_ch}, 0);
  UpsampleBlock<T> b;
  b.project = make_conv<T>(ConvKind::pointwise, in_ch, internal_ch, 1, 1, 0, rng);
  b.transposed = make_conv<T>(ConvKind::transposed, internal_ch, internal_ch, 3, 2, 1, rng);
  b.expand = make_conv<T>(ConvKind::pointwise, internal_ch, out_ch, 1, 1, 0, rng);
  b.bn = make_batchnorm<T>(out_ch);
  b.shortcut = make_conv<T>(ConvKind::pointwise, in_ch, out_ch, 1, 1, 0, rng);
  return b;
}

template <class T>
Block<T> build_lastconv(std::size_t in_ch, std::size_t num_classes, std::mt19937_64& rng) {
  return LastConvBlock<T>{make_conv<T>(ConvKind::transposed, in_ch, num_classes, 3, 2, 1, rng)};
}

template <class T>
Block<T> build_block(const BlockSpec& s, std::mt19937_64& rng) {
  switch (s.kind) {
    case BlockKind::Initial: return build_initial_block<T>(s.in_channels, s.out_channels, rng);
    case BlockKind::Downsample:
    case BlockKind::Standard:
      return build_factorized_block<T>(s.kind, s.in_channels, s.out_channels, s.internal_channels, rng);
    case BlockKind::Upsample:
      return build_upsample_block<T>(s.in_channels, s.out_channels, s.internal_channels, rng);
    case BlockKind::LastConv: return build_lastconv<T>(s.in_channels, s.out_channels, rng);
  }
  throw ShapeError("unknown block kind");
}

// Spec recovered from the concrete layer geometry.
template <class T>
BlockSpec block_spec(const Block<T>& block) {
  return std::visit(
      [](const auto& b) -> BlockSpec {
        using B = std::decay_t<decltype(b)>;
        if constexpr (std::is_same_v<B, InitialBlock<T>>) {
          return {BlockKind::Initial, b.in_ch, b.in_ch + b.conv.out_ch, b.conv.out_ch};
        } else if constexpr (std::is_same_v<B, FactorizedBlock<T>>) {
          return {b.downsample ? BlockKind::Downsample : BlockKind::Standard, b.project.in_ch,
                  b.expand.out_ch, b.project.out_ch};
        } else if constexpr (std::is_same_v<B, UpsampleBlock<T>>) {
          return {BlockKind::Upsample, b.project.in_ch, b.expand.out_ch, b.project.out_ch};
        } else {
          return {BlockKind::LastConv, b.transposed.in_ch, b.transposed.out_ch, b.transposed.out_ch};
        }
      },
      block);
}

// ---------------------------------------------------------------------------
// Layer registry: a flat, stable enumeration of every prunable/serializable
// layer, in block order.

enum class LayerRole : std::uint8_t {
  initial_conv,
  project,
  depthwise,
  expand,
  batchnorm,
  shortcut_map,
  upsample_conv,
  shortcut_conv,
  last_conv,
};

inline const char* to_string(LayerRole r) {
  switch (r) {
    case LayerRole::initial_conv: return "conv";
    case LayerRole::project: return "project";
    case LayerRole::depthwise: return "depthwise";
    case LayerRole::expand: return "expand";
    case LayerRole::batchnorm: return "bn";
    case LayerRole::shortcut_map: return "shortcut_map";
    case LayerRole::upsample_conv: return "tconv";
    case LayerRole::shortcut_conv: return "shortcut";
    case LayerRole::last_conv: return "tconv";
  }
  return "?";
}

template <class T, bool Const>
struct LayerHandleT {
  using ConvPtr = std::conditional_t<Const, const ConvLayer<T>*, ConvLayer<T>*>;
  using BnPtr = std::conditional_t<Const, const BatchNormLayer<T>*, BatchNormLayer<T>*>;
  using MapPtr = std::conditional_t<Const, const std::vector<std::int32_t>*, std::vector<std::int32_t>*>;

  std::size_t id = 0;
  std::size_t block = 0;  // 1-based
  LayerRole role = LayerRole::project;
  ConvPtr conv = nullptr;
  BnPtr bn = nullptr;
  MapPtr map = nullptr;

  std::string name() const {
    char buf[16];
    std::snprintf(buf, sizeof buf, "b%02zu.", block);
    return buf + std::string(to_string(role));
  }
  std::size_t out_width() const {
    if (conv) return conv->out_ch;
    if (bn) return bn->channels;
    return map->size();
  }
  std::size_t in_width() const {
    if (conv) return conv->in_ch;
    if (bn) return bn->channels;
    return 0;  // shortcut maps: input width is the block's input
  }
};

template <class T>
using LayerHandle = LayerHandleT<T, false>;
template <class T>
using ConstLayerHandle = LayerHandleT<T, true>;

struct NetworkMeta {
  std::string name = "navseg";
  std::uint64_t seed = 0;
  std::vector<std::string> prune_history;
};

/// A built, weighted model.
template <class T>
class Network {
 public:
  NetworkSpec spec;
  std::vector<Block<T>> blocks;
  NetworkMeta meta;

  /// Inference-mode forward pass returning logits (N, classes, H, W).
  Tensor<T> forward(const Tensor<T>& input, std::vector<Shape>* trace = nullptr) const {
    check_input(input.shape());
    NoGradGuard no_grad;
    return run(*this, Var<T>::constant(input), BnMode::infer, trace).value();
  }

  /// Differentiable forward pass. Train mode uses and updates batch statistics.
  Var<T> forward(const Var<T>& input, BnMode mode, std::vector<Shape>* trace = nullptr) {
    check_input(input.shape());
    return run(*this, input, mode, trace);
  }

  void check_input(const Shape& s) const {
    const std::size_t in_ch = spec.blocks.front().in_channels;
    if (s.c != in_ch) {
      throw ShapeError("network input must have " + std::to_string(in_ch) + " channels, got " +
                       std::to_string(s.c));
    }
    const std::size_t d = spec.required_divisor();
    if (s.h % d != 0 || s.w % d != 0) {
      throw ShapeError("network input H and W must be divisible by " + std::to_string(d) + ", got " +
                       std::to_string(s.h) + "x" + std::to_string(s.w));
    }
  }

  template <class Fn>
  void for_each_layer(Fn&& fn) {
    visit_layers<false>(*this, fn);
  }
  template <class Fn>
  void for_each_layer(Fn&& fn) const {
    visit_layers<true>(*this, fn);
  }

  std::vector<LayerHandle<T>> layers() {
    std::vector<LayerHandle<T>> out;
    for_each_layer([&](const LayerHandle<T>& h) { out.push_back(h); });
    return out;
  }
  std::vector<ConstLayerHandle<T>> layers() const {
    std::vector<ConstLayerHandle<T>> out;
    for_each_layer([&](const ConstLayerHandle<T>& h) { out.push_back(h); });
    return out;
  }

  /// Trainable tensors (conv weights/biases, batchnorm gamma/beta) in layer order.
  std::vector<Var<T>> parameters() const {
    std::vector<Var<T>> out;
    for_each_layer([&](const ConstLayerHandle<T>& h) {
      if (h.conv) {
        out.push_back(h.conv->weight);
        out.push_back(h.conv->bias);
      } else if (h.bn) {
        out.push_back(h.bn->gamma);
        out.push_back(h.bn->beta);
      }
    });
    return out;
  }

  /// Stored scalars, including batchnorm running statistics.
  std::size_t param_count() const {
    std::size_t total = 0;
    for_each_layer([&](const ConstLayerHandle<T>& h) {
      if (h.conv) total += h.conv->param_count();
      if (h.bn) total += h.bn->param_count();
    });
    return total;
  }

  /// Copy with its own weight storage. Plain copies share parameter handles.
  Network clone() const {
    Network out = *this;
    out.for_each_layer([](const LayerHandle<T>& h) {
      if (h.conv) {
        h.conv->weight = Var<T>::parameter(h.conv->weight.value());
        h.conv->bias = Var<T>::parameter(h.conv->bias.value());
      } else if (h.bn) {
        h.bn->gamma = Var<T>::parameter(h.bn->gamma.value());
        h.bn->beta = Var<T>::parameter(h.bn->beta.value());
      }
    });
    return out;
  }

  // Re-derives spec.blocks from layer geometry (after structural edits).
  void refresh_spec() {
    for (std::size_t i = 0; i < blocks.size(); ++i) spec.blocks[i] = block_spec<T>(blocks[i]);
  }

 private:
  template <class Self>
  static Var<T> run(Self& self, Var<T> x, BnMode mode, std::vector<Shape>* trace) {
    for (auto& block : self.blocks) {
      x = std::visit([&](auto& b) { return std::decay_t<decltype(b)>::run(b, x, mode); }, block);
      if (trace) trace->push_back(x.shape());
    }
    return x;
  }

  template <bool Const, class Self, class Fn>
  static void visit_layers(Self& self, Fn& fn) {
    using H = LayerHandleT<T, Const>;
    std::size_t id = 0;
    for (std::size_t i = 0; i < self.blocks.size(); ++i) {
      const std::size_t blk = i + 1;
      auto conv = [&](auto& layer, LayerRole role) { fn(H{id++, blk, role, &layer, nullptr, nullptr}); };
      auto bn = [&](auto& layer) { fn(H{id++, blk, LayerRole::batchnorm, nullptr, &layer, nullptr}); };
      std::visit(
          [&](auto& b) {
            using B = std::decay_t<decltype(b)>;
            if constexpr (std::is_same_v<B, InitialBlock<T>>) {
              conv(b.conv, LayerRole::initial_conv);
            } else if constexpr (std::is_same_v<B, FactorizedBlock<T>>) {
              conv(b.project, LayerRole::project);
              conv(b.depthwise, LayerRole::depthwise);
              conv(b.expand, LayerRole::expand);
              bn(b.bn);
              if (b.downsample) fn(H{id++, blk, LayerRole::shortcut_map, nullptr, nullptr, &b.shortcut});
            } else if constexpr (std::is_same_v<B, UpsampleBlock<T>>) {
              conv(b.project, LayerRole::project);
              conv(b.transposed, LayerRole::upsample_conv);
              conv(b.expand, LayerRole::expand);
              bn(b.bn);
              conv(b.shortcut, LayerRole::shortcut_conv);
            } else {
              conv(b.transposed, LayerRole::last_conv);
            }
          },
          self.blocks[i]);
    }
  }
};

/// Builds and initialises a network for an arbitrary valid spec.
template <class T = float>
Network<T> build_network(const NetworkSpec& spec, std::uint64_t seed = 0) {
  spec.validate();
  Network<T> net;
  net.spec = spec;
  net.meta.seed = seed;
  std::mt19937_64 rng(seed);
  for (const auto& b : spec.blocks) net.blocks.push_back(build_block<T>(b, rng));
  return net;
}

template <class T = float>
Network<T> build_network(Variant variant, std::uint64_t seed = 0) {
  return build_network<T>(table_spec(variant), seed);
}

}  // namespace navseg
