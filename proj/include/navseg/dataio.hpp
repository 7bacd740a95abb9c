#pragma once

// Image and mask files, label remapping, the synthetic scene generator and the
// binary model format.

#include <zlib.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "navseg/blocks.hpp"
#include "navseg/error.hpp"
#include "navseg/tensor.hpp"

namespace navseg {

static_assert(std::endian::native == std::endian::little, "model files are written as native little-endian");

/// Row-major H x W byte mask.
struct Mask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> data;

  bool operator==(const Mask&) const = default;
};

/// One training example: image (1, 3, H, W) in [0, 1] and binary label mask.
struct Sample {
  Tensor<float> image;
  Mask label;
};

// ---------------------------------------------------------------------------
// PPM / PGM

namespace detail {

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

struct NetpbmHeader {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t payload_offset = 0;
};

// Parses "P5"/"P6" width height maxval, allowing '#' comments between tokens.
inline NetpbmHeader parse_netpbm(const std::vector<std::uint8_t>& bytes, char kind) {
  std::size_t pos = 0;
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != static_cast<std::uint8_t>(kind)) {
    throw FormatError(std::string("expected magic P") + kind, 0);
  }
  pos = 2;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&](const char* field) {
    skip_space();
    const std::size_t start = pos;
    std::size_t v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos] - '0');
      if (v > 1u << 24) throw FormatError(std::string(field) + " too large", start);
      ++pos;
    }
    if (pos == start) throw FormatError(std::string("missing or malformed ") + field, start);
    return std::pair{v, start};
  };
  NetpbmHeader h;
  auto [w, w_at] = number("width");
  auto [ht, h_at] = number("height");
  auto [maxval, m_at] = number("maxval");
  if (w == 0) throw FormatError("width must be positive", w_at);
  if (ht == 0) throw FormatError("height must be positive", h_at);
  if (maxval != 255) throw FormatError("unsupported maxval " + std::to_string(maxval) + " (only 255)", m_at);
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw FormatError("expected whitespace after maxval", pos);
  ++pos;
  h.width = w;
  h.height = ht;
  h.payload_offset = pos;
  const std::size_t channels = kind == '6' ? 3 : 1;
  const std::size_t need = w * ht * channels;
  if (bytes.size() - pos < need) {
    throw FormatError("truncated payload: need " + std::to_string(need) + " bytes, have " +
                          std::to_string(bytes.size() - pos),
                      bytes.size());
  }
  return h;
}

inline std::vector<std::uint8_t> netpbm_header(char kind, std::size_t w, std::size_t h) {
  const std::string s = std::string("P") + kind + "\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  return {s.begin(), s.end()};
}

}  // namespace detail

/// P6 bytes -> (1, 3, H, W), each sample divided by 255.
inline Tensor<float> decode_ppm(const std::vector<std::uint8_t>& bytes) {
  const auto h = detail::parse_netpbm(bytes, '6');
  Tensor<float> t({1, 3, h.height, h.width});
  const std::uint8_t* p = bytes.data() + h.payload_offset;
  for (std::size_t y = 0; y < h.height; ++y)
    for (std::size_t x = 0; x < h.width; ++x)
      for (std::size_t c = 0; c < 3; ++c) t(0, c, y, x) = static_cast<float>(*p++) / 255.0f;
  return t;
}

inline std::vector<std::uint8_t> encode_ppm(const Tensor<float>& image) {
  const Shape s = image.shape();
  if (s.n != 1 || s.c != 3) throw ShapeError("encode_ppm: expected (1,3,H,W), got " + s.str());
  auto out = detail::netpbm_header('6', s.w, s.h);
  for (std::size_t y = 0; y < s.h; ++y)
    for (std::size_t x = 0; x < s.w; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const float v = std::clamp(image(0, c, y, x), 0.0f, 1.0f);
        out.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0f)));
      }
  return out;
}

/// Raw P5 sample values.
inline Mask decode_pgm(const std::vector<std::uint8_t>& bytes) {
  const auto h = detail::parse_netpbm(bytes, '5');
  Mask m{h.height, h.width, {}};
  m.data.assign(bytes.begin() + static_cast<std::ptrdiff_t>(h.payload_offset),
                bytes.begin() + static_cast<std::ptrdiff_t>(h.payload_offset + h.width * h.height));
  return m;
}

inline std::vector<std::uint8_t> encode_pgm(const Mask& m) {
  auto out = detail::netpbm_header('5', m.width, m.height);
  out.insert(out.end(), m.data.begin(), m.data.end());
  return out;
}

inline Tensor<float> load_image(const std::filesystem::path& path) { return decode_ppm(detail::read_file(path)); }

inline void save_image(const std::filesystem::path& path, const Tensor<float>& image) {
  detail::write_file(path, encode_ppm(image));
}

/// Writes a binary mask as 0 / 255.
inline void save_mask(const std::filesystem::path& path, const Mask& mask) {
  Mask out = mask;
  for (auto& v : out.data) v = v ? 255 : 0;
  detail::write_file(path, encode_pgm(out));
}

/// Reads a 0 / 255 mask back to 0 / 1. Any other value is rejected.
inline Mask load_mask(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  const auto h = detail::parse_netpbm(bytes, '5');
  Mask m = decode_pgm(bytes);
  for (std::size_t i = 0; i < m.data.size(); ++i) {
    if (m.data[i] != 0 && m.data[i] != 255) {
      throw FormatError("mask value " + std::to_string(m.data[i]) + " is neither 0 nor 255",
                        h.payload_offset + i);
    }
    m.data[i] = m.data[i] ? 1 : 0;
  }
  return m;
}

// ---------------------------------------------------------------------------
// Label remapping

inline constexpr int kMaxLabelId = 33;

inline const std::set<int>& default_navigable_ids() {
  static const std::set<int> ids{6, 7, 8, 9, 10};  // ground, road, sidewalk, parking, rail track
  return ids;
}

/// Label ids -> 1 for navigable ids, 0 otherwise.
inline Mask remap_labels(const Mask& ids, const std::set<int>& navigable = default_navigable_ids()) {
  Mask out{ids.height, ids.width, std::vector<std::uint8_t>(ids.data.size())};
  for (std::size_t i = 0; i < ids.data.size(); ++i) {
    const int id = ids.data[i];
    if (id > kMaxLabelId) {
      throw std::out_of_range("label id " + std::to_string(id) + " at pixel " + std::to_string(i) +
                              " outside 0.." + std::to_string(kMaxLabelId));
    }
    out.data[i] = navigable.count(id) ? 1 : 0;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic scenes

/// Knobs for the procedural generator.
struct SynthParams {
  double horizon_min = 0.30;  // horizon row as a fraction of H
  double horizon_max = 0.60;
  int max_occluders = 3;
  double noise = 0.08;  // per-pixel uniform color jitter
  double min_class_fraction = 0.05;
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

using Rgb = std::array<double, 3>;

inline Rgb draw_color(std::mt19937_64& rng, const Rgb& lo, const Rgb& hi) {
  return {uniform(rng, lo[0], hi[0]), uniform(rng, lo[1], hi[1]), uniform(rng, lo[2], hi[2])};
}

// One scene attempt; returns false when a class falls below the minimum share.
inline bool synth_scene(std::mt19937_64& rng, std::size_t H, std::size_t W, const SynthParams& p, Sample& out) {
  // Palettes: brownish-gray floor, bluish backdrop, saturated red or blue obstacles.
  const Rgb floor_c = draw_color(rng, {0.45, 0.38, 0.22}, {0.62, 0.50, 0.32});
  const Rgb back_c = draw_color(rng, {0.20, 0.40, 0.65}, {0.40, 0.60, 0.90});
  const auto horizon = static_cast<std::size_t>(uniform(rng, p.horizon_min, p.horizon_max) * static_cast<double>(H));
  const double stripe_period = uniform(rng, 4.0, 10.0);

  std::vector<std::uint8_t> label(H * W, 0);
  std::vector<Rgb> color(H * W);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const bool floor = y >= horizon;
      label[y * W + x] = floor ? 1 : 0;
      Rgb c = floor ? floor_c : back_c;
      if (floor) {
        // faint texture so the floor is not a flat color
        const double t = 0.04 * std::sin(static_cast<double>(x + 2 * y) * 6.2831853 / stripe_period);
        for (double& v : c) v += t;
      }
      color[y * W + x] = c;
    }

  const int occluders = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(p.max_occluders) + 1));
  for (int k = 0; k < occluders; ++k) {
    const bool red = uniform01(rng) < 0.5;
    const Rgb oc = red ? draw_color(rng, {0.70, 0.05, 0.05}, {0.95, 0.25, 0.25})
                       : draw_color(rng, {0.05, 0.10, 0.55}, {0.25, 0.30, 0.85});
    const bool pole = uniform01(rng) < 0.4;
    const std::size_t bw = std::max<std::size_t>(1, static_cast<std::size_t>(uniform(rng, pole ? 0.03 : 0.10, pole ? 0.08 : 0.30) * W));
    const std::size_t bh = std::max<std::size_t>(1, static_cast<std::size_t>(uniform(rng, pole ? 0.30 : 0.10, pole ? 0.60 : 0.30) * H));
    const std::size_t x0 = uniform_index(rng, W - std::min(bw, W - 1));
    // bottom edge lands on the floor so the obstacle occludes navigable space
    const std::size_t bottom = horizon + 1 + uniform_index(rng, std::max<std::size_t>(1, H - horizon - 1));
    const std::size_t y0 = bottom > bh ? bottom - bh : 0;
    for (std::size_t y = y0; y < std::min(bottom, H); ++y)
      for (std::size_t x = x0; x < std::min(x0 + bw, W); ++x) {
        label[y * W + x] = 0;
        color[y * W + x] = oc;
      }
  }

  const auto positives = static_cast<std::size_t>(std::count(label.begin(), label.end(), 1));
  const double frac = static_cast<double>(positives) / static_cast<double>(H * W);
  if (frac < p.min_class_fraction || 1.0 - frac < p.min_class_fraction) return false;

  Tensor<float> image({1, 3, H, W});
  for (std::size_t i = 0; i < H * W; ++i)
    for (std::size_t c = 0; c < 3; ++c) {
      const double v = color[i][c] + uniform(rng, -p.noise, p.noise);
      image(0, c, i / W, i % W) = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  out.image = std::move(image);
  out.label = Mask{H, W, std::move(label)};
  return true;
}

}  // namespace detail

/// n scenes: floor below a random horizon (label 1), backdrop above and
/// box/pole obstacles standing on the floor (label 0). Sample i depends only on
/// (seed, i, H, W), so a shorter dataset is a prefix of a longer one.
inline std::vector<Sample> synth_dataset(std::size_t n, std::uint64_t seed, std::size_t H, std::size_t W,
                                         const SynthParams& params = {}) {
  if (H == 0 || W == 0 || H % 8 != 0 || W % 8 != 0) {
    throw ShapeError("synth_dataset: H and W must be positive multiples of 8, got " + std::to_string(H) + "x" +
                     std::to_string(W));
  }
  std::vector<Sample> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::mt19937_64 rng(detail::splitmix64(seed ^ detail::splitmix64(i)));
    while (!detail::synth_scene(rng, H, W, params, out[i])) {
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset directories: root/images/NNNN.ppm + root/labels/NNNN.pgm

inline std::string sample_stem(std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04zu", i);
  return buf;
}

inline void save_dataset(const std::filesystem::path& root, const std::vector<Sample>& samples) {
  std::filesystem::create_directories(root / "images");
  std::filesystem::create_directories(root / "labels");
  for (std::size_t i = 0; i < samples.size(); ++i) {
    save_image(root / "images" / (sample_stem(i) + ".ppm"), samples[i].image);
    save_mask(root / "labels" / (sample_stem(i) + ".pgm"), samples[i].label);
  }
}

/// Pairs images/<stem>.ppm with labels/<stem>.pgm, in stem order.
inline std::vector<Sample> load_dataset(const std::filesystem::path& root) {
  const auto images = root / "images";
  if (!std::filesystem::is_directory(images)) throw std::runtime_error("missing directory " + images.string());
  std::vector<std::string> stems;
  for (const auto& e : std::filesystem::directory_iterator(images)) {
    if (e.path().extension() == ".ppm") stems.push_back(e.path().stem().string());
  }
  std::sort(stems.begin(), stems.end());
  std::vector<Sample> out;
  for (const auto& stem : stems) {
    const auto label_path = root / "labels" / (stem + ".pgm");
    if (!std::filesystem::exists(label_path)) throw std::runtime_error("no label for image " + stem);
    Sample s{load_image(images / (stem + ".ppm")), load_mask(label_path)};
    if (s.label.height != s.image.shape().h || s.label.width != s.image.shape().w) {
      throw ShapeError("sample " + stem + ": image and label sizes differ");
    }
    out.push_back(std::move(s));
  }
  if (out.empty()) throw std::runtime_error("dataset " + root.string() + " has no images");
  return out;
}

// ---------------------------------------------------------------------------
// Model files
//
//   "LSEG" | version u16 | record count u32 | records | CRC32 u32
//   record: kind u8 | geometry 4 x u32 | payload
//
// All integers and floats little-endian. Record kinds and payloads:
//   0-3 conv (standard, depthwise, pointwise, transposed)
//       geometry (out, in, k, stride << 16 | pad), payload weight then bias as f32
//   4   batchnorm: geometry (C, 0, 0, 0), payload gamma, beta, mean, var, eps, momentum as f32
//   5   block header: geometry (block kind, in, out, internal), payload the
//       shortcut channel map as f32 (out entries for Downsample, none otherwise)
//   6   metadata: geometry (classes, variant, byte length, 0), payload UTF-8 JSON
//       {name, seed, prune_history}
//
// Layout: metadata, then per block its header followed by its layers in
// registry order (shortcut maps live in the header, not as records).

inline constexpr std::uint16_t kModelVersion = 1;
inline constexpr std::size_t kRecordHeaderBytes = 1 + 4 * 4;
inline constexpr std::size_t kFileHeaderBytes = 4 + 2 + 4;
inline constexpr std::size_t kCrcBytes = 4;

enum class RecordKind : std::uint8_t { batchnorm = 4, block = 5, metadata = 6 };

namespace detail {

class Writer {
 public:
  template <class U>
  void put(U v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes.insert(bytes.end(), p, p + sizeof(U));
  }
  void put_floats(std::span<const float> v) {
    for (float f : v) put(f);
  }
  void record(std::uint8_t kind, std::array<std::uint32_t, 4> g) {
    put(kind);
    for (auto x : g) put(x);
  }
  std::vector<std::uint8_t> bytes;
};

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& b, std::size_t end) : bytes_(b), end_(end) {}
  template <class U>
  U get() {
    need(sizeof(U));
    U v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }
  std::vector<float> floats(std::size_t n) {
    need(n * 4);
    std::vector<float> v(n);
    std::memcpy(v.data(), bytes_.data() + pos_, n * 4);
    pos_ += n * 4;
    return v;
  }
  std::string text(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void skip(std::size_t n) {
    need(n);
    pos_ += n;
  }
  std::size_t pos() const { return pos_; }
  void seek(std::size_t p) { pos_ = p; }

 private:
  void need(std::size_t n) const {
    if (end_ - pos_ < n) throw FormatError("truncated model file", pos_);
  }
  const std::vector<std::uint8_t>& bytes_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc32_of(const std::uint8_t* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths
  while (n > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, data, chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

// Payload length in bytes implied by a record's kind and geometry.
inline std::size_t payload_bytes(std::uint8_t kind, const std::array<std::uint32_t, 4>& g, std::size_t at) {
  switch (kind) {
    case 0:
    case 2:
    case 3: return 4 * (std::size_t{g[0]} * g[1] * g[2] * g[2] + g[0]);
    case 1: return 4 * (std::size_t{g[0]} * g[2] * g[2] + g[0]);
    case 4: return 4 * (4 * std::size_t{g[0]} + 2);
    case 5: return g[0] == static_cast<std::uint32_t>(BlockKind::Downsample) ? 4 * std::size_t{g[2]} : 0;
    case 6: return g[2];
    default: throw FormatError("unknown record kind " + std::to_string(kind), at);
  }
}

}  // namespace detail

inline nlohmann::json meta_json(const NetworkMeta& m) {
  return {{"name", m.name}, {"seed", m.seed}, {"prune_history", m.prune_history}};
}

template <class T>
std::vector<std::uint8_t> serialize_model(const Network<T>& net) {
  detail::Writer w;
  w.bytes.insert(w.bytes.end(), {'L', 'S', 'E', 'G'});
  w.put(kModelVersion);
  const std::size_t count_at = w.bytes.size();
  w.put(std::uint32_t{0});
  std::uint32_t records = 0;

  const std::string meta = meta_json(net.meta).dump();
  w.record(static_cast<std::uint8_t>(RecordKind::metadata),
           {static_cast<std::uint32_t>(net.spec.num_classes), static_cast<std::uint32_t>(net.spec.variant),
            static_cast<std::uint32_t>(meta.size()), 0});
  w.bytes.insert(w.bytes.end(), meta.begin(), meta.end());
  ++records;

  const auto layers = net.layers();
  std::size_t li = 0;
  for (std::size_t b = 0; b < net.blocks.size(); ++b) {
    const BlockSpec s = block_spec<T>(net.blocks[b]);
    w.record(static_cast<std::uint8_t>(RecordKind::block),
             {static_cast<std::uint32_t>(s.kind), static_cast<std::uint32_t>(s.in_channels),
              static_cast<std::uint32_t>(s.out_channels), static_cast<std::uint32_t>(s.internal_channels)});
    ++records;
    if (const auto* fb = std::get_if<FactorizedBlock<T>>(&net.blocks[b]); fb && fb->downsample) {
      for (std::int32_t m : fb->shortcut) w.put(static_cast<float>(m));
    }
    for (; li < layers.size() && layers[li].block == b + 1; ++li) {
      const auto& h = layers[li];
      if (h.conv) {
        const auto& c = *h.conv;
        w.record(static_cast<std::uint8_t>(c.kind),
                 {static_cast<std::uint32_t>(c.out_ch), static_cast<std::uint32_t>(c.in_ch),
                  static_cast<std::uint32_t>(c.k), static_cast<std::uint32_t>(c.stride << 16 | c.pad)});
        w.put_floats(c.weight.value().template cast<float>().data());
        w.put_floats(c.bias.value().template cast<float>().data());
        ++records;
      } else if (h.bn) {
        const auto& n = *h.bn;
        w.record(static_cast<std::uint8_t>(RecordKind::batchnorm), {static_cast<std::uint32_t>(n.channels), 0, 0, 0});
        w.put_floats(n.gamma.value().template cast<float>().data());
        w.put_floats(n.beta.value().template cast<float>().data());
        for (T v : n.running_mean) w.put(static_cast<float>(v));
        for (T v : n.running_var) w.put(static_cast<float>(v));
        w.put(static_cast<float>(n.eps));
        w.put(static_cast<float>(n.momentum));
        ++records;
      }
    }
  }
  std::memcpy(w.bytes.data() + count_at, &records, 4);
  w.put(detail::crc32_of(w.bytes.data(), w.bytes.size()));
  return w.bytes;
}

/// Bytes a file for this network spends beyond model_size_bytes (4 per
/// counted parameter): file header, record headers, batchnorm eps/momentum,
/// shortcut maps, metadata JSON and the CRC.
template <class T>
std::size_t serialization_overhead(const Network<T>& net) {
  std::size_t bytes = kFileHeaderBytes + kCrcBytes;
  bytes += kRecordHeaderBytes + meta_json(net.meta).dump().size();
  for (const auto& b : net.blocks) {
    bytes += kRecordHeaderBytes;
    if (const auto* fb = std::get_if<FactorizedBlock<T>>(&b); fb && fb->downsample) bytes += 4 * fb->shortcut.size();
  }
  net.for_each_layer([&](const ConstLayerHandle<T>& h) {
    if (h.conv) bytes += kRecordHeaderBytes;
    if (h.bn) bytes += kRecordHeaderBytes + 8;
  });
  return bytes;
}

/// Parses a model file. Checks, in order: header length, magic, version,
/// record framing (truncation / trailing bytes), CRC, then record contents.
inline Network<float> deserialize_model(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < kFileHeaderBytes + kCrcBytes) throw FormatError("truncated model file: header incomplete", bytes.size());
  if (std::memcmp(bytes.data(), "LSEG", 4) != 0) throw FormatError("bad magic (expected LSEG)", 0);
  const std::size_t end = bytes.size() - kCrcBytes;
  detail::Reader r(bytes, end);
  r.skip(4);
  const auto version = r.get<std::uint16_t>();
  if (version != kModelVersion) {
    throw FormatError("unsupported model version " + std::to_string(version) + " (expected " +
                          std::to_string(kModelVersion) + ")",
                      4);
  }
  const auto count = r.get<std::uint32_t>();
  const std::size_t records_at = r.pos();

  // framing pass
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t at = r.pos();
    const auto kind = r.get<std::uint8_t>();
    std::array<std::uint32_t, 4> g{};
    for (auto& x : g) x = r.get<std::uint32_t>();
    r.skip(detail::payload_bytes(kind, g, at));
  }
  if (r.pos() != end) throw FormatError("unexpected trailing bytes after last record", r.pos());

  std::uint32_t stored_crc;
  std::memcpy(&stored_crc, bytes.data() + end, 4);
  if (detail::crc32_of(bytes.data(), end) != stored_crc) throw FormatError("CRC mismatch: file is corrupted", end);

  struct Rec {
    std::uint8_t kind;
    std::array<std::uint32_t, 4> g;
    std::size_t at;
    std::size_t payload_at;
  };
  std::vector<Rec> recs;
  r.seek(records_at);
  for (std::uint32_t i = 0; i < count; ++i) {
    Rec rec{};
    rec.at = r.pos();
    rec.kind = r.get<std::uint8_t>();
    for (auto& x : rec.g) x = r.get<std::uint32_t>();
    rec.payload_at = r.pos();
    r.skip(detail::payload_bytes(rec.kind, rec.g, rec.at));
    recs.push_back(rec);
  }
  if (recs.empty() || recs[0].kind != static_cast<std::uint8_t>(RecordKind::metadata)) {
    throw FormatError("first record must be metadata", records_at);
  }

  NetworkSpec spec;
  spec.num_classes = recs[0].g[0];
  if (recs[0].g[1] > 1) throw FormatError("unknown variant tag " + std::to_string(recs[0].g[1]), recs[0].at);
  spec.variant = static_cast<Variant>(recs[0].g[1]);
  NetworkMeta meta;
  {
    r.seek(recs[0].payload_at);
    try {
      const auto j = nlohmann::json::parse(r.text(recs[0].g[2]));
      meta.name = j.at("name").get<std::string>();
      meta.seed = j.at("seed").get<std::uint64_t>();
      meta.prune_history = j.at("prune_history").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("bad metadata: ") + e.what(), recs[0].payload_at);
    }
  }
  std::vector<std::size_t> block_recs;
  for (std::size_t i = 1; i < recs.size(); ++i) {
    if (recs[i].kind != static_cast<std::uint8_t>(RecordKind::block)) continue;
    const auto& g = recs[i].g;
    if (g[0] > static_cast<std::uint32_t>(BlockKind::LastConv)) throw FormatError("unknown block kind", recs[i].at);
    spec.blocks.push_back({static_cast<BlockKind>(g[0]), g[1], g[2], g[3]});
    block_recs.push_back(i);
  }
  try {
    spec.validate();
  } catch (const ShapeError& e) {
    throw FormatError(std::string("invalid architecture: ") + e.what(), records_at);
  }

  Network<float> net = build_network<float>(spec, 0);
  net.meta = meta;
  // shortcut maps from block headers
  for (std::size_t b = 0; b < net.blocks.size(); ++b) {
    if (auto* fb = std::get_if<FactorizedBlock<float>>(&net.blocks[b]); fb && fb->downsample) {
      const Rec& rec = recs[block_recs[b]];
      r.seek(rec.payload_at);
      const auto vals = r.floats(rec.g[2]);
      for (std::size_t k = 0; k < vals.size(); ++k) {
        const float v = vals[k];
        if (v != std::floor(v) || v < -1.0f || v >= static_cast<float>(rec.g[1])) {
          throw FormatError("shortcut map entry out of range", rec.payload_at + 4 * k);
        }
        fb->shortcut[k] = static_cast<std::int32_t>(v);
      }
    }
  }
  // layer records, in registry order
  std::size_t next = 1;
  auto next_layer_record = [&]() -> const Rec& {
    while (next < recs.size() && recs[next].kind == static_cast<std::uint8_t>(RecordKind::block)) ++next;
    if (next >= recs.size()) throw FormatError("missing layer record", end);
    return recs[next++];
  };
  for (const auto& h : net.layers()) {
    if (!h.conv && !h.bn) continue;
    const Rec& rec = next_layer_record();
    r.seek(rec.payload_at);
    const std::string where = "layer " + h.name();
    if (h.conv) {
      auto& c = *h.conv;
      const std::array<std::uint32_t, 4> want{static_cast<std::uint32_t>(c.out_ch), static_cast<std::uint32_t>(c.in_ch),
                                              static_cast<std::uint32_t>(c.k),
                                              static_cast<std::uint32_t>(c.stride << 16 | c.pad)};
      if (rec.kind != static_cast<std::uint8_t>(c.kind) || rec.g != want) {
        throw FormatError(where + ": record geometry does not match architecture", rec.at);
      }
      c.weight.mutable_value() = Tensor<float>(c.weight.shape(), r.floats(c.weight.value().size()));
      c.bias.mutable_value() = Tensor<float>(c.bias.shape(), r.floats(c.bias.value().size()));
    } else {
      auto& n = *h.bn;
      if (rec.kind != static_cast<std::uint8_t>(RecordKind::batchnorm) || rec.g[0] != n.channels) {
        throw FormatError(where + ": record geometry does not match architecture", rec.at);
      }
      n.gamma.mutable_value() = Tensor<float>(n.gamma.shape(), r.floats(n.channels));
      n.beta.mutable_value() = Tensor<float>(n.beta.shape(), r.floats(n.channels));
      n.running_mean = r.floats(n.channels);
      n.running_var = r.floats(n.channels);
      n.eps = r.get<float>();
      n.momentum = r.get<float>();
    }
  }
  while (next < recs.size() && recs[next].kind == static_cast<std::uint8_t>(RecordKind::block)) ++next;
  if (next != recs.size()) throw FormatError("unexpected extra layer record", recs[next].at);
  return net;
}

template <class T>
void save_model(const Network<T>& net, const std::filesystem::path& path) {
  detail::write_file(path, serialize_model(net));
}

inline Network<float> load_model(const std::filesystem::path& path) {
  return deserialize_model(detail::read_file(path));
}

// ---------------------------------------------------------------------------
// Config file

/// Settings read from a JSON config. Absent keys keep their defaults.
struct DataConfig {
  std::set<int> navigable_ids = default_navigable_ids();
  SynthParams synth;
};

inline DataConfig parse_data_config(const nlohmann::json& j) {
  DataConfig c;
  if (j.contains("navigable_ids")) {
    c.navigable_ids.clear();
    for (int id : j.at("navigable_ids").get<std::vector<int>>()) {
      if (id < 0 || id > kMaxLabelId) throw std::out_of_range("navigable id " + std::to_string(id) + " outside 0..33");
      c.navigable_ids.insert(id);
    }
  }
  if (j.contains("synth")) {
    const auto& s = j.at("synth");
    c.synth.horizon_min = s.value("horizon_min", c.synth.horizon_min);
    c.synth.horizon_max = s.value("horizon_max", c.synth.horizon_max);
    c.synth.max_occluders = s.value("max_occluders", c.synth.max_occluders);
    c.synth.noise = s.value("noise", c.synth.noise);
    c.synth.min_class_fraction = s.value("min_class_fraction", c.synth.min_class_fraction);
  }
  return c;
}

}  // namespace navseg
