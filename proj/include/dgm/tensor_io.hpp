#pragma once

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <sstream>
#include <variant>

#include "dgm/core.hpp"

namespace dgm {

enum class DType : std::uint8_t { f32 = 0, i32 = 1 };

using ByteSequence = std::vector<std::uint8_t>;

/// Dense row-major tensor, either f32 or i32.
struct Tensor {
  std::vector<std::uint32_t> shape;
  std::variant<std::vector<float>, std::vector<std::int32_t>> data;

  DType dtype() const { return data.index() == 0 ? DType::f32 : DType::i32; }
  std::size_t element_count() const {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           [](std::size_t a, std::uint32_t b) { return a * b; });
  }
  const std::vector<float>& f32() const { return std::get<0>(data); }
  std::vector<float>& f32() { return std::get<0>(data); }
  const std::vector<std::int32_t>& i32() const { return std::get<1>(data); }
  std::vector<std::int32_t>& i32() { return std::get<1>(data); }

  static Tensor make_f32(std::vector<std::uint32_t> shape, std::vector<float> values) {
    Tensor t{std::move(shape), std::move(values)};
    t.check();
    return t;
  }
  static Tensor make_i32(std::vector<std::uint32_t> shape, std::vector<std::int32_t> values) {
    Tensor t{std::move(shape), std::move(values)};
    t.check();
    return t;
  }

  void check() const {
    if (shape.empty()) throw Error(ErrorCode::ShapeMismatch, "tensor needs at least one dim");
    for (auto d : shape)
      if (d == 0) throw Error(ErrorCode::ShapeMismatch, "tensor dims must be positive");
    const std::size_t n = std::visit([](const auto& v) { return v.size(); }, data);
    if (n != element_count()) throw Error(ErrorCode::LengthMismatch, "data length != product of dims");
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

namespace detail {

inline constexpr std::uint8_t kTensorVersion = 1;
inline constexpr char kTensorMagic[4] = {'D', 'G', 'M', 'T'};

inline void put_u32(ByteSequence& out, std::uint32_t v) {
  for (int s = 0; s < 32; s += 8) out.push_back(static_cast<std::uint8_t>((v >> s) & 0xffu));
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace detail

inline std::size_t encoded_size(const Tensor& t) {
  return 7 + 4 * t.shape.size() + 4 * t.element_count();
}

inline ByteSequence encode_tensor(const Tensor& t) {
  t.check();
  ByteSequence out;
  out.reserve(encoded_size(t));
  out.insert(out.end(), std::begin(detail::kTensorMagic), std::end(detail::kTensorMagic));
  out.push_back(detail::kTensorVersion);
  out.push_back(static_cast<std::uint8_t>(t.dtype()));
  out.push_back(static_cast<std::uint8_t>(t.shape.size()));
  for (auto d : t.shape) detail::put_u32(out, d);
  if (t.dtype() == DType::f32) {
    for (float v : t.f32()) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  } else {
    for (std::int32_t v : t.i32()) detail::put_u32(out, static_cast<std::uint32_t>(v));
  }
  return out;
}

inline Tensor decode_tensor(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), detail::kTensorMagic, 4) != 0)
    throw Error(ErrorCode::BadMagic, "missing DGMT magic");
  if (bytes.size() < 7) throw Error(ErrorCode::LengthMismatch, "truncated header");
  if (bytes[4] != detail::kTensorVersion)
    throw Error(ErrorCode::UnsupportedVersion, "version " + std::to_string(bytes[4]));
  const std::uint8_t dtype = bytes[5];
  if (dtype > 1) throw Error(ErrorCode::UnsupportedVersion, "unknown dtype " + std::to_string(dtype));
  const std::size_t ndim = bytes[6];
  if (ndim == 0) throw Error(ErrorCode::LengthMismatch, "zero-dimensional tensor");
  if (bytes.size() < 7 + 4 * ndim) throw Error(ErrorCode::LengthMismatch, "truncated shape");
  Tensor t;
  std::size_t count = 1;
  for (std::size_t i = 0; i < ndim; ++i) {
    const std::uint32_t d = detail::get_u32(bytes.data() + 7 + 4 * i);
    if (d == 0) throw Error(ErrorCode::LengthMismatch, "zero dim");
    t.shape.push_back(d);
    count *= d;
  }
  const std::size_t offset = 7 + 4 * ndim;
  if (bytes.size() - offset != 4 * count)
    throw Error(ErrorCode::LengthMismatch, "payload has " + std::to_string(bytes.size() - offset) +
                                               " bytes, expected " + std::to_string(4 * count));
  const std::uint8_t* p = bytes.data() + offset;
  if (dtype == 0) {
    std::vector<float> v(count);
    for (std::size_t i = 0; i < count; ++i) {
      v[i] = std::bit_cast<float>(detail::get_u32(p + 4 * i));
      if (!std::isfinite(v[i])) throw Error(ErrorCode::NonFiniteValue, "element " + std::to_string(i));
    }
    t.data = std::move(v);
  } else {
    std::vector<std::int32_t> v(count);
    for (std::size_t i = 0; i < count; ++i) v[i] = static_cast<std::int32_t>(detail::get_u32(p + 4 * i));
    t.data = std::move(v);
  }
  return t;
}

inline ByteSequence read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
  return ByteSequence(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline void write_file(const std::filesystem::path& path, const std::string& text) {
  write_file(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline Tensor load_tensor(const std::filesystem::path& path) { return decode_tensor(read_file(path)); }
inline void save_tensor(const std::filesystem::path& path, const Tensor& t) { write_file(path, encode_tensor(t)); }

// ---------------------------------------------------------------------------
// Superpixel label maps

inline constexpr std::size_t kDefaultMaxRegions = 512;

struct SuperpixelMap {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::int32_t> labels;                     // H*W, row-major
  std::size_t num_regions = 0;
  std::vector<std::vector<std::size_t>> region_pixels;  // flat indices y*W+x, ascending

  std::int32_t at(std::size_t y, std::size_t x) const { return labels[y * width + x]; }
  LabelGrid grid() const { return {height, width, labels}; }

  friend bool operator==(const SuperpixelMap&, const SuperpixelMap&) = default;
};

inline SuperpixelMap validate_label_map(std::size_t height, std::size_t width,
                                        std::vector<std::int32_t> labels,
                                        std::size_t max_regions = kDefaultMaxRegions) {
  if (labels.size() != height * width || height == 0 || width == 0)
    throw Error(ErrorCode::ShapeMismatch, "label map size does not match H x W");
  std::int32_t mx = -1;
  for (auto v : labels) {
    if (v < 0) throw Error(ErrorCode::NegativeLabel, "label " + std::to_string(v));
    mx = std::max(mx, v);
  }
  const std::size_t n = static_cast<std::size_t>(mx) + 1;
  SuperpixelMap sp;
  sp.width = width;
  sp.height = height;
  sp.region_pixels.assign(n, {});
  for (std::size_t i = 0; i < labels.size(); ++i) sp.region_pixels[static_cast<std::size_t>(labels[i])].push_back(i);
  for (std::size_t r = 0; r < n; ++r)
    if (sp.region_pixels[r].empty())
      throw Error(ErrorCode::NonContiguousLabels, "label " + std::to_string(r) + " has no pixels");
  if (n > max_regions)
    throw Error(ErrorCode::TooManyRegions, std::to_string(n) + " regions exceed cap " + std::to_string(max_regions));
  sp.labels = std::move(labels);
  sp.num_regions = n;
  return sp;
}

inline SuperpixelMap validate_label_map(const Tensor& t, std::size_t max_regions = kDefaultMaxRegions) {
  if (t.dtype() != DType::i32 || t.shape.size() != 2)
    throw Error(ErrorCode::ShapeMismatch, "label map must be an i32 tensor of shape [H, W]");
  return validate_label_map(t.shape[0], t.shape[1], t.i32(), max_regions);
}

inline Tensor label_map_tensor(const SuperpixelMap& sp) {
  return Tensor::make_i32({static_cast<std::uint32_t>(sp.height), static_cast<std::uint32_t>(sp.width)}, sp.labels);
}

// ---------------------------------------------------------------------------
// Feature map conversion

template <class T>
FeatureMap<T> to_feature_map(const Tensor& t) {
  if (t.dtype() != DType::f32 || t.shape.size() != 3)
    throw Error(ErrorCode::ShapeMismatch, "feature map must be an f32 tensor of shape [C, H, W]");
  FeatureMap<T> f(t.shape[0], t.shape[1], t.shape[2]);
  for (std::size_t i = 0; i < t.f32().size(); ++i) f.data.data()[i] = static_cast<T>(t.f32()[i]);
  return f;
}

template <class T>
Tensor to_tensor(const FeatureMap<T>& f) {
  std::vector<float> v(f.data.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(f.data.data()[i]);
  return Tensor::make_f32({static_cast<std::uint32_t>(f.channels), static_cast<std::uint32_t>(f.height),
                           static_cast<std::uint32_t>(f.width)},
                          std::move(v));
}

// ---------------------------------------------------------------------------
// Netpbm helpers (binary P6 in, P5/P6 out)

namespace detail {
inline std::string next_pnm_token(std::istream& in) {
  std::string tok;
  char c;
  while (in.get(c)) {
    if (c == '#') {
      std::string skip;
      std::getline(in, skip);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(c);
  }
  return tok;
}
}  // namespace detail

/// Reads a binary PPM (P6, maxval <= 255) as a 3 x H x W tensor in [0, 1].
inline Tensor decode_ppm(const ByteSequence& bytes) {
  std::istringstream in(std::string(bytes.begin(), bytes.end()));
  if (detail::next_pnm_token(in) != "P6") throw Error(ErrorCode::Parse, "only binary P6 PPM is supported");
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(detail::next_pnm_token(in));
    h = std::stoul(detail::next_pnm_token(in));
    maxval = std::stoul(detail::next_pnm_token(in));
  } catch (const std::exception&) {
    throw Error(ErrorCode::Parse, "malformed PPM header");
  }
  if (w == 0 || h == 0 || maxval == 0 || maxval > 255) throw Error(ErrorCode::Parse, "unsupported PPM header");
  std::vector<char> px(3 * w * h);
  in.read(px.data(), static_cast<std::streamsize>(px.size()));
  if (static_cast<std::size_t>(in.gcount()) != px.size()) throw Error(ErrorCode::LengthMismatch, "truncated PPM");
  std::vector<float> v(3 * w * h);
  for (std::size_t i = 0; i < w * h; ++i)
    for (std::size_t c = 0; c < 3; ++c)
      v[c * w * h + i] = static_cast<float>(static_cast<unsigned char>(px[3 * i + c])) / static_cast<float>(maxval);
  return Tensor::make_f32({3, static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(w)}, std::move(v));
}

inline ByteSequence encode_ppm(const Tensor& image) {
  if (image.dtype() != DType::f32 || image.shape.size() != 3 || image.shape[0] != 3)
    throw Error(ErrorCode::ShapeMismatch, "PPM export needs a 3 x H x W f32 tensor");
  const std::size_t h = image.shape[1], w = image.shape[2];
  const std::string header = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  ByteSequence out(header.begin(), header.end());
  for (std::size_t i = 0; i < w * h; ++i)
    for (std::size_t c = 0; c < 3; ++c) {
      const float v = std::clamp(image.f32()[c * w * h + i], 0.0f, 1.0f);
      out.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0f)));
    }
  return out;
}

inline ByteSequence encode_pgm(std::size_t height, std::size_t width, std::span<const std::uint8_t> pixels) {
  const std::string header = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  ByteSequence out(header.begin(), header.end());
  out.insert(out.end(), pixels.begin(), pixels.end());
  return out;
}

}  // namespace dgm
