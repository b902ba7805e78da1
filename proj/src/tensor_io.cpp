// SPDX-License-Identifier: Apache-2.0
#include "hcattn/tensor_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>

#include "hcattn/rng.hpp"

namespace hcattn {

namespace {

constexpr char kMagic[4] = {'H', 'C', 'A', 'T'};

std::size_t element_bytes(DType t) { return t == DType::f32 ? 4 : 2; }

bool half_is_finite(std::uint16_t h) { return (h & 0x7C00U) != 0x7C00U; }

void require(std::istream& in, const char* what) {
  if (!in) {
    throw FormatError(FormatError::Kind::truncated,
                      std::string("truncated ") + what);
  }
}

}  // namespace

const char* dtype_name(DType t) {
  switch (t) {
    case DType::f32: return "f32";
    case DType::f16: return "f16";
    case DType::u16: return "u16";
  }
  return "?";
}

std::uint16_t float_to_half(float f) {
  const auto x = std::bit_cast<std::uint32_t>(f);
  const auto sign = static_cast<std::uint16_t>((x >> 16) & 0x8000U);
  std::uint32_t mant = x & 0x7FFFFFU;
  const int exp = static_cast<int>((x >> 23) & 0xFFU);

  if (exp == 0xFF) {
    return static_cast<std::uint16_t>(sign | 0x7C00U |
                                      (mant != 0 ? 0x200U | (mant >> 13) : 0U));
  }
  const int e = exp - 127 + 15;
  if (e >= 31) return static_cast<std::uint16_t>(sign | 0x7C00U);
  if (e <= 0) {
    if (e < -10) return sign;
    mant |= 0x800000U;
    const int shift = 14 - e;
    std::uint32_t half_mant = mant >> shift;
    const std::uint32_t rem = mant & ((1U << shift) - 1U);
    const std::uint32_t halfway = 1U << (shift - 1);
    if (rem > halfway || (rem == halfway && (half_mant & 1U) != 0)) ++half_mant;
    return static_cast<std::uint16_t>(sign | half_mant);
  }
  std::uint32_t half = (static_cast<std::uint32_t>(e) << 10) | (mant >> 13);
  const std::uint32_t rem = mant & 0x1FFFU;
  // A carry out of the mantissa correctly bumps the exponent (possibly to inf).
  if (rem > 0x1000U || (rem == 0x1000U && (half & 1U) != 0)) ++half;
  return static_cast<std::uint16_t>(sign | half);
}

float half_to_float(std::uint16_t h) {
  const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000U) << 16;
  const std::uint32_t exp = (h >> 10) & 0x1FU;
  const std::uint32_t mant = h & 0x3FFU;
  if (exp == 0) {
    const float mag = std::ldexp(static_cast<float>(mant), -24);
    return sign != 0 ? -mag : mag;
  }
  if (exp == 31) {
    return std::bit_cast<float>(sign | 0x7F800000U | (mant << 13));
  }
  return std::bit_cast<float>(sign | ((exp + 112U) << 23) | (mant << 13));
}

// ---------------------------------------------------------------------------
// TensorDump

std::uint64_t TensorDump::element_count() const {
  if (shape.empty()) return 0;
  return std::accumulate(shape.begin(), shape.end(), std::uint64_t{1},
                         std::multiplies<>());
}

std::size_t TensorDump::stored_count() const {
  return std::visit([](const auto& v) { return v.size(); }, data);
}

void TensorDump::validate() const {
  if (shape.empty() || shape.size() > 255) {
    throw std::invalid_argument("tensor rank must be in [1, 255]");
  }
  for (auto dim : shape) {
    if (dim == 0) throw std::invalid_argument("tensor dimensions must be >= 1");
  }
  const bool wants_f32 = dtype == DType::f32;
  if (wants_f32 != std::holds_alternative<std::vector<float>>(data)) {
    throw std::invalid_argument("tensor storage does not match dtype");
  }
  if (element_count() != stored_count()) {
    throw std::invalid_argument("tensor shape does not match element count");
  }
  if (dtype == DType::f32) {
    for (float v : std::get<std::vector<float>>(data)) {
      if (!std::isfinite(v)) throw std::invalid_argument("non-finite f32 element");
    }
  } else if (dtype == DType::f16) {
    for (auto v : std::get<std::vector<std::uint16_t>>(data)) {
      if (!half_is_finite(v)) throw std::invalid_argument("non-finite f16 element");
    }
  }
}

std::vector<float> TensorDump::to_floats() const {
  if (dtype == DType::f32) return std::get<std::vector<float>>(data);
  const auto& raw = std::get<std::vector<std::uint16_t>>(data);
  std::vector<float> out(raw.size());
  if (dtype == DType::f16) {
    std::transform(raw.begin(), raw.end(), out.begin(), half_to_float);
  } else {
    std::transform(raw.begin(), raw.end(), out.begin(),
                   [](std::uint16_t v) { return static_cast<float>(v); });
  }
  return out;
}

TensorDump TensorDump::from_floats(std::vector<std::uint64_t> shape,
                                   std::vector<float> values) {
  TensorDump t;
  t.dtype = DType::f32;
  t.shape = std::move(shape);
  t.data = std::move(values);
  return t;
}

TensorDump TensorDump::from_matrix(const Matrix& m) {
  return from_floats({m.rows, m.cols}, m.data);
}

TensorDump TensorDump::from_u16(std::vector<std::uint64_t> shape,
                                std::vector<std::uint16_t> values) {
  TensorDump t;
  t.dtype = DType::u16;
  t.shape = std::move(shape);
  t.data = std::move(values);
  return t;
}

TensorDump TensorDump::to_f16(std::vector<std::uint64_t> shape,
                              const std::vector<float>& values) {
  std::vector<std::uint16_t> raw(values.size());
  std::transform(values.begin(), values.end(), raw.begin(), float_to_half);
  TensorDump t;
  t.dtype = DType::f16;
  t.shape = std::move(shape);
  t.data = std::move(raw);
  return t;
}

Matrix to_matrix(const TensorDump& t) {
  if (t.shape.empty()) throw std::invalid_argument("to_matrix: empty shape");
  Matrix m;
  m.cols = t.shape.back();
  m.rows = t.element_count() / m.cols;
  m.data = t.to_floats();
  return m;
}

// ---------------------------------------------------------------------------
// Little-endian primitives

namespace le {

void put_u8(std::ostream& out, std::uint8_t v) { out.put(static_cast<char>(v)); }

void put_u16(std::ostream& out, std::uint16_t v) {
  const char b[2] = {static_cast<char>(v & 0xFF), static_cast<char>(v >> 8)};
  out.write(b, 2);
}

void put_u32(std::ostream& out, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(b, 4);
}

void put_u64(std::ostream& out, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(b, 8);
}

void put_f32(std::ostream& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }
void put_f64(std::ostream& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

std::uint8_t get_u8(std::istream& in) {
  unsigned char b = 0;
  in.read(reinterpret_cast<char*>(&b), 1);
  return b;
}

std::uint16_t get_u16(std::istream& in) {
  unsigned char b[2] = {};
  in.read(reinterpret_cast<char*>(b), 2);
  return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4] = {};
  in.read(reinterpret_cast<char*>(b), 4);
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

std::uint64_t get_u64(std::istream& in) {
  unsigned char b[8] = {};
  in.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

float get_f32(std::istream& in) { return std::bit_cast<float>(get_u32(in)); }
double get_f64(std::istream& in) { return std::bit_cast<double>(get_u64(in)); }

}  // namespace le

// ---------------------------------------------------------------------------
// HCAT files

void write_tensor(std::ostream& out, const TensorDump& t) {
  t.validate();
  out.write(kMagic, 4);
  le::put_u32(out, kTensorFormatVersion);
  le::put_u8(out, static_cast<std::uint8_t>(t.dtype));
  le::put_u8(out, static_cast<std::uint8_t>(t.shape.size()));
  for (auto dim : t.shape) le::put_u64(out, dim);
  if (t.dtype == DType::f32) {
    for (float v : std::get<std::vector<float>>(t.data)) le::put_f32(out, v);
  } else {
    for (auto v : std::get<std::vector<std::uint16_t>>(t.data)) le::put_u16(out, v);
  }
}

TensorDump read_tensor(std::istream& in) {
  char magic[4] = {};
  in.read(magic, 4);
  require(in, "header");
  if (std::memcmp(magic, kMagic, 4) != 0) {
    throw FormatError(FormatError::Kind::bad_magic, "bad magic: not an HCAT tensor");
  }
  const std::uint32_t version = le::get_u32(in);
  require(in, "header");
  if (version != kTensorFormatVersion) {
    throw FormatError(FormatError::Kind::unsupported_version,
                      "unsupported tensor version " + std::to_string(version));
  }
  const std::uint8_t code = le::get_u8(in);
  require(in, "header");
  if (code > 2) {
    throw FormatError(FormatError::Kind::unsupported_dtype,
                      "unsupported dtype code " + std::to_string(code));
  }
  TensorDump t;
  t.dtype = static_cast<DType>(code);
  const std::uint8_t rank = le::get_u8(in);
  require(in, "header");
  if (rank == 0) {
    throw FormatError(FormatError::Kind::unsupported_version, "rank 0 tensors are not supported");
  }
  t.shape.resize(rank);
  for (auto& dim : t.shape) {
    dim = le::get_u64(in);
    require(in, "header");
    if (dim == 0) {
      throw FormatError(FormatError::Kind::truncated, "zero-sized dimension in header");
    }
  }

  // Reject payloads larger than what is left in the stream before allocating.
  const std::uint64_t count = t.element_count();
  const std::uint64_t bytes = count * element_bytes(t.dtype);
  if (const auto here = in.tellg(); here != std::streampos(-1)) {
    in.seekg(0, std::ios::end);
    const auto end = in.tellg();
    in.seekg(here);
    if (static_cast<std::uint64_t>(end - here) < bytes) {
      throw FormatError(FormatError::Kind::truncated, "truncated payload");
    }
  }

  if (t.dtype == DType::f32) {
    std::vector<float> values(count);
    for (auto& v : values) v = le::get_f32(in);
    t.data = std::move(values);
  } else {
    std::vector<std::uint16_t> values(count);
    for (auto& v : values) v = le::get_u16(in);
    t.data = std::move(values);
  }
  require(in, "payload");
  return t;
}

void write_tensor(const std::filesystem::path& path, const TensorDump& t) {
  t.validate();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw FormatError(FormatError::Kind::io, "cannot open " + path.string() + " for writing");
  }
  write_tensor(out, t);
  out.flush();
  if (!out) throw FormatError(FormatError::Kind::io, "write failed: " + path.string());
}

TensorDump read_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatError::Kind::io, "cannot open " + path.string());
  return read_tensor(in);
}

// ---------------------------------------------------------------------------
// Synthetic data

void SyntheticSpec::validate() const {
  if (n < 1 || d < 1) throw std::invalid_argument("synthetic spec needs n >= 1 and d >= 1");
  if (!(noise_stddev >= 0.0) || !std::isfinite(noise_stddev)) {
    throw std::invalid_argument("noise standard deviation must be finite and >= 0");
  }
  if (!std::isfinite(scale)) throw std::invalid_argument("scale must be finite");
  if (kind == Kind::planted_clusters) {
    if (groups < 1 || d % groups != 0) {
      throw std::invalid_argument("planted clusters: groups must divide d");
    }
    if (clusters_per_group < 1) {
      throw std::invalid_argument("planted clusters: clusters per group must be >= 1");
    }
  }
}

TensorDump gen_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  std::vector<float> out(spec.n * spec.d);

  if (spec.kind == SyntheticSpec::Kind::gaussian) {
    for (auto& v : out) v = static_cast<float>(spec.scale * rng.normal());
    return TensorDump::from_floats({spec.n, spec.d}, std::move(out));
  }

  const std::size_t sub = spec.d / spec.groups;
  const std::size_t k = spec.clusters_per_group;
  std::vector<double> centers(k * sub);
  std::vector<std::size_t> assign(spec.n);
  for (std::size_t g = 0; g < spec.groups; ++g) {
    for (auto& c : centers) c = rng.normal();
    // Balanced assignment so every center is used whenever n >= k.
    for (std::size_t j = 0; j < spec.n; ++j) assign[j] = j % k;
    for (std::size_t j = spec.n; j > 1; --j) {
      std::swap(assign[j - 1], assign[rng.below(j)]);
    }
    for (std::size_t j = 0; j < spec.n; ++j) {
      const double* center = &centers[assign[j] * sub];
      float* dst = &out[j * spec.d + g * sub];
      for (std::size_t t = 0; t < sub; ++t) {
        double v = center[t];
        if (spec.noise_stddev > 0.0) v += spec.noise_stddev * rng.normal();
        dst[t] = static_cast<float>(spec.scale * v);
      }
    }
  }
  return TensorDump::from_floats({spec.n, spec.d}, std::move(out));
}

}  // namespace hcattn
