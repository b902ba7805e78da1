// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "hcattn/matrix.hpp"

namespace hcattn {

enum class DType : std::uint8_t { f32 = 0, f16 = 1, u16 = 2 };

const char* dtype_name(DType t);

// In-memory image of an HCAT file. f16 elements are kept as their raw
// binary16 bit patterns so a round trip is bit-exact.
struct TensorDump {
  DType dtype = DType::f32;
  std::vector<std::uint64_t> shape;
  std::variant<std::vector<float>, std::vector<std::uint16_t>> data;

  std::uint64_t element_count() const;
  std::size_t stored_count() const;

  // Throws std::invalid_argument if the shape/data/finiteness invariants do
  // not hold.
  void validate() const;

  // Element values widened to float (f16 decoded, u16 converted).
  std::vector<float> to_floats() const;

  static TensorDump from_floats(std::vector<std::uint64_t> shape,
                                std::vector<float> values);
  static TensorDump from_matrix(const Matrix& m);
  static TensorDump from_u16(std::vector<std::uint64_t> shape,
                             std::vector<std::uint16_t> values);
  // Rounds each value to binary16 (round-to-nearest-even).
  static TensorDump to_f16(std::vector<std::uint64_t> shape,
                           const std::vector<float>& values);

  friend bool operator==(const TensorDump&, const TensorDump&) = default;
};

// Rank-2 view of a dump as a Matrix. Higher-rank dumps fold every leading
// dimension into rows.
Matrix to_matrix(const TensorDump& t);

std::uint16_t float_to_half(float f);
float half_to_float(std::uint16_t h);

class FormatError : public std::runtime_error {
 public:
  enum class Kind { bad_magic, unsupported_version, unsupported_dtype, truncated, io };
  FormatError(Kind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

inline constexpr std::uint32_t kTensorFormatVersion = 1;

void write_tensor(const std::filesystem::path& path, const TensorDump& t);
TensorDump read_tensor(const std::filesystem::path& path);

// Stream forms, used to embed a tensor inside other containers.
void write_tensor(std::ostream& out, const TensorDump& t);
TensorDump read_tensor(std::istream& in);

// Little-endian primitives shared with the codebook format.
namespace le {
void put_u8(std::ostream& out, std::uint8_t v);
void put_u16(std::ostream& out, std::uint16_t v);
void put_u32(std::ostream& out, std::uint32_t v);
void put_u64(std::ostream& out, std::uint64_t v);
void put_f32(std::ostream& out, float v);
void put_f64(std::ostream& out, double v);
std::uint8_t get_u8(std::istream& in);
std::uint16_t get_u16(std::istream& in);
std::uint32_t get_u32(std::istream& in);
std::uint64_t get_u64(std::istream& in);
float get_f32(std::istream& in);
double get_f64(std::istream& in);
}  // namespace le

struct SyntheticSpec {
  enum class Kind { gaussian, planted_clusters };
  Kind kind = Kind::gaussian;
  std::size_t n = 0;
  std::size_t d = 0;
  std::uint64_t seed = 0;
  // planted-clusters only
  std::size_t groups = 1;
  std::size_t clusters_per_group = 1;
  double noise_stddev = 0.0;
  // Multiplies every generated element (centers and noise alike).
  double scale = 1.0;

  void validate() const;
};

// Generates an n x d f32 tensor. Gaussian: i.i.d. standard normals.
// Planted: each group draws clusters_per_group centers from N(0,1); every
// token's sub-vector is one of those centers (balanced assignment, shuffled)
// plus N(0, noise_stddev^2) noise.
TensorDump gen_synthetic(const SyntheticSpec& spec);

}  // namespace hcattn
