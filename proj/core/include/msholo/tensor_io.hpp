#pragma once

#include <complex>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "msholo/field.hpp"

namespace msholo {

enum class DType : std::uint8_t { f32 = 0, f64 = 1, c64 = 2, c128 = 3 };

std::size_t dtype_size(DType dtype);
const char* dtype_name(DType dtype);

// Self-describing binary tensor.
//
// On-disk layout (all integers in the writer's byte order, identified by the
// endianness marker):
//
//   offset  size      field
//   0       4         magic "MSHT"
//   4       2         version (= 1)
//   6       1         dtype code (0 f32, 1 f64, 2 c64, 3 c128)
//   7       1         rank
//   8       4         endianness marker 0x01020304
//   12      8*rank    shape, uint64 per axis
//   ...               payload, row-major, product(shape) * dtype_size bytes
//
// Complex samples are stored as interleaved (real, imag) pairs.
struct Tensor {
  DType dtype = DType::f64;
  std::vector<std::uint64_t> shape;
  std::vector<std::byte> payload;

  std::size_t element_count() const;

  template <typename T>
  std::span<const T> view() const {
    return {reinterpret_cast<const T*>(payload.data()), payload.size() / sizeof(T)};
  }

  static Tensor from_reals(std::span<const double> values, std::vector<std::uint64_t> shape);
  static Tensor from_reals_f32(std::span<const float> values, std::vector<std::uint64_t> shape);
  static Tensor from_complex(std::span<const std::complex<double>> values, std::vector<std::uint64_t> shape);
  static Tensor from_complex_c64(std::span<const std::complex<float>> values, std::vector<std::uint64_t> shape);

  // Typed extraction; throws FormatError on dtype mismatch.
  std::vector<double> to_reals() const;
  std::vector<std::complex<double>> to_complex() const;

  bool operator==(const Tensor&) const = default;
};

Tensor tensor_from_field(const ComplexField2D& field);
Tensor tensor_from_image(const IntensityImage& image);
ComplexField2D field_from_tensor(const Tensor& tensor, double pitch, double wavelength);
IntensityImage image_from_tensor(const Tensor& tensor, double pitch);

std::vector<std::byte> encode_tensor(const Tensor& tensor);
Tensor decode_tensor(std::span<const std::byte> bytes);

void write_tensor(const std::filesystem::path& path, const Tensor& tensor);
Tensor read_tensor(const std::filesystem::path& path);

// A directory of named tensors plus a manifest.json carrying string metadata
// and the tensor-name -> file mapping.
struct TensorBundle {
  std::map<std::string, Tensor> tensors;
  std::map<std::string, std::string> metadata;

  const Tensor& at(const std::string& name) const;
};

void write_bundle(const std::filesystem::path& directory, const TensorBundle& bundle);
TensorBundle read_bundle(const std::filesystem::path& directory);

}  // namespace msholo
