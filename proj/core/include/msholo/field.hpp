#pragma once

#include <complex>
#include <cstddef>
#include <cstdint>
#include <new>
#include <span>
#include <vector>

#include "msholo/error.hpp"

namespace msholo {

struct Shape {
  int rows = 0;
  int cols = 0;

  std::size_t size() const { return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols); }
  bool operator==(const Shape&) const = default;
};

// 64-byte aligned storage so FFT plans made on scratch buffers can be reused
// on any field buffer.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t alignment{64};

  AlignedAllocator() noexcept = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), alignment));
  }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

// Sampled complex optical field. Samples are row-major, (row, col) with the
// spatial origin at index (0, 0).
template <typename Real>
class BasicField {
 public:
  using value_type = std::complex<Real>;
  using Buffer = AlignedVector<value_type>;

  BasicField() = default;
  BasicField(Shape shape, double pitch, double wavelength);
  BasicField(Shape shape, double pitch, double wavelength, Buffer data);

  const Shape& shape() const { return shape_; }
  int rows() const { return shape_.rows; }
  int cols() const { return shape_.cols; }
  std::size_t size() const { return data_.size(); }
  double pitch() const { return pitch_; }
  double wavelength() const { return wavelength_; }

  std::span<const value_type> data() const { return data_; }
  std::span<value_type> data() { return data_; }
  const Buffer& buffer() const { return data_; }

  value_type operator()(int r, int c) const { return data_[index(r, c)]; }
  value_type& operator()(int r, int c) { return data_[index(r, c)]; }

  bool all_finite() const;
  // Sum of |g|^2 over samples.
  double energy() const;

  BasicField with_pitch(double pitch) const;

  template <typename Other>
  BasicField<Other> cast() const {
    typename BasicField<Other>::Buffer out(data_.size());
    for (std::size_t i = 0; i < data_.size(); ++i) {
      out[i] = std::complex<Other>(static_cast<Other>(data_[i].real()),
                                   static_cast<Other>(data_[i].imag()));
    }
    return BasicField<Other>(shape_, pitch_, wavelength_, std::move(out));
  }

 private:
  std::size_t index(int r, int c) const {
    return static_cast<std::size_t>(r) * static_cast<std::size_t>(shape_.cols) + static_cast<std::size_t>(c);
  }

  Shape shape_{};
  double pitch_ = 0.0;
  double wavelength_ = 0.0;
  Buffer data_;
};

using ComplexField2D = BasicField<double>;
using ComplexField2Df = BasicField<float>;

// Nonnegative intensity samples at a given pitch.
class IntensityImage {
 public:
  IntensityImage() = default;
  IntensityImage(Shape shape, double pitch);
  IntensityImage(Shape shape, double pitch, std::vector<double> data);

  const Shape& shape() const { return shape_; }
  int rows() const { return shape_.rows; }
  int cols() const { return shape_.cols; }
  std::size_t size() const { return data_.size(); }
  double pitch() const { return pitch_; }

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double operator()(int r, int c) const { return data_[static_cast<std::size_t>(r) * shape_.cols + c]; }
  double& operator()(int r, int c) { return data_[static_cast<std::size_t>(r) * shape_.cols + c]; }

  double sum() const;
  double max() const;

 private:
  Shape shape_{};
  double pitch_ = 0.0;
  std::vector<double> data_;
};

// Spatial-frequency coordinates (cycles per meter) for the standard DFT layout:
// index k maps to k for k < (n+1)/2 and to k-n otherwise. Every module builds
// frequency coordinates through this one type.
class FrequencyGrid {
 public:
  FrequencyGrid(Shape shape, double pitch);

  const Shape& shape() const { return shape_; }
  double pitch() const { return pitch_; }

  // Signed integer bin for an index along an axis of length n.
  static int bin(int index, int n) { return index < (n + 1) / 2 ? index : index - n; }

  double fx(int col) const { return fx_[static_cast<std::size_t>(col)]; }
  double fy(int row) const { return fy_[static_cast<std::size_t>(row)]; }
  double spacing_x() const { return 1.0 / (shape_.cols * pitch_); }
  double spacing_y() const { return 1.0 / (shape_.rows * pitch_); }

 private:
  Shape shape_;
  double pitch_;
  std::vector<double> fx_;
  std::vector<double> fy_;
};

enum class ResampleDirection { up, down };

// up: each sample replicated into a factor x factor block, pitch / factor.
// down: factor x factor block mean, pitch * factor.
template <typename Real>
BasicField<Real> resample(const BasicField<Real>& field, int factor, ResampleDirection direction);

IntensityImage upsample(const IntensityImage& image, int factor);
IntensityImage downsample(const IntensityImage& image, int factor);

// Raw-buffer helpers used on optimizer hot paths.
template <typename T>
void upsample_into(std::span<const T> src, Shape src_shape, int factor, std::span<T> dst);
template <typename T>
void block_sum_into(std::span<const T> src, Shape src_shape, int factor, std::span<T> dst);

// Throws ShapeMismatch with a descriptive message when shapes differ.
void require_same_shape(const Shape& a, const Shape& b, const char* what);

}  // namespace msholo
