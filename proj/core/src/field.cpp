#include "msholo/field.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace msholo {

namespace {

void check_shape(const Shape& shape) {
  if (shape.rows < 1 || shape.cols < 1) {
    std::ostringstream os;
    os << "field shape must be at least 1x1, got " << shape.rows << "x" << shape.cols;
    throw SizingError(os.str());
  }
}

void check_positive(double value, const char* what) {
  if (!(value > 0.0) || !std::isfinite(value)) {
    throw DomainError(std::string(what) + " must be positive and finite");
  }
}

}  // namespace

void require_same_shape(const Shape& a, const Shape& b, const char* what) {
  if (!(a == b)) {
    std::ostringstream os;
    os << what << ": shape mismatch " << a.rows << "x" << a.cols << " vs " << b.rows << "x" << b.cols;
    throw ShapeMismatch(os.str());
  }
}

template <typename Real>
BasicField<Real>::BasicField(Shape shape, double pitch, double wavelength)
    : BasicField(shape, pitch, wavelength, Buffer(shape.size())) {}

template <typename Real>
BasicField<Real>::BasicField(Shape shape, double pitch, double wavelength, Buffer data)
    : shape_(shape), pitch_(pitch), wavelength_(wavelength), data_(std::move(data)) {
  check_shape(shape_);
  check_positive(pitch_, "pitch");
  check_positive(wavelength_, "wavelength");
  if (data_.size() != shape_.size()) {
    throw ShapeMismatch("field buffer length does not match shape");
  }
}

template <typename Real>
bool BasicField<Real>::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](const value_type& v) {
    return std::isfinite(v.real()) && std::isfinite(v.imag());
  });
}

template <typename Real>
double BasicField<Real>::energy() const {
  double total = 0.0;
  for (const auto& v : data_) total += static_cast<double>(std::norm(v));
  return total;
}

template <typename Real>
BasicField<Real> BasicField<Real>::with_pitch(double pitch) const {
  return BasicField(shape_, pitch, wavelength_, data_);
}

template class BasicField<float>;
template class BasicField<double>;

IntensityImage::IntensityImage(Shape shape, double pitch)
    : IntensityImage(shape, pitch, std::vector<double>(shape.size(), 0.0)) {}

IntensityImage::IntensityImage(Shape shape, double pitch, std::vector<double> data)
    : shape_(shape), pitch_(pitch), data_(std::move(data)) {
  check_shape(shape_);
  check_positive(pitch_, "pitch");
  if (data_.size() != shape_.size()) {
    throw ShapeMismatch("intensity buffer length does not match shape");
  }
  for (double v : data_) {
    if (!std::isfinite(v) || v < 0.0) {
      throw DomainError("intensity samples must be finite and nonnegative");
    }
  }
}

double IntensityImage::sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }

double IntensityImage::max() const {
  return data_.empty() ? 0.0 : *std::max_element(data_.begin(), data_.end());
}

FrequencyGrid::FrequencyGrid(Shape shape, double pitch) : shape_(shape), pitch_(pitch) {
  check_shape(shape_);
  check_positive(pitch_, "pitch");
  fx_.resize(static_cast<std::size_t>(shape.cols));
  fy_.resize(static_cast<std::size_t>(shape.rows));
  // Divide the integer bin by the extent instead of multiplying by a spacing so
  // the coordinates are reproduced bit-exactly by independent callers.
  const double extent_x = shape.cols * pitch;
  const double extent_y = shape.rows * pitch;
  for (int c = 0; c < shape.cols; ++c) fx_[c] = bin(c, shape.cols) / extent_x;
  for (int r = 0; r < shape.rows; ++r) fy_[r] = bin(r, shape.rows) / extent_y;
}

template <typename T>
void upsample_into(std::span<const T> src, Shape src_shape, int factor, std::span<T> dst) {
  const int out_cols = src_shape.cols * factor;
  for (int r = 0; r < src_shape.rows; ++r) {
    const T* row = src.data() + static_cast<std::size_t>(r) * src_shape.cols;
    for (int fr = 0; fr < factor; ++fr) {
      T* out = dst.data() + static_cast<std::size_t>(r * factor + fr) * out_cols;
      for (int c = 0; c < src_shape.cols; ++c) {
        for (int fc = 0; fc < factor; ++fc) out[c * factor + fc] = row[c];
      }
    }
  }
}

template <typename T>
void block_sum_into(std::span<const T> src, Shape src_shape, int factor, std::span<T> dst) {
  const int out_rows = src_shape.rows / factor;
  const int out_cols = src_shape.cols / factor;
  std::fill(dst.begin(), dst.begin() + static_cast<std::ptrdiff_t>(out_rows) * out_cols, T{});
  for (int r = 0; r < src_shape.rows; ++r) {
    const T* row = src.data() + static_cast<std::size_t>(r) * src_shape.cols;
    T* out = dst.data() + static_cast<std::size_t>(r / factor) * out_cols;
    for (int c = 0; c < src_shape.cols; ++c) out[c / factor] += row[c];
  }
}

template void upsample_into<double>(std::span<const double>, Shape, int, std::span<double>);
template void upsample_into<std::complex<double>>(std::span<const std::complex<double>>, Shape, int,
                                                  std::span<std::complex<double>>);
template void upsample_into<std::complex<float>>(std::span<const std::complex<float>>, Shape, int,
                                                 std::span<std::complex<float>>);
template void block_sum_into<double>(std::span<const double>, Shape, int, std::span<double>);
template void block_sum_into<std::complex<double>>(std::span<const std::complex<double>>, Shape, int,
                                                   std::span<std::complex<double>>);
template void block_sum_into<std::complex<float>>(std::span<const std::complex<float>>, Shape, int,
                                                  std::span<std::complex<float>>);

namespace {

void check_factor(int factor) {
  if (factor < 1) throw DomainError("resample factor must be a positive integer");
}

void check_divisible(const Shape& shape, int factor) {
  if (shape.rows % factor != 0 || shape.cols % factor != 0) {
    std::ostringstream os;
    os << "cannot downsample " << shape.rows << "x" << shape.cols << " by " << factor;
    throw ShapeMismatch(os.str());
  }
}

}  // namespace

template <typename Real>
BasicField<Real> resample(const BasicField<Real>& field, int factor, ResampleDirection direction) {
  check_factor(factor);
  using C = std::complex<Real>;
  const Shape in = field.shape();
  if (direction == ResampleDirection::up) {
    const Shape out{in.rows * factor, in.cols * factor};
    typename BasicField<Real>::Buffer buf(out.size());
    upsample_into<C>(field.data(), in, factor, buf);
    return BasicField<Real>(out, field.pitch() / factor, field.wavelength(), std::move(buf));
  }
  check_divisible(in, factor);
  const Shape out{in.rows / factor, in.cols / factor};
  typename BasicField<Real>::Buffer buf(out.size());
  block_sum_into<C>(field.data(), in, factor, buf);
  const Real inv = Real(1) / static_cast<Real>(factor * factor);
  for (auto& v : buf) v *= inv;
  return BasicField<Real>(out, field.pitch() * factor, field.wavelength(), std::move(buf));
}

template BasicField<float> resample(const BasicField<float>&, int, ResampleDirection);
template BasicField<double> resample(const BasicField<double>&, int, ResampleDirection);

IntensityImage upsample(const IntensityImage& image, int factor) {
  check_factor(factor);
  const Shape out{image.rows() * factor, image.cols() * factor};
  std::vector<double> buf(out.size());
  upsample_into<double>(image.data(), image.shape(), factor, buf);
  return IntensityImage(out, image.pitch() / factor, std::move(buf));
}

IntensityImage downsample(const IntensityImage& image, int factor) {
  check_factor(factor);
  check_divisible(image.shape(), factor);
  const Shape out{image.rows() / factor, image.cols() / factor};
  std::vector<double> buf(out.size());
  block_sum_into<double>(image.data(), image.shape(), factor, buf);
  const double inv = 1.0 / (factor * factor);
  for (auto& v : buf) v *= inv;
  return IntensityImage(out, image.pitch() * factor, std::move(buf));
}

}  // namespace msholo
