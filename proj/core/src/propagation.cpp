#include "msholo/propagation.hpp"

#include <cmath>
#include <map>
#include <mutex>
#include <numbers>
#include <shared_mutex>
#include <tuple>

#include "msholo/fft.hpp"

namespace msholo {

AsmKernel asm_kernel(Shape shape, double pitch, double wavelength, double z, BandLimit band_limit) {
  if (!(pitch > 0.0) || !(wavelength > 0.0)) throw DomainError("asm_kernel: pitch and wavelength must be positive");
  const FrequencyGrid grid(shape, pitch);
  AsmKernel k;
  k.shape = shape;
  k.pitch = pitch;
  k.wavelength = wavelength;
  k.z = z;
  k.band_limit = band_limit;
  k.transfer.assign(shape.size(), {0.0, 0.0});
  k.band_mask.assign(shape.size(), 0);

  double limit_x = std::numeric_limits<double>::infinity();
  double limit_y = std::numeric_limits<double>::infinity();
  if (band_limit == BandLimit::matsushima) {
    const double dux = grid.spacing_x();
    const double duy = grid.spacing_y();
    limit_x = 1.0 / (wavelength * std::sqrt(std::pow(2.0 * dux * z, 2) + 1.0));
    limit_y = 1.0 / (wavelength * std::sqrt(std::pow(2.0 * duy * z, 2) + 1.0));
  }
  const double phase_scale = 2.0 * std::numbers::pi * z / wavelength;
  for (int r = 0; r < shape.rows; ++r) {
    const double ly = wavelength * grid.fy(r);
    for (int c = 0; c < shape.cols; ++c) {
      const double lx = wavelength * grid.fx(c);
      const double rho2 = lx * lx + ly * ly;
      if (!(rho2 < 1.0)) continue;
      if (!(std::abs(grid.fx(c)) < limit_x && std::abs(grid.fy(r)) < limit_y)) continue;
      const std::size_t i = static_cast<std::size_t>(r) * shape.cols + c;
      const double phase = phase_scale * std::sqrt(1.0 - rho2);
      k.transfer[i] = {std::cos(phase), std::sin(phase)};
      k.band_mask[i] = 1;
    }
  }
  return k;
}

namespace {

using KernelKey = std::tuple<int, int, double, double, double, int>;

template <typename Real>
struct KernelCache {
  std::shared_mutex mutex;
  std::map<KernelKey, std::shared_ptr<const BasicAsmKernel<Real>>> entries;
};

template <typename Real>
KernelCache<Real>& kernel_cache() {
  static KernelCache<Real> cache;
  return cache;
}

constexpr std::size_t kMaxCachedKernels = 512;

template <typename Real>
std::shared_ptr<const BasicAsmKernel<Real>> build(Shape shape, double pitch, double wavelength, double z,
                                                  BandLimit band_limit) {
  AsmKernel k = asm_kernel(shape, pitch, wavelength, z, band_limit);
  if constexpr (std::is_same_v<Real, double>) {
    return std::make_shared<const AsmKernel>(std::move(k));
  } else {
    auto out = std::make_shared<BasicAsmKernel<Real>>();
    out->shape = k.shape;
    out->pitch = k.pitch;
    out->wavelength = k.wavelength;
    out->z = k.z;
    out->band_limit = k.band_limit;
    out->band_mask = std::move(k.band_mask);
    out->transfer.resize(k.transfer.size());
    for (std::size_t i = 0; i < k.transfer.size(); ++i) {
      out->transfer[i] = {static_cast<Real>(k.transfer[i].real()), static_cast<Real>(k.transfer[i].imag())};
    }
    return out;
  }
}

}  // namespace

template <typename Real>
std::shared_ptr<const BasicAsmKernel<Real>> cached_kernel(Shape shape, double pitch, double wavelength, double z,
                                                          BandLimit band_limit) {
  auto& cache = kernel_cache<Real>();
  const KernelKey key{shape.rows, shape.cols, pitch, wavelength, z, static_cast<int>(band_limit)};
  {
    std::shared_lock lock(cache.mutex);
    auto it = cache.entries.find(key);
    if (it != cache.entries.end()) return it->second;
  }
  auto kernel = build<Real>(shape, pitch, wavelength, z, band_limit);
  std::unique_lock lock(cache.mutex);
  if (cache.entries.size() >= kMaxCachedKernels) cache.entries.clear();
  auto [it, inserted] = cache.entries.emplace(key, kernel);
  return it->second;
}

void clear_kernel_cache() {
  {
    auto& c = kernel_cache<double>();
    std::unique_lock lock(c.mutex);
    c.entries.clear();
  }
  auto& c = kernel_cache<float>();
  std::unique_lock lock(c.mutex);
  c.entries.clear();
}

template <typename Real>
void apply_transfer(std::span<std::complex<Real>> spectrum, const BasicAsmKernel<Real>& kernel, bool conjugate) {
  if (spectrum.size() != kernel.transfer.size()) throw ShapeMismatch("apply_transfer: kernel grid mismatch");
  const auto* h = kernel.transfer.data();
  auto* s = spectrum.data();
  const std::size_t n = spectrum.size();
  if (conjugate) {
    for (std::size_t i = 0; i < n; ++i) s[i] *= std::conj(h[i]);
  } else {
    for (std::size_t i = 0; i < n; ++i) s[i] *= h[i];
  }
}

template <typename Real>
void propagate_inplace(std::span<std::complex<Real>> data, const BasicAsmKernel<Real>& kernel, bool adjoint) {
  fft2_inplace(data, kernel.shape, FftDirection::forward);
  apply_transfer(data, kernel, adjoint);
  fft2_inplace(data, kernel.shape, FftDirection::inverse);
}

namespace {

template <typename Real>
BasicField<Real> run(const BasicField<Real>& field, double z, BandLimit band_limit, bool adjoint) {
  auto kernel = cached_kernel<Real>(field.shape(), field.pitch(), field.wavelength(), z, band_limit);
  typename BasicField<Real>::Buffer buf(field.buffer());
  propagate_inplace<Real>(buf, *kernel, adjoint);
  return BasicField<Real>(field.shape(), field.pitch(), field.wavelength(), std::move(buf));
}

}  // namespace

template <typename Real>
BasicField<Real> propagate(const BasicField<Real>& field, double z, BandLimit band_limit) {
  return run(field, z, band_limit, false);
}

template <typename Real>
BasicField<Real> propagate_adjoint(const BasicField<Real>& field, double z, BandLimit band_limit) {
  return run(field, z, band_limit, true);
}

template std::shared_ptr<const BasicAsmKernel<double>> cached_kernel<double>(Shape, double, double, double, BandLimit);
template std::shared_ptr<const BasicAsmKernel<float>> cached_kernel<float>(Shape, double, double, double, BandLimit);
template void apply_transfer<double>(std::span<std::complex<double>>, const BasicAsmKernel<double>&, bool);
template void apply_transfer<float>(std::span<std::complex<float>>, const BasicAsmKernel<float>&, bool);
template void propagate_inplace<double>(std::span<std::complex<double>>, const BasicAsmKernel<double>&, bool);
template void propagate_inplace<float>(std::span<std::complex<float>>, const BasicAsmKernel<float>&, bool);
template BasicField<double> propagate(const BasicField<double>&, double, BandLimit);
template BasicField<float> propagate(const BasicField<float>&, double, BandLimit);
template BasicField<double> propagate_adjoint(const BasicField<double>&, double, BandLimit);
template BasicField<float> propagate_adjoint(const BasicField<float>&, double, BandLimit);

}  // namespace msholo
