#pragma once

#include <complex>
#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "msholo/field.hpp"

namespace msholo {

// none: only the evanescent cutoff |u| < 1/lambda.
// matsushima: additionally limits each frequency axis to
//   |u| < 1 / (lambda * sqrt((2 * du * z)^2 + 1)),  du = grid frequency spacing,
// which suppresses wraparound of steep components over long distances.
enum class BandLimit { none, matsushima };

// Angular-spectrum transfer function on the DFT frequency grid:
//   H(u) = exp(j 2 pi z / lambda * sqrt(1 - |lambda u|^2)) inside the band, 0 outside.
template <typename Real>
struct BasicAsmKernel {
  Shape shape;
  double pitch = 0.0;
  double wavelength = 0.0;
  double z = 0.0;
  BandLimit band_limit = BandLimit::none;
  AlignedVector<std::complex<Real>> transfer;
  std::vector<std::uint8_t> band_mask;
};

using AsmKernel = BasicAsmKernel<double>;

AsmKernel asm_kernel(Shape shape, double pitch, double wavelength, double z, BandLimit band_limit = BandLimit::none);

// Shared, immutable kernels keyed by (shape, pitch, wavelength, z, band limit).
// Concurrent lookups are safe.
template <typename Real>
std::shared_ptr<const BasicAsmKernel<Real>> cached_kernel(Shape shape, double pitch, double wavelength, double z,
                                                          BandLimit band_limit);
void clear_kernel_cache();

// ifft2(fft2(field) * H_z).
template <typename Real>
BasicField<Real> propagate(const BasicField<Real>& field, double z, BandLimit band_limit = BandLimit::none);

// Conjugate transpose of propagate: ifft2(fft2(field) * conj(H_z)).
template <typename Real>
BasicField<Real> propagate_adjoint(const BasicField<Real>& field, double z, BandLimit band_limit = BandLimit::none);

// Multiplies a spectrum in place by H (or conj(H)).
template <typename Real>
void apply_transfer(std::span<std::complex<Real>> spectrum, const BasicAsmKernel<Real>& kernel, bool conjugate);

// In-place propagation of a raw buffer; used on optimizer hot paths.
template <typename Real>
void propagate_inplace(std::span<std::complex<Real>> data, const BasicAsmKernel<Real>& kernel, bool adjoint);

}  // namespace msholo
