#pragma once

#include <complex>
#include <cstddef>
#include <span>

#include "msholo/field.hpp"

namespace msholo {

enum class FftDirection { forward, inverse };

// estimate: plans depend only on the transform size, so results are
// bit-reproducible across processes. measure: faster plans chosen by timing;
// reproducible within one process only.
enum class FftPlanning { estimate, measure };

void set_fft_planning(FftPlanning planning);
FftPlanning fft_planning();

// Upper bound on rows*cols accepted by the transforms.
void set_max_fft_elements(std::size_t count);
std::size_t max_fft_elements();

// In-place unitary 2D DFT: both directions scale by 1/sqrt(rows*cols).
void fft2_inplace(std::span<std::complex<double>> data, Shape shape, FftDirection direction);
void fft2_inplace(std::span<std::complex<float>> data, Shape shape, FftDirection direction);

template <typename Real>
BasicField<Real> fft2(const BasicField<Real>& field);
template <typename Real>
BasicField<Real> ifft2(const BasicField<Real>& field);

}  // namespace msholo
