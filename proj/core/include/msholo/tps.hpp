#pragma once

#include <complex>
#include <span>
#include <vector>

#include "msholo/field.hpp"
#include "msholo/sources.hpp"

namespace msholo {

// Control points and their displacements in pixel units (x = column,
// y = row). A warped image samples its source at p + D(p).
struct TpsWarp {
  std::vector<Vec2> controls;
  std::vector<Vec2> displacements;

  // n x n controls evenly spread over the pixel centers of `shape`, zero
  // displacement.
  static TpsWarp lattice(Shape shape, int n);
  bool is_identity() const;
  void validate(Shape shape) const;
};

// Thin-plate spline D(p) = a0 + a1 x + a2 y + sum_c w_c U(|p - c|) with
// U(r) = r^2 log r, interpolating the control displacements. The map from
// control displacements to the dense field is linear and precomputed here.
//
// `scale` relates the dense grid to the control frame: dense pixel j sits at
// control coordinate (j + 0.5) / scale - 0.5, and dense displacements are
// scale times the control displacements.
class TpsBasis {
 public:
  TpsBasis(const std::vector<Vec2>& controls, Shape grid, int scale = 1);

  const Shape& grid() const { return grid_; }
  std::size_t control_count() const { return n_; }

  std::vector<Vec2> displacement(std::span<const Vec2> control_displacements) const;
  // Adjoint of displacement(): per-control gradient from a per-pixel gradient.
  std::vector<Vec2> adjoint(std::span<const Vec2> pixel_gradient) const;

 private:
  Shape grid_;
  std::size_t n_ = 0;
  int scale_ = 1;
  std::vector<double> weights_;  // grid.size() x n_
};

// Bilinear resampling out(p) = in(p + d(p)); samples outside the grid read 0.
template <typename T>
void warp_bilinear(std::span<const T> src, Shape shape, std::span<const Vec2> disp, std::span<T> dst);
// Accumulates the adjoint (scatter) of warp_bilinear into g_src.
template <typename T>
void warp_bilinear_adjoint(std::span<const T> g_dst, Shape shape, std::span<const Vec2> disp, std::span<T> g_src);
// Derivatives of each output sample with respect to its displacement.
template <typename T>
void warp_bilinear_slopes(std::span<const T> src, Shape shape, std::span<const Vec2> disp, std::span<T> d_dx,
                          std::span<T> d_dy);

// True when x -> x + D(x) is not locally injective somewhere on the grid.
bool warp_folds(std::span<const Vec2> disp, Shape shape);

// Resamples both quadratures of a field; fold-over prints a warning to
// std::clog.
ComplexField2D tps_apply(const ComplexField2D& field, const TpsWarp& warp);
IntensityImage tps_apply(const IntensityImage& image, const TpsWarp& warp);

// Fits control displacements so that tps_apply(source) matches `target` in
// the least-squares sense (Adam, step in pixels).
TpsWarp fit_tps(const IntensityImage& source, const IntensityImage& target, TpsWarp init, int iterations,
                double step = 0.05);

}  // namespace msholo
