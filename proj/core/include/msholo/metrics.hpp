#pragma once

#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "msholo/field.hpp"
#include "msholo/targets.hpp"

namespace msholo {

// Returned by psnr() for identical inputs.
inline constexpr double kPsnrIdentical = std::numeric_limits<double>::infinity();

// 10 log10(peak^2 / MSE).
double psnr(std::span<const double> image, std::span<const double> reference, double peak);
double psnr(const IntensityImage& image, const IntensityImage& reference, double peak);

// PSNR over the concatenated stack, peak = largest target value.
double stack_psnr(const std::vector<IntensityImage>& images, const std::vector<IntensityImage>& reference);

// Mean SSIM over all valid positions of an 11-tap Gaussian window
// (sigma 1.5), C1 = (0.01 L)^2, C2 = (0.03 L)^2 with L = 1. Inputs are
// expected in [0, 1]; both dimensions must be at least 11.
double ssim(const IntensityImage& image, const IntensityImage& reference);

struct Region {
  int row = 0;
  int col = 0;
  int rows = 0;
  int cols = 0;
};

// rows x cols window centered in `shape`.
Region centered_region(Shape shape, int rows, int cols);

// (max - min) / (max + min) over each horizontal grating period inside the
// region, averaged. Periods start at region.col; a zero-sum period counts 0.
double michelson_contrast(const IntensityImage& image, const Region& region, int period = 2);
// Default region: centered 100 x 100.
double michelson_contrast(const IntensityImage& image);

// Mean over non-overlapping window x window tiles of std/mean (population
// std). A tile with zero mean raises DomainError.
double speckle_contrast(const IntensityImage& image, int window);

// Speckle contrast of `image` restricted to tiles where the reference is
// nearly flat (reference std/mean below `flatness`). Empty if no tile
// qualifies.
std::optional<double> speckle_contrast_flat(const IntensityImage& image, const IntensityImage& reference, int window,
                                            double flatness = 0.05);

// Quadrant swap so zero frequency sits at (rows/2, cols/2).
IntensityImage fftshift(const IntensityImage& image);

// log10 display map of I / max(I) spanning `decades`, clipped to [0, 1].
IntensityImage log_scale(const IntensityImage& image, double decades = 5.0);

struct EyeboxReport {
  IntensityImage intensity;  // sum_i w_i |e_i|^2, fftshifted
  double energy = 0.0;
  double peak_to_mean = 0.0;
  double central_fraction = 0.0;  // energy inside the central square covering 1% of the area
};

// Eyebox statistics for incoherent per-source fields at z0.
EyeboxReport eyebox_report(const std::vector<ComplexField2D>& fields_at_z0, const std::vector<double>& weights,
                           double eyepiece_focal);

struct PlaneMetrics {
  double z = 0.0;
  double psnr = 0.0;
  double ssim = 0.0;
  std::optional<double> speckle;
};

struct MetricReport {
  double psnr = 0.0;       // concatenated stack
  double psnr_mean = 0.0;  // mean of per-plane values
  double ssim = 0.0;       // mean over planes
  std::optional<double> michelson;
  std::optional<double> speckle;
  std::vector<PlaneMetrics> planes;

  static std::string csv_header();
  // One row per plane followed by a "stack" row.
  std::string csv_rows(const std::string& label) const;
  std::string summary() const;
};

// Predicted and target stacks on the same planes. Both are divided by the
// target peak before SSIM. `contrast_region` adds a Michelson figure
// measured at plane `contrast_plane`.
MetricReport evaluate_stack(const std::vector<IntensityImage>& predicted, const FocalStackTarget& target,
                            std::optional<Region> contrast_region = std::nullopt, int contrast_plane = 0);

}  // namespace msholo
