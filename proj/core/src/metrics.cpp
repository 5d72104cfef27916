#include "msholo/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "msholo/forward.hpp"

namespace msholo {

double psnr(std::span<const double> image, std::span<const double> reference, double peak) {
  if (image.size() != reference.size()) throw ShapeMismatch("psnr: inputs differ in size");
  if (!(peak > 0.0)) throw DomainError("psnr: peak must be positive");
  double sse = 0.0;
  for (std::size_t i = 0; i < image.size(); ++i) {
    const double d = image[i] - reference[i];
    sse += d * d;
  }
  if (sse == 0.0) return kPsnrIdentical;
  const double mse = sse / static_cast<double>(image.size());
  return 10.0 * std::log10(peak * peak / mse);
}

double psnr(const IntensityImage& image, const IntensityImage& reference, double peak) {
  require_same_shape(image.shape(), reference.shape(), "psnr");
  return psnr(image.data(), reference.data(), peak);
}

double stack_psnr(const std::vector<IntensityImage>& images, const std::vector<IntensityImage>& reference) {
  if (images.size() != reference.size() || images.empty()) throw ShapeMismatch("stack_psnr: plane counts differ");
  std::vector<double> a;
  std::vector<double> b;
  double peak = 0.0;
  for (std::size_t k = 0; k < images.size(); ++k) {
    require_same_shape(images[k].shape(), reference[k].shape(), "stack_psnr");
    a.insert(a.end(), images[k].data().begin(), images[k].data().end());
    b.insert(b.end(), reference[k].data().begin(), reference[k].data().end());
    peak = std::max(peak, reference[k].max());
  }
  return psnr(a, b, peak);
}

namespace {

std::vector<double> gaussian_taps() {
  std::vector<double> g(11);
  double sum = 0.0;
  for (int i = 0; i < 11; ++i) {
    g[i] = std::exp(-0.5 * (i - 5) * (i - 5) / (1.5 * 1.5));
    sum += g[i];
  }
  for (double& v : g) v /= sum;
  return g;
}

// Separable valid-mode filtering of an H x W buffer with the 11-tap window.
std::vector<double> filter_valid(const std::vector<double>& x, int H, int W, const std::vector<double>& g) {
  const int oh = H - 10;
  const int ow = W - 10;
  std::vector<double> tmp(static_cast<std::size_t>(H) * ow);
  for (int r = 0; r < H; ++r) {
    for (int c = 0; c < ow; ++c) {
      double s = 0.0;
      for (int k = 0; k < 11; ++k) s += g[k] * x[static_cast<std::size_t>(r) * W + c + k];
      tmp[static_cast<std::size_t>(r) * ow + c] = s;
    }
  }
  std::vector<double> out(static_cast<std::size_t>(oh) * ow);
  for (int r = 0; r < oh; ++r) {
    for (int c = 0; c < ow; ++c) {
      double s = 0.0;
      for (int k = 0; k < 11; ++k) s += g[k] * tmp[static_cast<std::size_t>(r + k) * ow + c];
      out[static_cast<std::size_t>(r) * ow + c] = s;
    }
  }
  return out;
}

}  // namespace

double ssim(const IntensityImage& image, const IntensityImage& reference) {
  require_same_shape(image.shape(), reference.shape(), "ssim");
  const int H = image.rows();
  const int W = image.cols();
  if (H < 11 || W < 11) throw SizingError("ssim needs images of at least 11 x 11");
  const auto g = gaussian_taps();
  const std::size_t n = image.size();
  std::vector<double> x(image.data().begin(), image.data().end());
  std::vector<double> y(reference.data().begin(), reference.data().end());
  std::vector<double> xx(n), yy(n), xy(n);
  for (std::size_t i = 0; i < n; ++i) {
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  const auto mx = filter_valid(x, H, W, g);
  const auto my = filter_valid(y, H, W, g);
  const auto sxx = filter_valid(xx, H, W, g);
  const auto syy = filter_valid(yy, H, W, g);
  const auto sxy = filter_valid(xy, H, W, g);
  constexpr double C1 = 0.01 * 0.01;
  constexpr double C2 = 0.03 * 0.03;
  double total = 0.0;
  for (std::size_t i = 0; i < mx.size(); ++i) {
    const double vx = sxx[i] - mx[i] * mx[i];
    const double vy = syy[i] - my[i] * my[i];
    const double cxy = sxy[i] - mx[i] * my[i];
    total += ((2 * mx[i] * my[i] + C1) * (2 * cxy + C2)) / ((mx[i] * mx[i] + my[i] * my[i] + C1) * (vx + vy + C2));
  }
  return total / static_cast<double>(mx.size());
}

Region centered_region(Shape shape, int rows, int cols) {
  return {(shape.rows - rows) / 2, (shape.cols - cols) / 2, rows, cols};
}

double michelson_contrast(const IntensityImage& image, const Region& region, int period) {
  if (period < 2) throw DomainError("michelson_contrast: period must be at least 2");
  if (region.row < 0 || region.col < 0 || region.rows < 1 || region.cols < period ||
      region.row + region.rows > image.rows() || region.col + region.cols > image.cols()) {
    throw DomainError("michelson_contrast: region outside the image");
  }
  double total = 0.0;
  long count = 0;
  for (int r = region.row; r < region.row + region.rows; ++r) {
    for (int c = region.col; c + period <= region.col + region.cols; c += period) {
      double lo = image(r, c);
      double hi = lo;
      for (int k = 1; k < period; ++k) {
        lo = std::min(lo, image(r, c + k));
        hi = std::max(hi, image(r, c + k));
      }
      total += (hi + lo) > 0.0 ? (hi - lo) / (hi + lo) : 0.0;
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

double michelson_contrast(const IntensityImage& image) {
  return michelson_contrast(image, centered_region(image.shape(), 100, 100));
}

namespace {

// std/mean of one tile; nullopt when the mean is zero.
std::optional<double> tile_contrast(const IntensityImage& image, int r0, int c0, int window) {
  double sum = 0.0;
  double sq = 0.0;
  for (int r = r0; r < r0 + window; ++r) {
    for (int c = c0; c < c0 + window; ++c) {
      sum += image(r, c);
      sq += image(r, c) * image(r, c);
    }
  }
  const double n = static_cast<double>(window) * window;
  const double mean = sum / n;
  if (!(mean > 0.0)) return std::nullopt;
  return std::sqrt(std::max(0.0, sq / n - mean * mean)) / mean;
}

}  // namespace

double speckle_contrast(const IntensityImage& image, int window) {
  if (window < 2) throw DomainError("speckle_contrast: window must be at least 2 pixels");
  if (window > image.rows() || window > image.cols()) throw DomainError("speckle_contrast: window larger than image");
  double total = 0.0;
  long tiles = 0;
  for (int r = 0; r + window <= image.rows(); r += window) {
    for (int c = 0; c + window <= image.cols(); c += window) {
      auto k = tile_contrast(image, r, c, window);
      if (!k) throw DomainError("speckle_contrast: zero-mean region");
      total += *k;
      ++tiles;
    }
  }
  return total / static_cast<double>(tiles);
}

std::optional<double> speckle_contrast_flat(const IntensityImage& image, const IntensityImage& reference, int window,
                                            double flatness) {
  require_same_shape(image.shape(), reference.shape(), "speckle_contrast_flat");
  if (window < 2) throw DomainError("speckle_contrast: window must be at least 2 pixels");
  double total = 0.0;
  long tiles = 0;
  for (int r = 0; r + window <= image.rows(); r += window) {
    for (int c = 0; c + window <= image.cols(); c += window) {
      auto ref = tile_contrast(reference, r, c, window);
      if (!ref || *ref >= flatness) continue;
      auto k = tile_contrast(image, r, c, window);
      if (!k) continue;
      total += *k;
      ++tiles;
    }
  }
  if (tiles == 0) return std::nullopt;
  return total / static_cast<double>(tiles);
}

IntensityImage fftshift(const IntensityImage& image) {
  IntensityImage out(image.shape(), image.pitch());
  const int H = image.rows();
  const int W = image.cols();
  for (int r = 0; r < H; ++r) {
    for (int c = 0; c < W; ++c) out((r + H / 2) % H, (c + W / 2) % W) = image(r, c);
  }
  return out;
}

IntensityImage log_scale(const IntensityImage& image, double decades) {
  if (!(decades > 0.0)) throw DomainError("log_scale: decades must be positive");
  const double peak = image.max();
  IntensityImage out(image.shape(), image.pitch());
  if (!(peak > 0.0)) return out;
  for (std::size_t i = 0; i < image.size(); ++i) {
    const double v = image.data()[i] / peak;
    out.data()[i] = v > 0.0 ? std::clamp((std::log10(v) + decades) / decades, 0.0, 1.0) : 0.0;
  }
  return out;
}

EyeboxReport eyebox_report(const std::vector<ComplexField2D>& fields_at_z0, const std::vector<double>& weights,
                           double eyepiece_focal) {
  if (fields_at_z0.empty() || fields_at_z0.size() != weights.size()) {
    throw ShapeMismatch("eyebox_report: need one weight per field");
  }
  const Shape shape = fields_at_z0.front().shape();
  std::vector<double> acc(shape.size(), 0.0);
  double pitch = 0.0;
  for (std::size_t i = 0; i < fields_at_z0.size(); ++i) {
    require_same_shape(fields_at_z0[i].shape(), shape, "eyebox_report");
    const ComplexField2D e = eyebox_field(fields_at_z0[i], eyepiece_focal);
    pitch = e.pitch();
    auto d = e.data();
    for (std::size_t k = 0; k < d.size(); ++k) acc[k] += weights[i] * std::norm(d[k]);
  }
  EyeboxReport rep;
  rep.intensity = fftshift(IntensityImage(shape, pitch, std::move(acc)));
  rep.energy = rep.intensity.sum();
  const double mean = rep.energy / static_cast<double>(shape.size());
  rep.peak_to_mean = mean > 0.0 ? rep.intensity.max() / mean : 0.0;
  const int ch = std::max(1, static_cast<int>(std::lround(0.1 * shape.rows)));
  const int cw = std::max(1, static_cast<int>(std::lround(0.1 * shape.cols)));
  const Region center = centered_region(shape, ch, cw);
  double inner = 0.0;
  for (int r = center.row; r < center.row + ch; ++r) {
    for (int c = center.col; c < center.col + cw; ++c) inner += rep.intensity(r, c);
  }
  rep.central_fraction = rep.energy > 0.0 ? inner / rep.energy : 0.0;
  return rep;
}

std::string MetricReport::csv_header() { return "label,plane,z_mm,psnr_db,ssim,speckle_contrast,michelson"; }

namespace {

std::string fmt(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : ""; }

}  // namespace

std::string MetricReport::csv_rows(const std::string& label) const {
  std::ostringstream os;
  for (std::size_t k = 0; k < planes.size(); ++k) {
    os << label << ',' << k << ',' << fmt(planes[k].z * 1e3) << ',' << fmt(planes[k].psnr) << ','
       << fmt(planes[k].ssim) << ',' << fmt(planes[k].speckle) << ",\n";
  }
  os << label << ",stack,," << fmt(psnr) << ',' << fmt(ssim) << ',' << fmt(speckle) << ',' << fmt(michelson) << '\n';
  return os.str();
}

std::string MetricReport::summary() const {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << "PSNR " << psnr << " dB (per-plane mean " << psnr_mean << " dB), SSIM "
     << std::setprecision(4) << ssim;
  if (speckle) os << ", speckle contrast " << *speckle;
  if (michelson) os << ", Michelson " << *michelson;
  return os.str();
}

MetricReport evaluate_stack(const std::vector<IntensityImage>& predicted, const FocalStackTarget& target,
                            std::optional<Region> contrast_region, int contrast_plane) {
  target.validate();
  if (predicted.size() != target.size()) throw ShapeMismatch("evaluate_stack: plane counts differ");
  MetricReport rep;
  rep.psnr = stack_psnr(predicted, target.images);
  double peak = 0.0;
  for (const auto& t : target.images) peak = std::max(peak, t.max());
  if (!(peak > 0.0)) throw DomainError("evaluate_stack: target is all zero");
  double speckle_sum = 0.0;
  int speckle_planes = 0;
  for (std::size_t k = 0; k < predicted.size(); ++k) {
    PlaneMetrics pm;
    pm.z = target.planes[k];
    pm.psnr = psnr(predicted[k], target.images[k], peak);
    std::vector<double> a(predicted[k].data().begin(), predicted[k].data().end());
    std::vector<double> b(target.images[k].data().begin(), target.images[k].data().end());
    for (double& v : a) v /= peak;
    for (double& v : b) v /= peak;
    const IntensityImage an(predicted[k].shape(), predicted[k].pitch(), std::move(a));
    const IntensityImage bn(target.images[k].shape(), target.images[k].pitch(), std::move(b));
    pm.ssim = ssim(an, bn);
    pm.speckle = speckle_contrast_flat(predicted[k], target.images[k], 8);
    if (pm.speckle) {
      speckle_sum += *pm.speckle;
      ++speckle_planes;
    }
    rep.psnr_mean += pm.psnr;
    rep.ssim += pm.ssim;
    rep.planes.push_back(pm);
  }
  rep.psnr_mean /= static_cast<double>(predicted.size());
  rep.ssim /= static_cast<double>(predicted.size());
  if (speckle_planes > 0) rep.speckle = speckle_sum / speckle_planes;
  if (contrast_region) {
    if (contrast_plane < 0 || static_cast<std::size_t>(contrast_plane) >= predicted.size()) {
      throw DomainError("evaluate_stack: contrast plane out of range");
    }
    rep.michelson = michelson_contrast(predicted[static_cast<std::size_t>(contrast_plane)], *contrast_region);
  }
  return rep;
}

}  // namespace msholo
