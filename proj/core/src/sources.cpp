#include "msholo/sources.hpp"

#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

namespace msholo {

double norm(Vec2 v) { return std::hypot(v.x, v.y); }

SourceArray::SourceArray(std::vector<Vec2> tilts, std::vector<double> intensities)
    : tilts_(std::move(tilts)), intensities_(std::move(intensities)) {
  if (tilts_.empty()) throw DomainError("a source array needs at least one source");
  if (tilts_.size() != intensities_.size()) throw ShapeMismatch("source tilts and intensities differ in length");
  for (double w : intensities_) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw DomainError("source intensities must be finite and nonnegative");
  }
  for (const auto& t : tilts_) {
    if (!std::isfinite(t.x) || !std::isfinite(t.y)) throw DomainError("source tilts must be finite");
  }
  if (!(total_intensity() > 0.0)) throw DomainError("source intensities must sum to a positive value");
}

SourceArray SourceArray::on_axis() { return SourceArray({Vec2{}}, {1.0}); }

double SourceArray::total_intensity() const {
  return std::accumulate(intensities_.begin(), intensities_.end(), 0.0);
}

void SourceArray::check_paraxial(double wavelength) const {
  for (const auto& t : tilts_) {
    const double theta = incidence_angle(norm(t), wavelength);
    if (theta > kParaxialLimitRad) {
      std::ostringstream os;
      os << "source tilt " << norm(t) << " rad/m gives a " << theta * 180.0 / std::numbers::pi
         << " degree incidence angle, beyond the 5 degree paraxial limit";
      throw DomainError(os.str());
    }
  }
}

SourceArray SourceArray::with_intensities(std::vector<double> intensities) const {
  return SourceArray(tilts_, std::move(intensities));
}

SourceArray make_grid(const GridSpec& spec) {
  if (spec.rows < 1 || spec.cols < 1) throw DomainError("source grid needs at least one row and column");
  if (!(spec.spacing >= 0.0)) throw DomainError("source grid spacing must be nonnegative");
  std::vector<Vec2> tilts;
  tilts.reserve(static_cast<std::size_t>(spec.rows) * spec.cols);
  for (int r = 0; r < spec.rows; ++r) {
    for (int c = 0; c < spec.cols; ++c) {
      tilts.push_back({(c - (spec.cols - 1) / 2.0) * spec.spacing + spec.offset.x,
                       (r - (spec.rows - 1) / 2.0) * spec.spacing + spec.offset.y});
    }
  }
  const double w = 1.0 / static_cast<double>(tilts.size());
  return SourceArray(std::move(tilts), std::vector<double>(static_cast<std::size_t>(spec.rows) * spec.cols, w));
}

double incidence_angle(double tilt, double wavelength) { return wavelength * tilt / (2.0 * std::numbers::pi); }

double tilt_from_source_offset(double offset, double focal_length, double wavelength) {
  return 2.0 * std::numbers::pi * (offset / focal_length) / wavelength;
}

template <typename Real>
BasicField<Real> plane_wave(Vec2 tilt, Shape shape, double pitch, double wavelength) {
  SourceArray({tilt}, {1.0}).check_paraxial(wavelength);
  BasicField<Real> out(shape, pitch, wavelength);
  auto data = out.data();
  for (int r = 0; r < shape.rows; ++r) {
    const double py = tilt.y * (r * pitch);
    for (int c = 0; c < shape.cols; ++c) {
      const double phase = tilt.x * (c * pitch) + py;
      data[static_cast<std::size_t>(r) * shape.cols + c] = {static_cast<Real>(std::cos(phase)),
                                                            static_cast<Real>(std::sin(phase))};
    }
  }
  return out;
}

template BasicField<double> plane_wave<double>(Vec2, Shape, double, double);
template BasicField<float> plane_wave<float>(Vec2, Shape, double, double);

double memory_effect_spacing(double pitch, double wavelength, double gap) {
  if (!(pitch > 0.0) || !(wavelength > 0.0) || !(gap > 0.0)) {
    throw DomainError("memory_effect_spacing: arguments must be positive");
  }
  return 2.0 * std::numbers::pi * pitch / (wavelength * gap);
}

Vec2 expected_shift(Vec2 tilt, double wavelength, double z) {
  const double s = wavelength * z / (2.0 * std::numbers::pi);
  return {s * tilt.x, s * tilt.y};
}

int sources_in_memory_region(const SourceArray& sources, double threshold) {
  const auto& t = sources.tilts();
  int count = 0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    for (std::size_t j = 0; j < t.size(); ++j) {
      if (i != j && norm(t[i] - t[j]) < threshold) {
        ++count;
        break;
      }
    }
  }
  return count;
}

}  // namespace msholo
