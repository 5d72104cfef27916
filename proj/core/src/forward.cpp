#include "msholo/forward.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "msholo/fft.hpp"

namespace msholo {

const char* modulation_name(Modulation m) {
  switch (m) {
    case Modulation::phase_only:
      return "phase";
    case Modulation::amplitude_only:
      return "amplitude";
    case Modulation::complex:
      return "complex";
  }
  return "?";
}

Modulation parse_modulation(const std::string& name) {
  if (name == "phase" || name == "phase_only") return Modulation::phase_only;
  if (name == "amplitude" || name == "amplitude_only") return Modulation::amplitude_only;
  if (name == "complex") return Modulation::complex;
  throw ConfigError("unknown modulation '" + name + "'");
}

SlmPattern::SlmPattern(Modulation modulation, Shape shape, double pitch, std::vector<double> phase,
                       std::vector<double> amplitude)
    : modulation_(modulation), shape_(shape), pitch_(pitch), phase_(std::move(phase)), amplitude_(std::move(amplitude)) {
  if (shape_.rows < 1 || shape_.cols < 1) throw SizingError("SLM pattern must be at least 1x1");
  if (!(pitch_ > 0.0)) throw DomainError("SLM pitch must be positive");
  if (phase_.size() != shape_.size() || amplitude_.size() != shape_.size()) {
    throw ShapeMismatch("SLM planes do not match the pattern shape");
  }
  auto finite = [](double v) { return std::isfinite(v); };
  if (!std::all_of(phase_.begin(), phase_.end(), finite) || !std::all_of(amplitude_.begin(), amplitude_.end(), finite)) {
    throw DomainError("SLM pattern values must be finite");
  }
}

SlmPattern SlmPattern::identity(Modulation modulation, Shape shape, double pitch) {
  return SlmPattern(modulation, shape, pitch, std::vector<double>(shape.size(), 0.0),
                    std::vector<double>(shape.size(), 1.0));
}

std::complex<double> SlmPattern::value(std::size_t i) const {
  switch (modulation_) {
    case Modulation::phase_only:
      return std::polar(1.0, phase_[i]);
    case Modulation::amplitude_only:
      return {amplitude_[i], 0.0};
    case Modulation::complex:
      return std::polar(1.0, phase_[i]) * amplitude_[i];
  }
  return {};
}

ComplexField2D SlmPattern::field(double wavelength) const {
  ComplexField2D out(shape_, pitch_, wavelength);
  auto d = out.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = value(i);
  return out;
}

SystemConfig SystemConfig::desk_default() {
  SystemConfig c;
  c.planes = linspace_planes(15e-3, 25e-3, 5);
  return c;
}

void SystemConfig::validate(bool two_slm) const {
  if (!(pitch > 0.0)) throw ConfigError("pitch must be positive");
  if (wavelengths.empty()) throw ConfigError("at least one wavelength is required");
  for (double w : wavelengths) {
    if (!(w > 0.0)) throw ConfigError("wavelengths must be positive");
  }
  if (upsample < 1) throw ConfigError("upsample must be >= 1");
  if (two_slm && !(gap > 0.0)) throw ConfigError("two-SLM models need a positive gap");
  if (planes.empty()) throw ConfigError("at least one target plane is required");
  for (std::size_t i = 1; i < planes.size(); ++i) {
    if (!(planes[i] > planes[i - 1])) throw ConfigError("target planes must be strictly increasing");
  }
}

std::vector<double> linspace_planes(double first, double last, int count) {
  if (count < 1) throw ConfigError("plane count must be >= 1");
  if (count == 1) return {first};
  std::vector<double> out(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) out[i] = first + (last - first) * i / (count - 1);
  return out;
}

namespace {

ComplexField2D upsampled_slm_field(const SlmPattern& slm, int factor, double wavelength) {
  return resample(slm.field(wavelength), factor, ResampleDirection::up);
}

void multiply_inplace(ComplexField2D& a, const ComplexField2D& b, const char* what) {
  require_same_shape(a.shape(), b.shape(), what);
  auto da = a.data();
  auto db = b.data();
  for (std::size_t i = 0; i < da.size(); ++i) da[i] *= db[i];
}

void accumulate_intensity(std::vector<double>& acc, const ComplexField2D& g, double weight) {
  auto d = g.data();
  for (std::size_t i = 0; i < d.size(); ++i) acc[i] += weight * std::norm(d[i]);
}

void check_slm_grid(const SlmPattern& slm, const SystemConfig& config) {
  if (std::abs(slm.pitch() - config.pitch) > 1e-12 * config.pitch) {
    throw ShapeMismatch("SLM pitch does not match the system pitch");
  }
}

}  // namespace

ForwardResult forward_single(const SlmPattern& slm, const ComplexField2D& illum, double z, const SystemConfig& config) {
  check_slm_grid(slm, config);
  ComplexField2D field = upsampled_slm_field(slm, config.upsample, illum.wavelength());
  multiply_inplace(field, illum, "forward_single: illumination vs upsampled SLM");
  field = propagate(field.with_pitch(illum.pitch()), z, config.band_limit);
  std::vector<double> intensity(field.size(), 0.0);
  accumulate_intensity(intensity, field, 1.0);
  IntensityImage image(field.shape(), field.pitch(), std::move(intensity));
  return {std::move(field), std::move(image)};
}

IntensityImage forward_multisource_1slm(const SlmPattern& slm, const SourceArray& sources, double z,
                                        const SystemConfig& config, double wavelength) {
  check_slm_grid(slm, config);
  sources.check_paraxial(wavelength);
  const ComplexField2D up = upsampled_slm_field(slm, config.upsample, wavelength);
  std::vector<double> acc(up.size(), 0.0);
  for (std::size_t i = 0; i < sources.size(); ++i) {
    ComplexField2D f = plane_wave<double>(sources.tilts()[i], up.shape(), up.pitch(), wavelength);
    multiply_inplace(f, up, "forward_multisource_1slm");
    accumulate_intensity(acc, propagate(f, z, config.band_limit), sources.intensities()[i]);
  }
  return downsample(IntensityImage(up.shape(), up.pitch(), std::move(acc)), config.upsample);
}

std::vector<ComplexField2D> fields_at_second_slm(const SlmPattern& s1, const SourceArray& sources,
                                                 const SystemConfig& config, double wavelength) {
  check_slm_grid(s1, config);
  if (!(config.gap > 0.0)) throw DomainError("two-SLM models need a positive gap");
  sources.check_paraxial(wavelength);
  const ComplexField2D up1 = upsampled_slm_field(s1, config.upsample, wavelength);
  std::vector<ComplexField2D> out;
  out.reserve(sources.size());
  for (std::size_t i = 0; i < sources.size(); ++i) {
    ComplexField2D f = plane_wave<double>(sources.tilts()[i], up1.shape(), up1.pitch(), wavelength);
    multiply_inplace(f, up1, "fields_at_second_slm");
    out.push_back(propagate(f, config.gap, config.band_limit));
  }
  return out;
}

IntensityImage forward_multisource_2slm(const SlmPattern& s1, const SlmPattern& s2, const SourceArray& sources,
                                        double z, const SystemConfig& config, double wavelength) {
  require_same_shape(s1.shape(), s2.shape(), "forward_multisource_2slm: SLM grids");
  check_slm_grid(s2, config);
  const ComplexField2D up2 = upsampled_slm_field(s2, config.upsample, wavelength);
  auto at_s2 = fields_at_second_slm(s1, sources, config, wavelength);
  std::vector<double> acc(up2.size(), 0.0);
  for (std::size_t i = 0; i < sources.size(); ++i) {
    multiply_inplace(at_s2[i], up2, "forward_multisource_2slm");
    accumulate_intensity(acc, propagate(at_s2[i], z, config.band_limit), sources.intensities()[i]);
  }
  return downsample(IntensityImage(up2.shape(), up2.pitch(), std::move(acc)), config.upsample);
}

ComplexField2D eyebox_field(const ComplexField2D& field_at_z0, double eyepiece_focal) {
  if (!(eyepiece_focal > 0.0)) throw DomainError("eyepiece focal length must be positive");
  ComplexField2D e = fft2(field_at_z0);
  const double spacing = field_at_z0.wavelength() * eyepiece_focal / (field_at_z0.cols() * field_at_z0.pitch());
  return e.with_pitch(spacing);
}

ComplexField2D field_at_eyebox_plane(const SlmPattern& s1, const std::optional<SlmPattern>& s2, Vec2 tilt,
                                     const SystemConfig& config, double wavelength) {
  check_slm_grid(s1, config);
  const ComplexField2D up1 = upsampled_slm_field(s1, config.upsample, wavelength);
  ComplexField2D f = plane_wave<double>(tilt, up1.shape(), up1.pitch(), wavelength);
  multiply_inplace(f, up1, "field_at_eyebox_plane");
  if (s2) {
    f = propagate(f, config.gap, config.band_limit);
    multiply_inplace(f, upsampled_slm_field(*s2, config.upsample, wavelength), "field_at_eyebox_plane");
  }
  return eyebox_field(propagate(f, config.eyebox_plane, config.band_limit), config.eyepiece_focal);
}

}  // namespace msholo
