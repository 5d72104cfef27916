#pragma once

#include <vector>

#include "msholo/field.hpp"

namespace msholo {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  bool operator==(const Vec2&) const = default;
};

inline Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
inline Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
inline Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }
double norm(Vec2 v);

// Largest incidence angle accepted anywhere in the library (5 degrees). The
// tilt/shift equivalence used throughout assumes small angles.
inline constexpr double kParaxialLimitRad = 5.0 * 3.14159265358979323846 / 180.0;

// Mutually incoherent plane-wave sources. Tilts are phase slopes in rad/m;
// intensities are relative weights applied to each source's |field|^2.
// Coincident tilts are allowed (a zero-spacing grid collapses onto one
// direction).
class SourceArray {
 public:
  SourceArray(std::vector<Vec2> tilts, std::vector<double> intensities);

  static SourceArray on_axis();

  std::size_t size() const { return tilts_.size(); }
  const std::vector<Vec2>& tilts() const { return tilts_; }
  const std::vector<double>& intensities() const { return intensities_; }
  double total_intensity() const;

  // Throws DomainError if any source exceeds kParaxialLimitRad at this wavelength.
  void check_paraxial(double wavelength) const;

  SourceArray with_intensities(std::vector<double> intensities) const;

 private:
  std::vector<Vec2> tilts_;
  std::vector<double> intensities_;
};

struct GridSpec {
  int rows = 1;
  int cols = 1;
  double spacing = 0.0;  // rad/m between neighbours
  Vec2 offset{};         // rad/m
};

// Tilts at ((c - (cols-1)/2) * spacing, (r - (rows-1)/2) * spacing) + offset,
// uniform intensity 1/(rows*cols).
SourceArray make_grid(const GridSpec& spec);

// Incidence angle (rad) of a phase slope: theta = lambda * m / (2 pi).
double incidence_angle(double tilt, double wavelength);

// Phase slope produced by a point source displaced `offset` meters from the
// axis of a collimator with focal length `focal_length`.
double tilt_from_source_offset(double offset, double focal_length, double wavelength);

// exp(j (x * m_x + y * m_y)) with x = col * pitch, y = row * pitch.
template <typename Real>
BasicField<Real> plane_wave(Vec2 tilt, Shape shape, double pitch, double wavelength);

// Minimum source spacing for which two SLMs a gap apart see mutually shifted
// fields by at least one pixel: 2 pi p / (lambda gap).
double memory_effect_spacing(double pitch, double wavelength, double gap);

// Lateral translation lambda z m / (2 pi) of the field produced by a tilted
// source relative to on-axis illumination.
Vec2 expected_shift(Vec2 tilt, double wavelength, double z);

// Number of sources with at least one other source closer than `threshold`
// (rad/m), i.e. sources whose outputs stay correlated.
int sources_in_memory_region(const SourceArray& sources, double threshold);

}  // namespace msholo
