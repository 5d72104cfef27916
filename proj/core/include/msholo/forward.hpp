#pragma once

#include <optional>
#include <vector>

#include "msholo/field.hpp"
#include "msholo/propagation.hpp"
#include "msholo/sources.hpp"

namespace msholo {

enum class Modulation { phase_only, amplitude_only, complex };

const char* modulation_name(Modulation m);
Modulation parse_modulation(const std::string& name);

// Real-valued modulator state at SLM resolution. Both planes are always
// stored; the modulation type decides which one the field uses:
//   phase_only     -> exp(j phase)
//   amplitude_only -> amplitude
//   complex        -> amplitude * exp(j phase)
// Phase is kept unwrapped; amplitude is brought into [0, 1] by
// project_constraints.
class SlmPattern {
 public:
  SlmPattern(Modulation modulation, Shape shape, double pitch, std::vector<double> phase,
             std::vector<double> amplitude);

  // Phase 0 and amplitude 1: the pattern that leaves the field unchanged.
  static SlmPattern identity(Modulation modulation, Shape shape, double pitch);

  Modulation modulation() const { return modulation_; }
  const Shape& shape() const { return shape_; }
  double pitch() const { return pitch_; }
  const std::vector<double>& phase() const { return phase_; }
  const std::vector<double>& amplitude() const { return amplitude_; }
  std::vector<double>& phase() { return phase_; }
  std::vector<double>& amplitude() { return amplitude_; }

  std::complex<double> value(std::size_t i) const;
  ComplexField2D field(double wavelength) const;

 private:
  Modulation modulation_;
  Shape shape_;
  double pitch_;
  std::vector<double> phase_;
  std::vector<double> amplitude_;
};

struct SystemConfig {
  double pitch = 8e-6;                        // SLM pixel pitch, m
  double gap = 2e-3;                          // SLM1 -> SLM2 distance, m
  std::vector<double> wavelengths{520e-9};    // m
  std::vector<double> planes;                 // target distances after the last SLM, m
  int upsample = 2;
  double eyepiece_focal = 27.5e-3;            // m
  double eyebox_plane = 20e-3;                // z0: distance whose spectrum forms the eyebox, m
  BandLimit band_limit = BandLimit::none;

  double wavelength() const { return wavelengths.front(); }
  double sim_pitch() const { return pitch / upsample; }

  // 5 planes over 15-25 mm, 8 um pitch, 2 mm gap, 520 nm, 2x upsampling.
  static SystemConfig desk_default();

  void validate(bool two_slm) const;
};

// Evenly spaced planes, both ends included.
std::vector<double> linspace_planes(double first, double last, int count);

struct ForwardResult {
  ComplexField2D field;
  IntensityImage intensity;  // |field|^2 on the field grid
};

// g = P_z{illum * up(s)}, I = |g|^2. `illum` lives on the simulation grid
// (SLM shape times config.upsample).
ForwardResult forward_single(const SlmPattern& slm, const ComplexField2D& illum, double z, const SystemConfig& config);

// sum_i w_i |P_z{p_i * up(s)}|^2, block-averaged back to SLM resolution.
IntensityImage forward_multisource_1slm(const SlmPattern& slm, const SourceArray& sources, double z,
                                        const SystemConfig& config, double wavelength);

// sum_i w_i |P_z{P_gap{p_i * up(s1)} * up(s2)}|^2, block-averaged back to SLM
// resolution.
IntensityImage forward_multisource_2slm(const SlmPattern& s1, const SlmPattern& s2, const SourceArray& sources,
                                        double z, const SystemConfig& config, double wavelength);

// Per-source fields just before the second SLM: P_gap{p_i * up(s1)}.
std::vector<ComplexField2D> fields_at_second_slm(const SlmPattern& s1, const SourceArray& sources,
                                                 const SystemConfig& config, double wavelength);

// Eyebox field e = F{g_z0}. The returned pitch is the eyebox sample spacing
// lambda * f / (cols * pitch), i.e. u = x / (lambda f).
ComplexField2D eyebox_field(const ComplexField2D& field_at_z0, double eyepiece_focal);

// Eyebox field for one source through one or two SLMs.
ComplexField2D field_at_eyebox_plane(const SlmPattern& s1, const std::optional<SlmPattern>& s2, Vec2 tilt,
                                     const SystemConfig& config, double wavelength);

}  // namespace msholo
