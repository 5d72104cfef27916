#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "msholo/error.hpp"
#include "msholo/fft.hpp"
#include "msholo/forward.hpp"
#include "msholo/propagation.hpp"
#include "msholo/sources.hpp"

using namespace msholo;

namespace {

constexpr double kPi = std::numbers::pi;

SlmPattern random_slm(Modulation m, Shape s, double pitch, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> ph(s.size()), am(s.size());
  for (auto& v : ph) v = 2.0 * kPi * u(rng);
  for (auto& v : am) v = u(rng);
  return SlmPattern(m, s, pitch, ph, am);
}

double max_rel_diff(const IntensityImage& a, const IntensityImage& b) {
  double m = 0.0, peak = 0.0;
  for (std::size_t i = 0; i < a.data().size(); ++i) {
    m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    peak = std::max(peak, std::abs(b.data()[i]));
  }
  return m / peak;
}

}  // namespace

TEST(Sources, MemoryEffectThresholdAtDeskGeometry) {
  const double m = memory_effect_spacing(8e-6, 520e-9, 2e-3);
  EXPECT_NEAR(m / 1e3, 48.3, 0.1);
  EXPECT_NEAR(m, 2.0 * kPi * 8e-6 / (520e-9 * 2e-3), 1e-9 * m);
  EXPECT_LT(m, 50e3);
}

TEST(Sources, TiltsFromCollimatedPointSources) {
  // 4 mm source spacing behind a 500 mm collimator at the three bench colors.
  const double expect[] = {79e3, 99e3, 110e3};
  const double lambdas[] = {638e-9, 510e-9, 455e-9};
  for (int i = 0; i < 3; ++i) {
    const double m = tilt_from_source_offset(4e-3, 500e-3, lambdas[i]);
    EXPECT_NEAR(m, expect[i], 1e3);
    EXPECT_GT(m, memory_effect_spacing(8e-6, lambdas[i], 2e-3));
    EXPECT_LT(incidence_angle(1.5 * m, lambdas[i]), 0.7 * kPi / 180.0);
  }
  EXPECT_NEAR(incidence_angle(79e3, 638e-9), 0.0080, 1e-4);
}

TEST(Sources, GridLayoutAndWeights) {
  const SourceArray a = make_grid({2, 3, 10.0, {1.0, -2.0}});
  ASSERT_EQ(a.size(), 6u);
  EXPECT_DOUBLE_EQ(a.tilts()[0].x, -10.0 + 1.0);
  EXPECT_DOUBLE_EQ(a.tilts()[0].y, -5.0 - 2.0);
  EXPECT_DOUBLE_EQ(a.tilts()[5].x, 10.0 + 1.0);
  EXPECT_DOUBLE_EQ(a.tilts()[5].y, 5.0 - 2.0);
  EXPECT_NEAR(a.total_intensity(), 1.0, 1e-15);
  for (double w : a.intensities()) EXPECT_DOUBLE_EQ(w, 1.0 / 6.0);
}

TEST(Sources, InRegionCount) {
  const double t = memory_effect_spacing(8e-6, 520e-9, 2e-3);
  EXPECT_EQ(sources_in_memory_region(make_grid({4, 4, 50e3, {}}), t), 0);
  EXPECT_EQ(sources_in_memory_region(make_grid({4, 4, 10e3, {}}), t), 16);
  EXPECT_EQ(sources_in_memory_region(make_grid({4, 4, 0.0, {}}), t), 16);
  EXPECT_EQ(sources_in_memory_region(SourceArray::on_axis(), t), 0);
}

TEST(Sources, ParaxialLimitIsEnforced) {
  const double lambda = 520e-9;
  const double limit = 2.0 * kPi * std::sin(kParaxialLimitRad) / lambda;
  EXPECT_NO_THROW(make_grid({1, 1, 0.0, {0.5 * limit, 0.0}}).check_paraxial(lambda));
  EXPECT_THROW(make_grid({1, 1, 0.0, {1.5 * limit, 0.0}}).check_paraxial(lambda), DomainError);
}

TEST(Sources, PlaneWavePhaseSlope) {
  const Vec2 m{3000.0, -1500.0};
  const auto w = plane_wave<double>(m, {4, 5}, 2e-6, 520e-9);
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 5; ++c) {
      const auto expect = std::polar(1.0, c * 2e-6 * m.x + r * 2e-6 * m.y);
      EXPECT_NEAR(std::abs(w(r, c) - expect), 0.0, 1e-14);
    }
  }
}

TEST(Sources, ExpectedShiftFormula) {
  const Vec2 s = expected_shift({1e5, -2e5}, 520e-9, 10e-3);
  EXPECT_NEAR(s.x, 520e-9 * 10e-3 * 1e5 / (2.0 * kPi), 1e-18);
  EXPECT_NEAR(s.y, -520e-9 * 10e-3 * 2e5 / (2.0 * kPi), 1e-18);
}

TEST(Forward, SlmFieldFollowsModulation) {
  const Shape s{3, 3};
  const SlmPattern p = random_slm(Modulation::complex, s, 8e-6, 1);
  const SlmPattern ph(Modulation::phase_only, s, 8e-6, p.phase(), p.amplitude());
  const SlmPattern am(Modulation::amplitude_only, s, 8e-6, p.phase(), p.amplitude());
  for (std::size_t i = 0; i < s.size(); ++i) {
    EXPECT_NEAR(std::abs(p.value(i) - std::polar(p.amplitude()[i], p.phase()[i])), 0.0, 1e-15);
    EXPECT_NEAR(std::abs(ph.value(i) - std::polar(1.0, p.phase()[i])), 0.0, 1e-15);
    EXPECT_NEAR(std::abs(am.value(i) - p.amplitude()[i]), 0.0, 1e-15);
  }
}

TEST(Forward, IdentitySecondSlmReducesToPropagationOverBothDistances) {
  SystemConfig cfg = SystemConfig::desk_default();
  const Shape s{16, 16};
  const SlmPattern s1 = random_slm(Modulation::phase_only, s, cfg.pitch, 2);
  const SlmPattern id = SlmPattern::identity(Modulation::amplitude_only, s, cfg.pitch);
  const SourceArray src = SourceArray::on_axis();
  const IntensityImage two = forward_multisource_2slm(s1, id, src, 5e-3, cfg, cfg.wavelength());

  SystemConfig whole = cfg;
  const IntensityImage one = forward_multisource_1slm(s1, src, 5e-3 + cfg.gap, whole, cfg.wavelength());
  EXPECT_LT(max_rel_diff(two, one), 1e-10);
}

TEST(Forward, SingleSourceMultisourceMatchesForwardSingle) {
  SystemConfig cfg = SystemConfig::desk_default();
  const Shape s{16, 16};
  const SlmPattern slm = random_slm(Modulation::complex, s, cfg.pitch, 3);
  const Vec2 tilt{40e3, -20e3};
  const SourceArray src({tilt}, {1.0});
  const IntensityImage multi = forward_multisource_1slm(slm, src, 10e-3, cfg, cfg.wavelength());
  const Shape sim{32, 32};
  const ForwardResult single =
      forward_single(slm, plane_wave<double>(tilt, sim, cfg.sim_pitch(), cfg.wavelength()), 10e-3, cfg);
  // Block average of the simulation-grid intensity.
  IntensityImage down(s, cfg.pitch, std::vector<double>(s.size(), 0.0));
  for (int r = 0; r < sim.rows; ++r)
    for (int c = 0; c < sim.cols; ++c) down(r / 2, c / 2) += single.intensity(r, c) / 4.0;
  EXPECT_LT(max_rel_diff(multi, down), 1e-12);
}

TEST(Forward, IncoherentSumIsWeightedSumOfSingles) {
  SystemConfig cfg = SystemConfig::desk_default();
  const Shape s{16, 16};
  const SlmPattern a = random_slm(Modulation::phase_only, s, cfg.pitch, 4);
  const SlmPattern b = random_slm(Modulation::amplitude_only, s, cfg.pitch, 5);
  const SourceArray src({{60e3, 0.0}, {0.0, -60e3}}, {0.3, 0.7});
  const IntensityImage sum = forward_multisource_2slm(a, b, src, 15e-3, cfg, cfg.wavelength());
  const IntensityImage i0 = forward_multisource_2slm(a, b, SourceArray({src.tilts()[0]}, {1.0}), 15e-3, cfg, cfg.wavelength());
  const IntensityImage i1 = forward_multisource_2slm(a, b, SourceArray({src.tilts()[1]}, {1.0}), 15e-3, cfg, cfg.wavelength());
  IntensityImage expect = i0;
  for (std::size_t i = 0; i < expect.data().size(); ++i) expect.data()[i] = 0.3 * i0.data()[i] + 0.7 * i1.data()[i];
  EXPECT_LT(max_rel_diff(sum, expect), 1e-12);
}

TEST(Forward, MemoryEffectShiftsTiltedOutput) {
  // Band-limited random field; a small tilt translates the propagated
  // intensity by lambda z m / (2 pi).
  const Shape s{128, 128};
  const double pitch = 4e-6;
  const double lambda = 520e-9;
  std::mt19937_64 rng(6);
  std::normal_distribution<double> n(0.0, 1.0);
  ComplexField2D spec(s, pitch, lambda);
  for (int r = 0; r < s.rows; ++r) {
    for (int c = 0; c < s.cols; ++c) {
      const int fr = FrequencyGrid::bin(r, s.rows);
      const int fc = FrequencyGrid::bin(c, s.cols);
      if (fr * fr + fc * fc < 20 * 20) spec(r, c) = {n(rng), n(rng)};
    }
  }
  const ComplexField2D f = ifft2(spec);
  // Two frequency bins of tilt keep the plane wave periodic on the grid; z is
  // chosen so the shift is a whole number of pixels.
  const double shift_px = 8.0;
  const double m = 2.0 * 2.0 * kPi / (s.cols * pitch);
  const double z = shift_px * pitch * 2.0 * kPi / (lambda * m);
  ComplexField2D tilted = f;
  const auto w = plane_wave<double>({m, 0.0}, s, pitch, lambda);
  for (std::size_t i = 0; i < f.size(); ++i) tilted.data()[i] *= w.data()[i];
  const ComplexField2D a = propagate(tilted, z);
  const ComplexField2D b = propagate(f, z);
  double num = 0.0, da = 0.0, db = 0.0;
  for (int r = 0; r < s.rows; ++r) {
    for (int c = 0; c < s.cols; ++c) {
      const double ia = std::norm(a(r, c));
      const double ib = std::norm(b(r, (c - 8 + s.cols) % s.cols));
      num += ia * ib;
      da += ia * ia;
      db += ib * ib;
    }
  }
  EXPECT_GT(num / std::sqrt(da * db), 0.99);
  EXPECT_NEAR(expected_shift({m, 0.0}, lambda, z).x / pitch, shift_px, 1e-9);
}

TEST(Forward, EyeboxPitch) {
  const ComplexField2D g({8, 16}, 4e-6, 520e-9);
  const ComplexField2D e = eyebox_field(g, 27.5e-3);
  EXPECT_NEAR(e.pitch(), 520e-9 * 27.5e-3 / (16 * 4e-6), 1e-15);
}

TEST(Forward, ShapeMismatchIsRejected) {
  SystemConfig cfg = SystemConfig::desk_default();
  const SlmPattern a = SlmPattern::identity(Modulation::phase_only, {8, 8}, cfg.pitch);
  const SlmPattern b = SlmPattern::identity(Modulation::phase_only, {8, 16}, cfg.pitch);
  EXPECT_THROW(forward_multisource_2slm(a, b, SourceArray::on_axis(), 1e-3, cfg, cfg.wavelength()), ShapeMismatch);
}

TEST(Forward, LinspacePlanes) {
  const auto p = linspace_planes(15e-3, 25e-3, 5);
  ASSERT_EQ(p.size(), 5u);
  EXPECT_DOUBLE_EQ(p.front(), 15e-3);
  EXPECT_DOUBLE_EQ(p.back(), 25e-3);
  EXPECT_NEAR(p[1], 17.5e-3, 1e-15);
}
