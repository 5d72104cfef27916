#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>

#include "msholo/calibration.hpp"
#include "msholo/error.hpp"
#include "msholo/forward.hpp"
#include "msholo/propagation.hpp"

using namespace msholo;

namespace {

constexpr double kPi = std::numbers::pi;

CalibModel small_model(Shape s, const CalibModel::Options& opt = {}) {
  SystemConfig cfg = SystemConfig::desk_default();
  return CalibModel::identity(cfg, s, make_grid({2, 2, 75e3, {}}), cfg.wavelength(), opt);
}

std::vector<double> random_values(std::size_t n, std::uint64_t seed, double lo, double hi) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

double rel(std::span<const double> a, std::span<const double> b) {
  double n = 0.0, d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    n += (a[i] - b[i]) * (a[i] - b[i]);
    d += b[i] * b[i];
  }
  return std::sqrt(n / d);
}

}  // namespace

TEST(Calibration, IdentityModelReducesToIdealForward) {
  SystemConfig cfg = SystemConfig::desk_default();
  const Shape s{16, 16};
  const SourceArray src = make_grid({2, 2, 75e3, {}});
  const CalibModel ideal = CalibModel::identity(cfg, s, src, cfg.wavelength());
  const DigitalPatterns d = random_digital(s, 4);
  std::vector<double> p1(s.size()), p2(s.size()), ones(s.size(), 1.0);
  for (std::size_t i = 0; i < s.size(); ++i) {
    p1[i] = 2 * kPi * d.slm1[i] / 256.0;
    p2[i] = 2 * kPi * d.slm2[i] / 256.0;
  }
  const SlmPattern a(Modulation::phase_only, s, cfg.pitch, p1, ones);
  const SlmPattern b(Modulation::phase_only, s, cfg.pitch, p2, ones);
  for (double z : {15e-3, 25e-3}) {
    const IntensityImage multi = forward_multisource_2slm(a, b, src, z, cfg, cfg.wavelength());
    EXPECT_LT(rel(calibrated_forward(d.slm1, d.slm2, ideal, 1, z).data(), multi.data()), 1e-12);
    const IntensityImage single = forward_multisource_2slm(a, b, SourceArray::on_axis(), z, cfg, cfg.wavelength());
    EXPECT_LT(rel(calibrated_forward(d.slm1, d.slm2, ideal, 0, z).data(), single.data()), 1e-12);
  }
}

TEST(Calibration, LutInterpolationAndAdjoint) {
  const auto lut = random_values(256, 1, 0.0, 6.0);
  const std::vector<double> d{0.0, 10.25, 254.5, 255.0};
  const auto out = apply_lut(d, lut);
  EXPECT_DOUBLE_EQ(out[0], lut[0]);
  EXPECT_NEAR(out[1], 0.75 * lut[10] + 0.25 * lut[11], 1e-14);
  EXPECT_NEAR(out[2], 0.5 * lut[254] + 0.5 * lut[255], 1e-14);
  EXPECT_DOUBLE_EQ(out[3], lut[255]);
  const auto lin = apply_lut(d, linear_lut());
  for (std::size_t i = 0; i < d.size(); ++i) EXPECT_NEAR(lin[i], 2 * kPi * d[i] / 256.0, 1e-14);

  const auto digital = random_values(50, 2, 0.0, 255.0);
  const auto g = random_values(50, 3, -1.0, 1.0);
  const auto dl = random_values(256, 4, -1.0, 1.0);
  std::vector<double> g_lut(256, 0.0), g_dig(50, 0.0);
  apply_lut_adjoint(digital, lut, g, g_lut, g_dig);
  const auto fwd = apply_lut(digital, dl);
  double lhs = 0.0, rhs = 0.0;
  for (std::size_t i = 0; i < 50; ++i) lhs += fwd[i] * g[i];
  for (std::size_t i = 0; i < 256; ++i) rhs += dl[i] * g_lut[i];
  EXPECT_NEAR(lhs, rhs, 1e-12);
  const double h = 1e-6;
  for (std::size_t i = 0; i < 5; ++i) {
    std::vector<double> dp = digital, dm = digital;
    dp[i] += h;
    dm[i] -= h;
    const double fd = (apply_lut(dp, lut)[i] - apply_lut(dm, lut)[i]) / (2 * h);
    EXPECT_NEAR(g_dig[i], fd * g[i], 1e-6);
  }
}

TEST(Calibration, FringingDeltaAndAdjoint) {
  const Shape s{7, 9};
  const auto phase = random_values(s.size(), 5, 0.0, 6.0);
  const auto out = apply_fringing(phase, s, delta_kernel());
  for (std::size_t i = 0; i < s.size(); ++i) EXPECT_DOUBLE_EQ(out[i], phase[i]);

  const auto kernel = random_values(25, 6, 0.0, 0.1);
  const auto g = random_values(s.size(), 7, -1.0, 1.0);
  const auto dp = random_values(s.size(), 8, -1.0, 1.0);
  const auto dk = random_values(25, 9, -1.0, 1.0);
  std::vector<double> g_phase(s.size(), 0.0), g_kernel(25, 0.0);
  apply_fringing_adjoint(phase, s, kernel, g, g_phase, g_kernel);
  const auto a = apply_fringing(dp, s, kernel);
  const auto b = apply_fringing(phase, s, dk);
  double l1 = 0.0, r1 = 0.0, l2 = 0.0, r2 = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    l1 += a[i] * g[i];
    r1 += dp[i] * g_phase[i];
    l2 += b[i] * g[i];
  }
  for (std::size_t i = 0; i < 25; ++i) r2 += dk[i] * g_kernel[i];
  EXPECT_NEAR(l1, r1, 1e-12);
  EXPECT_NEAR(l2, r2, 1e-12);
}

TEST(Calibration, PupilSamplerAdjoint) {
  PupilGrid p = PupilGrid::unit(2, 2, 6);
  const auto re = random_values(p.values.size(), 10, -1.0, 1.0);
  const auto im = random_values(p.values.size(), 11, -1.0, 1.0);
  for (std::size_t i = 0; i < p.values.size(); ++i) p.values[i] = {re[i], im[i]};
  const PupilSampler sampler({12, 10}, 6);
  const Vec2 center{0.3, 0.7};
  const auto fwd = sampler.evaluate(p, center);
  const auto gr = random_values(fwd.size(), 12, -1.0, 1.0);
  const auto gi = random_values(fwd.size(), 13, -1.0, 1.0);
  std::vector<std::complex<double>> g(fwd.size()), back(p.values.size());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = {gr[i], gi[i]};
  sampler.adjoint(p, center, g, back);
  std::complex<double> lhs{}, rhs{};
  for (std::size_t i = 0; i < fwd.size(); ++i) lhs += fwd[i] * std::conj(g[i]);
  for (std::size_t i = 0; i < p.values.size(); ++i) rhs += p.values[i] * std::conj(back[i]);
  EXPECT_NEAR(lhs.real(), rhs.real(), 1e-12);
  EXPECT_THROW(apply_pupil_grid(ComplexField2D({12, 10}, 1e-6, 520e-9), p, {5.0, 0.0}), DomainError);
}

TEST(Calibration, UnitPupilsLeavePropagationUnchanged) {
  const Shape s{16, 16};
  std::mt19937_64 rng(14);
  std::normal_distribution<double> n(0.0, 1.0);
  ComplexField2D f(s, 4e-6, 520e-9);
  for (auto& v : f.data()) v = {n(rng), n(rng)};
  const PupilGrid unit = PupilGrid::unit(2, 2, 8);
  const ComplexField2D a = propagate_with_pupils(f, 3e-3, unit, {2, 2});
  const ComplexField2D b = propagate(f, 3e-3);
  for (std::size_t i = 0; i < f.size(); ++i) EXPECT_NEAR(std::abs(a.data()[i] - b.data()[i]), 0.0, 1e-12);
}

TEST(Calibration, PatchModeIsUnbiased) {
  const Shape s{16, 16};
  std::mt19937_64 rng(15);
  std::normal_distribution<double> n(0.0, 1.0);
  ComplexField2D f(s, 4e-6, 520e-9);
  for (auto& v : f.data()) v = {n(rng), n(rng)};
  PupilGrid p = PupilGrid::unit(2, 2, 4);
  for (std::size_t i = 0; i < p.values.size(); ++i) p.values[i] = std::polar(1.0, 0.3 * n(rng));
  const TileLayout tiles{2, 2};
  const ComplexField2D dense = propagate_with_pupils(f, 2e-3, p, tiles);
  std::vector<std::complex<double>> mean(f.size());
  for (int t = 0; t < tiles.count(); ++t) {
    const ComplexField2D one = propagate_with_pupils(f, 2e-3, p, tiles, t);
    for (std::size_t i = 0; i < f.size(); ++i) mean[i] += one.data()[i] / double(tiles.count());
  }
  for (std::size_t i = 0; i < f.size(); ++i) EXPECT_NEAR(std::abs(mean[i] - dense.data()[i]), 0.0, 1e-12);
}

class CalibrationGradient : public ::testing::Test {
 protected:
  void SetUp() override {
    CalibModel::Options opt;
    opt.pupil_nodes_rows = 2;
    opt.pupil_nodes_cols = 2;
    opt.pupil_freq_size = 4;
    opt.tile_rows = 2;
    opt.tile_cols = 2;
    opt.warp_lattice = 3;
    const CalibModel base = small_model({8, 8}, opt);
    const CalibModel oracle = perturbed(base, Perturbation::standard);
    DatasetSpec ds;
    ds.records_per_config = 2;
    ds.planes = {18e-3, 22e-3};
    ds.blur_sigmas = {1.0, 0.0};
    data = make_synthetic_dataset(oracle, ds);
    // Evaluate away from the ideal point so every group has a non-trivial slope.
    model = perturbed(base, Perturbation::lut);
    model.slm[1].fringing = perturbed(base, Perturbation::fringing).slm[1].fringing;
    for (auto& d : model.warp.displacements) d = {0.1, -0.05};
    for (auto& d : model.camera.displacements) d = {-0.07, 0.12};
    model.sources[1].position = model.sources[1].position + Vec2{0.2, -0.1};
    std::mt19937_64 rng(3);
    std::normal_distribution<double> n(0.0, 0.2);
    for (auto& v : model.pupil[1].values) v *= std::polar(1.0, n(rng));
  }

  double loss(const CalibModel& m) const { return evaluate_calibration(m, data.records, 0).loss; }

  void expect_match(double analytic, double fd) const {
    EXPECT_NEAR(analytic, fd, 1e-5 * std::abs(fd) + 1e-9 * base_loss);
  }

  CaptureDataset data;
  CalibModel model;
  double base_loss = 0.0;
};

TEST_F(CalibrationGradient, AllGroupsMatchFiniteDifferences) {
  const CalibEvaluation ev = evaluate_calibration(model, data.records, kAllParams);
  base_loss = ev.loss;
  ASSERT_GT(base_loss, 0.0);
  const double h = 1e-6;
  auto fd = [&](auto&& mutate) {
    CalibModel p = model, m = model;
    mutate(p, h);
    mutate(m, -h);
    return (loss(p) - loss(m)) / (2 * h);
  };
  for (int k : {3, 100, 200}) {
    expect_match(ev.gradient.lut[0][k], fd([&](CalibModel& c, double d) { c.slm[0].lut[k] += d; }));
    expect_match(ev.gradient.lut[1][k], fd([&](CalibModel& c, double d) { c.slm[1].lut[k] += d; }));
  }
  for (int k : {7, 12, 13}) {
    expect_match(ev.gradient.fringing[0][k], fd([&](CalibModel& c, double d) { c.slm[0].fringing[k] += d; }));
    expect_match(ev.gradient.fringing[1][k], fd([&](CalibModel& c, double d) { c.slm[1].fringing[k] += d; }));
  }
  for (int leg : {0, 1}) {
    for (std::size_t k : {std::size_t{5}, std::size_t{22}, std::size_t{40}}) {
      expect_match(ev.gradient.pupil[leg][k].real(),
                   fd([&](CalibModel& c, double d) { c.pupil[leg].values[k] += d; }));
      expect_match(ev.gradient.pupil[leg][k].imag(),
                   fd([&](CalibModel& c, double d) { c.pupil[leg].values[k] += std::complex<double>(0.0, d); }));
    }
  }
  for (std::size_t k : {std::size_t{0}, std::size_t{4}, std::size_t{8}}) {
    expect_match(ev.gradient.warp[k].x, fd([&](CalibModel& c, double d) { c.warp.displacements[k].x += d; }));
    expect_match(ev.gradient.warp[k].y, fd([&](CalibModel& c, double d) { c.warp.displacements[k].y += d; }));
    expect_match(ev.gradient.camera[k].x, fd([&](CalibModel& c, double d) { c.camera.displacements[k].x += d; }));
    expect_match(ev.gradient.camera[k].y, fd([&](CalibModel& c, double d) { c.camera.displacements[k].y += d; }));
  }
  for (std::size_t i = 0; i < model.sources.size(); ++i) {
    expect_match(ev.gradient.source_position[i].x,
                 fd([&](CalibModel& c, double d) { c.sources[i].position.x += d; }));
    expect_match(ev.gradient.source_position[i].y,
                 fd([&](CalibModel& c, double d) { c.sources[i].position.y += d; }));
    expect_match(ev.gradient.source_intensity[i], fd([&](CalibModel& c, double d) { c.sources[i].intensity += d; }));
  }
}

TEST_F(CalibrationGradient, PatternGradientMatchesFiniteDifferences) {
  // Real-valued levels keep the finite differences away from the LUT knots.
  CaptureRecord r = data.records.back();
  const DigitalPatterns d = random_digital(model.slm_shape, 17);
  r.slm1 = d.slm1;
  r.slm2 = d.slm2;
  const IntensityImage out = calibrated_forward(r.slm1, r.slm2, model, r.config_id, r.z);
  std::vector<double> dI(out.size());
  for (std::size_t i = 0; i < dI.size(); ++i) dI[i] = 2.0 * (out.data()[i] - r.capture.data()[i]);
  const CalibGradient g = backpropagate(model, r.slm1, r.slm2, r.config_id, r.z, dI, 0, true);
  auto l = [&](const std::vector<double>& a, const std::vector<double>& b) {
    const IntensityImage o = calibrated_forward(a, b, model, r.config_id, r.z);
    double s = 0.0;
    for (std::size_t i = 0; i < o.size(); ++i) s += std::pow(o.data()[i] - r.capture.data()[i], 2);
    return s;
  };
  const double h = 1e-4;
  for (std::size_t i : {std::size_t{1}, std::size_t{30}, std::size_t{63}}) {
    auto p = r.slm1, m = r.slm1;
    p[i] += h;
    m[i] -= h;
    const double fd1 = (l(p, r.slm2) - l(m, r.slm2)) / (2 * h);
    EXPECT_NEAR(g.slm1[i], fd1, 1e-5 * std::abs(fd1) + 1e-12);
    p = r.slm2;
    m = r.slm2;
    p[i] += h;
    m[i] -= h;
    const double fd2 = (l(r.slm1, p) - l(r.slm1, m)) / (2 * h);
    EXPECT_NEAR(g.slm2[i], fd2, 1e-5 * std::abs(fd2) + 1e-12);
  }
}

TEST(Calibration, DataFromInitialModelGivesZeroLoss) {
  const CalibModel m = small_model({8, 8});
  DatasetSpec ds;
  ds.records_per_config = 3;
  ds.planes = {20e-3};
  const CaptureDataset data = make_synthetic_dataset(m, ds);
  EXPECT_EQ(data.records.size(), 6u);
  EXPECT_EQ(evaluate_calibration(m, data.records, kAllParams).loss, 0.0);
  FitSpec fs;
  for (int& n : fs.iterations) n = 3;
  const FitResult fit = fit_model(data, m, fs);
  EXPECT_LT(lut_rms_error(fit.model, m, 0, data), 1e-6);
}

TEST(Calibration, SyntheticPatternsStayInDigitalRange) {
  const CalibModel m = small_model({16, 16});
  DatasetSpec ds;
  ds.records_per_config = 4;
  ds.planes = {20e-3};
  const CaptureDataset data = make_synthetic_dataset(m, ds);
  for (const auto& r : data.records) {
    for (double v : r.slm1) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 255.0);
    }
  }
  const auto blurred = gaussian_blur(data.records[0].slm1, {16, 16}, 0.0);
  EXPECT_EQ(blurred, data.records[0].slm1);
}

TEST(Calibration, GaussianBlurPreservesMeanOfConstant) {
  const std::vector<double> flat(100, 3.5);
  for (double v : gaussian_blur(flat, {10, 10}, 2.0)) EXPECT_NEAR(v, 3.5, 1e-12);
}

TEST(Calibration, PerturbationPresetsChangeOnlyTheirGroup) {
  const CalibModel base = small_model({8, 8});
  const CalibModel lut = perturbed(base, Perturbation::lut);
  EXPECT_NE(lut.slm[0].lut, base.slm[0].lut);
  EXPECT_EQ(lut.slm[0].fringing, base.slm[0].fringing);
  EXPECT_TRUE(lut.warp.is_identity());
  const CalibModel src = perturbed(base, Perturbation::source);
  EXPECT_EQ(src.sources[0].position, base.sources[0].position);
  EXPECT_NE(src.sources[1].position, base.sources[1].position);
  EXPECT_NEAR(source_position_error(src, base), 0.5, 1e-12);
  const CalibModel warp = perturbed(base, Perturbation::warp);
  EXPECT_FALSE(warp.warp.is_identity());
  EXPECT_GT(warp_rms_error(warp, base), 0.3);
  EXPECT_EQ(parse_perturbation(perturbation_name(Perturbation::pupil)), Perturbation::pupil);
  EXPECT_THROW(parse_perturbation("bogus"), ConfigError);
}

TEST(Citl, ScheduleCyclesPlanes) {
  const CalibModel m = small_model({8, 8});
  std::vector<IntensityImage> imgs;
  for (int k = 0; k < 3; ++k) imgs.emplace_back(Shape{8, 8}, 8e-6, random_values(64, 20 + k, 0.0, 1.0));
  const FocalStackTarget t{{16e-3, 20e-3, 24e-3}, imgs};
  CitlSpec spec;
  spec.iterations = 7;
  const CitlResult r = optimize_digital(m, 1, t, random_digital({8, 8}, 1), spec, oracle_camera(m, 1));
  ASSERT_EQ(r.schedule.size(), 7u);
  for (std::size_t i = 0; i < 6; i += 3) {
    std::vector<int> cycle(r.schedule.begin() + i, r.schedule.begin() + i + 3);
    std::sort(cycle.begin(), cycle.end());
    EXPECT_EQ(cycle, (std::vector<int>{0, 1, 2}));
  }
  for (double v : r.patterns.slm1) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 255.0);
  }
}

TEST(Citl, OracleEqualToModelMatchesModelOnlyRun) {
  const CalibModel m = perturbed(small_model({8, 8}), Perturbation::lut);
  std::vector<IntensityImage> imgs;
  for (int k = 0; k < 2; ++k) imgs.emplace_back(Shape{8, 8}, 8e-6, random_values(64, 30 + k, 0.0, 1.0));
  const FocalStackTarget t{{18e-3, 22e-3}, imgs};
  CitlSpec spec;
  spec.iterations = 6;
  const DigitalPatterns init = random_digital({8, 8}, 2);
  const CitlResult cam = optimize_digital(m, 1, t, init, spec, oracle_camera(m, 1));
  const CitlResult model_only = optimize_digital(m, 1, t, init, spec);
  ASSERT_EQ(cam.loss.size(), model_only.loss.size());
  for (std::size_t i = 0; i < cam.loss.size(); ++i) EXPECT_NEAR(cam.loss[i], model_only.loss[i], 1e-12 * cam.loss[i]);
  for (std::size_t i = 0; i < init.slm1.size(); ++i) EXPECT_NEAR(cam.patterns.slm1[i], model_only.patterns.slm1[i], 1e-9);
}

TEST(CalibrationIo, ModelAndDatasetRoundTrip) {
  const CalibModel m = perturbed(small_model({8, 8}), Perturbation::standard);
  const auto dir = std::filesystem::temp_directory_path() / "msholo_test_calib";
  std::filesystem::remove_all(dir);
  write_calib_model(dir / "model", m);
  const CalibModel back = read_calib_model(dir / "model");
  EXPECT_EQ(back.slm[0].lut, m.slm[0].lut);
  EXPECT_EQ(back.slm[1].fringing, m.slm[1].fringing);
  EXPECT_EQ(back.pupil[1].values, m.pupil[1].values);
  EXPECT_EQ(back.warp.displacements, m.warp.displacements);
  EXPECT_EQ(back.sources.size(), m.sources.size());
  for (std::size_t i = 0; i < m.sources.size(); ++i) {
    EXPECT_EQ(back.sources[i].position, m.sources[i].position);
    EXPECT_EQ(back.sources[i].intensity, m.sources[i].intensity);
  }
  DatasetSpec ds;
  ds.records_per_config = 2;
  ds.planes = {20e-3};
  const CaptureDataset data = make_synthetic_dataset(m, ds);
  write_dataset(dir / "data", data);
  const CaptureDataset d2 = read_dataset(dir / "data");
  ASSERT_EQ(d2.records.size(), data.records.size());
  for (std::size_t i = 0; i < data.records.size(); ++i) {
    EXPECT_EQ(d2.records[i].slm1, data.records[i].slm1);
    EXPECT_EQ(d2.records[i].config_id, data.records[i].config_id);
    EXPECT_EQ(d2.records[i].z, data.records[i].z);
    EXPECT_EQ(d2.records[i].capture.values(), data.records[i].capture.values());
  }
  EXPECT_EQ(evaluate_calibration(back, d2.records, 0).loss, 0.0);
  EXPECT_THROW(read_calib_model(dir / "missing"), Error);
  std::filesystem::remove_all(dir);
}
