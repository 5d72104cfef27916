// Acceptance checks. With no arguments every criterion runs; otherwise only
// the listed numbers. One line per criterion: "criterion N PASS|FAIL: detail".
// Exit status is 0 only if every selected criterion passes.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <complex>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "msholo/analysis.hpp"
#include "msholo/calibration.hpp"
#include "msholo/config.hpp"
#include "msholo/fft.hpp"
#include "msholo/forward.hpp"
#include "msholo/metrics.hpp"
#include "msholo/optimizer.hpp"
#include "msholo/propagation.hpp"
#include "msholo/sources.hpp"

using namespace msholo;

namespace {

using cd = std::complex<double>;
constexpr double kPi = std::numbers::pi;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int digits = 4) {
  std::ostringstream os;
  os << std::setprecision(digits) << v;
  return os.str();
}

std::filesystem::path work_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("msholo_acceptance_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

ComplexField2D gaussian_field(Shape s, double pitch, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  ComplexField2D f(s, pitch, 520e-9);
  for (auto& v : f.data()) v = {n(rng), n(rng)};
  return f;
}

// 1. Adjoint gradients against central differences on a 16 x 16 two-SLM,
// two-source, two-plane problem. Relative error per probe uses the larger of
// |fd|, |adjoint| and 1e-6 of the largest gradient entry as the denominator.
Outcome gradient_correctness() {
  SystemConfig cfg = SystemConfig::desk_default();
  cfg.planes = {17e-3, 23e-3};
  const Shape s{16, 16};
  const SourceArray src = make_grid({1, 2, 90e3, {}});
  std::mt19937_64 rng(101);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  FocalStackTarget target;
  for (double z : cfg.planes) {
    std::vector<double> v(s.size());
    for (auto& x : v) x = u(rng);
    target.planes.push_back(z);
    target.images.emplace_back(s, cfg.pitch, std::move(v));
  }
  const auto frames =
      initial_frames(1, Modulation::phase_only, Modulation::amplitude_only, s, cfg.pitch, InitKind::uniform_random, 7);
  const GradientBundle g = gradients(frames, src, cfg, cfg.wavelength(), target, {}, LossScale::least_squares);
  double gmax = 0.0;
  for (double v : g.frames[0].first_phase) gmax = std::max(gmax, std::abs(v));
  for (double v : g.frames[0].second_amplitude) gmax = std::max(gmax, std::abs(v));
  double worst = 0.0;
  for (int probe = 0; probe < 100; ++probe) {
    const bool phase = probe % 2 == 0;
    const std::size_t i = rng() % s.size();
    auto f = frames;
    double& p = phase ? f[0].first.phase()[i] : f[0].second->amplitude()[i];
    const double p0 = p;
    const double h = 1e-5;
    p = p0 + h;
    const double lp = gradients(f, src, cfg, cfg.wavelength(), target, {}, LossScale::least_squares).loss;
    p = p0 - h;
    const double lm = gradients(f, src, cfg, cfg.wavelength(), target, {}, LossScale::least_squares).loss;
    const double fd = (lp - lm) / (2 * h);
    const double an = phase ? g.frames[0].first_phase[i] : g.frames[0].second_amplitude[i];
    worst = std::max(worst, std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6 * gmax}));
  }
  return {worst <= 1e-4, "worst relative error over 100 probes " + fmt(worst)};
}

// 2. Propagation against direct evaluation of the angular-spectrum integral.
Outcome propagation_fidelity() {
  std::mt19937_64 rng(202);
  double dft = 0.0, energy = 0.0, adjoint = 0.0;
  const double lambda = 520e-9;
  for (Shape s : {Shape{16, 16}, Shape{12, 16}, Shape{9, 7}}) {
    for (double z : {0.7e-3, 5e-3, -2e-3}) {
      const double pitch = 6e-6;
      const ComplexField2D f = gaussian_field(s, pitch, rng);
      const ComplexField2D g = propagate(f, z);
      double num = 0.0, den = 0.0;
      for (int y = 0; y < s.rows; ++y) {
        for (int x = 0; x < s.cols; ++x) {
          cd acc{};
          for (int v = 0; v < s.rows; ++v) {
            for (int uu = 0; uu < s.cols; ++uu) {
              const double fx = FrequencyGrid::bin(uu, s.cols) / (s.cols * pitch);
              const double fy = FrequencyGrid::bin(v, s.rows) / (s.rows * pitch);
              const double rho2 = lambda * lambda * (fx * fx + fy * fy);
              if (rho2 >= 1.0) continue;
              cd spec{};
              for (int yy = 0; yy < s.rows; ++yy)
                for (int xx = 0; xx < s.cols; ++xx)
                  spec += f(yy, xx) * std::polar(1.0, -2 * kPi * (fx * xx * pitch + fy * yy * pitch));
              acc += spec * std::polar(1.0, 2 * kPi * z / lambda * std::sqrt(1.0 - rho2)) *
                     std::polar(1.0, 2 * kPi * (fx * x * pitch + fy * y * pitch));
            }
          }
          acc /= double(s.size());
          num += std::norm(acc - g(y, x));
          den += std::norm(acc);
        }
      }
      dft = std::max(dft, std::sqrt(num / den));
      energy = std::max(energy, std::abs(g.energy() - f.energy()) / f.energy());
      const ComplexField2D b = gaussian_field(s, pitch, rng);
      const ComplexField2D pb = propagate_adjoint(b, z);
      cd lhs{}, rhs{};
      for (std::size_t i = 0; i < f.size(); ++i) {
        lhs += g.data()[i] * std::conj(b.data()[i]);
        rhs += f.data()[i] * std::conj(pb.data()[i]);
      }
      adjoint = std::max(adjoint, std::abs(lhs - rhs) / std::abs(lhs));
    }
  }
  return {dft <= 1e-10 && energy <= 1e-10 && adjoint <= 1e-10,
          "direct DFT " + fmt(dft) + ", energy " + fmt(energy) + ", adjoint " + fmt(adjoint)};
}

// Fourier-shift a field by (dx, dy) pixels: out(x) = in(x - d).
ComplexField2D fourier_shift(const ComplexField2D& in, double dx, double dy) {
  ComplexField2D spec = fft2(in);
  const Shape s = in.shape();
  for (int r = 0; r < s.rows; ++r)
    for (int c = 0; c < s.cols; ++c) {
      const double fx = double(FrequencyGrid::bin(c, s.cols)) / s.cols;
      const double fy = double(FrequencyGrid::bin(r, s.rows)) / s.rows;
      spec(r, c) *= std::polar(1.0, -2 * kPi * (fx * dx + fy * dy));
    }
  return ifft2(spec);
}

// Peak of the circular cross-correlation of two intensity images, refined to
// 1/20 pixel by direct evaluation of the correlation's Fourier series.
Vec2 correlation_peak(const IntensityImage& a, const IntensityImage& b) {
  const Shape s = a.shape();
  ComplexField2D fa(s, 1.0, 1.0), fb(s, 1.0, 1.0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    fa.data()[i] = a.data()[i];
    fb.data()[i] = b.data()[i];
  }
  const ComplexField2D A = fft2(fa), B = fft2(fb);
  ComplexField2D cross(s, 1.0, 1.0);
  for (std::size_t i = 0; i < cross.size(); ++i) cross.data()[i] = A.data()[i] * std::conj(B.data()[i]);
  const ComplexField2D corr = ifft2(cross);
  std::size_t best = 0;
  for (std::size_t i = 0; i < corr.size(); ++i)
    if (corr.data()[i].real() > corr.data()[best].real()) best = i;
  const double r0 = FrequencyGrid::bin(int(best / s.cols), s.rows);
  const double c0 = FrequencyGrid::bin(int(best % s.cols), s.cols);
  auto value = [&](double dy, double dx) {
    cd acc{};
    for (int r = 0; r < s.rows; ++r)
      for (int c = 0; c < s.cols; ++c) {
        const double fx = double(FrequencyGrid::bin(c, s.cols)) / s.cols;
        const double fy = double(FrequencyGrid::bin(r, s.rows)) / s.rows;
        acc += cross(r, c) * std::polar(1.0, 2 * kPi * (fx * dx + fy * dy));
      }
    return acc.real();
  };
  Vec2 peak{c0, r0};
  double best_v = -1e300;
  for (int i = -20; i <= 20; ++i)
    for (int j = -20; j <= 20; ++j) {
      const double v = value(r0 + i / 20.0, c0 + j / 20.0);
      if (v > best_v) {
        best_v = v;
        peak = {c0 + j / 20.0, r0 + i / 20.0};
      }
    }
  return peak;
}

// 3. Tilted illumination of a band-limited field equals the shifted output
// of on-axis illumination times the same tilt.
Outcome memory_effect_law() {
  const Shape s{128, 128};
  const double pitch = 8e-6;
  const double lambda = 520e-9;
  std::mt19937_64 rng(303);
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst_ncc = 1.0, worst_shift = 0.0;
  int cases = 0;
  for (int trial = 0; trial < 6; ++trial) {
    // Random field limited to a quarter of the Nyquist band, windowed to the
    // grid center so propagation does not wrap.
    ComplexField2D spec(s, pitch, lambda);
    for (int r = 0; r < s.rows; ++r)
      for (int c = 0; c < s.cols; ++c) {
        const int fr = FrequencyGrid::bin(r, s.rows), fc = FrequencyGrid::bin(c, s.cols);
        if (fr * fr + fc * fc <= 16 * 16) spec(r, c) = {n(rng), n(rng)};
      }
    ComplexField2D field = ifft2(spec);
    for (int r = 0; r < s.rows; ++r)
      for (int c = 0; c < s.cols; ++c) {
        const double dr = r - 63.5, dc = c - 63.5;
        field(r, c) *= std::exp(-(dr * dr + dc * dc) / (2 * 18.0 * 18.0));
      }
    const double theta = (0.2 + 0.5 * u(rng)) * kPi / 180.0;  // 0.2 to 0.7 degrees
    const double dir = 2 * kPi * u(rng);
    const double m = 2 * kPi * std::sin(theta) / lambda;
    const Vec2 tilt{m * std::cos(dir), m * std::sin(dir)};
    // Largest distance keeping the shift within 16 pixels.
    const double z = (8.0 + 8.0 * u(rng)) * pitch * 2 * kPi / (lambda * m);
    const auto wave = plane_wave<double>(tilt, s, pitch, lambda);
    ComplexField2D tilted = field;
    for (std::size_t i = 0; i < field.size(); ++i) tilted.data()[i] *= wave.data()[i];
    const ComplexField2D a = propagate(tilted, z);
    const ComplexField2D base = propagate(field, z);
    const Vec2 expect = expected_shift(tilt, lambda, z);
    const double ex = expect.x / pitch, ey = expect.y / pitch;
    ComplexField2D b = fourier_shift(base, ex, ey);
    for (std::size_t i = 0; i < b.size(); ++i) b.data()[i] *= wave.data()[i];
    cd inner{};
    double na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      inner += a.data()[i] * std::conj(b.data()[i]);
      na += std::norm(a.data()[i]);
      nb += std::norm(b.data()[i]);
    }
    worst_ncc = std::min(worst_ncc, std::abs(inner) / std::sqrt(na * nb));
    IntensityImage ia(s, pitch), ib(s, pitch);
    for (std::size_t i = 0; i < a.size(); ++i) {
      ia.data()[i] = std::norm(a.data()[i]);
      ib.data()[i] = std::norm(base.data()[i]);
    }
    const Vec2 measured = correlation_peak(ia, ib);
    worst_shift = std::max({worst_shift, std::abs(measured.x - ex), std::abs(measured.y - ey)});
    ++cases;
  }
  return {worst_ncc >= 0.99 && worst_shift <= 0.25,
          std::to_string(cases) + " tilts up to 0.7 deg: worst correlation " + fmt(worst_ncc, 6) +
              ", worst shift error " + fmt(worst_shift) + " px"};
}

// 4. Threshold regression and bench tilts.
Outcome threshold_regression() {
  const double t = memory_effect_spacing(8e-6, 520e-9, 2e-3) / 1e3;
  bool ok = std::abs(t - 48.3) <= 0.1 && t < 50.0;
  std::string detail = "threshold " + fmt(t) + " rad/mm; bench tilts";
  const double lambdas[] = {638e-9, 510e-9, 455e-9};
  const double expect[] = {79.0, 99.0, 110.0};
  for (int i = 0; i < 3; ++i) {
    const double m = tilt_from_source_offset(4e-3, 500e-3, lambdas[i]) / 1e3;
    ok = ok && std::abs(m - expect[i]) <= 1.0;
    detail += " " + fmt(m) + (i < 2 ? "," : "");
  }
  return {ok, detail + " rad/mm"};
}

// Desk-scale focal-stack configuration shared by the image-quality criteria:
// 128 x 128 SLMs, 5 planes over 15-25 mm, a 4 x 4 grid at 120 rad/mm.
AppConfig desk_config() {
  AppConfig cfg = default_config();
  cfg.seed = 1;
  return cfg;
}

struct StackRun {
  ExperimentResult result;
  double seconds = 0.0;
};

StackRun run_named(ExperimentKind kind, const AppConfig& cfg, const std::string& name) {
  const auto t0 = std::chrono::steady_clock::now();
  StackRun run{run_experiment(kind, cfg, work_dir(name)), 0.0};
  run.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return run;
}

// 5 and 6 share one single-vs-multi run.
const StackRun& single_vs_multi() {
  static const StackRun run = run_named(ExperimentKind::single_vs_multi, desk_config(), "single_vs_multi");
  return run;
}

Outcome despeckling() {
  const StackRun& run = single_vs_multi();
  const double multi = *run.result.value("multi 2slm.psnr");
  const double random = *run.result.value("single random.psnr");
  return {multi - random >= 6.0 && run.seconds <= 1800.0,
          "4x4 two-SLM " + fmt(multi) + " dB vs single-source random phase " + fmt(random) + " dB (margin " +
              fmt(multi - random) + " dB, " + fmt(run.seconds, 3) + " s)"};
}

Outcome single_slm_failure() {
  const StackRun& run = single_vs_multi();
  const double two = *run.result.value("multi 2slm.psnr");
  const double one = *run.result.value("multi 1slm.psnr");
  return {two - one >= 3.0,
          "two-SLM " + fmt(two) + " dB vs complex single-SLM " + fmt(one) + " dB (margin " + fmt(two - one) + " dB)"};
}

// 7. 25 sources at 60 rad/mm against six phase-only frames, both on the
// 15-plane stack of the tm-compare experiment.
Outcome temporal_multiplexing() {
  AppConfig cfg = desk_config();
  cfg.sources.grid = {5, 5, 60e3, {}};
  const StackRun run = run_named(ExperimentKind::tm_compare, cfg, "tm_compare");
  const double mp = *run.result.value("multisource.psnr"), ms = *run.result.value("multisource.ssim");
  const double tp = *run.result.value("tm6.psnr"), ts = *run.result.value("tm6.ssim");
  return {mp >= tp && ms >= ts, "multisource " + fmt(mp) + " dB / SSIM " + fmt(ms) + " vs TM F=6 " + fmt(tp) +
                                    " dB / SSIM " + fmt(ts)};
}

// 8. Averages of N independent fully developed speckle patterns.
Outcome speckle_statistics() {
  const Shape s{256, 256};
  std::mt19937_64 rng(808);
  std::normal_distribution<double> g(0.0, 1.0);
  bool ok = true;
  std::string detail;
  for (int n : {1, 4, 16, 64}) {
    std::vector<double> acc(s.size(), 0.0);
    for (int k = 0; k < n; ++k) {
      // Circular Gaussian diffuser seen through a centered square aperture of
      // half the band. A unit-modulus phase screen would leave too few
      // phasors per output sample for fully developed statistics.
      ComplexField2D screen(s, 8e-6, 520e-9);
      for (auto& v : screen.data()) v = {g(rng), g(rng)};
      ComplexField2D spec = fft2(screen);
      for (int r = 0; r < s.rows; ++r)
        for (int c = 0; c < s.cols; ++c)
          if (std::abs(FrequencyGrid::bin(r, s.rows)) >= 64 || std::abs(FrequencyGrid::bin(c, s.cols)) >= 64)
            spec(r, c) = 0.0;
      const ComplexField2D out = ifft2(spec);
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += std::norm(out.data()[i]) / n;
    }
    const double c = speckle_contrast(IntensityImage(s, 8e-6, std::move(acc)), 64);
    const double expect = 1.0 / std::sqrt(double(n));
    ok = ok && std::abs(c - expect) <= 0.1 * expect;
    detail += "N=" + std::to_string(n) + " " + fmt(c) + " (expect " + fmt(expect) + ") ";
  }
  detail.pop_back();
  return {ok, detail};
}

// 9. Nyquist grating contrast for coincident, correlated and independent
// sources. At 2 rad/mm neighbouring sources land about 0.4 px apart at 20 mm
// and their outputs stay strongly correlated (about 0.9 for random patterns),
// so the 4x4 grid smears the grating. At 5 rad/mm the copies already
// decorrelate to about 0.5.
Outcome grating_contrast_shape() {
  AppConfig cfg = desk_config();
  cfg.slm = {64, 64};
  cfg.sweep.contrast_window = 48;
  cfg.sweep.grating_foci = 3;
  const double zero = grating_contrast(cfg, make_grid({4, 4, 0.0, {}}), 9001);
  const double dip = grating_contrast(cfg, make_grid({4, 4, 2e3, {}}), 9001);
  const double far = grating_contrast(cfg, make_grid({4, 4, 150e3, {}}), 9001);
  return {dip < zero && far > dip, "contrast at 0 rad/mm " + fmt(zero) + ", 2 rad/mm " + fmt(dip) +
                                       ", 150 rad/mm " + fmt(far)};
}

// 10. Staged fitting against each single-component preset.
Outcome calibration_recovery() {
  AppConfig cfg = desk_config();
  const CalibrationSettings& k = cfg.calibration;
  const Shape shape{k.slm_size, k.slm_size};
  const CalibModel ideal = CalibModel::identity(cfg.system, shape, make_grid(k.grid), cfg.system.wavelength(), k.model);
  DatasetSpec ds = k.dataset;
  ds.planes = cfg.system.planes;
  bool ok = true;
  std::string detail;
  for (Perturbation p : {Perturbation::lut, Perturbation::fringing, Perturbation::pupil, Perturbation::warp,
                         Perturbation::source}) {
    const CalibModel oracle = perturbed(ideal, p);
    const CaptureDataset data = make_synthetic_dataset(oracle, ds);
    const FitResult fit = fit_model(data, ideal, k.fit);
    const double lut = std::max(lut_rms_error(fit.model, oracle, 0, data), lut_rms_error(fit.model, oracle, 1, data));
    const double src = source_position_error(fit.model, oracle);
    const double warp = warp_rms_error(fit.model, oracle);
    ok = ok && lut <= 0.05 && src <= 0.1 && warp <= 0.1;
    detail += std::string(perturbation_name(p)) + " lut " + fmt(lut, 2) + " rad, src " + fmt(src, 2) + " bins, warp " +
              fmt(warp, 2) + " px; ";
  }
  // Identity reduction at two distances, both configurations.
  const DigitalPatterns d = random_digital(shape, 1234);
  std::vector<double> p1(shape.size()), p2(shape.size()), ones(shape.size(), 1.0);
  for (std::size_t i = 0; i < shape.size(); ++i) {
    p1[i] = 2 * kPi * d.slm1[i] / kLutSize;
    p2[i] = 2 * kPi * d.slm2[i] / kLutSize;
  }
  const SlmPattern a(Modulation::phase_only, shape, cfg.system.pitch, p1, ones);
  const SlmPattern b(Modulation::phase_only, shape, cfg.system.pitch, p2, ones);
  double worst = 0.0;
  for (int config = 0; config < 2; ++config) {
    for (double z : {15e-3, 25e-3}) {
      const IntensityImage ref =
          forward_multisource_2slm(a, b, ideal.source_array(config), z, cfg.system, cfg.system.wavelength());
      const IntensityImage got = calibrated_forward(d.slm1, d.slm2, ideal, config, z);
      double num = 0.0, den = 0.0;
      for (std::size_t i = 0; i < ref.size(); ++i) {
        num += std::pow(ref.data()[i] - got.data()[i], 2);
        den += std::pow(ref.data()[i], 2);
      }
      worst = std::max(worst, std::sqrt(num / den));
    }
  }
  ok = ok && worst <= 1e-12;
  return {ok, detail + "identity " + fmt(worst)};
}

// 11. Fitted model versus the standard-preset oracle; CiTL against
// model-only optimization with the same total step count.
Outcome citl_benefit() {
  AppConfig cfg = desk_config();
  cfg.calibration.perturbation = Perturbation::standard;
  const StackRun run = run_named(ExperimentKind::calib_recovery, cfg, "calib_recovery");
  const double model = *run.result.value("model_only_psnr");
  const double citl = *run.result.value("citl_psnr");
  return {citl > model, "oracle-rendered PSNR: CiTL " + fmt(citl) + " dB vs model only " + fmt(model) + " dB"};
}

// 12. Pupil-sampled evaluation of smooth, random and multisource holograms.
Outcome pupil_invariance() {
  AppConfig cfg = desk_config();
  const StackRun run = run_named(ExperimentKind::pupil_demo, cfg, "pupil_demo");
  const double worst = *run.result.value("multisource.worst");
  const double smooth_edge = *run.result.value("smooth.edge");
  const double random_center = *run.result.value("random.center");
  return {worst > smooth_edge && worst > random_center,
          "multisource worst " + fmt(worst) + " dB, smooth edge " + fmt(smooth_edge) + " dB, random center " +
              fmt(random_center) + " dB"};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::function<Outcome()>> criteria{
      gradient_correctness, propagation_fidelity, memory_effect_law,  threshold_regression,
      despeckling,          single_slm_failure,   temporal_multiplexing, speckle_statistics,
      grating_contrast_shape, calibration_recovery, citl_benefit,      pupil_invariance,
  };
  std::vector<int> selected;
  for (int i = 1; i < argc; ++i) {
    const int n = std::atoi(argv[i]);
    if (n < 1 || n > static_cast<int>(criteria.size())) {
      std::cerr << "usage: " << argv[0] << " [criterion numbers 1-" << criteria.size() << "]\n";
      return 2;
    }
    selected.push_back(n);
  }
  if (selected.empty())
    for (int n = 1; n <= static_cast<int>(criteria.size()); ++n) selected.push_back(n);

  bool all = true;
  for (int n : selected) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[static_cast<std::size_t>(n - 1)]();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << "criterion " << n << ' ' << (o.pass ? "PASS" : "FAIL") << ": " << o.detail << " [" << fmt(secs, 3)
              << " s]" << std::endl;
    all = all && o.pass;
  }
  return all ? 0 : 1;
}
