#include "msholo/selftest.hpp"

#include <cmath>
#include <complex>
#include <numbers>
#include <random>
#include <sstream>

#include "msholo/calibration.hpp"
#include "msholo/error.hpp"
#include "msholo/metrics.hpp"
#include "msholo/optimizer.hpp"
#include "msholo/propagation.hpp"
#include "msholo/tensor_io.hpp"

namespace msholo {

namespace {

using cd = std::complex<double>;

ComplexField2D random_field(Shape s, double pitch, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  ComplexField2D f(s, pitch, 520e-9);
  for (auto& v : f.data()) v = {n(rng), n(rng)};
  return f;
}

std::string num(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

SelftestCheck direct_dft() {
  std::mt19937_64 rng(1);
  const Shape s{8, 8};
  const double pitch = 8e-6;
  const double z = 1e-3;
  const ComplexField2D in = random_field(s, pitch, rng);
  const ComplexField2D out = propagate(in, z);
  const AsmKernel k = asm_kernel(s, pitch, in.wavelength(), z);
  const double two_pi = 2.0 * std::numbers::pi;
  double num2 = 0.0;
  double den2 = 0.0;
  for (int y = 0; y < s.rows; ++y) {
    for (int x = 0; x < s.cols; ++x) {
      cd acc{};
      for (int v = 0; v < s.rows; ++v) {
        for (int u = 0; u < s.cols; ++u) {
          cd spec{};
          for (int yy = 0; yy < s.rows; ++yy) {
            for (int xx = 0; xx < s.cols; ++xx) {
              spec += in(yy, xx) * std::polar(1.0, -two_pi * (static_cast<double>(u * xx) / s.cols +
                                                             static_cast<double>(v * yy) / s.rows));
            }
          }
          acc += spec * k.transfer[static_cast<std::size_t>(v) * s.cols + u] *
                 std::polar(1.0, two_pi * (static_cast<double>(u * x) / s.cols + static_cast<double>(v * y) / s.rows));
        }
      }
      acc /= static_cast<double>(s.size());
      num2 += std::norm(acc - out(y, x));
      den2 += std::norm(acc);
    }
  }
  const double rel = std::sqrt(num2 / den2);
  return {"propagation-direct-dft", rel <= 1e-10, "relative error " + num(rel)};
}

SelftestCheck energy_and_adjoint() {
  std::mt19937_64 rng(2);
  const Shape s{16, 16};
  const double pitch = 8e-6;
  const double z = 5e-3;
  ComplexField2D a = random_field(s, pitch, rng);
  const ComplexField2D b = random_field(s, pitch, rng);
  const ComplexField2D pa = propagate(a, z);
  const ComplexField2D pb = propagate_adjoint(b, z);
  cd lhs{};
  cd rhs{};
  double ea = 0.0;
  double epa = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    lhs += pa.data()[i] * std::conj(b.data()[i]);
    rhs += a.data()[i] * std::conj(pb.data()[i]);
    ea += std::norm(a.data()[i]);
    epa += std::norm(pa.data()[i]);
  }
  const double adj = std::abs(lhs - rhs) / std::abs(lhs);
  const double energy = std::abs(ea - epa) / ea;
  return {"propagation-energy-adjoint", adj <= 1e-10 && energy <= 1e-10,
          "adjoint " + num(adj) + ", energy " + num(energy)};
}

SelftestCheck gradient_fd() {
  SystemConfig cfg = SystemConfig::desk_default();
  cfg.planes = {15e-3, 20e-3};
  const Shape s{8, 8};
  const SourceArray src = make_grid({1, 2, 80e3, {}});
  const auto frames =
      initial_frames(1, Modulation::phase_only, Modulation::amplitude_only, s, cfg.pitch, InitKind::uniform_random, 3);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1e-2);
  std::vector<IntensityImage> t;
  for (int k = 0; k < 2; ++k) {
    std::vector<double> v(s.size());
    for (double& x : v) x = u(rng);
    t.emplace_back(s, cfg.pitch, std::move(v));
  }
  const FocalStackTarget target{cfg.planes, t};
  const GradientBundle g = gradients(frames, src, cfg, cfg.wavelength(), target);
  double worst = 0.0;
  for (int probe = 0; probe < 10; ++probe) {
    const bool phase = probe % 2 == 0;
    const std::size_t idx = rng() % s.size();
    auto f = frames;
    double& p = phase ? f[0].first.phase()[idx] : f[0].second->amplitude()[idx];
    const double p0 = p;
    const double h = 1e-5;
    p = p0 + h;
    const double lp = gradients(f, src, cfg, cfg.wavelength(), target).loss;
    p = p0 - h;
    const double lm = gradients(f, src, cfg, cfg.wavelength(), target).loss;
    const double fd = (lp - lm) / (2.0 * h);
    const double an = phase ? g.frames[0].first_phase[idx] : g.frames[0].second_amplitude[idx];
    worst = std::max(worst, std::abs(fd - an) / std::max(std::abs(fd), 1e-30));
  }
  return {"gradient-finite-difference", worst <= 1e-4, "worst relative error " + num(worst)};
}

SelftestCheck speckle() {
  std::mt19937_64 rng(7);
  std::exponential_distribution<double> e(1.0);
  const Shape s{128, 128};
  std::ostringstream detail;
  bool ok = true;
  for (int n : {1, 4}) {
    std::vector<double> v(s.size(), 0.0);
    for (double& x : v) {
      for (int k = 0; k < n; ++k) x += e(rng) / n;
    }
    const double c = speckle_contrast(IntensityImage(s, 1.0, std::move(v)), 32);
    const double expect = 1.0 / std::sqrt(static_cast<double>(n));
    ok = ok && std::abs(c - expect) <= 0.1 * expect;
    detail << "N=" << n << ": " << c << " ";
  }
  return {"speckle-contrast", ok, detail.str()};
}

SelftestCheck tensor_roundtrip() {
  std::mt19937_64 rng(9);
  const ComplexField2D f = random_field({5, 7}, 4e-6, rng);
  const Tensor back = decode_tensor(encode_tensor(tensor_from_field(f)));
  const ComplexField2D g = field_from_tensor(back, f.pitch(), f.wavelength());
  bool same = g.shape() == f.shape();
  for (std::size_t i = 0; same && i < f.size(); ++i) same = f.data()[i] == g.data()[i];
  return {"tensor-roundtrip", same, same ? "bit exact" : "mismatch"};
}

SelftestCheck calibration_identity() {
  SystemConfig cfg = SystemConfig::desk_default();
  const Shape s{8, 8};
  const SourceArray src = make_grid({2, 2, 75e3, {}});
  const CalibModel ideal = CalibModel::identity(cfg, s, src, cfg.wavelength());
  const DigitalPatterns d = random_digital(s, 3);
  std::vector<double> p1(s.size());
  std::vector<double> p2(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    p1[i] = 2.0 * std::numbers::pi * d.slm1[i] / kLutSize;
    p2[i] = 2.0 * std::numbers::pi * d.slm2[i] / kLutSize;
  }
  const SlmPattern a(Modulation::phase_only, s, cfg.pitch, p1, std::vector<double>(s.size(), 1.0));
  const SlmPattern b(Modulation::phase_only, s, cfg.pitch, p2, std::vector<double>(s.size(), 1.0));
  const IntensityImage ref = forward_multisource_2slm(a, b, src, 20e-3, cfg, cfg.wavelength());
  const IntensityImage got = calibrated_forward(d.slm1, d.slm2, ideal, 1, 20e-3);
  double n2 = 0.0;
  double d2 = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    n2 += std::pow(ref.data()[i] - got.data()[i], 2);
    d2 += std::pow(ref.data()[i], 2);
  }
  const double rel = std::sqrt(n2 / d2);
  return {"calibration-identity", rel <= 1e-12, "relative error " + num(rel)};
}

SelftestCheck threshold() {
  const double t = memory_effect_spacing(8e-6, 520e-9, 2e-3) / 1e3;
  return {"memory-effect-threshold", std::abs(t - 48.3) <= 0.1, num(t) + " rad/mm"};
}

}  // namespace

std::vector<SelftestCheck> run_selftest(const std::function<void(const SelftestCheck&)>& report) {
  std::vector<SelftestCheck> out;
  for (auto fn : {direct_dft, energy_and_adjoint, gradient_fd, speckle, tensor_roundtrip, calibration_identity,
                  threshold}) {
    SelftestCheck c;
    try {
      c = fn();
    } catch (const std::exception& e) {
      c = {"?", false, e.what()};
    }
    if (report) report(c);
    out.push_back(std::move(c));
  }
  return out;
}

}  // namespace msholo
