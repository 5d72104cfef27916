#include <gtest/gtest.h>

#include <complex>
#include <numbers>
#include <random>

#include "msholo/fft.hpp"
#include "msholo/field.hpp"
#include "msholo/propagation.hpp"

using namespace msholo;
using cd = std::complex<double>;

namespace {

ComplexField2D random_field(Shape s, double pitch, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  ComplexField2D f(s, pitch, 520e-9);
  for (auto& v : f.data()) v = {n(rng), n(rng)};
  return f;
}

// Plain O(N^2) unitary DFT over a row-major grid.
std::vector<cd> direct_dft(std::span<const cd> in, Shape s, int sign) {
  const double two_pi = 2.0 * std::numbers::pi;
  std::vector<cd> out(in.size());
  for (int v = 0; v < s.rows; ++v) {
    for (int u = 0; u < s.cols; ++u) {
      cd acc{};
      for (int y = 0; y < s.rows; ++y) {
        for (int x = 0; x < s.cols; ++x) {
          acc += in[static_cast<std::size_t>(y) * s.cols + x] *
                 std::polar(1.0, sign * two_pi * (double(u * x) / s.cols + double(v * y) / s.rows));
        }
      }
      out[static_cast<std::size_t>(v) * s.cols + u] = acc / std::sqrt(double(s.size()));
    }
  }
  return out;
}

double rel_error(std::span<const cd> a, std::span<const cd> b) {
  double n = 0.0;
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    n += std::norm(a[i] - b[i]);
    d += std::norm(b[i]);
  }
  return std::sqrt(n / d);
}

// Transfer function written out from the angular-spectrum formula.
cd transfer(double fx, double fy, double wl, double z) {
  const double rho2 = wl * wl * (fx * fx + fy * fy);
  if (rho2 >= 1.0) return 0.0;
  return std::polar(1.0, 2.0 * std::numbers::pi * z / wl * std::sqrt(1.0 - rho2));
}

}  // namespace

TEST(Fft, MatchesDirectDftBothDirections) {
  for (Shape s : {Shape{8, 8}, Shape{6, 10}, Shape{16, 16}}) {
    const ComplexField2D f = random_field(s, 1e-6, 3);
    std::vector<cd> data(f.data().begin(), f.data().end());
    fft2_inplace(data, s, FftDirection::forward);
    EXPECT_LT(rel_error(data, direct_dft(f.data(), s, -1)), 1e-12);
    std::vector<cd> back(f.data().begin(), f.data().end());
    fft2_inplace(back, s, FftDirection::inverse);
    EXPECT_LT(rel_error(back, direct_dft(f.data(), s, +1)), 1e-12);
  }
}

TEST(Fft, UnitaryRoundTripAndParseval) {
  const ComplexField2D f = random_field({32, 24}, 1e-6, 4);
  const ComplexField2D F = fft2(f);
  EXPECT_NEAR(F.energy(), f.energy(), 1e-10 * f.energy());
  const ComplexField2D g = ifft2(F);
  EXPECT_LT(rel_error(g.data(), f.data()), 1e-13);
}

TEST(Fft, RefusesOversizedTransforms) {
  const std::size_t old = max_fft_elements();
  set_max_fft_elements(64);
  std::vector<cd> data(100);
  EXPECT_THROW(fft2_inplace(data, {10, 10}, FftDirection::forward), SizingError);
  set_max_fft_elements(old);
}

TEST(FrequencyGridTest, StandardLayout) {
  const FrequencyGrid g({4, 5}, 2e-6);
  EXPECT_DOUBLE_EQ(g.fx(0), 0.0);
  EXPECT_DOUBLE_EQ(g.fx(2), 2.0 / (5 * 2e-6));
  EXPECT_DOUBLE_EQ(g.fx(3), -2.0 / (5 * 2e-6));
  EXPECT_DOUBLE_EQ(g.fy(2), -2.0 / (4 * 2e-6));
  EXPECT_EQ(FrequencyGrid::bin(3, 4), -1);
}

TEST(Resample, UpsampleAndBlockSumAreAdjoint) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-1, 1);
  const Shape s{3, 4};
  std::vector<double> a(s.size()), b(s.size() * 4), ua(s.size() * 4, 0.0), sb(s.size(), 0.0);
  for (auto& v : a) v = u(rng);
  for (auto& v : b) v = u(rng);
  upsample_into<double>(a, s, 2, ua);
  block_sum_into<double>(b, {6, 8}, 2, sb);
  double lhs = 0.0, rhs = 0.0;
  for (std::size_t i = 0; i < ua.size(); ++i) lhs += ua[i] * b[i];
  for (std::size_t i = 0; i < a.size(); ++i) rhs += a[i] * sb[i];
  EXPECT_NEAR(lhs, rhs, 1e-12);
}

TEST(Propagation, MatchesDirectEvaluation) {
  for (double z : {0.5e-3, 2e-3, -1e-3}) {
    const Shape s{12, 16};
    const double pitch = 4e-6;
    const ComplexField2D f = random_field(s, pitch, 7);
    const ComplexField2D g = propagate(f, z);
    const auto spec = direct_dft(f.data(), s, -1);
    std::vector<cd> weighted(spec.size());
    const FrequencyGrid grid(s, pitch);
    for (int r = 0; r < s.rows; ++r) {
      for (int c = 0; c < s.cols; ++c) {
        const std::size_t i = static_cast<std::size_t>(r) * s.cols + c;
        weighted[i] = spec[i] * transfer(grid.fx(c), grid.fy(r), 520e-9, z);
      }
    }
    EXPECT_LT(rel_error(g.data(), direct_dft(weighted, s, +1)), 1e-10) << "z=" << z;
  }
}

TEST(Propagation, ConservesEnergyOnPassband) {
  const ComplexField2D f = random_field({16, 16}, 8e-6, 8);
  const ComplexField2D g = propagate(f, 10e-3);
  EXPECT_NEAR(g.energy(), f.energy(), 1e-10 * f.energy());
}

TEST(Propagation, EvanescentPartIsRemoved) {
  // 0.2 um sampling puts the outer frequencies past 1 / lambda.
  const ComplexField2D f = random_field({16, 16}, 0.2e-6, 9);
  const ComplexField2D g = propagate(f, 1e-6);
  EXPECT_LT(g.energy(), f.energy());
  const AsmKernel k = asm_kernel({16, 16}, 0.2e-6, 520e-9, 1e-6);
  const ComplexField2D F = fft2(f);
  double pass = 0.0;
  for (std::size_t i = 0; i < F.size(); ++i) pass += k.band_mask[i] ? std::norm(F.data()[i]) : 0.0;
  EXPECT_NEAR(g.energy(), pass, 1e-10 * pass);
}

TEST(Propagation, AdjointInnerProductIdentity) {
  for (BandLimit bl : {BandLimit::none, BandLimit::matsushima}) {
    const ComplexField2D a = random_field({16, 12}, 8e-6, 10);
    const ComplexField2D b = random_field({16, 12}, 8e-6, 11);
    const ComplexField2D pa = propagate(a, 30e-3, bl);
    const ComplexField2D pb = propagate_adjoint(b, 30e-3, bl);
    cd lhs{}, rhs{};
    for (std::size_t i = 0; i < a.size(); ++i) {
      lhs += pa.data()[i] * std::conj(b.data()[i]);
      rhs += a.data()[i] * std::conj(pb.data()[i]);
    }
    EXPECT_LT(std::abs(lhs - rhs), 1e-10 * std::abs(lhs));
  }
}

TEST(Propagation, ZeroDistanceIsIdentityAndDistancesCompose) {
  const ComplexField2D f = random_field({16, 16}, 8e-6, 12);
  EXPECT_LT(rel_error(propagate(f, 0.0).data(), f.data()), 1e-13);
  const ComplexField2D two = propagate(propagate(f, 1e-3), 2e-3);
  EXPECT_LT(rel_error(two.data(), propagate(f, 3e-3).data()), 1e-9);
  const ComplexField2D back = propagate(propagate(f, 4e-3), -4e-3);
  EXPECT_LT(rel_error(back.data(), f.data()), 1e-9);
}

TEST(Propagation, MatsushimaBandIsSubsetOfEvanescentBand) {
  const AsmKernel open = asm_kernel({32, 32}, 8e-6, 520e-9, 0.5, BandLimit::none);
  const AsmKernel lim = asm_kernel({32, 32}, 8e-6, 520e-9, 0.5, BandLimit::matsushima);
  std::size_t n_open = 0, n_lim = 0;
  for (std::size_t i = 0; i < open.band_mask.size(); ++i) {
    EXPECT_LE(lim.band_mask[i], open.band_mask[i]);
    n_open += open.band_mask[i];
    n_lim += lim.band_mask[i];
  }
  EXPECT_LT(n_lim, n_open);
}

TEST(Propagation, CachedKernelMatchesFreshKernel) {
  clear_kernel_cache();
  const auto a = cached_kernel<double>({8, 8}, 8e-6, 520e-9, 2e-3, BandLimit::none);
  const auto b = cached_kernel<double>({8, 8}, 8e-6, 520e-9, 2e-3, BandLimit::none);
  EXPECT_EQ(a.get(), b.get());
  const AsmKernel k = asm_kernel({8, 8}, 8e-6, 520e-9, 2e-3);
  for (std::size_t i = 0; i < k.transfer.size(); ++i) EXPECT_EQ(a->transfer[i], k.transfer[i]);
}

TEST(Propagation, SinglePrecisionTracksDouble) {
  const ComplexField2D f = random_field({32, 32}, 8e-6, 13);
  const ComplexField2Df g = propagate(f.cast<float>(), 5e-3);
  const ComplexField2D ref = propagate(f, 5e-3);
  const ComplexField2D back = g.cast<double>();
  EXPECT_LT(rel_error(back.data(), ref.data()), 1e-5);
}
