#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "msholo/error.hpp"
#include "msholo/forward.hpp"
#include "msholo/metrics.hpp"
#include "msholo/sources.hpp"
#include "msholo/targets.hpp"

using namespace msholo;

namespace {

IntensityImage random_image(Shape s, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(s.size());
  for (auto& x : v) x = u(rng);
  return IntensityImage(s, 1.0, std::move(v));
}

// Straight transcription of the windowed SSIM definition.
double ssim_oracle(const IntensityImage& x, const IntensityImage& y) {
  double w[11];
  double total = 0.0;
  for (int i = 0; i < 11; ++i) {
    w[i] = std::exp(-0.5 * (i - 5) * (i - 5) / (1.5 * 1.5));
    total += w[i];
  }
  for (double& v : w) v /= total;
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  double acc = 0.0;
  int count = 0;
  for (int r = 0; r + 11 <= x.rows(); ++r) {
    for (int c = 0; c + 11 <= x.cols(); ++c) {
      double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
      for (int i = 0; i < 11; ++i)
        for (int j = 0; j < 11; ++j) {
          const double k = w[i] * w[j];
          mx += k * x(r + i, c + j);
          my += k * y(r + i, c + j);
        }
      for (int i = 0; i < 11; ++i)
        for (int j = 0; j < 11; ++j) {
          const double k = w[i] * w[j];
          const double dx = x(r + i, c + j) - mx, dy = y(r + i, c + j) - my;
          sxx += k * dx * dx;
          syy += k * dy * dy;
          sxy += k * dx * dy;
        }
      acc += (2 * mx * my + c1) * (2 * sxy + c2) / ((mx * mx + my * my + c1) * (sxx + syy + c2));
      ++count;
    }
  }
  return acc / count;
}

}  // namespace

TEST(Metrics, PsnrMatchesDefinition) {
  const IntensityImage a = random_image({16, 16}, 1);
  const IntensityImage b = random_image({16, 16}, 2);
  double mse = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) mse += std::pow(a.data()[i] - b.data()[i], 2);
  mse /= a.size();
  EXPECT_NEAR(psnr(a, b, 1.0), 10.0 * std::log10(1.0 / mse), 1e-12);
  EXPECT_EQ(psnr(a, a, 1.0), kPsnrIdentical);
}

TEST(Metrics, PsnrScalesWithPeakAndJointScaling) {
  const IntensityImage a = random_image({16, 16}, 3);
  const IntensityImage b = random_image({16, 16}, 4);
  IntensityImage a3 = a, b3 = b;
  for (auto& v : a3.data()) v *= 3.0;
  for (auto& v : b3.data()) v *= 3.0;
  EXPECT_NEAR(psnr(a3, b3, 3.0), psnr(a, b, 1.0), 1e-10);
  EXPECT_NEAR(psnr(a, b, 2.0) - psnr(a, b, 1.0), 20.0 * std::log10(2.0), 1e-10);
}

TEST(Metrics, StackPsnrUsesTargetPeak) {
  const IntensityImage t0 = random_image({8, 8}, 5, 0.0, 0.5);
  const IntensityImage t1 = random_image({8, 8}, 6, 0.0, 2.0);
  const IntensityImage p0 = random_image({8, 8}, 7);
  const IntensityImage p1 = random_image({8, 8}, 8);
  std::vector<double> all_p, all_t;
  for (auto* im : {&p0, &p1}) all_p.insert(all_p.end(), im->data().begin(), im->data().end());
  for (auto* im : {&t0, &t1}) all_t.insert(all_t.end(), im->data().begin(), im->data().end());
  const double peak = std::max(t0.max(), t1.max());
  EXPECT_NEAR(stack_psnr({p0, p1}, {t0, t1}), psnr(all_p, all_t, peak), 1e-12);
}

TEST(Metrics, SsimMatchesWindowedOracle) {
  const IntensityImage a = random_image({20, 24}, 9);
  IntensityImage b = a;
  std::mt19937_64 rng(10);
  std::normal_distribution<double> n(0.0, 0.1);
  for (auto& v : b.data()) v = std::clamp(v + n(rng), 0.0, 1.0);
  EXPECT_NEAR(ssim(b, a), ssim_oracle(b, a), 1e-10);
  EXPECT_NEAR(ssim(a, a), 1.0, 1e-12);
  EXPECT_NEAR(ssim(a, b), ssim(b, a), 1e-12);
  EXPECT_THROW(ssim(random_image({8, 20}, 1), random_image({8, 20}, 2)), SizingError);
}

TEST(Metrics, MichelsonOnIdealGrating) {
  IntensityImage g({10, 12}, 1.0);
  for (int r = 0; r < 10; ++r)
    for (int c = 0; c < 12; ++c) g(r, c) = (c % 2 == 0) ? 1.0 : 0.25;
  EXPECT_NEAR(michelson_contrast(g, {0, 0, 10, 12}, 2), 0.75 / 1.25, 1e-14);
  IntensityImage flat({10, 12}, 1.0, std::vector<double>(120, 0.5));
  EXPECT_NEAR(michelson_contrast(flat, {0, 0, 10, 12}, 2), 0.0, 1e-15);
  EXPECT_THROW(michelson_contrast(g, {0, 0, 11, 12}, 2), DomainError);
}

TEST(Metrics, CenteredRegion) {
  const Region r = centered_region({128, 128}, 100, 100);
  EXPECT_EQ(r.row, 14);
  EXPECT_EQ(r.col, 14);
  EXPECT_EQ(r.rows, 100);
}

TEST(Metrics, SpeckleContrastOfAveragedExponentials) {
  std::mt19937_64 rng(11);
  std::exponential_distribution<double> e(1.0);
  for (int n : {1, 4, 16, 64}) {
    std::vector<double> v(256 * 256, 0.0);
    for (double& x : v)
      for (int k = 0; k < n; ++k) x += e(rng) / n;
    const double c = speckle_contrast(IntensityImage({256, 256}, 1.0, std::move(v)), 32);
    EXPECT_NEAR(c, 1.0 / std::sqrt(double(n)), 0.1 / std::sqrt(double(n))) << n;
  }
  EXPECT_THROW(speckle_contrast(IntensityImage({8, 8}, 1.0, std::vector<double>(64, 0.0)), 4), DomainError);
}

TEST(Metrics, SpeckleFlatRegionSelection) {
  IntensityImage ref({16, 16}, 1.0, std::vector<double>(256, 1.0));
  for (int r = 0; r < 8; ++r)
    for (int c = 0; c < 16; ++c) ref(r, c) = (c % 2) ? 1.0 : 0.0;
  const IntensityImage img = random_image({16, 16}, 12, 0.5, 1.5);
  const auto flat = speckle_contrast_flat(img, ref, 8);
  ASSERT_TRUE(flat.has_value());
  IntensityImage bottom({8, 16}, 1.0);
  for (int r = 0; r < 8; ++r)
    for (int c = 0; c < 16; ++c) bottom(r, c) = img(r + 8, c);
  EXPECT_NEAR(*flat, speckle_contrast(bottom, 8), 1e-12);
  IntensityImage busy = ref;
  for (int r = 8; r < 16; ++r)
    for (int c = 0; c < 16; ++c) busy(r, c) = (c % 2) ? 1.0 : 0.0;
  EXPECT_FALSE(speckle_contrast_flat(img, busy, 8).has_value());
}

TEST(Metrics, FftshiftMovesDcToCenter) {
  IntensityImage a({4, 6}, 1.0);
  a(0, 0) = 1.0;
  const IntensityImage s = fftshift(a);
  EXPECT_EQ(s(2, 3), 1.0);
}

TEST(Metrics, EyeboxOfPlaneWaveIsOnePeak) {
  const Shape s{16, 16};
  const auto w = plane_wave<double>({0.0, 0.0}, s, 8e-6, 520e-9);
  const EyeboxReport rep = eyebox_report({w}, {1.0}, 27.5e-3);
  EXPECT_NEAR(rep.peak_to_mean, double(s.size()), 1e-9);
  EXPECT_NEAR(rep.central_fraction, 1.0, 1e-12);
  EXPECT_NEAR(rep.energy, w.energy(), 1e-9);
  EXPECT_NEAR(rep.intensity(8, 8), w.energy(), 1e-9);
}

TEST(Metrics, EvaluateStackReportsPerPlane) {
  FocalStackTarget t{{1e-3, 2e-3}, {random_image({16, 16}, 13), random_image({16, 16}, 14)}};
  const MetricReport rep = evaluate_stack(t.images, t);
  ASSERT_EQ(rep.planes.size(), 2u);
  EXPECT_EQ(rep.psnr, kPsnrIdentical);
  EXPECT_NEAR(rep.ssim, 1.0, 1e-12);
  const std::string csv = rep.csv_rows("x");
  EXPECT_NE(csv.find("stack"), std::string::npos);
  EXPECT_NE(MetricReport::csv_header().find("psnr"), std::string::npos);
}

TEST(Targets, DiskKernelNormalizedAndSymmetric) {
  for (double radius : {0.0, 0.4, 1.0, 2.5, 4.0}) {
    int hw = 0;
    const auto k = disk_kernel(radius, hw);
    const int n = 2 * hw + 1;
    ASSERT_EQ(k.size(), std::size_t(n * n));
    double sum = 0.0;
    for (double v : k) sum += v;
    EXPECT_NEAR(sum, 1.0, 1e-12);
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < n; ++c) {
        EXPECT_NEAR(k[r * n + c], k[c * n + r], 1e-15);
        EXPECT_NEAR(k[r * n + c], k[(n - 1 - r) * n + c], 1e-15);
      }
    if (radius < 0.5) EXPECT_EQ(hw, 0);
  }
}

TEST(Targets, DiskBlurPreservesConstantsAndMean) {
  const IntensityImage flat({12, 12}, 1.0, std::vector<double>(144, 0.37));
  const IntensityImage b = disk_blur(flat, 2.0);
  for (double v : b.data()) EXPECT_NEAR(v, 0.37, 1e-14);
  const IntensityImage zero = disk_blur(random_image({12, 12}, 15), 0.0);
  const IntensityImage orig = random_image({12, 12}, 15);
  for (std::size_t i = 0; i < orig.size(); ++i) EXPECT_DOUBLE_EQ(zero.data()[i], orig.data()[i]);
}

TEST(Targets, FocalStackIsSharpAtLayerDepth) {
  const Shape s{32, 32};
  const auto planes = linspace_planes(15e-3, 25e-3, 5);
  const LayeredScene scene = builtin_scene(s, 8e-6, 25e-3, 15e-3);
  const FocalStackTarget stack = render_focal_stack(scene, planes, 4.0);
  ASSERT_EQ(stack.size(), 5u);
  for (const auto& im : stack.images) {
    for (double v : im.data()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0 + 1e-12);
    }
  }
  // A one-layer scene is reproduced exactly at its own depth.
  LayeredScene one;
  one.layers.push_back({20e-3, random_image(s, 16), IntensityImage(s, 8e-6, std::vector<double>(s.size(), 1.0))});
  const FocalStackTarget t = render_focal_stack(one, {20e-3, 22e-3}, 4.0);
  for (std::size_t i = 0; i < s.size(); ++i) EXPECT_NEAR(t.images[0].data()[i], one.layers[0].image.data()[i], 1e-14);
}

TEST(Targets, GratingTarget) {
  const FocalStackTarget g = make_grating_target({8, 8}, 8e-6, 2, {15e-3, 20e-3}, 20e-3, 4.0);
  for (int c = 0; c < 8; ++c) EXPECT_EQ(g.images[1](3, c), c % 2 == 0 ? 1.0 : 0.0);
  EXPECT_LT(michelson_contrast(g.images[0], {0, 0, 8, 8}, 2), 0.5);
}

TEST(Targets, NormalizationAndSubset) {
  FocalStackTarget t{{1e-3, 2e-3}, {random_image({8, 8}, 17), random_image({8, 8}, 18)}};
  const FocalStackTarget n = t.normalized_to(5.0);
  const double mean_energy = (n.images[0].sum() + n.images[1].sum()) / 2.0;
  EXPECT_NEAR(mean_energy, 5.0, 1e-12);
  const FocalStackTarget sub = t.subset({1});
  ASSERT_EQ(sub.size(), 1u);
  EXPECT_EQ(sub.planes[0], 2e-3);
}

TEST(Targets, ResizeKeepsConstants) {
  const IntensityImage flat({7, 9}, 1.0, std::vector<double>(63, 0.6));
  const IntensityImage r = resize_image(flat, {16, 20});
  for (double v : r.data()) EXPECT_NEAR(v, 0.6, 1e-14);
}

TEST(Targets, MissingSceneFile) {
  EXPECT_THROW(load_scene("/nonexistent/scene.json", {16, 16}, 8e-6), Error);
}
