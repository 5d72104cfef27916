#include <benchmark/benchmark.h>

#include <random>

#include "msholo/calibration.hpp"
#include "msholo/fft.hpp"
#include "msholo/optimizer.hpp"
#include "msholo/propagation.hpp"

using namespace msholo;

namespace {

ComplexField2D noise_field(int n) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g(0.0, 1.0);
  ComplexField2D f({n, n}, 4e-6, 520e-9);
  for (auto& v : f.data()) v = {g(rng), g(rng)};
  return f;
}

void BM_Fft2(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  ComplexField2D f = noise_field(n);
  for (auto _ : state) {
    fft2_inplace(f.data(), f.shape(), FftDirection::forward);
    benchmark::DoNotOptimize(f.data().data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<long>(n) * n);
}
BENCHMARK(BM_Fft2)->Arg(128)->Arg(256)->Arg(512);

void BM_Propagate(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const ComplexField2D f = noise_field(n);
  const auto kernel = cached_kernel<double>(f.shape(), f.pitch(), f.wavelength(), 20e-3, BandLimit::none);
  auto buf = f.buffer();
  for (auto _ : state) {
    propagate_inplace<double>(buf, *kernel, false);
    benchmark::DoNotOptimize(buf.data());
  }
}
BENCHMARK(BM_Propagate)->Arg(256)->Arg(512);

// One loss-and-gradient evaluation of the two-SLM model, 5 planes.
void BM_ModelGradient(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const int grid = static_cast<int>(state.range(1));
  SystemConfig cfg = SystemConfig::desk_default();
  const Shape s{n, n};
  const SourceArray src = make_grid({grid, grid, 120e3, {}});
  std::vector<IntensityImage> images;
  for (std::size_t k = 0; k < cfg.planes.size(); ++k) images.emplace_back(s, cfg.pitch, std::vector<double>(s.size(), 0.5));
  const auto frames =
      initial_frames(1, Modulation::phase_only, Modulation::amplitude_only, s, cfg.pitch, InitKind::uniform_random, 1);
  for (auto _ : state) {
    const GradientBundle g = gradients(frames, src, cfg, cfg.wavelength(), {cfg.planes, images}, {},
                                       LossScale::least_squares);
    benchmark::DoNotOptimize(g.loss);
  }
}
BENCHMARK(BM_ModelGradient)->Args({64, 2})->Args({128, 4})->Unit(benchmark::kMillisecond);

void BM_CalibrationEvaluate(benchmark::State& state) {
  SystemConfig cfg = SystemConfig::desk_default();
  const Shape s{32, 32};
  const CalibModel ideal = CalibModel::identity(cfg, s, make_grid({2, 2, 75e3, {}}), cfg.wavelength());
  const CalibModel oracle = perturbed(ideal, Perturbation::standard);
  DatasetSpec ds;
  ds.records_per_config = 4;
  ds.planes = cfg.planes;
  const CaptureDataset data = make_synthetic_dataset(oracle, ds);
  for (auto _ : state) {
    const CalibEvaluation ev = evaluate_calibration(ideal, data.records, kAllParams);
    benchmark::DoNotOptimize(ev.loss);
  }
  state.SetItemsProcessed(state.iterations() * static_cast<long>(data.records.size()));
}
BENCHMARK(BM_CalibrationEvaluate)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
