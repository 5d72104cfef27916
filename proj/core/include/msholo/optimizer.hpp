#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "msholo/forward.hpp"
#include "msholo/targets.hpp"

namespace msholo {

enum class InitKind { constant, uniform_random };

// fixed: L = sum_k w_k ||I_k - T_k||^2.
// least_squares: L = min_s sum_k w_k ||s I_k - T_k||^2 with the closed-form
// s = <I, T> / <I, I>. Gradients are taken at the optimal s.
enum class LossScale { fixed, least_squares };

enum class Precision { f32, f64 };

const char* precision_name(Precision p);
Precision parse_precision(const std::string& name);
InitKind parse_init(const std::string& name);
LossScale parse_loss_scale(const std::string& name);

struct AdamSettings {
  double lr = 0.02;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  long step = 0;
};

// Bias-corrected Adam update in place. An empty state is sized on first use.
void adam_step(std::span<double> params, std::span<const double> grad, AdamState& state, const AdamSettings& settings);

// phase_only: amplitude set to 1. amplitude_only: amplitude clamped to
// [0, 1], phase set to 0. complex: amplitude clamped, phase kept.
SlmPattern project_constraints(const SlmPattern& pattern);

// constant: phase 0, amplitude 1. uniform_random: phase in [0, 2 pi),
// amplitude in [0, 1]. The result is already projected.
SlmPattern initial_pattern(Modulation modulation, Shape shape, double pitch, InitKind init, std::mt19937_64& rng);

struct FramePatterns {
  SlmPattern first;
  std::optional<SlmPattern> second;
};

// Circular pupil in the eyebox plane; center and radius in meters.
struct Pupil {
  Vec2 center{};
  double radius = 0.0;
};

// 0/1 weights over the DFT layout of a field with the given grid: a sample
// at spatial frequency u lands at x = lambda f u in the eyebox. Throws
// DomainError when the pupil misses every sample.
std::vector<double> pupil_mask(Shape shape, double pitch, double wavelength, double eyepiece_focal, const Pupil& pupil);

// |F^-1{ mask * F{g_z0} }|^2.
IntensityImage pupil_sampled_forward(const ComplexField2D& field_at_z0, const Pupil& pupil, double eyepiece_focal);

// A view applies an optional spectral mask before every plane propagation.
// Masks live on the simulation grid (SLM shape times upsample).
struct View {
  std::vector<double> mask;
};

struct FrameGradient {
  std::vector<double> first_phase;
  std::vector<double> first_amplitude;
  std::vector<double> second_phase;
  std::vector<double> second_amplitude;
};

struct Evaluation {
  std::vector<std::vector<IntensityImage>> intensity;  // [view][plane], SLM resolution, unscaled
  double loss = 0.0;
  double scale = 1.0;
  std::vector<FrameGradient> gradients;  // one per frame when requested
};

struct LossSpec {
  const std::vector<IntensityImage>* targets = nullptr;  // one per plane, SLM resolution
  std::vector<double> weights;                           // per plane; empty = all 1
  LossScale scale = LossScale::fixed;
  bool gradients = true;
};

// Multi-frame, multi-source image formation with one or two SLMs:
//   I_k = (1/F) sum_f sum_i w_i down(|P_zk{ M_v [P_gap{p_i up(s1_f)} up(s2_f)] }|^2)
// and its adjoint. Loss over V views is averaged over the views.
template <typename Real>
class HologramModel {
 public:
  HologramModel(const SystemConfig& config, SourceArray sources, double wavelength, std::vector<double> planes,
                Shape slm_shape);

  const Shape& slm_shape() const { return slm_; }
  const Shape& sim_shape() const { return sim_; }
  double sim_pitch() const { return sim_pitch_; }
  const std::vector<double>& planes() const { return planes_; }

  // `views` empty means one open view. `loss` null means forward only.
  Evaluation evaluate(const std::vector<FramePatterns>& frames, const std::vector<View>& views,
                      const LossSpec* loss) const;

 private:
  struct Impl;
  std::shared_ptr<const Impl> impl_;
  Shape slm_;
  Shape sim_;
  double sim_pitch_ = 0.0;
  std::vector<double> planes_;
};

extern template class HologramModel<double>;
extern template class HologramModel<float>;

// Weighted sum over planes of squared differences, accumulated in plane then
// row-major order.
double loss_l2(const std::vector<IntensityImage>& predicted, const std::vector<IntensityImage>& target,
               const std::vector<double>& weights);

struct GradientBundle {
  double loss = 0.0;
  double scale = 1.0;
  std::vector<FrameGradient> frames;
};

// Exact gradient of the loss against `target` for every SLM parameter (f64).
GradientBundle gradients(const std::vector<FramePatterns>& frames, const SourceArray& sources,
                         const SystemConfig& config, double wavelength, const FocalStackTarget& target,
                         const std::vector<double>& weights = {}, LossScale scale = LossScale::fixed);

// Random pupil positions drawn each iteration; the loss averages over them.
struct PupilSampling {
  bool enabled = false;
  double radius = 0.3e-3;        // m
  double center_range = 0.5e-3;  // centers uniform in a disc of this radius, m
  int count = 2;
};

struct OptimizeSpec {
  int iterations = 300;
  AdamSettings adam;
  InitKind init = InitKind::uniform_random;
  std::vector<int> loss_planes;       // indices into the target; empty = all
  std::vector<double> plane_weights;  // per loss plane; empty = all 1
  int frames = 1;
  PupilSampling pupil;
  std::uint64_t seed = 1;
  LossScale scale = LossScale::least_squares;
  Precision precision = Precision::f64;

  void validate(std::size_t target_planes) const;
  // Stable text digest of every field, stored with checkpoints.
  std::string digest() const;
};

struct LossRecord {
  int iteration = 0;
  double loss = 0.0;
  double scale = 1.0;
  double seconds = 0.0;
};

struct OptimizeResult {
  std::vector<FramePatterns> frames;
  std::vector<LossRecord> history;  // loss of the parameters entering each iteration, plus the final one
  double scale = 1.0;
  std::vector<IntensityImage> predicted;  // scale * intensity on all target planes, open pupil
  std::vector<AdamState> adam;            // 4 slots per frame: s1 phase, s1 amplitude, s2 phase, s2 amplitude
};

using ProgressFn = std::function<void(const LossRecord&)>;

// Draws `count` initial frames from spec.init and spec.seed.
std::vector<FramePatterns> initial_frames(int count, Modulation first, std::optional<Modulation> second, Shape shape,
                                          double pitch, InitKind init, std::uint64_t seed);

// Joint Adam optimization of every frame. `resume` continues from saved
// optimizer state.
OptimizeResult optimize_frames(std::vector<FramePatterns> init, const SourceArray& sources, const SystemConfig& config,
                               double wavelength, const FocalStackTarget& target, const OptimizeSpec& spec,
                               const ProgressFn& progress = {}, const std::vector<AdamState>* resume = nullptr);

// One frame; s2 empty selects the single-SLM model.
OptimizeResult optimize(const SlmPattern& s1, const std::optional<SlmPattern>& s2, const SourceArray& sources,
                        const SystemConfig& config, double wavelength, const FocalStackTarget& target,
                        const OptimizeSpec& spec, const ProgressFn& progress = {});

// Single on-axis source, phase-only SLM, frames averaged before the loss and
// updated jointly.
OptimizeResult optimize_temporal_multiplex(std::vector<SlmPattern> frames, const SystemConfig& config,
                                           double wavelength, const FocalStackTarget& target, const OptimizeSpec& spec,
                                           const ProgressFn& progress = {});

// Intensities on `planes` (unscaled, SLM resolution, open pupil).
std::vector<IntensityImage> predict_stack(const std::vector<FramePatterns>& frames, const SourceArray& sources,
                                          const SystemConfig& config, double wavelength,
                                          const std::vector<double>& planes, Precision precision = Precision::f64,
                                          const View& view = {});

// Least-squares scale <I, T> / <I, I> over a stack.
double fit_scale(const std::vector<IntensityImage>& predicted, const std::vector<IntensityImage>& target);
std::vector<IntensityImage> scaled(const std::vector<IntensityImage>& images, double s);

void write_history_csv(const std::filesystem::path& path, const std::vector<LossRecord>& history);

struct Checkpoint {
  std::vector<FramePatterns> frames;
  std::vector<AdamState> adam;
  std::string spec_digest;
  int iteration = 0;
};

void write_checkpoint(const std::filesystem::path& directory, const OptimizeResult& result, const OptimizeSpec& spec);
Checkpoint read_checkpoint(const std::filesystem::path& directory);

}  // namespace msholo
