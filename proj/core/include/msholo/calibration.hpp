#pragma once

#include <complex>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "msholo/forward.hpp"
#include "msholo/optimizer.hpp"
#include "msholo/targets.hpp"
#include "msholo/tps.hpp"

namespace msholo {

inline constexpr int kLutSize = 256;
inline constexpr int kFringingSize = 5;

// Digital values are reals in [0, 255]; the table is read by linear
// interpolation between neighbouring entries.
std::vector<double> apply_lut(std::span<const double> digital, std::span<const double> lut);
// Accumulates dL/dlut into g_lut and, when non-empty, dL/ddigital into
// g_digital (slope of the table at each sample).
void apply_lut_adjoint(std::span<const double> digital, std::span<const double> lut, std::span<const double> g_phase,
                       std::span<double> g_lut, std::span<double> g_digital);
// Linear table value * 2 pi / 256.
std::vector<double> linear_lut();

// 5 x 5 same-size correlation with replicated borders; the kernel center is
// (2, 2).
std::vector<double> apply_fringing(std::span<const double> phase, Shape shape, std::span<const double> kernel);
void apply_fringing_adjoint(std::span<const double> phase, Shape shape, std::span<const double> kernel,
                            std::span<const double> g_out, std::span<double> g_phase, std::span<double> g_kernel);
std::vector<double> delta_kernel();

// Complex pupil functions on a node_rows x node_cols lattice spanning the
// field. Each pupil is freq_size x freq_size samples over normalized spatial
// frequency [-1/2, 1/2] in both axes, read bilinearly.
struct PupilGrid {
  int node_rows = 1;
  int node_cols = 1;
  int freq_size = 8;
  std::vector<std::complex<double>> values;  // [node_row][node_col][fy][fx]

  static PupilGrid unit(int node_rows, int node_cols, int freq_size);
  std::size_t node_stride() const { return static_cast<std::size_t>(freq_size) * freq_size; }
  void validate() const;
  bool is_unit() const;
};

// Precomputed bilinear lookups from the coarse pupil samples onto a DFT grid.
class PupilSampler {
 public:
  PupilSampler(Shape grid, int freq_size);
  const Shape& grid() const { return grid_; }
  // Pupil at `center` in node coordinates (x = node column, y = node row).
  std::vector<std::complex<double>> evaluate(const PupilGrid& pupils, Vec2 center) const;
  // Accumulates the adjoint of evaluate() into g_values.
  void adjoint(const PupilGrid& pupils, Vec2 center, std::span<const std::complex<double>> g_pupil,
               std::span<std::complex<double>> g_values) const;

 private:
  Shape grid_;
  int freq_size_;
  std::vector<int> ix_, iy_;
  std::vector<double> wx_, wy_;
};

// spectrum * pupil(center); center outside the node lattice is a DomainError.
ComplexField2D apply_pupil_grid(const ComplexField2D& spectrum, const PupilGrid& pupils, Vec2 patch_center);

// Tiles partition the field; each input tile is propagated with the pupil at
// its center. `patch` selects one tile scaled by the tile count (the
// stochastic mode); its mean over all tiles equals the dense result.
struct TileLayout {
  int rows = 1;
  int cols = 1;

  int count() const { return rows * cols; }
  // Tile bounds on a grid: [r0, r1) x [c0, c1).
  void bounds(Shape grid, int tile, int& r0, int& r1, int& c0, int& c1) const;
  // Tile center in node coordinates of `pupils`.
  Vec2 center(Shape grid, int tile, const PupilGrid& pupils) const;
};

ComplexField2D propagate_with_pupils(const ComplexField2D& field, double z, const PupilGrid& pupils,
                                     const TileLayout& tiles, std::optional<int> patch = std::nullopt,
                                     BandLimit band_limit = BandLimit::none);

struct SlmResponse {
  std::vector<double> lut = linear_lut();
  std::vector<double> fringing = delta_kernel();
};

// Per-source illumination: position in frequency bins of the SLM grid
// (one bin is 2 pi / (cols * pitch) rad/m) and relative intensity.
struct SourceParams {
  Vec2 position;
  double intensity = 1.0;
};

// Learnable system model. Source entry 0 is the single-source configuration
// (config id 0); entries 1.. form the multisource configuration (config id 1).
struct CalibModel {
  Shape slm_shape{};
  double pitch = 8e-6;
  int upsample = 2;
  double wavelength = 520e-9;
  double gap = 2e-3;
  BandLimit band_limit = BandLimit::none;
  SlmResponse slm[2];
  PupilGrid pupil[2];  // 0: gap leg, 1: image leg
  TileLayout tiles;
  TpsWarp warp;    // field before SLM 2 into the SLM 2 frame, SLM pixels
  TpsWarp camera;  // model intensity into the camera frame, SLM pixels
  std::vector<SourceParams> sources;

  struct Options {
    int pupil_nodes_rows = 1;
    int pupil_nodes_cols = 1;
    int pupil_freq_size = 8;
    int tile_rows = 1;
    int tile_cols = 1;
    int warp_lattice = 4;
  };

  // Ideal model: linear LUTs, delta kernels, unit pupils, identity warps, the
  // given sources (single source on axis).
  static CalibModel identity(const SystemConfig& config, Shape slm_shape, const SourceArray& multisource,
                             double wavelength, const Options& options);
  static CalibModel identity(const SystemConfig& config, Shape slm_shape, const SourceArray& multisource,
                             double wavelength);

  Shape sim_shape() const { return {slm_shape.rows * upsample, slm_shape.cols * upsample}; }
  double sim_pitch() const { return pitch / upsample; }
  Vec2 bin() const;  // rad/m per frequency bin along x and y
  SourceArray source_array(int config_id) const;
  std::vector<std::size_t> source_indices(int config_id) const;
  void validate() const;
};

struct CaptureRecord {
  std::vector<double> slm1;  // digital, SLM resolution
  std::vector<double> slm2;
  int config_id = 0;
  double z = 0.0;
  double blur_sigma = 0.0;   // pixels of Gaussian blur applied to the patterns
  IntensityImage capture;
};

struct CaptureDataset {
  Shape slm_shape{};
  double pitch = 8e-6;
  std::vector<CaptureRecord> records;

  void validate() const;
};

// Digital patterns -> intensity at z through the full model, including the
// camera warp. SLM resolution.
IntensityImage calibrated_forward(std::span<const double> slm1, std::span<const double> slm2,
                                  const CalibModel& model, int config_id, double z);

// Which parameter groups receive gradients and updates.
enum ParamGroup : unsigned {
  kLut = 1u << 0,
  kFringing = 1u << 1,
  kPupil = 1u << 2,
  kWarp = 1u << 3,
  kCamera = 1u << 4,
  kSourcePosition = 1u << 5,
  kSourceIntensity = 1u << 6,
  kAllParams = 0x7fu,
};

struct CalibGradient {
  std::vector<double> lut[2];
  std::vector<double> fringing[2];
  std::vector<std::complex<double>> pupil[2];  // d/dRe + j d/dIm per coarse sample
  std::vector<Vec2> warp;
  std::vector<Vec2> camera;
  std::vector<Vec2> source_position;  // per frequency bin
  std::vector<double> source_intensity;
  std::vector<double> slm1;  // dL/d digital, per record set when requested
  std::vector<double> slm2;
};

// Loss = (1/R) sum_r ||model(r) - capture_r||^2 and its gradient. `patch`
// selects the stochastic tile mode for every propagation.
struct CalibEvaluation {
  double loss = 0.0;
  CalibGradient gradient;
};

CalibEvaluation evaluate_calibration(const CalibModel& model, const std::vector<CaptureRecord>& records,
                                     unsigned groups, std::optional<int> patch = std::nullopt);

// Gradient of an arbitrary intensity loss: dL/dI for each record's output is
// given, and gradients flow to the model parameters in `groups` and, when
// `pattern_gradient` is set, to the digital patterns of a single record.
CalibGradient backpropagate(const CalibModel& model, std::span<const double> slm1, std::span<const double> slm2,
                            int config_id, double z, std::span<const double> d_intensity, unsigned groups,
                            bool pattern_gradient);

enum class Perturbation { lut, fringing, pupil, warp, source, standard };

const char* perturbation_name(Perturbation p);
Perturbation parse_perturbation(const std::string& name);

// In-repo oracle presets, each a fixed deterministic deviation from `base`:
//   lut      phase += 0.4 sin(2 pi d / 256) + 0.15 cos(6 pi d / 256)
//   fringing 5 x 5 kernel mixing 16% of each pixel into its neighbours
//   pupil    0.6 rad quadratic plus 0.3 rad coma-like phase on the image leg
//   warp     0.4 px translation plus a 0.3 px quadratic bend
//   source   +0.5 bin offsets and +-10% intensity changes on the
//            multisource entries (entry 0 is the on-axis reference)
//   standard all of the above
CalibModel perturbed(const CalibModel& base, Perturbation p);

struct DatasetSpec {
  int records_per_config = 24;
  std::vector<double> blur_sigmas{4.0, 2.0, 1.0, 0.0};
  std::vector<double> planes;  // capture distances, cycled over records
  std::vector<int> configs{0, 1};
  double noise_std = 0.0;      // Gaussian sensor noise, intensity units
  std::uint64_t seed = 11;
};

// Uniform random digital patterns, Gaussian blurred by the cycled sigma and
// restretched to their original spread around 127.5, rendered by the oracle.
CaptureDataset make_synthetic_dataset(const CalibModel& oracle, const DatasetSpec& spec);

// Gaussian blur with reflected borders; sigma 0 returns the input.
std::vector<double> gaussian_blur(std::span<const double> image, Shape shape, double sigma);

struct FitSpec {
  int iterations[4] = {150, 300, 200, 150};
  double lr_lut = 0.02;
  double lr_fringing = 0.005;
  double lr_pupil = 0.01;
  double lr_warp = 0.02;
  double lr_source_position = 0.02;
  double lr_source_intensity = 0.01;
  double decay = 0.05;  // learning rate at the end of a stage relative to its start
  bool patch_mode = false;
  std::uint64_t seed = 5;
};

struct FitResult {
  CalibModel model;
  std::vector<std::vector<double>> stage_loss;  // per stage, one entry per iteration
};

// Four stages: (1) warps on blurred single-source records, (2) LUT,
// fringing and pupils on all single-source records, (3) source positions and
// intensities on multisource records, (4) everything on all records. Stages
// without matching records are skipped.
FitResult fit_model(const CaptureDataset& dataset, const CalibModel& init, const FitSpec& spec);

// Recovery measures used by tests and the calib-recovery experiment.
double lut_rms_error(const CalibModel& a, const CalibModel& b, int slm, const CaptureDataset& dataset);
double source_position_error(const CalibModel& a, const CalibModel& b);  // max over sources, bins
double warp_rms_error(const CalibModel& a, const CalibModel& b);         // dense displacement RMS, SLM pixels
double fringing_error(const CalibModel& a, const CalibModel& b, int slm);  // kernel RMS
double pupil_phase_error(const CalibModel& a, const CalibModel& b, int leg);  // rad RMS, mean removed

// Optimizes real digital patterns for a target through `model`. With a
// camera the captured intensity replaces the model output in the loss at a
// plane that cycles through the target; `cycle_planes` without a camera runs
// the same schedule on the model alone.
struct CitlSpec {
  int iterations = 100;
  AdamSettings adam{2.0, 0.9, 0.999, 1e-8};  // step in digital levels
  bool cycle_planes = true;
};

struct DigitalPatterns {
  std::vector<double> slm1;
  std::vector<double> slm2;
};

struct CitlResult {
  DigitalPatterns patterns;
  std::vector<double> loss;
  std::vector<int> schedule;  // plane index used at each iteration
};

using CameraFn = std::function<IntensityImage(const DigitalPatterns&, double z)>;

CitlResult optimize_digital(const CalibModel& model, int config_id, const FocalStackTarget& target,
                            DigitalPatterns init, const CitlSpec& spec, const CameraFn& camera = {});

// Oracle-as-camera seam.
CameraFn oracle_camera(const CalibModel& oracle, int config_id);

DigitalPatterns random_digital(Shape shape, std::uint64_t seed);

// Stack rendered by a model for fixed patterns, least-squares scaled to the
// target.
std::vector<IntensityImage> render_digital(const CalibModel& model, int config_id, const DigitalPatterns& patterns,
                                           const FocalStackTarget& target);

void write_calib_model(const std::filesystem::path& directory, const CalibModel& model);
CalibModel read_calib_model(const std::filesystem::path& directory);
void write_dataset(const std::filesystem::path& directory, const CaptureDataset& dataset);
CaptureDataset read_dataset(const std::filesystem::path& directory);

}  // namespace msholo
