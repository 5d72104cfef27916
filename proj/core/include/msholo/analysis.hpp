#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "msholo/config.hpp"
#include "msholo/metrics.hpp"
#include "msholo/optimizer.hpp"

namespace msholo {

using LogFn = std::function<void(const std::string&)>;

// One optimized hologram condition: the source array, the modulators and the
// initialization that distinguish it.
struct Condition {
  std::string label;
  SourceArray sources = SourceArray::on_axis();
  Modulation first = Modulation::complex;
  std::optional<Modulation> second;
  InitKind init = InitKind::uniform_random;
  int frames = 1;  // > 1 selects phase-only temporal multiplexing
};

struct ConditionResult {
  std::string label;
  OptimizeResult optimized;
  MetricReport metrics;
};

// Optimizes one condition against `target` with cfg.optimize, seeded from
// `seed`.
ConditionResult run_condition(const AppConfig& cfg, const Condition& condition, const FocalStackTarget& target,
                              std::uint64_t seed);

// The four baseline conditions: single source smooth phase, single source
// random phase, multisource with one complex SLM, multisource with two SLMs.
// Single-SLM conditions use a complex modulator, matching the two-SLM pair in
// degrees of freedom.
std::vector<Condition> single_vs_multi_conditions(const AppConfig& cfg);

// Michelson contrast of an optimized hologram of the Nyquist grating,
// measured at the focus plane and averaged over cfg.sweep.grating_foci focus
// placements spread over the plane range, inset 7% from either end.
double grating_contrast(const AppConfig& cfg, const SourceArray& sources, std::uint64_t seed);

struct SpacingRow {
  double spacing = 0.0;  // rad/m
  double psnr = 0.0;
  double ssim = 0.0;
  double contrast = 0.0;
  int in_region = 0;
};

struct CountRow {
  int count = 0;
  double psnr = 0.0;
  double ssim = 0.0;
  double contrast = 0.0;
};

// Two-SLM optimization of the configured grid at each spacing of
// cfg.sweep.spacings. Points run in parallel when cfg.threads > 1, each with a
// seed derived from cfg.seed and its index.
std::vector<SpacingRow> run_spacing_sweep(const AppConfig& cfg, const LogFn& log = {});
// Square grids of cfg.sweep.counts sources at cfg.sweep.count_spacing.
std::vector<CountRow> run_count_sweep(const AppConfig& cfg, const LogFn& log = {});

std::string spacing_csv(const std::vector<SpacingRow>& rows);
std::string count_csv(const std::vector<CountRow>& rows);

std::uint64_t derived_seed(std::uint64_t master, std::uint64_t index);

// Per-source fields at plane z for every frame, with their incoherent
// weights (source weight over frame count).
struct WeightedFields {
  std::vector<ComplexField2D> fields;
  std::vector<double> weights;
};
WeightedFields fields_at(const std::vector<FramePatterns>& frames, const SourceArray& sources,
                         const SystemConfig& config, double z);

// PSNR seen through each pupil for a single-plane target at z0
// (cfg.system.eyebox_plane). Each pupil view gets its own least-squares
// exposure scale.
std::vector<double> pupil_psnrs(const std::vector<FramePatterns>& frames, const SourceArray& sources,
                                const SystemConfig& config, const FocalStackTarget& target,
                                const std::vector<Pupil>& pupils);

struct CitlComparison {
  double model_only_psnr = 0.0;  // oracle-rendered
  double citl_psnr = 0.0;        // oracle-rendered
  CitlResult model_only;
  CitlResult citl;
};

// Both runs start from the same random digital patterns and use
// 2 * spec.iterations steps in total: the model-only run optimizes through
// `fitted` throughout; the CiTL run spends its second half with the oracle as
// the camera. Multisource configuration.
CitlComparison compare_citl(const CalibModel& fitted, const CalibModel& oracle, const FocalStackTarget& target,
                            const CitlSpec& spec, std::uint64_t seed);

enum class ExperimentKind {
  spacing_sweep,
  count_sweep,
  single_vs_multi,
  tm_compare,
  pupil_demo,
  eyebox_demo,
  calib_recovery,
};

const char* experiment_name(ExperimentKind kind);
ExperimentKind parse_experiment(const std::string& name);

struct ExperimentResult {
  std::filesystem::path directory;
  std::vector<std::pair<std::string, double>> values;  // headline numbers, in output order

  std::optional<double> value(const std::string& key) const;
};

// Pupil positions used for pupil-sampled evaluation: the center, then four
// edge positions at +-edge along x and y (m).
std::vector<Pupil> evaluation_pupils(double radius, double edge);

// Writes into `directory`: config.json, manifest.txt (tool version, config
// hash, seed, experiment), metrics.csv and per-condition PNGs.
ExperimentResult run_experiment(ExperimentKind kind, const AppConfig& cfg, const std::filesystem::path& directory,
                                const LogFn& log = {});

// Version string recorded in manifests.
const char* library_version();

}  // namespace msholo
