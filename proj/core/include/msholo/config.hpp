#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "msholo/calibration.hpp"
#include "msholo/forward.hpp"
#include "msholo/optimizer.hpp"
#include "msholo/sources.hpp"
#include "msholo/targets.hpp"

namespace msholo {

// Source array as written in a config: either a regular grid or explicit
// tilts (rad/m) with optional intensities.
struct SourceSpec {
  GridSpec grid{4, 4, 120e3, {}};
  std::vector<Vec2> tilts;
  std::vector<double> intensities;

  SourceArray build() const;
};

// Empty path selects the built-in procedural scene.
struct SceneSpec {
  std::filesystem::path path;
  double blur_rate = 4.0;  // pixels of blur radius per mm of defocus
  std::uint64_t seed = 7;
};

struct SweepSpec {
  std::vector<double> spacings{0.0, 10e3, 25e3, 50e3, 75e3, 100e3, 150e3};  // rad/m
  std::vector<int> counts{1, 4, 9, 16, 25, 36, 64, 100};
  double count_spacing = 120e3;  // rad/m
  int grating_period = 2;        // pixels; 2 is the SLM Nyquist grating
  int contrast_window = 100;     // side of the centered Michelson region, pixels
  int grating_foci = 3;          // focus placements averaged per contrast value
};

// Settings of the named experiments.
struct ExperimentSettings {
  int tm_frames = 6;
  int tm_planes = 15;          // planes over the configured range for tm-compare
  double pupil_edge = 0.5e-3;  // offset of the four edge evaluation pupils, m
};

struct CalibrationSettings {
  int slm_size = 32;
  GridSpec grid{2, 2, 75e3, {}};
  CalibModel::Options model;
  DatasetSpec dataset;
  FitSpec fit;
  CitlSpec citl;
  Perturbation perturbation = Perturbation::standard;
};

struct AppConfig {
  SystemConfig system = SystemConfig::desk_default();
  Shape slm{128, 128};
  SourceSpec sources;
  SceneSpec scene;
  OptimizeSpec optimize;
  Modulation first = Modulation::phase_only;
  std::optional<Modulation> second = Modulation::amplitude_only;
  SweepSpec sweep;
  ExperimentSettings experiments;
  CalibrationSettings calibration;
  std::uint64_t seed = 1;
  int threads = 1;
  std::filesystem::path base_dir;  // relative paths resolve against this

  void validate() const;
};

// JSON text -> config. Keys missing from the text keep their defaults;
// unknown keys are errors. Each override is "dotted.key=value" with a JSON
// value (bare words are taken as strings). Throws ConfigError.
AppConfig parse_config(const std::string& json_text, const std::filesystem::path& base_dir,
                       const std::vector<std::string>& overrides = {});
// Missing or unreadable files raise IoError.
AppConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});
AppConfig default_config(const std::vector<std::string>& overrides = {});

// Canonical JSON of every setting (stable key order, full precision).
std::string config_to_json(const AppConfig& config);
// FNV-1a 64 of the canonical JSON, hex.
std::string config_hash(const AppConfig& config);

// Loaded scene, or the built-in one. A missing scene file is a ConfigError.
LayeredScene build_scene(const AppConfig& config);
FocalStackTarget build_target(const AppConfig& config);

}  // namespace msholo
