#include "msholo/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "msholo/error.hpp"
#include "msholo/parallel.hpp"
#include "msholo/png_io.hpp"

namespace msholo {

namespace {

void say(const LogFn& log, const std::string& text) {
  if (log) log(text);
}

std::string fmt(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

// Spans the configured plane range with `count` focus positions.
std::vector<double> focus_positions(const std::vector<double>& planes, int count) {
  const auto [lo, hi] = std::minmax_element(planes.begin(), planes.end());
  if (count == 1) return {0.5 * (*lo + *hi)};
  // Inset 7% from each end: 15.7, 20 and 24.3 mm over a 15-25 mm volume.
  const double inset = 0.07 * (*hi - *lo);
  return linspace_planes(*lo + inset, *hi - inset, count);
}

std::vector<double> with_plane(std::vector<double> planes, double z) {
  for (double p : planes) {
    if (std::abs(p - z) < 1e-12) return planes;
  }
  planes.push_back(z);
  std::sort(planes.begin(), planes.end());
  return planes;
}

IntensityImage normalized(const IntensityImage& image, double peak) {
  std::vector<double> v(image.data().begin(), image.data().end());
  for (double& x : v) x = std::clamp(x / peak, 0.0, 1.0);
  return IntensityImage(image.shape(), image.pitch(), std::move(v));
}

std::string slug(const std::string& label) {
  std::string s = label;
  for (char& c : s) {
    if (!std::isalnum(static_cast<unsigned char>(c))) c = '_';
  }
  return s;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

void write_stack_pngs(const std::filesystem::path& dir, const std::string& label,
                      const std::vector<IntensityImage>& images, double peak) {
  for (std::size_t k = 0; k < images.size(); ++k) {
    write_png(dir / (slug(label) + "_plane" + std::to_string(k) + ".png"), normalized(images[k], peak), 16);
  }
}

double target_peak(const FocalStackTarget& t) {
  double peak = 0.0;
  for (const auto& im : t.images) peak = std::max(peak, im.max());
  return peak;
}

void write_common(const std::filesystem::path& dir, ExperimentKind kind, const AppConfig& cfg) {
  std::filesystem::create_directories(dir);
  write_text(dir / "config.json", config_to_json(cfg) + "\n");
  std::ostringstream m;
  m << "tool=msholo\n"
    << "version=" << library_version() << "\n"
    << "experiment=" << experiment_name(kind) << "\n"
    << "config_hash=" << config_hash(cfg) << "\n"
    << "seed=" << cfg.seed << "\n"
    << "threads=" << cfg.threads << "\n"
    << "precision=" << precision_name(cfg.optimize.precision) << "\n"
    << "rerun=msholo experiment " << experiment_name(kind) << " --config config.json\n";
  write_text(dir / "manifest.txt", m.str());
}

}  // namespace

const char* library_version() { return "0.1.0"; }

std::uint64_t derived_seed(std::uint64_t master, std::uint64_t index) {
  // splitmix64 step over the pair.
  std::uint64_t z = master + 0x9e3779b97f4a7c15ull * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

ConditionResult run_condition(const AppConfig& cfg, const Condition& condition, const FocalStackTarget& target,
                              std::uint64_t seed) {
  OptimizeSpec spec = cfg.optimize;
  spec.seed = seed;
  spec.init = condition.init;
  spec.frames = condition.frames;
  spec.loss_planes.clear();
  spec.plane_weights.clear();
  ConditionResult out;
  out.label = condition.label;
  if (condition.frames > 1) {
    std::mt19937_64 rng(seed);
    std::vector<SlmPattern> frames;
    for (int f = 0; f < condition.frames; ++f) {
      frames.push_back(initial_pattern(Modulation::phase_only, cfg.slm, cfg.system.pitch, condition.init, rng));
    }
    out.optimized = optimize_temporal_multiplex(std::move(frames), cfg.system, cfg.system.wavelength(), target, spec);
  } else {
    auto init = initial_frames(1, condition.first, condition.second, cfg.slm, cfg.system.pitch, condition.init, seed);
    out.optimized = optimize(init[0].first, init[0].second, condition.sources, cfg.system, cfg.system.wavelength(),
                             target, spec);
  }
  out.metrics = evaluate_stack(out.optimized.predicted, target);
  return out;
}

std::vector<Condition> single_vs_multi_conditions(const AppConfig& cfg) {
  const SourceArray multi = cfg.sources.build();
  return {
      {"single smooth", SourceArray::on_axis(), Modulation::complex, std::nullopt, InitKind::constant, 1},
      {"single random", SourceArray::on_axis(), Modulation::complex, std::nullopt, InitKind::uniform_random, 1},
      {"multi 1slm", multi, Modulation::complex, std::nullopt, InitKind::uniform_random, 1},
      {"multi 2slm", multi, cfg.first, cfg.second ? cfg.second : std::optional<Modulation>(Modulation::amplitude_only),
       InitKind::uniform_random, 1},
  };
}

double grating_contrast(const AppConfig& cfg, const SourceArray& sources, std::uint64_t seed) {
  const auto foci = focus_positions(cfg.system.planes, cfg.sweep.grating_foci);
  const int window = std::min({cfg.sweep.contrast_window, cfg.slm.rows, cfg.slm.cols});
  const int cols = window - window % cfg.sweep.grating_period;
  const Region region = centered_region(cfg.slm, window, cols);
  double sum = 0.0;
  for (std::size_t i = 0; i < foci.size(); ++i) {
    AppConfig local = cfg;
    local.system.planes = with_plane(cfg.system.planes, foci[i]);
    const FocalStackTarget target = make_grating_target(cfg.slm, cfg.system.pitch, cfg.sweep.grating_period,
                                                        local.system.planes, foci[i], cfg.scene.blur_rate);
    Condition cond{"grating", sources, cfg.first, cfg.second, InitKind::uniform_random, 1};
    const ConditionResult r = run_condition(local, cond, target, derived_seed(seed, i));
    const auto at = std::find_if(target.planes.begin(), target.planes.end(),
                                 [&](double z) { return std::abs(z - foci[i]) < 1e-12; });
    // The region starts on a bright column, so each period is one bright and
    // one dark stripe.
    Region aligned = region;
    aligned.col -= aligned.col % cfg.sweep.grating_period;
    sum += michelson_contrast(r.optimized.predicted[static_cast<std::size_t>(at - target.planes.begin())], aligned,
                              cfg.sweep.grating_period);
  }
  return sum / static_cast<double>(foci.size());
}

std::vector<SpacingRow> run_spacing_sweep(const AppConfig& cfg, const LogFn& log) {
  const FocalStackTarget target = build_target(cfg);
  const double threshold = memory_effect_spacing(cfg.system.pitch, cfg.system.wavelength(), cfg.system.gap);
  std::vector<SpacingRow> rows(cfg.sweep.spacings.size());
  auto point = [&](std::size_t i) {
    GridSpec g = cfg.sources.grid;
    g.spacing = cfg.sweep.spacings[i];
    const SourceArray src = make_grid(g);
    const std::uint64_t seed = derived_seed(cfg.seed, i);
    Condition cond{"spacing", src, cfg.first, cfg.second, InitKind::uniform_random, 1};
    const ConditionResult r = run_condition(cfg, cond, target, seed);
    SpacingRow& row = rows[i];
    row.spacing = g.spacing;
    row.psnr = r.metrics.psnr;
    row.ssim = r.metrics.ssim;
    row.contrast = grating_contrast(cfg, src, derived_seed(seed, 1000));
    row.in_region = sources_in_memory_region(src, threshold);
  };
  if (cfg.threads > 1) {
    parallel_for(rows.size(), point);
  } else {
    for (std::size_t i = 0; i < rows.size(); ++i) {
      point(i);
      say(log, "spacing " + fmt(rows[i].spacing / 1e3) + " rad/mm: psnr " + fmt(rows[i].psnr) + " dB, contrast " +
                   fmt(rows[i].contrast));
    }
  }
  return rows;
}

std::vector<CountRow> run_count_sweep(const AppConfig& cfg, const LogFn& log) {
  const FocalStackTarget target = build_target(cfg);
  std::vector<CountRow> rows(cfg.sweep.counts.size());
  auto point = [&](std::size_t i) {
    const int n = cfg.sweep.counts[i];
    const int side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(n))));
    const SourceArray src = make_grid({side, side, cfg.sweep.count_spacing, cfg.sources.grid.offset});
    const std::uint64_t seed = derived_seed(cfg.seed, i);
    Condition cond{"count", src, cfg.first, cfg.second, InitKind::uniform_random, 1};
    const ConditionResult r = run_condition(cfg, cond, target, seed);
    rows[i] = {n, r.metrics.psnr, r.metrics.ssim, grating_contrast(cfg, src, derived_seed(seed, 1000))};
  };
  if (cfg.threads > 1) {
    parallel_for(rows.size(), point);
  } else {
    for (std::size_t i = 0; i < rows.size(); ++i) {
      point(i);
      say(log, "count " + std::to_string(rows[i].count) + ": psnr " + fmt(rows[i].psnr) + " dB, contrast " +
                   fmt(rows[i].contrast));
    }
  }
  return rows;
}

std::string spacing_csv(const std::vector<SpacingRow>& rows) {
  std::ostringstream os;
  os << "spacing_rad_per_mm,psnr_db,ssim,contrast_nyquist,sources_in_region\n";
  for (const auto& r : rows) {
    os << fmt(r.spacing / 1e3) << ',' << fmt(r.psnr) << ',' << fmt(r.ssim) << ',' << fmt(r.contrast) << ','
       << r.in_region << '\n';
  }
  return os.str();
}

std::string count_csv(const std::vector<CountRow>& rows) {
  std::ostringstream os;
  os << "sources,psnr_db,ssim,contrast_nyquist\n";
  for (const auto& r : rows) {
    os << r.count << ',' << fmt(r.psnr) << ',' << fmt(r.ssim) << ',' << fmt(r.contrast) << '\n';
  }
  return os.str();
}

WeightedFields fields_at(const std::vector<FramePatterns>& frames, const SourceArray& sources,
                         const SystemConfig& config, double z) {
  if (frames.empty()) throw DomainError("no frames to propagate");
  const double wl = config.wavelength();
  const double per_frame = 1.0 / static_cast<double>(frames.size());
  WeightedFields out;
  for (const auto& f : frames) {
    if (f.second) {
      const auto before = fields_at_second_slm(f.first, sources, config, wl);
      for (std::size_t i = 0; i < sources.size(); ++i) {
        out.fields.push_back(forward_single(*f.second, before[i], z, config).field);
        out.weights.push_back(per_frame * sources.intensities()[i]);
      }
    } else {
      const Shape sim{f.first.shape().rows * config.upsample, f.first.shape().cols * config.upsample};
      for (std::size_t i = 0; i < sources.size(); ++i) {
        const auto illum = plane_wave<double>(sources.tilts()[i], sim, config.sim_pitch(), wl);
        out.fields.push_back(forward_single(f.first, illum, z, config).field);
        out.weights.push_back(per_frame * sources.intensities()[i]);
      }
    }
  }
  return out;
}

std::vector<Pupil> evaluation_pupils(double radius, double edge) {
  return {{{0.0, 0.0}, radius}, {{edge, 0.0}, radius}, {{-edge, 0.0}, radius}, {{0.0, edge}, radius},
          {{0.0, -edge}, radius}};
}

std::vector<double> pupil_psnrs(const std::vector<FramePatterns>& frames, const SourceArray& sources,
                                const SystemConfig& config, const FocalStackTarget& target,
                                const std::vector<Pupil>& pupils) {
  target.validate();
  if (target.size() != 1) throw DomainError("pupil evaluation needs a single-plane target");
  const WeightedFields wf = fields_at(frames, sources, config, target.planes[0]);
  const IntensityImage& ref = target.images[0];
  std::vector<double> out;
  for (const Pupil& p : pupils) {
    std::vector<double> acc;
    for (std::size_t i = 0; i < wf.fields.size(); ++i) {
      const IntensityImage img = pupil_sampled_forward(wf.fields[i], p, config.eyepiece_focal);
      if (acc.empty()) acc.assign(img.data().size(), 0.0);
      for (std::size_t q = 0; q < acc.size(); ++q) acc[q] += wf.weights[i] * img.data()[q];
    }
    const Shape sim = wf.fields.front().shape();
    const IntensityImage full(sim, wf.fields.front().pitch(), std::move(acc));
    const IntensityImage down = downsample(full, config.upsample);
    const std::vector<IntensityImage> shown{down};
    const double s = fit_scale(shown, target.images);
    out.push_back(psnr(scaled(shown, s)[0], ref, ref.max()));
  }
  return out;
}

CitlComparison compare_citl(const CalibModel& fitted, const CalibModel& oracle, const FocalStackTarget& target,
                            const CitlSpec& spec, std::uint64_t seed) {
  const DigitalPatterns init = random_digital(fitted.slm_shape, seed);
  CitlComparison out;
  CitlSpec twice = spec;
  twice.iterations = 2 * spec.iterations;
  out.model_only = optimize_digital(fitted, 1, target, init, twice);
  const CitlResult warm = optimize_digital(fitted, 1, target, init, spec);
  out.citl = optimize_digital(fitted, 1, target, warm.patterns, spec, oracle_camera(oracle, 1));
  auto oracle_psnr = [&](const DigitalPatterns& p) {
    return stack_psnr(render_digital(oracle, 1, p, target), target.images);
  };
  out.model_only_psnr = oracle_psnr(out.model_only.patterns);
  out.citl_psnr = oracle_psnr(out.citl.patterns);
  return out;
}

const char* experiment_name(ExperimentKind kind) {
  switch (kind) {
    case ExperimentKind::spacing_sweep: return "spacing-sweep";
    case ExperimentKind::count_sweep: return "count-sweep";
    case ExperimentKind::single_vs_multi: return "single-vs-multi";
    case ExperimentKind::tm_compare: return "tm-compare";
    case ExperimentKind::pupil_demo: return "pupil-demo";
    case ExperimentKind::eyebox_demo: return "eyebox-demo";
    case ExperimentKind::calib_recovery: return "calib-recovery";
  }
  return "?";
}

ExperimentKind parse_experiment(const std::string& name) {
  for (ExperimentKind k : {ExperimentKind::spacing_sweep, ExperimentKind::count_sweep, ExperimentKind::single_vs_multi,
                           ExperimentKind::tm_compare, ExperimentKind::pupil_demo, ExperimentKind::eyebox_demo,
                           ExperimentKind::calib_recovery}) {
    if (name == experiment_name(k)) return k;
  }
  throw ConfigError("unknown experiment '" + name + "'");
}

std::optional<double> ExperimentResult::value(const std::string& key) const {
  for (const auto& [k, v] : values) {
    if (k == key) return v;
  }
  return std::nullopt;
}

namespace {

void record(ExperimentResult& res, std::ostringstream& csv, const ConditionResult& r) {
  csv << r.metrics.csv_rows(r.label);
  res.values.emplace_back(r.label + ".psnr", r.metrics.psnr);
  res.values.emplace_back(r.label + ".ssim", r.metrics.ssim);
}

ExperimentResult stack_experiment(const AppConfig& cfg, const std::vector<Condition>& conditions,
                                  const FocalStackTarget& target, const std::filesystem::path& dir,
                                  const LogFn& log) {
  ExperimentResult res{dir, {}};
  std::ostringstream csv;
  csv << MetricReport::csv_header() << '\n';
  const double peak = target_peak(target);
  write_stack_pngs(dir, "target", target.images, peak);
  for (std::size_t i = 0; i < conditions.size(); ++i) {
    const ConditionResult r = run_condition(cfg, conditions[i], target, derived_seed(cfg.seed, i));
    say(log, r.label + ": " + r.metrics.summary());
    record(res, csv, r);
    write_stack_pngs(dir, r.label, r.optimized.predicted, peak);
  }
  write_text(dir / "metrics.csv", csv.str());
  return res;
}

ExperimentResult eyebox_experiment(const AppConfig& cfg, const std::filesystem::path& dir, const LogFn& log) {
  ExperimentResult res{dir, {}};
  const FocalStackTarget target = build_target(cfg);
  std::ostringstream csv;
  csv << "label,peak_to_mean,central_fraction,energy,psnr_db\n";
  const auto conditions = single_vs_multi_conditions(cfg);
  for (std::size_t i = 0; i < conditions.size(); ++i) {
    const ConditionResult r = run_condition(cfg, conditions[i], target, derived_seed(cfg.seed, i));
    const WeightedFields wf = fields_at(r.optimized.frames, conditions[i].sources, cfg.system, cfg.system.eyebox_plane);
    const EyeboxReport eb = eyebox_report(wf.fields, wf.weights, cfg.system.eyepiece_focal);
    write_png(dir / (slug(r.label) + "_eyebox.png"), log_scale(eb.intensity), 8);
    csv << r.label << ',' << fmt(eb.peak_to_mean) << ',' << fmt(eb.central_fraction) << ',' << fmt(eb.energy) << ','
        << fmt(r.metrics.psnr) << '\n';
    res.values.emplace_back(r.label + ".peak_to_mean", eb.peak_to_mean);
    res.values.emplace_back(r.label + ".central_fraction", eb.central_fraction);
    say(log, r.label + ": peak/mean " + fmt(eb.peak_to_mean) + ", central fraction " + fmt(eb.central_fraction));
  }
  write_text(dir / "metrics.csv", csv.str());
  return res;
}

ExperimentResult pupil_experiment(const AppConfig& cfg, const std::filesystem::path& dir, const LogFn& log) {
  ExperimentResult res{dir, {}};
  const double z0 = cfg.system.eyebox_plane;
  AppConfig local = cfg;
  local.system.planes = {z0};
  local.optimize.pupil.enabled = true;
  // The scene keeps the depth range of the configured planes.
  const FocalStackTarget target = render_focal_stack(build_scene(cfg), local.system.planes, cfg.scene.blur_rate);
  const auto pupils = evaluation_pupils(cfg.optimize.pupil.radius, cfg.experiments.pupil_edge);
  const SourceArray multi = cfg.sources.build();
  const std::vector<Condition> conditions{
      {"smooth", SourceArray::on_axis(), Modulation::complex, std::nullopt, InitKind::constant, 1},
      {"random", SourceArray::on_axis(), Modulation::complex, std::nullopt, InitKind::uniform_random, 1},
      {"multisource", multi, cfg.first, cfg.second ? cfg.second : std::optional<Modulation>(Modulation::amplitude_only),
       InitKind::uniform_random, 1},
  };
  std::ostringstream csv;
  csv << "label,pupil,center_x_mm,center_y_mm,psnr_db\n";
  write_png(dir / "target.png", normalized(target.images[0], target.images[0].max()), 16);
  for (std::size_t i = 0; i < conditions.size(); ++i) {
    const ConditionResult r = run_condition(local, conditions[i], target, derived_seed(cfg.seed, i));
    const auto values = pupil_psnrs(r.optimized.frames, conditions[i].sources, local.system, target, pupils);
    double worst = values[0];
    double worst_edge = values[1];
    for (std::size_t p = 0; p < pupils.size(); ++p) {
      csv << r.label << ',' << p << ',' << fmt(pupils[p].center.x * 1e3) << ',' << fmt(pupils[p].center.y * 1e3) << ','
          << fmt(values[p]) << '\n';
      worst = std::min(worst, values[p]);
      if (p > 0) worst_edge = std::min(worst_edge, values[p]);
    }
    res.values.emplace_back(r.label + ".center", values[0]);
    res.values.emplace_back(r.label + ".edge", worst_edge);
    res.values.emplace_back(r.label + ".worst", worst);
    for (std::size_t p : {std::size_t{0}, std::size_t{1}}) {
      const WeightedFields wf = fields_at(r.optimized.frames, conditions[i].sources, local.system, z0);
      std::vector<double> acc(wf.fields.front().size(), 0.0);
      for (std::size_t k = 0; k < wf.fields.size(); ++k) {
        const IntensityImage img = pupil_sampled_forward(wf.fields[k], pupils[p], cfg.system.eyepiece_focal);
        for (std::size_t q = 0; q < acc.size(); ++q) acc[q] += wf.weights[k] * img.data()[q];
      }
      const IntensityImage view =
          downsample(IntensityImage(wf.fields.front().shape(), wf.fields.front().pitch(), std::move(acc)),
                     cfg.system.upsample);
      const double s = fit_scale({view}, target.images);
      write_png(dir / (slug(r.label) + (p == 0 ? "_center.png" : "_edge.png")),
                normalized(scaled({view}, s)[0], target.images[0].max()), 16);
    }
    say(log, r.label + ": center " + fmt(values[0]) + " dB, worst edge " + fmt(worst_edge) + " dB");
  }
  write_text(dir / "metrics.csv", csv.str());
  return res;
}

ExperimentResult calib_experiment(const AppConfig& cfg, const std::filesystem::path& dir, const LogFn& log) {
  ExperimentResult res{dir, {}};
  const CalibrationSettings& k = cfg.calibration;
  const Shape shape{k.slm_size, k.slm_size};
  const CalibModel ideal =
      CalibModel::identity(cfg.system, shape, make_grid(k.grid), cfg.system.wavelength(), k.model);
  const CalibModel oracle = perturbed(ideal, k.perturbation);
  DatasetSpec ds = k.dataset;
  if (ds.planes.empty()) ds.planes = cfg.system.planes;
  const CaptureDataset data = make_synthetic_dataset(oracle, ds);
  say(log, "dataset: " + std::to_string(data.records.size()) + " records");
  const FitResult fit = fit_model(data, ideal, k.fit);
  std::ostringstream csv;
  csv << "quantity,initial,fitted\n";
  auto add = [&](const std::string& name, double before, double after) {
    csv << name << ',' << fmt(before) << ',' << fmt(after) << '\n';
    res.values.emplace_back(name, after);
    say(log, name + ": " + fmt(before) + " -> " + fmt(after));
  };
  add("lut_rms_rad.slm1", lut_rms_error(ideal, oracle, 0, data), lut_rms_error(fit.model, oracle, 0, data));
  add("lut_rms_rad.slm2", lut_rms_error(ideal, oracle, 1, data), lut_rms_error(fit.model, oracle, 1, data));
  add("source_position_bins", source_position_error(ideal, oracle), source_position_error(fit.model, oracle));
  add("warp_rms_px", warp_rms_error(ideal, oracle), warp_rms_error(fit.model, oracle));
  add("fringing_rms.slm1", fringing_error(ideal, oracle, 0), fringing_error(fit.model, oracle, 0));
  add("pupil_phase_rms_rad.image", pupil_phase_error(ideal, oracle, 1), pupil_phase_error(fit.model, oracle, 1));
  write_text(dir / "metrics.csv", csv.str());
  std::ostringstream loss;
  loss << "stage,iteration,loss\n";
  for (std::size_t s = 0; s < fit.stage_loss.size(); ++s) {
    for (std::size_t i = 0; i < fit.stage_loss[s].size(); ++i) loss << s + 1 << ',' << i << ',' << fmt(fit.stage_loss[s][i]) << '\n';
  }
  write_text(dir / "fit_history.csv", loss.str());
  write_calib_model(dir / "fitted_model", fit.model);
  write_calib_model(dir / "oracle_model", oracle);

  AppConfig small = cfg;
  small.slm = shape;
  const FocalStackTarget target = build_target(small);
  const CitlComparison cmp = compare_citl(fit.model, oracle, target, k.citl, cfg.seed);
  std::ostringstream citl;
  citl << "method,oracle_psnr_db\nmodel_only," << fmt(cmp.model_only_psnr) << "\ncitl," << fmt(cmp.citl_psnr) << '\n';
  write_text(dir / "citl.csv", citl.str());
  res.values.emplace_back("model_only_psnr", cmp.model_only_psnr);
  res.values.emplace_back("citl_psnr", cmp.citl_psnr);
  say(log, "oracle PSNR: model only " + fmt(cmp.model_only_psnr) + " dB, citl " + fmt(cmp.citl_psnr) + " dB");
  return res;
}

}  // namespace

ExperimentResult run_experiment(ExperimentKind kind, const AppConfig& cfg, const std::filesystem::path& dir,
                                const LogFn& log) {
  cfg.validate();
  write_common(dir, kind, cfg);
  switch (kind) {
    case ExperimentKind::spacing_sweep: {
      const auto rows = run_spacing_sweep(cfg, log);
      write_text(dir / "spacing.csv", spacing_csv(rows));
      ExperimentResult res{dir, {}};
      for (const auto& r : rows) res.values.emplace_back("psnr@" + fmt(r.spacing / 1e3), r.psnr);
      return res;
    }
    case ExperimentKind::count_sweep: {
      const auto rows = run_count_sweep(cfg, log);
      write_text(dir / "count.csv", count_csv(rows));
      ExperimentResult res{dir, {}};
      for (const auto& r : rows) res.values.emplace_back("psnr@" + std::to_string(r.count), r.psnr);
      return res;
    }
    case ExperimentKind::single_vs_multi:
      return stack_experiment(cfg, single_vs_multi_conditions(cfg), build_target(cfg), dir, log);
    case ExperimentKind::tm_compare: {
      AppConfig local = cfg;
      const auto [lo, hi] = std::minmax_element(cfg.system.planes.begin(), cfg.system.planes.end());
      local.system.planes = linspace_planes(*lo, *hi, cfg.experiments.tm_planes);
      const std::vector<Condition> conditions{
          {"multisource", cfg.sources.build(), cfg.first,
           cfg.second ? cfg.second : std::optional<Modulation>(Modulation::amplitude_only), InitKind::uniform_random, 1},
          {"tm" + std::to_string(cfg.experiments.tm_frames), SourceArray::on_axis(), Modulation::phase_only,
           std::nullopt, InitKind::uniform_random, cfg.experiments.tm_frames},
      };
      return stack_experiment(local, conditions, build_target(local), dir, log);
    }
    case ExperimentKind::pupil_demo:
      return pupil_experiment(cfg, dir, log);
    case ExperimentKind::eyebox_demo:
      return eyebox_experiment(cfg, dir, log);
    case ExperimentKind::calib_recovery:
      return calib_experiment(cfg, dir, log);
  }
  throw ConfigError("unhandled experiment kind");
}

}  // namespace msholo
