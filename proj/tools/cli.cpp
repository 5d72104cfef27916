#include "cli.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iomanip>
#include <sstream>
#include <thread>

#include "msholo/analysis.hpp"
#include "msholo/calibration.hpp"
#include "msholo/config.hpp"
#include "msholo/error.hpp"
#include "msholo/metrics.hpp"
#include "msholo/optimizer.hpp"
#include "msholo/parallel.hpp"
#include "msholo/png_io.hpp"
#include "msholo/propagation.hpp"
#include "msholo/selftest.hpp"
#include "msholo/tensor_io.hpp"

namespace msholo {

namespace {

struct Globals {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string precision;
  std::optional<int> threads;
};

AppConfig resolve(const Globals& g) {
  std::vector<std::string> overrides = g.sets;
  if (g.seed) overrides.push_back("seed=" + std::to_string(*g.seed));
  if (!g.precision.empty()) overrides.push_back("precision=\"" + g.precision + "\"");
  if (g.threads) overrides.push_back("threads=" + std::to_string(*g.threads));
  AppConfig cfg = g.config.empty() ? default_config(overrides) : load_config(g.config, overrides);
  const int n = cfg.threads == 0 ? static_cast<int>(std::max(1u, std::thread::hardware_concurrency())) : cfg.threads;
  set_thread_count(n);
  return cfg;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
}

IntensityImage unit_range(const IntensityImage& image, double peak) {
  std::vector<double> v(image.data().begin(), image.data().end());
  for (double& x : v) x = std::clamp(x / peak, 0.0, 1.0);
  return IntensityImage(image.shape(), image.pitch(), std::move(v));
}

double stack_peak(const std::vector<IntensityImage>& images) {
  double p = 0.0;
  for (const auto& im : images) p = std::max(p, im.max());
  return p > 0.0 ? p : 1.0;
}

void write_manifest(const std::filesystem::path& dir, const AppConfig& cfg, const std::string& command) {
  write_text(dir / "config.json", config_to_json(cfg) + "\n");
  std::ostringstream m;
  m << "tool=msholo\nversion=" << library_version() << "\ncommand=" << command << "\nconfig_hash=" << config_hash(cfg)
    << "\nseed=" << cfg.seed << "\n";
  write_text(dir / "manifest.txt", m.str());
}

int exit_code_for(const std::string& kind) {
  if (kind == "config") return kExitConfig;
  if (kind == "io" || kind == "format") return kExitIo;
  if (kind == "divergence") return kExitDivergence;
  return kExitRuntime;
}

std::string escaped(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '"' || c == '\\') out.push_back('\\');
    out.push_back(c == '\n' ? ' ' : c);
  }
  return out;
}

}  // namespace

int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multisource holography simulation, optimization and calibration", "msholo"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "JSON config file");
  app.add_option("--set", g.sets, "Override a config key: dotted.key=value")->take_all();
  app.add_option("--seed", g.seed, "Master random seed");
  app.add_option("--precision", g.precision, "Optimizer precision")->check(CLI::IsMember({"f32", "f64"}));
  app.add_option("--threads", g.threads, "Worker threads (0 = all cores)")->check(CLI::NonNegativeNumber);

  std::function<void()> action;

  // propagate
  auto* prop = app.add_subcommand("propagate", "Angular-spectrum propagation of a complex field tensor");
  std::string prop_in;
  std::string prop_out;
  std::string prop_png;
  double prop_z = 0.0;
  std::optional<double> prop_pitch;
  prop->add_option("--input", prop_in, "Complex field tensor")->required();
  prop->add_option("--z-mm", prop_z, "Propagation distance in mm")->required();
  prop->add_option("--pitch-um", prop_pitch, "Sample pitch in um (default: simulation pitch)");
  prop->add_option("--output", prop_out, "Output tensor")->required();
  prop->add_option("--png", prop_png, "Optional intensity PNG");
  prop->callback([&] {
    action = [&] {
      const AppConfig cfg = resolve(g);
      const double pitch = prop_pitch ? *prop_pitch * 1e-6 : cfg.system.sim_pitch();
      const ComplexField2D in = field_from_tensor(read_tensor(prop_in), pitch, cfg.system.wavelength());
      const ComplexField2D res = propagate(in, prop_z * 1e-3, cfg.system.band_limit);
      write_tensor(prop_out, tensor_from_field(res));
      if (!prop_png.empty()) {
        std::vector<double> v(res.size());
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::norm(res.data()[i]);
        const IntensityImage I(res.shape(), res.pitch(), std::move(v));
        write_png(prop_png, unit_range(I, std::max(I.max(), 1e-300)), 16);
      }
      out << "propagated " << res.shape().rows << "x" << res.shape().cols << " field by " << prop_z << " mm\n";
    };
  });

  // render-target
  auto* rt = app.add_subcommand("render-target", "Render the configured focal-stack target");
  std::string rt_out;
  rt->add_option("--output", rt_out, "Output directory")->required();
  rt->callback([&] {
    action = [&] {
      const AppConfig cfg = resolve(g);
      const FocalStackTarget t = build_target(cfg);
      std::filesystem::create_directories(rt_out);
      TensorBundle b;
      b.metadata["kind"] = "focal-stack";
      for (std::size_t k = 0; k < t.size(); ++k) {
        write_png(std::filesystem::path(rt_out) / ("plane" + std::to_string(k) + ".png"), t.images[k], 16);
        b.tensors["plane" + std::to_string(k)] = tensor_from_image(t.images[k]);
        std::ostringstream z;
        z << std::setprecision(17) << t.planes[k];
        b.metadata["plane" + std::to_string(k) + ".z"] = z.str();
      }
      write_bundle(std::filesystem::path(rt_out) / "stack", b);
      write_manifest(rt_out, cfg, "render-target");
      out << "rendered " << t.size() << " planes into " << rt_out << "\n";
    };
  });

  // optimize
  auto* opt = app.add_subcommand("optimize", "Optimize SLM patterns for the configured target");
  std::string opt_out;
  std::string opt_resume;
  opt->add_option("--output", opt_out, "Output directory")->required();
  opt->add_option("--resume", opt_resume, "Checkpoint directory to continue from");
  opt->callback([&] {
    action = [&] {
      const AppConfig cfg = resolve(g);
      const FocalStackTarget target = build_target(cfg);
      const SourceArray src = cfg.sources.build();
      std::vector<FramePatterns> init;
      std::optional<Checkpoint> ck;
      if (!opt_resume.empty()) {
        ck = read_checkpoint(opt_resume);
        if (ck->spec_digest != cfg.optimize.digest()) {
          throw ConfigError("checkpoint was written with different optimizer settings");
        }
        init = ck->frames;
      } else {
        init = initial_frames(cfg.optimize.frames, cfg.first, cfg.second, cfg.slm, cfg.system.pitch,
                              cfg.optimize.init, cfg.optimize.seed);
      }
      const int every = std::max(1, cfg.optimize.iterations / 10);
      const auto progress = [&](const LossRecord& r) {
        if (r.iteration % every == 0) out << "iteration " << r.iteration << " loss " << r.loss << "\n";
      };
      const OptimizeResult res = optimize_frames(std::move(init), src, cfg.system, cfg.system.wavelength(), target,
                                                 cfg.optimize, progress, ck ? &ck->adam : nullptr);
      const std::filesystem::path dir = opt_out;
      std::filesystem::create_directories(dir);
      write_checkpoint(dir / "checkpoint", res, cfg.optimize);
      write_history_csv(dir / "history.csv", res.history);
      const MetricReport rep = evaluate_stack(res.predicted, target);
      write_text(dir / "metrics.csv", MetricReport::csv_header() + "\n" + rep.csv_rows("optimized"));
      const double peak = stack_peak(target.images);
      for (std::size_t k = 0; k < res.predicted.size(); ++k) {
        write_png(dir / ("plane" + std::to_string(k) + ".png"), unit_range(res.predicted[k], peak), 16);
      }
      write_manifest(dir, cfg, "optimize");
      out << rep.summary() << "\n";
    };
  });

  // metrics
  auto* met = app.add_subcommand("metrics", "Compare an image with a reference");
  std::string met_img;
  std::string met_ref;
  std::optional<double> met_peak;
  int met_window = 8;
  int met_period = 2;
  met->add_option("--image", met_img, "Image PNG")->required();
  met->add_option("--reference", met_ref, "Reference PNG")->required();
  met->add_option("--peak", met_peak, "PSNR peak (default: reference maximum)");
  met->add_option("--window", met_window, "Speckle window in pixels")->check(CLI::Range(2, 1 << 20));
  met->add_option("--period", met_period, "Grating period for Michelson contrast")->check(CLI::Range(2, 1 << 20));
  met->callback([&] {
    action = [&] {
      resolve(g);
      const IntensityImage a = read_png(met_img, 1.0);
      const IntensityImage b = read_png(met_ref, 1.0);
      const double peak = met_peak ? *met_peak : b.max();
      out << "psnr_db=" << psnr(a, b, peak) << "\n";
      if (a.shape().rows >= 11 && a.shape().cols >= 11) out << "ssim=" << ssim(a, b) << "\n";
      const int w = std::min({100, a.shape().rows, a.shape().cols});
      const Region region = centered_region(a.shape(), w, w - w % met_period);
      out << "michelson=" << michelson_contrast(a, region, met_period) << "\n";
      if (a.shape().rows >= met_window && a.shape().cols >= met_window) {
        out << "speckle_contrast=" << speckle_contrast(a, met_window) << "\n";
      }
    };
  });

  // eyebox
  auto* eb = app.add_subcommand("eyebox", "Eyebox energy distribution of optimized patterns");
  std::string eb_ck;
  std::string eb_png;
  eb->add_option("--checkpoint", eb_ck, "Checkpoint directory from optimize")->required();
  eb->add_option("--output", eb_png, "Log-scale eyebox PNG");
  eb->callback([&] {
    action = [&] {
      const AppConfig cfg = resolve(g);
      const Checkpoint ck = read_checkpoint(eb_ck);
      const WeightedFields wf = fields_at(ck.frames, cfg.sources.build(), cfg.system, cfg.system.eyebox_plane);
      const EyeboxReport rep = eyebox_report(wf.fields, wf.weights, cfg.system.eyepiece_focal);
      if (!eb_png.empty()) write_png(eb_png, log_scale(rep.intensity), 8);
      out << "energy=" << rep.energy << "\npeak_to_mean=" << rep.peak_to_mean
          << "\ncentral_fraction=" << rep.central_fraction << "\n";
    };
  });

  // analyze
  auto* an = app.add_subcommand("analyze", "Source spacing or count sweeps");
  std::string an_kind;
  std::string an_out;
  an->add_option("kind", an_kind, "spacing or count")->required()->check(CLI::IsMember({"spacing", "count"}));
  an->add_option("--output", an_out, "CSV path (default: standard output)");
  an->callback([&] {
    action = [&] {
      const AppConfig cfg = resolve(g);
      const LogFn log = [&](const std::string& s) { err << s << "\n"; };
      const std::string csv =
          an_kind == "spacing" ? spacing_csv(run_spacing_sweep(cfg, log)) : count_csv(run_count_sweep(cfg, log));
      if (an_out.empty()) {
        out << csv;
      } else {
        write_text(an_out, csv);
      }
    };
  });

  // experiment
  auto* ex = app.add_subcommand("experiment", "Named experiment with an artifact directory");
  std::string ex_kind;
  std::string ex_out;
  ex->add_option("kind", ex_kind,
                 "spacing-sweep, count-sweep, single-vs-multi, tm-compare, pupil-demo, eyebox-demo, calib-recovery")
      ->required();
  ex->add_option("--output", ex_out, "Output directory")->required();
  ex->callback([&] {
    action = [&] {
      const AppConfig cfg = resolve(g);
      const ExperimentKind kind = parse_experiment(ex_kind);
      const ExperimentResult res =
          run_experiment(kind, cfg, ex_out, [&](const std::string& s) { out << s << "\n"; });
      for (const auto& [k, v] : res.values) out << k << "=" << v << "\n";
    };
  });

  // calibrate
  auto* cal = app.add_subcommand("calibrate", "Synthetic calibration and camera-in-the-loop");
  cal->require_subcommand(1);
  auto* mk = cal->add_subcommand("make-data", "Render a synthetic capture dataset from a perturbed oracle");
  std::string mk_out;
  mk->add_option("--output", mk_out, "Output directory")->required();
  mk->callback([&] {
    action = [&] {
      const AppConfig cfg = resolve(g);
      const auto& k = cfg.calibration;
      const CalibModel ideal = CalibModel::identity(cfg.system, {k.slm_size, k.slm_size}, make_grid(k.grid),
                                                    cfg.system.wavelength(), k.model);
      const CalibModel oracle = perturbed(ideal, k.perturbation);
      DatasetSpec ds = k.dataset;
      if (ds.planes.empty()) ds.planes = cfg.system.planes;
      const CaptureDataset data = make_synthetic_dataset(oracle, ds);
      const std::filesystem::path dir = mk_out;
      write_dataset(dir / "dataset", data);
      write_calib_model(dir / "oracle", oracle);
      write_calib_model(dir / "initial", ideal);
      write_manifest(dir, cfg, "calibrate make-data");
      out << "wrote " << data.records.size() << " records to " << (dir / "dataset").string() << "\n";
    };
  });
  auto* fit = cal->add_subcommand("fit", "Staged fit of the learnable model to a dataset");
  std::string fit_data;
  std::string fit_init;
  std::string fit_oracle;
  std::string fit_out;
  fit->add_option("--data", fit_data, "Dataset directory")->required();
  fit->add_option("--init", fit_init, "Initial model (default: ideal model from the config)");
  fit->add_option("--oracle", fit_oracle, "Oracle model, to report recovery errors");
  fit->add_option("--output", fit_out, "Output model directory")->required();
  fit->callback([&] {
    action = [&] {
      const AppConfig cfg = resolve(g);
      const auto& k = cfg.calibration;
      const CaptureDataset data = read_dataset(fit_data);
      const CalibModel init = fit_init.empty() ? CalibModel::identity(cfg.system, data.slm_shape, make_grid(k.grid),
                                                                      cfg.system.wavelength(), k.model)
                                               : read_calib_model(fit_init);
      const FitResult res = fit_model(data, init, k.fit);
      write_calib_model(fit_out, res.model);
      for (std::size_t s = 0; s < res.stage_loss.size(); ++s) {
        if (!res.stage_loss[s].empty()) {
          out << "stage " << s + 1 << " loss " << res.stage_loss[s].front() << " -> " << res.stage_loss[s].back()
              << "\n";
        }
      }
      if (!fit_oracle.empty()) {
        const CalibModel oracle = read_calib_model(fit_oracle);
        out << "lut_rms_rad=" << lut_rms_error(res.model, oracle, 0, data) << "\n"
            << "source_position_bins=" << source_position_error(res.model, oracle) << "\n"
            << "warp_rms_px=" << warp_rms_error(res.model, oracle) << "\n";
      }
    };
  });
  auto* citl = cal->add_subcommand("citl", "Pattern optimization with the oracle as the camera");
  std::string citl_model;
  std::string citl_oracle;
  std::string citl_out;
  citl->add_option("--model", citl_model, "Fitted model directory")->required();
  citl->add_option("--oracle", citl_oracle, "Oracle model directory")->required();
  citl->add_option("--output", citl_out, "Output directory")->required();
  citl->callback([&] {
    action = [&] {
      AppConfig cfg = resolve(g);
      const CalibModel model = read_calib_model(citl_model);
      const CalibModel oracle = read_calib_model(citl_oracle);
      cfg.slm = model.slm_shape;
      const FocalStackTarget target = build_target(cfg);
      const CitlComparison cmp = compare_citl(model, oracle, target, cfg.calibration.citl, cfg.seed);
      const std::filesystem::path dir = citl_out;
      std::filesystem::create_directories(dir);
      const auto shown = render_digital(oracle, 1, cmp.citl.patterns, target);
      const double peak = stack_peak(target.images);
      for (std::size_t k = 0; k < shown.size(); ++k) {
        write_png(dir / ("plane" + std::to_string(k) + ".png"), unit_range(shown[k], peak), 16);
      }
      TensorBundle b;
      b.metadata["kind"] = "digital-patterns";
      const std::vector<std::uint64_t> dims{static_cast<std::uint64_t>(model.slm_shape.rows),
                                            static_cast<std::uint64_t>(model.slm_shape.cols)};
      b.tensors["slm1"] = Tensor::from_reals(cmp.citl.patterns.slm1, dims);
      b.tensors["slm2"] = Tensor::from_reals(cmp.citl.patterns.slm2, dims);
      write_bundle(dir / "patterns", b);
      write_manifest(dir, cfg, "calibrate citl");
      out << "model_only_psnr_db=" << cmp.model_only_psnr << "\ncitl_psnr_db=" << cmp.citl_psnr << "\n";
    };
  });

  // selftest
  auto* st = app.add_subcommand("selftest", "Run the built-in oracle and property checks");
  bool st_failed = false;
  st->callback([&] {
    action = [&] {
      resolve(g);
      for (const auto& c : run_selftest()) {
        out << (c.passed ? "PASS " : "FAIL ") << c.name << ": " << c.detail << "\n";
        st_failed = st_failed || !c.passed;
      }
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "error: code=usage message=\"" << escaped(e.what()) << "\"\n";
    return kExitUsage;
  }
  try {
    if (action) action();
    return st_failed ? kExitRuntime : kExitOk;
  } catch (const Error& e) {
    err << "error: code=" << e.kind() << " message=\"" << escaped(e.what()) << "\"\n";
    return exit_code_for(e.kind());
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: code=io message=\"" << escaped(e.what()) << "\"\n";
    return kExitIo;
  } catch (const std::exception& e) {
    err << "error: code=runtime message=\"" << escaped(e.what()) << "\"\n";
    return kExitRuntime;
  }
}

}  // namespace msholo
