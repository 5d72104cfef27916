#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numbers>
#include <random>
#include <sstream>

#include "msholo/calibration.hpp"
#include "msholo/tensor_io.hpp"

namespace msholo {

using cd = std::complex<double>;

const char* perturbation_name(Perturbation p) {
  switch (p) {
    case Perturbation::lut: return "lut";
    case Perturbation::fringing: return "fringing";
    case Perturbation::pupil: return "pupil";
    case Perturbation::warp: return "warp";
    case Perturbation::source: return "source";
    case Perturbation::standard: return "standard";
  }
  return "?";
}

Perturbation parse_perturbation(const std::string& name) {
  for (Perturbation p : {Perturbation::lut, Perturbation::fringing, Perturbation::pupil, Perturbation::warp,
                         Perturbation::source, Perturbation::standard}) {
    if (name == perturbation_name(p)) return p;
  }
  throw ConfigError("unknown perturbation preset '" + name + "'");
}

CalibModel perturbed(const CalibModel& base, Perturbation p) {
  CalibModel m = base;
  const bool all = p == Perturbation::standard;
  const double two_pi = 2.0 * std::numbers::pi;
  if (all || p == Perturbation::lut) {
    for (auto& s : m.slm) {
      for (int k = 0; k < kLutSize; ++k) {
        s.lut[k] += 0.4 * std::sin(two_pi * k / kLutSize) + 0.15 * std::cos(3.0 * two_pi * k / kLutSize);
      }
    }
  }
  if (all || p == Perturbation::fringing) {
    for (auto& s : m.slm) {
      s.fringing = delta_kernel();
      const int c = kFringingSize / 2;
      s.fringing[c * kFringingSize + c] = 0.84;
      for (int d : {-1, 1}) {
        s.fringing[(c + d) * kFringingSize + c] = 0.04;
        s.fringing[c * kFringingSize + c + d] = 0.04;
      }
    }
  }
  if (all || p == Perturbation::pupil) {
    PupilGrid& g = m.pupil[1];
    const int K = g.freq_size;
    for (int i = 0; i < K; ++i) {
      const double qy = 2.0 * i / (K - 1) - 1.0;
      for (int j = 0; j < K; ++j) {
        const double qx = 2.0 * j / (K - 1) - 1.0;
        g.values[static_cast<std::size_t>(i) * K + j] *= std::polar(1.0, 0.6 * (qx * qx + qy * qy) + 0.3 * qx * qx * qx);
      }
    }
  }
  if (all || p == Perturbation::warp) {
    const double hx = 0.5 * (m.slm_shape.cols - 1);
    const double hy = 0.5 * (m.slm_shape.rows - 1);
    for (std::size_t i = 0; i < m.warp.controls.size(); ++i) {
      const double u = (m.warp.controls[i].x - hx) / hx;
      const double v = (m.warp.controls[i].y - hy) / hy;
      m.warp.displacements[i] = {0.4 + 0.3 * v * v, 0.2 + 0.3 * u * u};
    }
  }
  if (all || p == Perturbation::source) {
    // Entry 0 is the on-axis reference that defines the optical axis.
    for (std::size_t i = 1; i < m.sources.size(); ++i) {
      auto& s = m.sources[i];
      if (i % 2 == 1) {
        s.position.x += 0.5;
      } else {
        s.position.y -= 0.5;
      }
      s.intensity *= (i % 2 == 1) ? 1.1 : 0.9;
    }
  }
  m.validate();
  return m;
}

std::vector<double> gaussian_blur(std::span<const double> image, Shape s, double sigma) {
  if (image.size() != s.size()) throw ShapeMismatch("blur input does not match its shape");
  if (!(sigma >= 0.0)) throw DomainError("blur sigma must be nonnegative");
  std::vector<double> out(image.begin(), image.end());
  if (sigma == 0.0) return out;
  const int half = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * half + 1);
  double sum = 0.0;
  for (int i = -half; i <= half; ++i) sum += k[i + half] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (double& v : k) v /= sum;
  auto reflect = [](int i, int n) {
    if (n == 1) return 0;
    while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - i - 1;
    return i;
  };
  std::vector<double> tmp(out.size());
  for (int r = 0; r < s.rows; ++r) {
    for (int c = 0; c < s.cols; ++c) {
      double acc = 0.0;
      for (int i = -half; i <= half; ++i) acc += k[i + half] * out[static_cast<std::size_t>(r) * s.cols + reflect(c + i, s.cols)];
      tmp[static_cast<std::size_t>(r) * s.cols + c] = acc;
    }
  }
  for (int r = 0; r < s.rows; ++r) {
    for (int c = 0; c < s.cols; ++c) {
      double acc = 0.0;
      for (int i = -half; i <= half; ++i) acc += k[i + half] * tmp[static_cast<std::size_t>(reflect(r + i, s.rows)) * s.cols + c];
      out[static_cast<std::size_t>(r) * s.cols + c] = acc;
    }
  }
  return out;
}

namespace {

double mean_of(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double std_of(std::span<const double> v) {
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size()));
}

std::vector<double> random_levels(Shape shape, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> uni(0, kLutSize - 1);
  std::vector<double> d(shape.size());
  for (double& v : d) v = uni(rng);
  return d;
}

std::vector<double> blurred_levels(std::vector<double> d, Shape shape, double sigma) {
  if (sigma == 0.0) return d;
  const double s0 = std_of(d);
  auto b = gaussian_blur(d, shape, sigma);
  const double m = mean_of(b);
  const double sb = std_of(b);
  const double gain = sb > 0.0 ? s0 / sb : 1.0;
  for (double& v : b) v = std::clamp(127.5 + (v - m) * gain, 0.0, 255.0);
  return b;
}

}  // namespace

CaptureDataset make_synthetic_dataset(const CalibModel& oracle, const DatasetSpec& spec) {
  oracle.validate();
  if (spec.planes.empty()) throw ConfigError("dataset needs at least one capture plane");
  if (spec.blur_sigmas.empty()) throw ConfigError("dataset needs at least one blur level");
  if (spec.records_per_config < 1) throw ConfigError("records_per_config must be >= 1");
  if (!(spec.noise_std >= 0.0)) throw ConfigError("noise_std must be nonnegative");
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> noise(0.0, std::max(spec.noise_std, 1e-300));
  CaptureDataset ds;
  ds.slm_shape = oracle.slm_shape;
  ds.pitch = oracle.pitch;
  for (int config : spec.configs) {
    oracle.source_indices(config);
    for (int r = 0; r < spec.records_per_config; ++r) {
      CaptureRecord rec;
      rec.config_id = config;
      rec.blur_sigma = spec.blur_sigmas[static_cast<std::size_t>(r) % spec.blur_sigmas.size()];
      rec.z = spec.planes[static_cast<std::size_t>(r) % spec.planes.size()];
      rec.slm1 = blurred_levels(random_levels(ds.slm_shape, rng), ds.slm_shape, rec.blur_sigma);
      rec.slm2 = blurred_levels(random_levels(ds.slm_shape, rng), ds.slm_shape, rec.blur_sigma);
      IntensityImage cap = calibrated_forward(rec.slm1, rec.slm2, oracle, config, rec.z);
      if (spec.noise_std > 0.0) {
        std::vector<double> v(cap.data().begin(), cap.data().end());
        for (double& x : v) x = std::max(0.0, x + noise(rng));
        cap = IntensityImage(cap.shape(), cap.pitch(), std::move(v));
      }
      rec.capture = std::move(cap);
      ds.records.push_back(std::move(rec));
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Fitting

namespace {

std::vector<double> pack(const CalibModel& m, unsigned g) {
  std::vector<double> v;
  switch (g) {
    case kLut:
      for (const auto& s : m.slm) v.insert(v.end(), s.lut.begin(), s.lut.end());
      break;
    case kFringing:
      for (const auto& s : m.slm) v.insert(v.end(), s.fringing.begin(), s.fringing.end());
      break;
    case kPupil:
      for (const auto& p : m.pupil) {
        for (const cd& c : p.values) {
          v.push_back(c.real());
          v.push_back(c.imag());
        }
      }
      break;
    case kWarp:
      for (const Vec2& d : m.warp.displacements) {
        v.push_back(d.x);
        v.push_back(d.y);
      }
      break;
    case kCamera:
      for (const Vec2& d : m.camera.displacements) {
        v.push_back(d.x);
        v.push_back(d.y);
      }
      break;
    case kSourcePosition:
      for (const auto& s : m.sources) {
        v.push_back(s.position.x);
        v.push_back(s.position.y);
      }
      break;
    case kSourceIntensity:
      for (const auto& s : m.sources) v.push_back(s.intensity);
      break;
  }
  return v;
}

void unpack(CalibModel& m, unsigned g, const std::vector<double>& v) {
  std::size_t i = 0;
  switch (g) {
    case kLut:
      for (auto& s : m.slm) {
        for (double& x : s.lut) x = v[i++];
      }
      break;
    case kFringing:
      for (auto& s : m.slm) {
        double sum = 0.0;
        for (double& x : s.fringing) sum += x = v[i++];
        // Kernels stay normalized so the LUT keeps the phase scale.
        const double shift = (1.0 - sum) / static_cast<double>(s.fringing.size());
        for (double& x : s.fringing) x += shift;
      }
      break;
    case kPupil:
      for (auto& p : m.pupil) {
        for (cd& c : p.values) {
          c = {v[i], v[i + 1]};
          i += 2;
        }
      }
      break;
    case kWarp:
      for (Vec2& d : m.warp.displacements) {
        d = {v[i], v[i + 1]};
        i += 2;
      }
      break;
    case kCamera:
      for (Vec2& d : m.camera.displacements) {
        d = {v[i], v[i + 1]};
        i += 2;
      }
      break;
    case kSourcePosition:
      for (auto& s : m.sources) {
        s.position = {v[i], v[i + 1]};
        i += 2;
      }
      break;
    case kSourceIntensity:
      for (auto& s : m.sources) s.intensity = std::max(0.0, v[i++]);
      break;
  }
}

std::vector<double> pack_gradient(const CalibGradient& gr, unsigned g) {
  std::vector<double> v;
  switch (g) {
    case kLut:
      for (const auto& x : gr.lut) v.insert(v.end(), x.begin(), x.end());
      break;
    case kFringing:
      for (const auto& x : gr.fringing) v.insert(v.end(), x.begin(), x.end());
      break;
    case kPupil:
      for (const auto& p : gr.pupil) {
        for (const cd& c : p) {
          v.push_back(c.real());
          v.push_back(c.imag());
        }
      }
      break;
    case kWarp:
      for (const Vec2& d : gr.warp) {
        v.push_back(d.x);
        v.push_back(d.y);
      }
      break;
    case kCamera:
      for (const Vec2& d : gr.camera) {
        v.push_back(d.x);
        v.push_back(d.y);
      }
      break;
    case kSourcePosition:
      for (const Vec2& d : gr.source_position) {
        v.push_back(d.x);
        v.push_back(d.y);
      }
      break;
    case kSourceIntensity:
      v = gr.source_intensity;
      break;
  }
  return v;
}

double group_lr(const FitSpec& s, unsigned g) {
  switch (g) {
    case kLut: return s.lr_lut;
    case kFringing: return s.lr_fringing;
    case kPupil: return s.lr_pupil;
    case kWarp:
    case kCamera: return s.lr_warp;
    case kSourcePosition: return s.lr_source_position;
    case kSourceIntensity: return s.lr_source_intensity;
  }
  return 0.0;
}

constexpr unsigned kGroups[] = {kLut, kFringing, kPupil, kWarp, kCamera, kSourcePosition, kSourceIntensity};

}  // namespace

FitResult fit_model(const CaptureDataset& dataset, const CalibModel& init, const FitSpec& spec) {
  dataset.validate();
  init.validate();
  require_same_shape(dataset.slm_shape, init.slm_shape, "dataset vs model grid");
  if (!(spec.decay > 0.0 && spec.decay <= 1.0)) throw ConfigError("fit decay must be in (0, 1]");
  struct Stage {
    unsigned groups;
    std::function<bool(const CaptureRecord&)> use;
  };
  const Stage stages[4] = {
      {kWarp | kCamera, [](const CaptureRecord& r) { return r.config_id == 0 && r.blur_sigma > 0.0; }},
      {kLut | kFringing | kPupil, [](const CaptureRecord& r) { return r.config_id == 0; }},
      {kSourcePosition | kSourceIntensity, [](const CaptureRecord& r) { return r.config_id == 1; }},
      {kAllParams, [](const CaptureRecord&) { return true; }},
  };
  FitResult res{init, {}};
  std::mt19937_64 rng(spec.seed);
  for (int st = 0; st < 4; ++st) {
    res.stage_loss.emplace_back();
    std::vector<CaptureRecord> recs;
    for (const auto& r : dataset.records) {
      if (stages[st].use(r)) recs.push_back(r);
    }
    const int iters = spec.iterations[st];
    if (recs.empty() || iters < 1) continue;
    std::map<unsigned, AdamState> states;
    for (int it = 0; it < iters; ++it) {
      std::optional<int> patch;
      if (spec.patch_mode && res.model.tiles.count() > 1) {
        patch = static_cast<int>(rng() % static_cast<std::uint64_t>(res.model.tiles.count()));
      }
      const CalibEvaluation ev = evaluate_calibration(res.model, recs, stages[st].groups, patch);
      if (!std::isfinite(ev.loss)) {
        throw DivergenceError("calibration loss became non-finite in stage " + std::to_string(st + 1) +
                              " at iteration " + std::to_string(it));
      }
      res.stage_loss.back().push_back(ev.loss);
      const double frac = iters > 1 ? static_cast<double>(it) / (iters - 1) : 0.0;
      for (unsigned g : kGroups) {
        if (!(stages[st].groups & g)) continue;
        AdamSettings adam;
        adam.lr = group_lr(spec, g) * std::pow(spec.decay, frac);
        std::vector<double> params = pack(res.model, g);
        const std::vector<double> grad = pack_gradient(ev.gradient, g);
        adam_step(params, grad, states[g], adam);
        unpack(res.model, g, params);
      }
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Recovery measures

double lut_rms_error(const CalibModel& a, const CalibModel& b, int slm, const CaptureDataset& dataset) {
  if (slm < 0 || slm > 1) throw DomainError("SLM index must be 0 or 1");
  std::vector<bool> used(kLutSize, false);
  for (const auto& r : dataset.records) {
    for (double d : (slm == 0 ? r.slm1 : r.slm2)) {
      const int k0 = std::min(static_cast<int>(d), kLutSize - 2);
      const double t = d - k0;
      if (t < 1.0) used[k0] = true;
      if (t > 0.0) used[k0 + 1] = true;
    }
  }
  std::vector<double> diff;
  for (int k = 0; k < kLutSize; ++k) {
    if (used[k]) diff.push_back(a.slm[slm].lut[k] - b.slm[slm].lut[k]);
  }
  if (diff.empty()) throw DomainError("dataset exercises no LUT entries");
  const double m = mean_of(diff);
  double s = 0.0;
  for (double d : diff) s += (d - m) * (d - m);
  return std::sqrt(s / static_cast<double>(diff.size()));
}

double source_position_error(const CalibModel& a, const CalibModel& b) {
  if (a.sources.size() != b.sources.size()) throw ShapeMismatch("models have different source counts");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.sources.size(); ++i) worst = std::max(worst, norm(a.sources[i].position - b.sources[i].position));
  return worst;
}

double warp_rms_error(const CalibModel& a, const CalibModel& b) {
  require_same_shape(a.slm_shape, b.slm_shape, "warp comparison");
  const auto da = TpsBasis(a.warp.controls, a.slm_shape).displacement(a.warp.displacements);
  const auto db = TpsBasis(b.warp.controls, b.slm_shape).displacement(b.warp.displacements);
  double s = 0.0;
  for (std::size_t p = 0; p < da.size(); ++p) {
    const Vec2 d = da[p] - db[p];
    s += d.x * d.x + d.y * d.y;
  }
  return std::sqrt(s / static_cast<double>(da.size()));
}

double fringing_error(const CalibModel& a, const CalibModel& b, int slm) {
  if (slm < 0 || slm > 1) throw DomainError("SLM index must be 0 or 1");
  double s = 0.0;
  for (std::size_t i = 0; i < a.slm[slm].fringing.size(); ++i) {
    const double d = a.slm[slm].fringing[i] - b.slm[slm].fringing[i];
    s += d * d;
  }
  return std::sqrt(s / static_cast<double>(a.slm[slm].fringing.size()));
}

double pupil_phase_error(const CalibModel& a, const CalibModel& b, int leg) {
  if (leg < 0 || leg > 1) throw DomainError("pupil leg must be 0 or 1");
  const PupilGrid& pa = a.pupil[leg];
  const PupilGrid& pb = b.pupil[leg];
  if (pa.values.size() != pb.values.size() || pa.freq_size != pb.freq_size) {
    throw ShapeMismatch("pupil grids differ in layout");
  }
  // Coarse samples inside the SLM band (|nu| <= 1 / (2 upsample)).
  const int K = pa.freq_size;
  const double band = 0.5 / a.upsample + 1e-12;
  std::vector<cd> ratio;
  for (std::size_t n = 0; n < pa.values.size() / pa.node_stride(); ++n) {
    for (int i = 0; i < K; ++i) {
      const double ny = static_cast<double>(i) / (K - 1) - 0.5;
      for (int j = 0; j < K; ++j) {
        const double nx = static_cast<double>(j) / (K - 1) - 0.5;
        if (std::abs(nx) > band || std::abs(ny) > band) continue;
        const std::size_t q = n * pa.node_stride() + static_cast<std::size_t>(i) * K + j;
        ratio.push_back(pa.values[q] * std::conj(pb.values[q]));
      }
    }
  }
  if (ratio.empty()) throw DomainError("no pupil samples inside the band");
  cd mean{};
  for (const cd& r : ratio) mean += r / std::abs(r);
  const double ref = std::arg(mean);
  double s = 0.0;
  for (const cd& r : ratio) {
    const double d = std::remainder(std::arg(r) - ref, 2.0 * std::numbers::pi);
    s += d * d;
  }
  return std::sqrt(s / static_cast<double>(ratio.size()));
}

// ---------------------------------------------------------------------------
// Pattern optimization and camera-in-the-loop

DigitalPatterns random_digital(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  DigitalPatterns p;
  std::uniform_real_distribution<double> uni(0.0, 255.0);
  p.slm1.resize(shape.size());
  p.slm2.resize(shape.size());
  for (double& v : p.slm1) v = uni(rng);
  for (double& v : p.slm2) v = uni(rng);
  return p;
}

CameraFn oracle_camera(const CalibModel& oracle, int config_id) {
  return [oracle, config_id](const DigitalPatterns& p, double z) {
    return calibrated_forward(p.slm1, p.slm2, oracle, config_id, z);
  };
}

std::vector<IntensityImage> render_digital(const CalibModel& model, int config_id, const DigitalPatterns& patterns,
                                           const FocalStackTarget& target) {
  target.validate();
  std::vector<IntensityImage> out;
  for (double z : target.planes) out.push_back(calibrated_forward(patterns.slm1, patterns.slm2, model, config_id, z));
  return scaled(out, fit_scale(out, target.images));
}

CitlResult optimize_digital(const CalibModel& model, int config_id, const FocalStackTarget& target,
                            DigitalPatterns init, const CitlSpec& spec, const CameraFn& camera) {
  model.validate();
  target.validate();
  require_same_shape(target.shape(), model.slm_shape, "target vs model grid");
  if (spec.iterations < 0) throw ConfigError("iterations must be >= 0");
  const std::size_t n = model.slm_shape.size();
  if (init.slm1.size() != n || init.slm2.size() != n) throw ShapeMismatch("digital patterns do not match the model");
  CitlResult res;
  res.patterns = std::move(init);
  AdamState state;
  std::vector<double> params(2 * n);
  std::vector<double> grad(2 * n);
  const std::size_t K = target.size();
  for (int it = 0; it < spec.iterations; ++it) {
    std::vector<std::size_t> planes;
    if (spec.cycle_planes) {
      planes.push_back(static_cast<std::size_t>(it) % K);
      res.schedule.push_back(static_cast<int>(planes.back()));
    } else {
      for (std::size_t k = 0; k < K; ++k) planes.push_back(k);
      res.schedule.push_back(-1);
    }
    std::vector<std::vector<double>> shown;
    for (std::size_t k : planes) {
      const double z = target.planes[k];
      IntensityImage img = camera ? camera(res.patterns, z)
                                  : calibrated_forward(res.patterns.slm1, res.patterns.slm2, model, config_id, z);
      shown.emplace_back(img.data().begin(), img.data().end());
    }
    double num = 0.0;
    double den = 0.0;
    for (std::size_t q = 0; q < planes.size(); ++q) {
      const auto T = target.images[planes[q]].data();
      for (std::size_t p = 0; p < n; ++p) {
        num += shown[q][p] * T[p];
        den += shown[q][p] * shown[q][p];
      }
    }
    const double s = den > 0.0 ? num / den : 1.0;
    double loss = 0.0;
    std::fill(grad.begin(), grad.end(), 0.0);
    for (std::size_t q = 0; q < planes.size(); ++q) {
      const auto T = target.images[planes[q]].data();
      std::vector<double> dI(n);
      for (std::size_t p = 0; p < n; ++p) {
        const double d = s * shown[q][p] - T[p];
        loss += d * d;
        dI[p] = 2.0 * s * d;
      }
      // The captured image stands in for the model output; gradients still
      // flow through the model.
      const CalibGradient g =
          backpropagate(model, res.patterns.slm1, res.patterns.slm2, config_id, target.planes[planes[q]], dI, 0, true);
      for (std::size_t p = 0; p < n; ++p) {
        grad[p] += g.slm1[p];
        grad[n + p] += g.slm2[p];
      }
    }
    if (!std::isfinite(loss)) throw DivergenceError("pattern loss became non-finite at iteration " + std::to_string(it));
    res.loss.push_back(loss);
    std::copy(res.patterns.slm1.begin(), res.patterns.slm1.end(), params.begin());
    std::copy(res.patterns.slm2.begin(), res.patterns.slm2.end(), params.begin() + static_cast<std::ptrdiff_t>(n));
    adam_step(params, grad, state, spec.adam);
    for (std::size_t p = 0; p < n; ++p) {
      res.patterns.slm1[p] = std::clamp(params[p], 0.0, 255.0);
      res.patterns.slm2[p] = std::clamp(params[n + p], 0.0, 255.0);
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

std::string num(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

std::vector<double> flatten(const std::vector<Vec2>& v) {
  std::vector<double> out;
  for (const Vec2& p : v) {
    out.push_back(p.x);
    out.push_back(p.y);
  }
  return out;
}

std::vector<Vec2> unflatten(const std::vector<double>& v) {
  if (v.size() % 2 != 0) throw FormatError("point tensor has an odd length");
  std::vector<Vec2> out;
  for (std::size_t i = 0; i < v.size(); i += 2) out.push_back({v[i], v[i + 1]});
  return out;
}

const std::string& meta(const TensorBundle& b, const std::string& key) {
  auto it = b.metadata.find(key);
  if (it == b.metadata.end()) throw FormatError("bundle is missing metadata '" + key + "'");
  return it->second;
}

std::uint64_t u64(std::size_t v) { return static_cast<std::uint64_t>(v); }

}  // namespace

void write_calib_model(const std::filesystem::path& directory, const CalibModel& m) {
  m.validate();
  TensorBundle b;
  b.metadata["kind"] = "calibration-model";
  b.metadata["rows"] = std::to_string(m.slm_shape.rows);
  b.metadata["cols"] = std::to_string(m.slm_shape.cols);
  b.metadata["pitch"] = num(m.pitch);
  b.metadata["upsample"] = std::to_string(m.upsample);
  b.metadata["wavelength"] = num(m.wavelength);
  b.metadata["gap"] = num(m.gap);
  b.metadata["band_limit"] = m.band_limit == BandLimit::matsushima ? "matsushima" : "none";
  b.metadata["tile_rows"] = std::to_string(m.tiles.rows);
  b.metadata["tile_cols"] = std::to_string(m.tiles.cols);
  for (int j = 0; j < 2; ++j) {
    const std::string s = std::to_string(j);
    b.tensors["lut" + s] = Tensor::from_reals(m.slm[j].lut, {u64(kLutSize)});
    b.tensors["fringing" + s] = Tensor::from_reals(m.slm[j].fringing, {u64(kFringingSize), u64(kFringingSize)});
    const PupilGrid& p = m.pupil[j];
    b.tensors["pupil" + s] = Tensor::from_complex(
        p.values, {u64(p.node_rows), u64(p.node_cols), u64(p.freq_size), u64(p.freq_size)});
  }
  b.tensors["warp.controls"] = Tensor::from_reals(flatten(m.warp.controls), {u64(m.warp.controls.size()), 2});
  b.tensors["warp.displacements"] = Tensor::from_reals(flatten(m.warp.displacements), {u64(m.warp.controls.size()), 2});
  b.tensors["camera.controls"] = Tensor::from_reals(flatten(m.camera.controls), {u64(m.camera.controls.size()), 2});
  b.tensors["camera.displacements"] =
      Tensor::from_reals(flatten(m.camera.displacements), {u64(m.camera.controls.size()), 2});
  std::vector<double> src;
  for (const auto& s : m.sources) {
    src.push_back(s.position.x);
    src.push_back(s.position.y);
    src.push_back(s.intensity);
  }
  b.tensors["sources"] = Tensor::from_reals(src, {u64(m.sources.size()), 3});
  write_bundle(directory, b);
}

CalibModel read_calib_model(const std::filesystem::path& directory) {
  const TensorBundle b = read_bundle(directory);
  if (meta(b, "kind") != "calibration-model") throw FormatError("not a calibration model bundle");
  CalibModel m;
  m.slm_shape = {std::stoi(meta(b, "rows")), std::stoi(meta(b, "cols"))};
  m.pitch = std::stod(meta(b, "pitch"));
  m.upsample = std::stoi(meta(b, "upsample"));
  m.wavelength = std::stod(meta(b, "wavelength"));
  m.gap = std::stod(meta(b, "gap"));
  m.band_limit = meta(b, "band_limit") == "matsushima" ? BandLimit::matsushima : BandLimit::none;
  m.tiles = {std::stoi(meta(b, "tile_rows")), std::stoi(meta(b, "tile_cols"))};
  for (int j = 0; j < 2; ++j) {
    const std::string s = std::to_string(j);
    m.slm[j].lut = b.at("lut" + s).to_reals();
    m.slm[j].fringing = b.at("fringing" + s).to_reals();
    const Tensor& t = b.at("pupil" + s);
    if (t.shape.size() != 4 || t.shape[2] != t.shape[3]) throw FormatError("pupil tensor must be rank 4");
    m.pupil[j].node_rows = static_cast<int>(t.shape[0]);
    m.pupil[j].node_cols = static_cast<int>(t.shape[1]);
    m.pupil[j].freq_size = static_cast<int>(t.shape[2]);
    m.pupil[j].values = t.to_complex();
  }
  m.warp.controls = unflatten(b.at("warp.controls").to_reals());
  m.warp.displacements = unflatten(b.at("warp.displacements").to_reals());
  m.camera.controls = unflatten(b.at("camera.controls").to_reals());
  m.camera.displacements = unflatten(b.at("camera.displacements").to_reals());
  const auto src = b.at("sources").to_reals();
  if (src.size() % 3 != 0) throw FormatError("source tensor must have 3 columns");
  for (std::size_t i = 0; i < src.size(); i += 3) m.sources.push_back({{src[i], src[i + 1]}, src[i + 2]});
  m.validate();
  return m;
}

void write_dataset(const std::filesystem::path& directory, const CaptureDataset& ds) {
  ds.validate();
  TensorBundle b;
  b.metadata["kind"] = "capture-dataset";
  b.metadata["rows"] = std::to_string(ds.slm_shape.rows);
  b.metadata["cols"] = std::to_string(ds.slm_shape.cols);
  b.metadata["pitch"] = num(ds.pitch);
  b.metadata["records"] = std::to_string(ds.records.size());
  const std::vector<std::uint64_t> dims{u64(ds.slm_shape.rows), u64(ds.slm_shape.cols)};
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    std::ostringstream os;
    os << "r" << std::setw(5) << std::setfill('0') << i;
    const std::string k = os.str();
    const auto& r = ds.records[i];
    b.tensors[k + ".slm1"] = Tensor::from_reals(r.slm1, dims);
    b.tensors[k + ".slm2"] = Tensor::from_reals(r.slm2, dims);
    b.tensors[k + ".capture"] = tensor_from_image(r.capture);
    b.metadata[k + ".config"] = std::to_string(r.config_id);
    b.metadata[k + ".z"] = num(r.z);
    b.metadata[k + ".sigma"] = num(r.blur_sigma);
  }
  write_bundle(directory, b);
}

CaptureDataset read_dataset(const std::filesystem::path& directory) {
  const TensorBundle b = read_bundle(directory);
  if (meta(b, "kind") != "capture-dataset") throw FormatError("not a capture dataset bundle");
  CaptureDataset ds;
  ds.slm_shape = {std::stoi(meta(b, "rows")), std::stoi(meta(b, "cols"))};
  ds.pitch = std::stod(meta(b, "pitch"));
  const int count = std::stoi(meta(b, "records"));
  for (int i = 0; i < count; ++i) {
    std::ostringstream os;
    os << "r" << std::setw(5) << std::setfill('0') << i;
    const std::string k = os.str();
    CaptureRecord r;
    r.slm1 = b.at(k + ".slm1").to_reals();
    r.slm2 = b.at(k + ".slm2").to_reals();
    r.capture = image_from_tensor(b.at(k + ".capture"), ds.pitch);
    r.config_id = std::stoi(meta(b, k + ".config"));
    r.z = std::stod(meta(b, k + ".z"));
    r.blur_sigma = std::stod(meta(b, k + ".sigma"));
    ds.records.push_back(std::move(r));
  }
  ds.validate();
  return ds;
}

}  // namespace msholo
