#include "msholo/optimizer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

#include "msholo/fft.hpp"
#include "msholo/parallel.hpp"
#include "msholo/propagation.hpp"
#include "msholo/tensor_io.hpp"

namespace msholo {

const char* precision_name(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

Precision parse_precision(const std::string& name) {
  if (name == "f32") return Precision::f32;
  if (name == "f64") return Precision::f64;
  throw ConfigError("unknown precision '" + name + "' (expected f32 or f64)");
}

InitKind parse_init(const std::string& name) {
  if (name == "constant") return InitKind::constant;
  if (name == "uniform_random" || name == "random") return InitKind::uniform_random;
  throw ConfigError("unknown init '" + name + "' (expected constant or random)");
}

LossScale parse_loss_scale(const std::string& name) {
  if (name == "fixed") return LossScale::fixed;
  if (name == "least_squares") return LossScale::least_squares;
  throw ConfigError("unknown loss scale '" + name + "' (expected fixed or least_squares)");
}

void adam_step(std::span<double> params, std::span<const double> grad, AdamState& state,
               const AdamSettings& settings) {
  if (params.size() != grad.size()) throw ShapeMismatch("adam_step: gradient size differs from parameters");
  if (state.m.empty() && state.v.empty()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  }
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ShapeMismatch("adam_step: optimizer state size differs from parameters");
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(settings.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(settings.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = settings.beta1 * state.m[i] + (1.0 - settings.beta1) * grad[i];
    state.v[i] = settings.beta2 * state.v[i] + (1.0 - settings.beta2) * grad[i] * grad[i];
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    params[i] -= settings.lr * mhat / (std::sqrt(vhat) + settings.eps);
  }
}

SlmPattern project_constraints(const SlmPattern& pattern) {
  SlmPattern out = pattern;
  switch (out.modulation()) {
    case Modulation::phase_only:
      std::fill(out.amplitude().begin(), out.amplitude().end(), 1.0);
      break;
    case Modulation::amplitude_only:
      for (double& a : out.amplitude()) a = std::clamp(a, 0.0, 1.0);
      std::fill(out.phase().begin(), out.phase().end(), 0.0);
      break;
    case Modulation::complex:
      for (double& a : out.amplitude()) a = std::clamp(a, 0.0, 1.0);
      break;
  }
  return out;
}

SlmPattern initial_pattern(Modulation modulation, Shape shape, double pitch, InitKind init, std::mt19937_64& rng) {
  SlmPattern p = SlmPattern::identity(modulation, shape, pitch);
  if (init == InitKind::uniform_random) {
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    for (double& v : p.phase()) v = 2.0 * std::numbers::pi * uni(rng);
    for (double& v : p.amplitude()) v = uni(rng);
  }
  return project_constraints(p);
}

std::vector<double> pupil_mask(Shape shape, double pitch, double wavelength, double eyepiece_focal,
                               const Pupil& pupil) {
  if (!(pupil.radius > 0.0)) throw DomainError("pupil radius must be positive");
  const FrequencyGrid grid(shape, pitch);
  const double s = wavelength * eyepiece_focal;
  std::vector<double> mask(shape.size(), 0.0);
  bool any = false;
  for (int r = 0; r < shape.rows; ++r) {
    const double y = s * grid.fy(r) - pupil.center.y;
    for (int c = 0; c < shape.cols; ++c) {
      const double x = s * grid.fx(c) - pupil.center.x;
      if (x * x + y * y <= pupil.radius * pupil.radius) {
        mask[static_cast<std::size_t>(r) * shape.cols + c] = 1.0;
        any = true;
      }
    }
  }
  if (!any) throw DomainError("pupil does not intersect the eyebox");
  return mask;
}

IntensityImage pupil_sampled_forward(const ComplexField2D& field_at_z0, const Pupil& pupil, double eyepiece_focal) {
  const auto mask =
      pupil_mask(field_at_z0.shape(), field_at_z0.pitch(), field_at_z0.wavelength(), eyepiece_focal, pupil);
  ComplexField2D e = fft2(field_at_z0);
  auto d = e.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] *= mask[i];
  const ComplexField2D g = ifft2(e);
  std::vector<double> out(g.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::norm(g.data()[i]);
  return IntensityImage(g.shape(), g.pitch(), std::move(out));
}

// ---------------------------------------------------------------------------
// HologramModel

template <typename Real>
struct HologramModel<Real>::Impl {
  SystemConfig config;
  SourceArray sources;
  double wavelength;
  std::shared_ptr<const BasicAsmKernel<Real>> gap;
  std::vector<std::shared_ptr<const BasicAsmKernel<Real>>> kernels;
  // Separable plane-wave factors per source: p_i(r, c) = px[i][c] * py[i][r].
  std::vector<std::vector<std::complex<double>>> px;
  std::vector<std::vector<std::complex<double>>> py;
};

template <typename Real>
HologramModel<Real>::HologramModel(const SystemConfig& config, SourceArray sources, double wavelength,
                                   std::vector<double> planes, Shape slm_shape)
    : slm_(slm_shape), planes_(std::move(planes)) {
  if (slm_.rows < 1 || slm_.cols < 1) throw SizingError("SLM grid must be at least 1x1");
  if (config.upsample < 1) throw ConfigError("upsample must be >= 1");
  if (!(config.pitch > 0.0) || !(wavelength > 0.0)) throw ConfigError("pitch and wavelength must be positive");
  if (planes_.empty()) throw ConfigError("at least one plane is required");
  sources.check_paraxial(wavelength);
  sim_ = {slm_.rows * config.upsample, slm_.cols * config.upsample};
  sim_pitch_ = config.pitch / config.upsample;

  auto impl = std::make_shared<Impl>(Impl{config, std::move(sources), wavelength, nullptr, {}, {}, {}});
  if (config.gap > 0.0) impl->gap = cached_kernel<Real>(sim_, sim_pitch_, wavelength, config.gap, config.band_limit);
  for (double z : planes_) {
    impl->kernels.push_back(cached_kernel<Real>(sim_, sim_pitch_, wavelength, z, config.band_limit));
  }
  for (const Vec2& t : impl->sources.tilts()) {
    std::vector<std::complex<double>> x(static_cast<std::size_t>(sim_.cols));
    std::vector<std::complex<double>> y(static_cast<std::size_t>(sim_.rows));
    for (int c = 0; c < sim_.cols; ++c) x[c] = std::polar(1.0, t.x * (c * sim_pitch_));
    for (int r = 0; r < sim_.rows; ++r) y[r] = std::polar(1.0, t.y * (r * sim_pitch_));
    impl->px.push_back(std::move(x));
    impl->py.push_back(std::move(y));
  }
  impl_ = std::move(impl);
}

namespace {

template <typename Real>
AlignedVector<std::complex<Real>> upsampled_values(const SlmPattern& p, int factor) {
  AlignedVector<std::complex<Real>> small(p.shape().size());
  for (std::size_t i = 0; i < small.size(); ++i) {
    const auto v = p.value(i);
    small[i] = {static_cast<Real>(v.real()), static_cast<Real>(v.imag())};
  }
  AlignedVector<std::complex<Real>> out(small.size() * static_cast<std::size_t>(factor) * factor);
  upsample_into<std::complex<Real>>(small, p.shape(), factor, out);
  return out;
}

template <typename Real>
inline double norm2(std::complex<Real> v) {
  const double re = v.real();
  const double im = v.imag();
  return re * re + im * im;
}

template <typename Real>
inline std::complex<Real> to_real(std::complex<double> v) {
  return {static_cast<Real>(v.real()), static_cast<Real>(v.imag())};
}

template <typename Real>
inline std::complex<double> to_double(std::complex<Real> v) {
  return {static_cast<double>(v.real()), static_cast<double>(v.imag())};
}

void pattern_gradient(const SlmPattern& s, std::span<const std::complex<double>> G, std::vector<double>& g_phase,
                      std::vector<double>& g_amp) {
  const std::size_t n = s.shape().size();
  g_phase.assign(n, 0.0);
  g_amp.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const std::complex<double> S = s.value(i);
    switch (s.modulation()) {
      case Modulation::phase_only:
        g_phase[i] = (G[i] * std::conj(S)).imag();
        break;
      case Modulation::amplitude_only:
        g_amp[i] = G[i].real();
        break;
      case Modulation::complex:
        g_phase[i] = (G[i] * std::conj(S)).imag();
        g_amp[i] = (std::conj(G[i]) * std::polar(1.0, s.phase()[i])).real();
        break;
    }
  }
}

}  // namespace

template <typename Real>
Evaluation HologramModel<Real>::evaluate(const std::vector<FramePatterns>& frames, const std::vector<View>& views_in,
                                         const LossSpec* loss) const {
  using C = std::complex<Real>;
  using Buf = AlignedVector<C>;
  const Impl& m = *impl_;
  if (frames.empty()) throw DomainError("no frames to evaluate");
  const bool two = frames.front().second.has_value();
  const double pitch_tol = 1e-12 * m.config.pitch;
  for (const auto& fp : frames) {
    if (fp.second.has_value() != two) throw ShapeMismatch("frames mix one- and two-SLM models");
    require_same_shape(fp.first.shape(), slm_, "first SLM vs model grid");
    if (std::abs(fp.first.pitch() - m.config.pitch) > pitch_tol) throw ShapeMismatch("SLM pitch differs from system");
    if (two) {
      require_same_shape(fp.second->shape(), slm_, "second SLM vs model grid");
      if (std::abs(fp.second->pitch() - m.config.pitch) > pitch_tol) {
        throw ShapeMismatch("SLM pitch differs from system");
      }
    }
  }
  if (two && !m.gap) throw DomainError("two-SLM models need a positive gap");

  const std::vector<View> open(1);
  const auto& views = views_in.empty() ? open : views_in;
  const std::size_t F = frames.size();
  const std::size_t S = m.sources.size();
  const std::size_t V = views.size();
  const std::size_t K = planes_.size();
  const std::size_t N = sim_.size();
  const int U = m.config.upsample;
  const bool want_grad = loss != nullptr && loss->gradients;

  std::vector<Buf> owned;
  owned.reserve(V * K);
  std::vector<const C*> transfer(V * K);
  for (std::size_t v = 0; v < V; ++v) {
    if (!views[v].mask.empty() && views[v].mask.size() != N) throw ShapeMismatch("view mask does not match grid");
    for (std::size_t k = 0; k < K; ++k) {
      const auto& h = m.kernels[k]->transfer;
      if (views[v].mask.empty()) {
        transfer[v * K + k] = h.data();
      } else {
        Buf hm(N);
        for (std::size_t p = 0; p < N; ++p) hm[p] = h[p] * static_cast<Real>(views[v].mask[p]);
        owned.push_back(std::move(hm));
        transfer[v * K + k] = owned.back().data();
      }
    }
  }

  std::vector<Buf> up1(F);
  std::vector<Buf> up2(two ? F : 0);
  for (std::size_t f = 0; f < F; ++f) {
    up1[f] = upsampled_values<Real>(frames[f].first, U);
    if (two) up2[f] = upsampled_values<Real>(*frames[f].second, U);
  }

  const std::size_t tasks = F * S;
  std::vector<Buf> f2_store(want_grad && two ? tasks : 0);
  std::vector<Buf> u2_store(want_grad ? tasks : 0);
  const int cols = sim_.cols;

  auto plane_wave_times = [&](std::size_t i, const Buf& src, Buf& dst, bool conj_tilt) {
    const auto& px = m.px[i];
    const auto& py = m.py[i];
    for (int r = 0; r < sim_.rows; ++r) {
      for (int c = 0; c < cols; ++c) {
        const std::size_t p = static_cast<std::size_t>(r) * cols + c;
        std::complex<double> t = px[c] * py[r];
        if (conj_tilt) t = std::conj(t);
        dst[p] = to_real<Real>(t) * src[p];
      }
    }
  };

  auto forward_task = [&](std::size_t t, std::vector<std::vector<double>>& acc) {
    const std::size_t f = t / S;
    const std::size_t i = t % S;
    const double wgt = m.sources.intensities()[i] / static_cast<double>(F);
    Buf a(N);
    plane_wave_times(i, up1[f], a, false);
    if (two) {
      fft2_inplace(a, sim_, FftDirection::forward);
      apply_transfer<Real>(a, *m.gap, false);
      fft2_inplace(a, sim_, FftDirection::inverse);
      if (want_grad) f2_store[t] = a;
      for (std::size_t p = 0; p < N; ++p) a[p] *= up2[f][p];
    }
    fft2_inplace(a, sim_, FftDirection::forward);
    Buf b(N);
    for (std::size_t vk = 0; vk < V * K; ++vk) {
      const C* h = transfer[vk];
      for (std::size_t p = 0; p < N; ++p) b[p] = a[p] * h[p];
      fft2_inplace(b, sim_, FftDirection::inverse);
      auto& out = acc[vk];
      for (std::size_t p = 0; p < N; ++p) out[p] += wgt * norm2(b[p]);
    }
    if (want_grad) u2_store[t] = std::move(a);
  };

  std::vector<std::vector<double>> acc(V * K, std::vector<double>(N, 0.0));
  if (thread_count() <= 1 || tasks == 1) {
    for (std::size_t t = 0; t < tasks; ++t) forward_task(t, acc);
  } else {
    // Per-task partial sums reduced in task order give the same bits as the
    // sequential loop.
    std::vector<std::vector<std::vector<double>>> part(tasks);
    parallel_for(tasks, [&](std::size_t t) {
      part[t].assign(V * K, std::vector<double>(N, 0.0));
      forward_task(t, part[t]);
    });
    for (std::size_t t = 0; t < tasks; ++t) {
      for (std::size_t vk = 0; vk < V * K; ++vk) {
        for (std::size_t p = 0; p < N; ++p) acc[vk][p] += part[t][vk][p];
      }
    }
  }

  Evaluation ev;
  ev.intensity.assign(V, {});
  const double inv_block = 1.0 / (static_cast<double>(U) * U);
  for (std::size_t v = 0; v < V; ++v) {
    for (std::size_t k = 0; k < K; ++k) {
      std::vector<double> down(slm_.size(), 0.0);
      block_sum_into<double>(acc[v * K + k], sim_, U, down);
      for (double& d : down) d *= inv_block;
      ev.intensity[v].emplace_back(slm_, m.config.pitch, std::move(down));
    }
  }
  if (loss == nullptr) return ev;

  if (loss->targets == nullptr || loss->targets->size() != K) throw ShapeMismatch("loss targets must match planes");
  const auto& T = *loss->targets;
  for (const auto& t : T) require_same_shape(t.shape(), slm_, "loss target vs SLM grid");
  std::vector<double> w = loss->weights.empty() ? std::vector<double>(K, 1.0) : loss->weights;
  if (w.size() != K) throw ShapeMismatch("plane weights must match planes");

  double s = 1.0;
  if (loss->scale == LossScale::least_squares) {
    double num = 0.0;
    double den = 0.0;
    for (std::size_t v = 0; v < V; ++v) {
      for (std::size_t k = 0; k < K; ++k) {
        const auto I = ev.intensity[v][k].data();
        const auto Tk = T[k].data();
        for (std::size_t p = 0; p < I.size(); ++p) {
          num += w[k] * I[p] * Tk[p];
          den += w[k] * I[p] * I[p];
        }
      }
    }
    s = den > 0.0 ? num / den : 1.0;
  }
  double L = 0.0;
  for (std::size_t v = 0; v < V; ++v) {
    for (std::size_t k = 0; k < K; ++k) {
      const auto I = ev.intensity[v][k].data();
      const auto Tk = T[k].data();
      double part = 0.0;
      for (std::size_t p = 0; p < I.size(); ++p) {
        const double d = s * I[p] - Tk[p];
        part += d * d;
      }
      L += w[k] * part;
    }
  }
  ev.loss = L / static_cast<double>(V);
  ev.scale = s;
  if (!want_grad) return ev;

  // dL/dI on the simulation grid, before the per-source weight.
  std::vector<std::vector<double>> rup(V * K, std::vector<double>(N));
  for (std::size_t v = 0; v < V; ++v) {
    for (std::size_t k = 0; k < K; ++k) {
      const auto I = ev.intensity[v][k].data();
      const auto Tk = T[k].data();
      const double c = 2.0 * w[k] * s * inv_block / static_cast<double>(V);
      auto& R = rup[v * K + k];
      for (int r = 0; r < sim_.rows; ++r) {
        for (int cc = 0; cc < cols; ++cc) {
          const std::size_t q = static_cast<std::size_t>(r / U) * slm_.cols + cc / U;
          R[static_cast<std::size_t>(r) * cols + cc] = c * (s * I[q] - Tk[q]);
        }
      }
    }
  }

  auto backward_task = [&](std::size_t t, std::complex<double>* acc1, std::complex<double>* acc2) {
    const std::size_t f = t / S;
    const std::size_t i = t % S;
    const double wgt = m.sources.intensities()[i] / static_cast<double>(F);
    const Buf& u2 = u2_store[t];
    Buf gs(N, C(0, 0));
    Buf b(N);
    for (std::size_t vk = 0; vk < V * K; ++vk) {
      const C* h = transfer[vk];
      const auto& R = rup[vk];
      for (std::size_t p = 0; p < N; ++p) b[p] = u2[p] * h[p];
      fft2_inplace(b, sim_, FftDirection::inverse);
      for (std::size_t p = 0; p < N; ++p) b[p] = to_real<Real>(to_double(b[p]) * (2.0 * wgt * R[p]));
      fft2_inplace(b, sim_, FftDirection::forward);
      for (std::size_t p = 0; p < N; ++p) gs[p] += std::conj(h[p]) * b[p];
    }
    fft2_inplace(gs, sim_, FftDirection::inverse);
    if (two) {
      const Buf& f2 = f2_store[t];
      for (std::size_t p = 0; p < N; ++p) {
        acc2[p] += std::conj(to_double(f2[p])) * to_double(gs[p]);
        gs[p] = std::conj(up2[f][p]) * gs[p];
      }
      fft2_inplace(gs, sim_, FftDirection::forward);
      apply_transfer<Real>(gs, *m.gap, true);
      fft2_inplace(gs, sim_, FftDirection::inverse);
    }
    plane_wave_times(i, gs, b, true);
    for (std::size_t p = 0; p < N; ++p) acc1[p] += to_double(b[p]);
  };

  std::vector<std::vector<std::complex<double>>> g1(F, std::vector<std::complex<double>>(N));
  std::vector<std::vector<std::complex<double>>> g2(two ? F : 0, std::vector<std::complex<double>>(N));
  if (thread_count() <= 1 || tasks == 1) {
    for (std::size_t t = 0; t < tasks; ++t) {
      backward_task(t, g1[t / S].data(), two ? g2[t / S].data() : nullptr);
      u2_store[t] = Buf();
      if (two) f2_store[t] = Buf();
    }
  } else {
    std::vector<std::vector<std::complex<double>>> p1(tasks);
    std::vector<std::vector<std::complex<double>>> p2(two ? tasks : 0);
    parallel_for(tasks, [&](std::size_t t) {
      p1[t].assign(N, {});
      if (two) p2[t].assign(N, {});
      backward_task(t, p1[t].data(), two ? p2[t].data() : nullptr);
    });
    for (std::size_t t = 0; t < tasks; ++t) {
      auto& a1 = g1[t / S];
      for (std::size_t p = 0; p < N; ++p) a1[p] += p1[t][p];
      if (two) {
        auto& a2 = g2[t / S];
        for (std::size_t p = 0; p < N; ++p) a2[p] += p2[t][p];
      }
    }
  }

  ev.gradients.resize(F);
  std::vector<std::complex<double>> small(slm_.size());
  for (std::size_t f = 0; f < F; ++f) {
    std::fill(small.begin(), small.end(), std::complex<double>{});
    block_sum_into<std::complex<double>>(g1[f], sim_, U, small);
    pattern_gradient(frames[f].first, small, ev.gradients[f].first_phase, ev.gradients[f].first_amplitude);
    if (two) {
      std::fill(small.begin(), small.end(), std::complex<double>{});
      block_sum_into<std::complex<double>>(g2[f], sim_, U, small);
      pattern_gradient(*frames[f].second, small, ev.gradients[f].second_phase, ev.gradients[f].second_amplitude);
    }
  }
  return ev;
}

template class HologramModel<double>;
template class HologramModel<float>;

// ---------------------------------------------------------------------------

double loss_l2(const std::vector<IntensityImage>& predicted, const std::vector<IntensityImage>& target,
               const std::vector<double>& weights) {
  if (predicted.size() != target.size()) throw ShapeMismatch("loss_l2: plane counts differ");
  if (!weights.empty() && weights.size() != predicted.size()) throw ShapeMismatch("loss_l2: weight count differs");
  double total = 0.0;
  for (std::size_t k = 0; k < predicted.size(); ++k) {
    require_same_shape(predicted[k].shape(), target[k].shape(), "loss_l2");
    double part = 0.0;
    const auto a = predicted[k].data();
    const auto b = target[k].data();
    for (std::size_t p = 0; p < a.size(); ++p) {
      const double d = a[p] - b[p];
      part += d * d;
    }
    total += (weights.empty() ? 1.0 : weights[k]) * part;
  }
  return total;
}

GradientBundle gradients(const std::vector<FramePatterns>& frames, const SourceArray& sources,
                         const SystemConfig& config, double wavelength, const FocalStackTarget& target,
                         const std::vector<double>& weights, LossScale scale) {
  target.validate();
  HologramModel<double> model(config, sources, wavelength, target.planes, frames.front().first.shape());
  LossSpec ls{&target.images, weights, scale, true};
  Evaluation ev = model.evaluate(frames, {}, &ls);
  return {ev.loss, ev.scale, std::move(ev.gradients)};
}

void OptimizeSpec::validate(std::size_t target_planes) const {
  if (iterations < 1) throw ConfigError("iterations must be >= 1");
  if (frames < 1) throw ConfigError("frames must be >= 1");
  if (!(adam.lr > 0.0) || !(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0) ||
      !(adam.eps > 0.0)) {
    throw ConfigError("invalid Adam settings");
  }
  for (int i : loss_planes) {
    if (i < 0 || static_cast<std::size_t>(i) >= target_planes) throw ConfigError("loss plane index out of range");
  }
  const std::size_t n = loss_planes.empty() ? target_planes : loss_planes.size();
  if (!plane_weights.empty()) {
    if (plane_weights.size() != n) throw ConfigError("plane weight count must match the loss planes");
    double sum = 0.0;
    for (double w : plane_weights) {
      if (!(w >= 0.0)) throw ConfigError("plane weights must be nonnegative");
      sum += w;
    }
    if (!(sum > 0.0)) throw ConfigError("plane weights must have a positive sum");
  }
  if (pupil.enabled && (pupil.count < 1 || !(pupil.radius > 0.0) || !(pupil.center_range >= 0.0))) {
    throw ConfigError("invalid pupil sampling settings");
  }
}

std::string OptimizeSpec::digest() const {
  std::ostringstream os;
  os << std::setprecision(17) << "it=" << iterations << ";lr=" << adam.lr << ";b1=" << adam.beta1
     << ";b2=" << adam.beta2 << ";eps=" << adam.eps << ";init=" << static_cast<int>(init) << ";frames=" << frames
     << ";seed=" << seed << ";scale=" << static_cast<int>(scale) << ";prec=" << precision_name(precision)
     << ";pupil=" << pupil.enabled << ',' << pupil.radius << ',' << pupil.center_range << ',' << pupil.count
     << ";planes=";
  for (int i : loss_planes) os << i << ',';
  os << ";weights=";
  for (double w : plane_weights) os << w << ',';
  // FNV-1a over the canonical text.
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : os.str()) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  std::ostringstream hex;
  hex << std::hex << std::setw(16) << std::setfill('0') << h;
  return hex.str();
}

std::vector<FramePatterns> initial_frames(int count, Modulation first, std::optional<Modulation> second, Shape shape,
                                          double pitch, InitKind init, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<FramePatterns> out;
  for (int f = 0; f < count; ++f) {
    SlmPattern a = initial_pattern(first, shape, pitch, init, rng);
    std::optional<SlmPattern> b;
    if (second) b = initial_pattern(*second, shape, pitch, init, rng);
    out.push_back({std::move(a), std::move(b)});
  }
  return out;
}

namespace {

std::vector<View> sample_views(const PupilSampling& ps, std::mt19937_64& rng, Shape sim, double sim_pitch,
                               double wavelength, double focal) {
  if (!ps.enabled) return {};
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::vector<View> views;
  for (int j = 0; j < ps.count; ++j) {
    const double rho = ps.center_range * std::sqrt(uni(rng));
    const double theta = 2.0 * std::numbers::pi * uni(rng);
    Pupil pupil{{rho * std::cos(theta), rho * std::sin(theta)}, ps.radius};
    views.push_back({pupil_mask(sim, sim_pitch, wavelength, focal, pupil)});
  }
  return views;
}

void step_pattern(SlmPattern& pat, std::vector<double>& g_phase, std::vector<double>& g_amp, AdamState& phase_state,
                  AdamState& amp_state, const AdamSettings& adam) {
  if (pat.modulation() != Modulation::amplitude_only) adam_step(pat.phase(), g_phase, phase_state, adam);
  if (pat.modulation() != Modulation::phase_only) adam_step(pat.amplitude(), g_amp, amp_state, adam);
  pat = project_constraints(pat);
}

template <typename Real>
OptimizeResult run_optimization(std::vector<FramePatterns> frames, const SourceArray& sources,
                                const SystemConfig& config, double wavelength, const FocalStackTarget& loss_target,
                                const FocalStackTarget& full_target, const OptimizeSpec& spec,
                                const ProgressFn& progress, const std::vector<AdamState>* resume) {
  const Shape shape = frames.front().first.shape();
  HologramModel<Real> model(config, sources, wavelength, loss_target.planes, shape);
  std::mt19937_64 pupil_rng(spec.seed ^ 0x9e3779b97f4a7c15ULL);
  OptimizeResult res;
  res.adam.assign(4 * frames.size(), {});
  if (resume != nullptr) {
    if (resume->size() != res.adam.size()) throw ConfigError("resume state does not match the frame count");
    res.adam = *resume;
  }
  const LossSpec ls{&loss_target.images, spec.plane_weights, spec.scale, true};
  const auto t0 = std::chrono::steady_clock::now();
  auto seconds = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };
  double last_finite = std::numeric_limits<double>::quiet_NaN();
  auto record = [&](int it, const Evaluation& ev) {
    if (!std::isfinite(ev.loss)) {
      std::ostringstream os;
      os << "loss became non-finite at iteration " << it << " (last finite loss " << last_finite << ")";
      throw DivergenceError(os.str());
    }
    last_finite = ev.loss;
    LossRecord rec{it, ev.loss, ev.scale, seconds()};
    res.history.push_back(rec);
    if (progress) progress(rec);
  };

  for (int it = 0; it < spec.iterations; ++it) {
    const auto views =
        sample_views(spec.pupil, pupil_rng, model.sim_shape(), model.sim_pitch(), wavelength, config.eyepiece_focal);
    Evaluation ev = model.evaluate(frames, views, &ls);
    record(it, ev);
    for (std::size_t f = 0; f < frames.size(); ++f) {
      auto& g = ev.gradients[f];
      step_pattern(frames[f].first, g.first_phase, g.first_amplitude, res.adam[4 * f], res.adam[4 * f + 1], spec.adam);
      if (frames[f].second) {
        step_pattern(*frames[f].second, g.second_phase, g.second_amplitude, res.adam[4 * f + 2], res.adam[4 * f + 3],
                     spec.adam);
      }
    }
  }
  {
    const LossSpec final_ls{&loss_target.images, spec.plane_weights, spec.scale, false};
    const auto views =
        sample_views(spec.pupil, pupil_rng, model.sim_shape(), model.sim_pitch(), wavelength, config.eyepiece_focal);
    record(spec.iterations, model.evaluate(frames, views, &final_ls));
  }

  // Open-pupil prediction on every target plane with the scale fitted on the
  // loss planes.
  const LossSpec open_ls{&loss_target.images, spec.plane_weights, spec.scale, false};
  res.scale = model.evaluate(frames, {}, &open_ls).scale;
  HologramModel<Real> full(config, sources, wavelength, full_target.planes, shape);
  res.predicted = scaled(full.evaluate(frames, {}, nullptr).intensity.front(), res.scale);
  res.frames = std::move(frames);
  return res;
}

}  // namespace

OptimizeResult optimize_frames(std::vector<FramePatterns> init, const SourceArray& sources,
                               const SystemConfig& config, double wavelength, const FocalStackTarget& target,
                               const OptimizeSpec& spec, const ProgressFn& progress,
                               const std::vector<AdamState>* resume) {
  target.validate();
  spec.validate(target.size());
  if (init.empty()) throw ConfigError("no initial frames");
  if (static_cast<int>(init.size()) != spec.frames) throw ConfigError("initial frame count differs from spec.frames");
  require_same_shape(init.front().first.shape(), target.shape(), "SLM grid vs target");
  for (auto& fp : init) {
    fp.first = project_constraints(fp.first);
    if (fp.second) fp.second = project_constraints(*fp.second);
  }
  const FocalStackTarget loss_target = spec.loss_planes.empty() ? target : target.subset(spec.loss_planes);
  if (spec.precision == Precision::f32) {
    return run_optimization<float>(std::move(init), sources, config, wavelength, loss_target, target, spec, progress,
                                   resume);
  }
  return run_optimization<double>(std::move(init), sources, config, wavelength, loss_target, target, spec, progress,
                                  resume);
}

OptimizeResult optimize(const SlmPattern& s1, const std::optional<SlmPattern>& s2, const SourceArray& sources,
                        const SystemConfig& config, double wavelength, const FocalStackTarget& target,
                        const OptimizeSpec& spec, const ProgressFn& progress) {
  if (spec.frames != 1) throw ConfigError("optimize takes one frame; use optimize_temporal_multiplex for more");
  return optimize_frames({FramePatterns{s1, s2}}, sources, config, wavelength, target, spec, progress);
}

OptimizeResult optimize_temporal_multiplex(std::vector<SlmPattern> frames, const SystemConfig& config,
                                           double wavelength, const FocalStackTarget& target, const OptimizeSpec& spec,
                                           const ProgressFn& progress) {
  if (frames.empty()) throw ConfigError("temporal multiplexing needs at least one frame");
  std::vector<FramePatterns> init;
  for (auto& p : frames) {
    if (p.modulation() != Modulation::phase_only) throw ConfigError("temporal multiplexing uses phase-only frames");
    init.push_back({std::move(p), std::nullopt});
  }
  OptimizeSpec s = spec;
  s.frames = static_cast<int>(init.size());
  return optimize_frames(std::move(init), SourceArray::on_axis(), config, wavelength, target, s, progress);
}

std::vector<IntensityImage> predict_stack(const std::vector<FramePatterns>& frames, const SourceArray& sources,
                                          const SystemConfig& config, double wavelength,
                                          const std::vector<double>& planes, Precision precision, const View& view) {
  if (frames.empty()) throw DomainError("no frames to render");
  const std::vector<View> views = view.mask.empty() ? std::vector<View>{} : std::vector<View>{view};
  const Shape shape = frames.front().first.shape();
  if (precision == Precision::f32) {
    return HologramModel<float>(config, sources, wavelength, planes, shape).evaluate(frames, views, nullptr)
        .intensity.front();
  }
  return HologramModel<double>(config, sources, wavelength, planes, shape).evaluate(frames, views, nullptr)
      .intensity.front();
}

double fit_scale(const std::vector<IntensityImage>& predicted, const std::vector<IntensityImage>& target) {
  if (predicted.size() != target.size()) throw ShapeMismatch("fit_scale: plane counts differ");
  double num = 0.0;
  double den = 0.0;
  for (std::size_t k = 0; k < predicted.size(); ++k) {
    require_same_shape(predicted[k].shape(), target[k].shape(), "fit_scale");
    for (std::size_t p = 0; p < predicted[k].size(); ++p) {
      num += predicted[k].data()[p] * target[k].data()[p];
      den += predicted[k].data()[p] * predicted[k].data()[p];
    }
  }
  return den > 0.0 ? num / den : 1.0;
}

std::vector<IntensityImage> scaled(const std::vector<IntensityImage>& images, double s) {
  if (!(s >= 0.0)) throw DomainError("intensity scale must be nonnegative");
  std::vector<IntensityImage> out;
  for (const auto& im : images) {
    std::vector<double> v(im.data().begin(), im.data().end());
    for (double& x : v) x *= s;
    out.emplace_back(im.shape(), im.pitch(), std::move(v));
  }
  return out;
}

void write_history_csv(const std::filesystem::path& path, const std::vector<LossRecord>& history) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "iteration,loss,scale\n" << std::setprecision(17);
  for (const auto& r : history) out << r.iteration << ',' << r.loss << ',' << r.scale << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

namespace {

const char* kSlotNames[4] = {"first.phase", "first.amplitude", "second.phase", "second.amplitude"};

std::vector<std::uint64_t> dims(Shape s) {
  return {static_cast<std::uint64_t>(s.rows), static_cast<std::uint64_t>(s.cols)};
}

}  // namespace

void write_checkpoint(const std::filesystem::path& directory, const OptimizeResult& result, const OptimizeSpec& spec) {
  if (result.frames.empty()) throw DomainError("nothing to checkpoint");
  TensorBundle b;
  const Shape shape = result.frames.front().first.shape();
  const bool two = result.frames.front().second.has_value();
  b.metadata["kind"] = "optimizer-checkpoint";
  b.metadata["spec_digest"] = spec.digest();
  b.metadata["frames"] = std::to_string(result.frames.size());
  b.metadata["iteration"] = std::to_string(result.history.empty() ? 0 : result.history.back().iteration);
  b.metadata["first.modulation"] = modulation_name(result.frames.front().first.modulation());
  if (two) b.metadata["second.modulation"] = modulation_name(result.frames.front().second->modulation());
  {
    std::ostringstream os;
    os << std::setprecision(17) << result.frames.front().first.pitch();
    b.metadata["pitch"] = os.str();
  }
  for (std::size_t f = 0; f < result.frames.size(); ++f) {
    const std::string pre = "frame" + std::to_string(f) + ".";
    const auto& fp = result.frames[f];
    b.tensors[pre + kSlotNames[0]] = Tensor::from_reals(fp.first.phase(), dims(shape));
    b.tensors[pre + kSlotNames[1]] = Tensor::from_reals(fp.first.amplitude(), dims(shape));
    if (two) {
      b.tensors[pre + kSlotNames[2]] = Tensor::from_reals(fp.second->phase(), dims(shape));
      b.tensors[pre + kSlotNames[3]] = Tensor::from_reals(fp.second->amplitude(), dims(shape));
    }
    for (int slot = 0; slot < 4; ++slot) {
      if (4 * f + slot >= result.adam.size()) break;
      const auto& st = result.adam[4 * f + slot];
      if (st.m.empty()) continue;
      const std::string ap = "adam" + std::to_string(f) + "." + kSlotNames[slot];
      b.tensors[ap + ".m"] = Tensor::from_reals(st.m, dims(shape));
      b.tensors[ap + ".v"] = Tensor::from_reals(st.v, dims(shape));
      b.metadata[ap + ".step"] = std::to_string(st.step);
    }
  }
  write_bundle(directory, b);
}

Checkpoint read_checkpoint(const std::filesystem::path& directory) {
  const TensorBundle b = read_bundle(directory);
  auto meta = [&](const std::string& key) -> const std::string& {
    auto it = b.metadata.find(key);
    if (it == b.metadata.end()) throw FormatError("checkpoint is missing metadata '" + key + "'");
    return it->second;
  };
  if (meta("kind") != "optimizer-checkpoint") throw FormatError("not an optimizer checkpoint");
  Checkpoint cp;
  cp.spec_digest = meta("spec_digest");
  cp.iteration = std::stoi(meta("iteration"));
  const int frames = std::stoi(meta("frames"));
  const double pitch = std::stod(meta("pitch"));
  const Modulation m1 = parse_modulation(meta("first.modulation"));
  const bool two = b.metadata.count("second.modulation") > 0;
  const Modulation m2 = two ? parse_modulation(meta("second.modulation")) : Modulation::phase_only;
  for (int f = 0; f < frames; ++f) {
    const std::string pre = "frame" + std::to_string(f) + ".";
    const Tensor& ph = b.at(pre + kSlotNames[0]);
    if (ph.shape.size() != 2) throw FormatError("checkpoint pattern must be rank 2");
    const Shape shape{static_cast<int>(ph.shape[0]), static_cast<int>(ph.shape[1])};
    SlmPattern first(m1, shape, pitch, ph.to_reals(), b.at(pre + kSlotNames[1]).to_reals());
    std::optional<SlmPattern> second;
    if (two) {
      second = SlmPattern(m2, shape, pitch, b.at(pre + kSlotNames[2]).to_reals(),
                          b.at(pre + kSlotNames[3]).to_reals());
    }
    cp.frames.push_back({std::move(first), std::move(second)});
    for (int slot = 0; slot < 4; ++slot) {
      const std::string ap = "adam" + std::to_string(f) + "." + kSlotNames[slot];
      AdamState st;
      if (b.tensors.count(ap + ".m") > 0) {
        st.m = b.at(ap + ".m").to_reals();
        st.v = b.at(ap + ".v").to_reals();
        st.step = std::stol(meta(ap + ".step"));
      }
      cp.adam.push_back(std::move(st));
    }
  }
  return cp;
}

}  // namespace msholo
