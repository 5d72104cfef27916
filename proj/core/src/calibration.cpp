#include "msholo/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <numbers>

#include "msholo/fft.hpp"
#include "msholo/parallel.hpp"
#include "msholo/propagation.hpp"

namespace msholo {

using cd = std::complex<double>;
using CVec = AlignedVector<cd>;

std::vector<double> linear_lut() {
  std::vector<double> lut(kLutSize);
  for (int k = 0; k < kLutSize; ++k) lut[k] = 2.0 * std::numbers::pi * k / kLutSize;
  return lut;
}

namespace {

inline void lut_taps(double d, int& k0, double& t) {
  if (!(d >= 0.0 && d <= kLutSize - 1)) throw DomainError("digital value outside [0, 255]");
  k0 = std::min(static_cast<int>(d), kLutSize - 2);
  t = d - k0;
}

void check_lut(std::span<const double> lut) {
  if (lut.size() != static_cast<std::size_t>(kLutSize)) throw ShapeMismatch("LUT must have 256 entries");
}

}  // namespace

std::vector<double> apply_lut(std::span<const double> digital, std::span<const double> lut) {
  check_lut(lut);
  std::vector<double> out(digital.size());
  for (std::size_t i = 0; i < digital.size(); ++i) {
    int k0;
    double t;
    lut_taps(digital[i], k0, t);
    out[i] = (1.0 - t) * lut[k0] + t * lut[k0 + 1];
  }
  return out;
}

void apply_lut_adjoint(std::span<const double> digital, std::span<const double> lut, std::span<const double> g_phase,
                       std::span<double> g_lut, std::span<double> g_digital) {
  check_lut(lut);
  if (g_phase.size() != digital.size()) throw ShapeMismatch("LUT adjoint: gradient size differs from input");
  if (!g_lut.empty() && g_lut.size() != lut.size()) throw ShapeMismatch("LUT adjoint: table gradient size");
  if (!g_digital.empty() && g_digital.size() != digital.size()) throw ShapeMismatch("LUT adjoint: input gradient size");
  for (std::size_t i = 0; i < digital.size(); ++i) {
    int k0;
    double t;
    lut_taps(digital[i], k0, t);
    if (!g_lut.empty()) {
      g_lut[k0] += (1.0 - t) * g_phase[i];
      g_lut[k0 + 1] += t * g_phase[i];
    }
    if (!g_digital.empty()) g_digital[i] += g_phase[i] * (lut[k0 + 1] - lut[k0]);
  }
}

std::vector<double> delta_kernel() {
  std::vector<double> k(kFringingSize * kFringingSize, 0.0);
  k[k.size() / 2] = 1.0;
  return k;
}

namespace {

constexpr int kHalf = kFringingSize / 2;

void check_fringing(std::size_t n, Shape shape, std::size_t kernel) {
  if (n != shape.size()) throw ShapeMismatch("fringing input does not match its shape");
  if (kernel != static_cast<std::size_t>(kFringingSize * kFringingSize)) {
    throw ShapeMismatch("fringing kernel must be 5 x 5");
  }
}

}  // namespace

std::vector<double> apply_fringing(std::span<const double> phase, Shape s, std::span<const double> kernel) {
  check_fringing(phase.size(), s, kernel.size());
  std::vector<double> out(phase.size(), 0.0);
  for (int r = 0; r < s.rows; ++r) {
    for (int c = 0; c < s.cols; ++c) {
      double acc = 0.0;
      for (int a = -kHalf; a <= kHalf; ++a) {
        const int rr = std::clamp(r + a, 0, s.rows - 1);
        for (int b = -kHalf; b <= kHalf; ++b) {
          const int cc = std::clamp(c + b, 0, s.cols - 1);
          acc += kernel[(a + kHalf) * kFringingSize + (b + kHalf)] * phase[static_cast<std::size_t>(rr) * s.cols + cc];
        }
      }
      out[static_cast<std::size_t>(r) * s.cols + c] = acc;
    }
  }
  return out;
}

void apply_fringing_adjoint(std::span<const double> phase, Shape s, std::span<const double> kernel,
                            std::span<const double> g_out, std::span<double> g_phase, std::span<double> g_kernel) {
  check_fringing(phase.size(), s, kernel.size());
  if (g_out.size() != phase.size()) throw ShapeMismatch("fringing adjoint: gradient size");
  for (int r = 0; r < s.rows; ++r) {
    for (int c = 0; c < s.cols; ++c) {
      const double g = g_out[static_cast<std::size_t>(r) * s.cols + c];
      if (g == 0.0) continue;
      for (int a = -kHalf; a <= kHalf; ++a) {
        const int rr = std::clamp(r + a, 0, s.rows - 1);
        for (int b = -kHalf; b <= kHalf; ++b) {
          const int cc = std::clamp(c + b, 0, s.cols - 1);
          const std::size_t q = static_cast<std::size_t>(rr) * s.cols + cc;
          const int kk = (a + kHalf) * kFringingSize + (b + kHalf);
          if (!g_phase.empty()) g_phase[q] += kernel[kk] * g;
          if (!g_kernel.empty()) g_kernel[kk] += phase[q] * g;
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Pupils

PupilGrid PupilGrid::unit(int node_rows, int node_cols, int freq_size) {
  PupilGrid g;
  g.node_rows = node_rows;
  g.node_cols = node_cols;
  g.freq_size = freq_size;
  if (node_rows < 1 || node_cols < 1 || freq_size < 2) throw ConfigError("pupil grid dimensions too small");
  g.values.assign(static_cast<std::size_t>(node_rows) * node_cols * g.node_stride(), cd(1.0, 0.0));
  return g;
}

void PupilGrid::validate() const {
  if (node_rows < 1 || node_cols < 1 || freq_size < 2) throw ConfigError("pupil grid dimensions too small");
  if (values.size() != static_cast<std::size_t>(node_rows) * node_cols * node_stride()) {
    throw ShapeMismatch("pupil grid value count does not match its dimensions");
  }
  for (const cd& v : values) {
    if (!std::isfinite(v.real()) || !std::isfinite(v.imag())) throw DomainError("pupil value is not finite");
  }
}

bool PupilGrid::is_unit() const {
  return std::all_of(values.begin(), values.end(), [](const cd& v) { return v == cd(1.0, 0.0); });
}

namespace {

void axis_taps(int n, int k, std::vector<int>& idx, std::vector<double>& w) {
  idx.resize(n);
  w.resize(n);
  for (int i = 0; i < n; ++i) {
    const double nu = static_cast<double>(FrequencyGrid::bin(i, n)) / n;
    const double coord = (nu + 0.5) * (k - 1);
    const int i0 = std::min(static_cast<int>(std::floor(coord)), k - 2);
    idx[i] = i0;
    w[i] = coord - i0;
  }
}

struct NodeTaps {
  int r0, r1, c0, c1;
  double tr, tc;
};

NodeTaps node_taps(const PupilGrid& p, Vec2 center) {
  const double eps = 1e-9;
  if (!(center.x >= -eps && center.x <= p.node_cols - 1 + eps && center.y >= -eps &&
        center.y <= p.node_rows - 1 + eps)) {
    throw DomainError("patch center outside the pupil grid");
  }
  NodeTaps t{};
  auto axis = [](double x, int n, int& a, int& b, double& f) {
    if (n == 1) {
      a = b = 0;
      f = 0.0;
      return;
    }
    x = std::clamp(x, 0.0, static_cast<double>(n - 1));
    a = std::min(static_cast<int>(std::floor(x)), n - 2);
    b = a + 1;
    f = x - a;
  };
  axis(center.y, p.node_rows, t.r0, t.r1, t.tr);
  axis(center.x, p.node_cols, t.c0, t.c1, t.tc);
  return t;
}

}  // namespace

PupilSampler::PupilSampler(Shape grid, int freq_size) : grid_(grid), freq_size_(freq_size) {
  if (freq_size < 2) throw ConfigError("pupil frequency grid must be at least 2 x 2");
  axis_taps(grid.cols, freq_size, ix_, wx_);
  axis_taps(grid.rows, freq_size, iy_, wy_);
}

std::vector<cd> PupilSampler::evaluate(const PupilGrid& pupils, Vec2 center) const {
  if (pupils.freq_size != freq_size_) throw ShapeMismatch("pupil sampler built for another frequency grid");
  const NodeTaps t = node_taps(pupils, center);
  const std::size_t K = static_cast<std::size_t>(freq_size_);
  const std::size_t stride = pupils.node_stride();
  auto node = [&](int r, int c) { return &pupils.values[(static_cast<std::size_t>(r) * pupils.node_cols + c) * stride]; };
  std::vector<cd> q(stride);
  const cd* n00 = node(t.r0, t.c0);
  const cd* n01 = node(t.r0, t.c1);
  const cd* n10 = node(t.r1, t.c0);
  const cd* n11 = node(t.r1, t.c1);
  for (std::size_t i = 0; i < stride; ++i) {
    q[i] = (1.0 - t.tr) * ((1.0 - t.tc) * n00[i] + t.tc * n01[i]) + t.tr * ((1.0 - t.tc) * n10[i] + t.tc * n11[i]);
  }
  std::vector<cd> out(grid_.size());
  for (int r = 0; r < grid_.rows; ++r) {
    const std::size_t y0 = static_cast<std::size_t>(iy_[r]);
    const double fy = wy_[r];
    for (int c = 0; c < grid_.cols; ++c) {
      const std::size_t x0 = static_cast<std::size_t>(ix_[c]);
      const double fx = wx_[c];
      out[static_cast<std::size_t>(r) * grid_.cols + c] =
          (1.0 - fy) * ((1.0 - fx) * q[y0 * K + x0] + fx * q[y0 * K + x0 + 1]) +
          fy * ((1.0 - fx) * q[(y0 + 1) * K + x0] + fx * q[(y0 + 1) * K + x0 + 1]);
    }
  }
  return out;
}

void PupilSampler::adjoint(const PupilGrid& pupils, Vec2 center, std::span<const cd> g_pupil,
                           std::span<cd> g_values) const {
  if (g_pupil.size() != grid_.size()) throw ShapeMismatch("pupil adjoint: gradient does not match grid");
  if (g_values.size() != pupils.values.size()) throw ShapeMismatch("pupil adjoint: value gradient size");
  const NodeTaps t = node_taps(pupils, center);
  const std::size_t K = static_cast<std::size_t>(freq_size_);
  const std::size_t stride = pupils.node_stride();
  std::vector<cd> gq(stride);
  for (int r = 0; r < grid_.rows; ++r) {
    const std::size_t y0 = static_cast<std::size_t>(iy_[r]);
    const double fy = wy_[r];
    for (int c = 0; c < grid_.cols; ++c) {
      const std::size_t x0 = static_cast<std::size_t>(ix_[c]);
      const double fx = wx_[c];
      const cd g = g_pupil[static_cast<std::size_t>(r) * grid_.cols + c];
      gq[y0 * K + x0] += ((1.0 - fy) * (1.0 - fx)) * g;
      gq[y0 * K + x0 + 1] += ((1.0 - fy) * fx) * g;
      gq[(y0 + 1) * K + x0] += (fy * (1.0 - fx)) * g;
      gq[(y0 + 1) * K + x0 + 1] += (fy * fx) * g;
    }
  }
  auto add = [&](int r, int c, double w) {
    if (w == 0.0) return;
    cd* dst = &g_values[(static_cast<std::size_t>(r) * pupils.node_cols + c) * stride];
    for (std::size_t i = 0; i < stride; ++i) dst[i] += w * gq[i];
  };
  if (t.r0 == t.r1 && t.c0 == t.c1) {
    add(t.r0, t.c0, 1.0);
  } else if (t.r0 == t.r1) {
    add(t.r0, t.c0, 1.0 - t.tc);
    add(t.r0, t.c1, t.tc);
  } else if (t.c0 == t.c1) {
    add(t.r0, t.c0, 1.0 - t.tr);
    add(t.r1, t.c0, t.tr);
  } else {
    add(t.r0, t.c0, (1.0 - t.tr) * (1.0 - t.tc));
    add(t.r0, t.c1, (1.0 - t.tr) * t.tc);
    add(t.r1, t.c0, t.tr * (1.0 - t.tc));
    add(t.r1, t.c1, t.tr * t.tc);
  }
}

ComplexField2D apply_pupil_grid(const ComplexField2D& spectrum, const PupilGrid& pupils, Vec2 patch_center) {
  pupils.validate();
  const auto p = PupilSampler(spectrum.shape(), pupils.freq_size).evaluate(pupils, patch_center);
  ComplexField2D out = spectrum;
  auto d = out.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] *= p[i];
  return out;
}

void TileLayout::bounds(Shape grid, int tile, int& r0, int& r1, int& c0, int& c1) const {
  if (tile < 0 || tile >= count()) throw DomainError("tile index out of range");
  const int tr = tile / cols;
  const int tc = tile % cols;
  r0 = tr * grid.rows / rows;
  r1 = (tr + 1) * grid.rows / rows;
  c0 = tc * grid.cols / cols;
  c1 = (tc + 1) * grid.cols / cols;
}

Vec2 TileLayout::center(Shape grid, int tile, const PupilGrid& pupils) const {
  int r0, r1, c0, c1;
  bounds(grid, tile, r0, r1, c0, c1);
  const double sx = 0.5 * (c0 + c1) / grid.cols;
  const double sy = 0.5 * (r0 + r1) / grid.rows;
  return {sx * (pupils.node_cols - 1), sy * (pupils.node_rows - 1)};
}

namespace {

// Linear propagation with per-tile pupils:
//   out = F^-1{ H * sum_t P_t * F{in * 1_t} }   (dense)
//   out = F^-1{ H * T * P_s * F{in * 1_s} }      (patch s, T tiles)
class PupilPropagator {
 public:
  PupilPropagator(std::shared_ptr<const AsmKernel> kernel, const PupilGrid& pupils, const TileLayout& tiles,
                  const PupilSampler& sampler)
      : kernel_(std::move(kernel)), pupils_(pupils), tiles_(tiles), grid_(kernel_->shape) {
    for (int t = 0; t < tiles.count(); ++t) {
      centers_.push_back(tiles.center(grid_, t, pupils));
      pupil_.push_back(sampler.evaluate(pupils, centers_.back()));
    }
  }

  const Vec2& center(int t) const { return centers_[t]; }

  void forward(std::span<const cd> in, std::span<cd> out, std::optional<int> patch) const {
    const std::size_t N = grid_.size();
    const auto& H = kernel_->transfer;
    if (tiles_.count() == 1) {
      std::copy(in.begin(), in.end(), out.begin());
      fft2_inplace(out, grid_, FftDirection::forward);
      for (std::size_t p = 0; p < N; ++p) out[p] *= H[p] * pupil_[0][p];
      fft2_inplace(out, grid_, FftDirection::inverse);
      return;
    }
    CVec acc(N, cd{});
    CVec x(N);
    for (int t = 0; t < tiles_.count(); ++t) {
      if (patch && *patch != t) continue;
      masked(in, t, x);
      fft2_inplace(x, grid_, FftDirection::forward);
      const double w = patch ? static_cast<double>(tiles_.count()) : 1.0;
      for (std::size_t p = 0; p < N; ++p) acc[p] += (w * H[p]) * pupil_[t][p] * x[p];
    }
    fft2_inplace(acc, grid_, FftDirection::inverse);
    std::copy(acc.begin(), acc.end(), out.begin());
  }

  // g_in += adjoint(g_out); pupil gradients land in g_pupil when non-empty.
  void adjoint(std::span<const cd> in, std::span<const cd> g_out, std::span<cd> g_in, const PupilSampler& sampler,
               std::span<cd> g_pupil, std::optional<int> patch) const {
    const std::size_t N = grid_.size();
    const auto& H = kernel_->transfer;
    CVec gy(g_out.begin(), g_out.end());
    fft2_inplace(gy, grid_, FftDirection::forward);
    CVec x(N);
    CVec tmp(N);
    std::vector<cd> gp;
    for (int t = 0; t < tiles_.count(); ++t) {
      if (patch && *patch != t) continue;
      const double w = (patch && tiles_.count() > 1) ? static_cast<double>(tiles_.count()) : 1.0;
      if (!g_pupil.empty()) {
        if (tiles_.count() == 1) {
          std::copy(in.begin(), in.end(), x.begin());
        } else {
          masked(in, t, x);
        }
        fft2_inplace(x, grid_, FftDirection::forward);
        gp.assign(N, cd{});
        for (std::size_t p = 0; p < N; ++p) gp[p] = std::conj(w * H[p] * x[p]) * gy[p];
        sampler.adjoint(pupils_, centers_[t], gp, g_pupil);
      }
      for (std::size_t p = 0; p < N; ++p) tmp[p] = std::conj(w * H[p] * pupil_[t][p]) * gy[p];
      fft2_inplace(tmp, grid_, FftDirection::inverse);
      if (tiles_.count() == 1) {
        for (std::size_t p = 0; p < N; ++p) g_in[p] += tmp[p];
      } else {
        int r0, r1, c0, c1;
        tiles_.bounds(grid_, t, r0, r1, c0, c1);
        for (int r = r0; r < r1; ++r) {
          for (int c = c0; c < c1; ++c) {
            const std::size_t p = static_cast<std::size_t>(r) * grid_.cols + c;
            g_in[p] += tmp[p];
          }
        }
      }
    }
  }

 private:
  void masked(std::span<const cd> in, int t, CVec& x) const {
    std::fill(x.begin(), x.end(), cd{});
    int r0, r1, c0, c1;
    tiles_.bounds(grid_, t, r0, r1, c0, c1);
    for (int r = r0; r < r1; ++r) {
      for (int c = c0; c < c1; ++c) {
        const std::size_t p = static_cast<std::size_t>(r) * grid_.cols + c;
        x[p] = in[p];
      }
    }
  }

  std::shared_ptr<const AsmKernel> kernel_;
  const PupilGrid& pupils_;
  TileLayout tiles_;
  Shape grid_;
  std::vector<Vec2> centers_;
  std::vector<std::vector<cd>> pupil_;
};

void check_patch(const TileLayout& tiles, std::optional<int> patch) {
  if (tiles.rows < 1 || tiles.cols < 1) throw ConfigError("tile layout must be at least 1 x 1");
  if (patch && (*patch < 0 || *patch >= tiles.count())) throw DomainError("patch index out of range");
}

}  // namespace

ComplexField2D propagate_with_pupils(const ComplexField2D& field, double z, const PupilGrid& pupils,
                                     const TileLayout& tiles, std::optional<int> patch, BandLimit band_limit) {
  pupils.validate();
  check_patch(tiles, patch);
  const PupilSampler sampler(field.shape(), pupils.freq_size);
  const PupilPropagator prop(cached_kernel<double>(field.shape(), field.pitch(), field.wavelength(), z, band_limit),
                             pupils, tiles, sampler);
  ComplexField2D out(field.shape(), field.pitch(), field.wavelength());
  prop.forward(field.data(), out.data(), patch);
  return out;
}

// ---------------------------------------------------------------------------
// Model

CalibModel CalibModel::identity(const SystemConfig& config, Shape slm_shape, const SourceArray& multisource,
                                double wavelength) {
  return identity(config, slm_shape, multisource, wavelength, Options{});
}

CalibModel CalibModel::identity(const SystemConfig& config, Shape slm_shape, const SourceArray& multisource,
                                double wavelength, const Options& o) {
  CalibModel m;
  m.slm_shape = slm_shape;
  m.pitch = config.pitch;
  m.upsample = config.upsample;
  m.wavelength = wavelength;
  m.gap = config.gap;
  m.band_limit = config.band_limit;
  for (auto& leg : m.pupil) leg = PupilGrid::unit(o.pupil_nodes_rows, o.pupil_nodes_cols, o.pupil_freq_size);
  m.tiles = {o.tile_rows, o.tile_cols};
  m.warp = TpsWarp::lattice(slm_shape, o.warp_lattice);
  m.camera = TpsWarp::lattice(slm_shape, o.warp_lattice);
  const Vec2 b = m.bin();
  m.sources.push_back({{0.0, 0.0}, 1.0});
  for (std::size_t i = 0; i < multisource.size(); ++i) {
    const Vec2 t = multisource.tilts()[i];
    m.sources.push_back({{t.x / b.x, t.y / b.y}, multisource.intensities()[i]});
  }
  m.validate();
  return m;
}

Vec2 CalibModel::bin() const {
  return {2.0 * std::numbers::pi / (slm_shape.cols * pitch), 2.0 * std::numbers::pi / (slm_shape.rows * pitch)};
}

std::vector<std::size_t> CalibModel::source_indices(int config_id) const {
  if (config_id == 0) return {0};
  if (config_id == 1) {
    if (sources.size() < 2) throw ConfigError("model has no multisource configuration");
    std::vector<std::size_t> idx;
    for (std::size_t i = 1; i < sources.size(); ++i) idx.push_back(i);
    return idx;
  }
  throw ConfigError("unknown source configuration id " + std::to_string(config_id));
}

SourceArray CalibModel::source_array(int config_id) const {
  const Vec2 b = bin();
  std::vector<Vec2> tilts;
  std::vector<double> w;
  for (std::size_t i : source_indices(config_id)) {
    tilts.push_back({sources[i].position.x * b.x, sources[i].position.y * b.y});
    w.push_back(sources[i].intensity);
  }
  return SourceArray(std::move(tilts), std::move(w));
}

void CalibModel::validate() const {
  if (slm_shape.rows < 2 || slm_shape.cols < 2) throw SizingError("calibration model needs at least a 2 x 2 SLM");
  if (!(pitch > 0.0) || !(wavelength > 0.0) || upsample < 1) throw ConfigError("invalid model optics");
  for (const auto& s : slm) {
    check_lut(s.lut);
    if (s.fringing.size() != static_cast<std::size_t>(kFringingSize * kFringingSize)) {
      throw ShapeMismatch("fringing kernel must be 5 x 5");
    }
    for (double v : s.lut) {
      if (!std::isfinite(v)) throw DomainError("LUT entry is not finite");
    }
    for (double v : s.fringing) {
      if (!std::isfinite(v)) throw DomainError("fringing entry is not finite");
    }
  }
  pupil[0].validate();
  pupil[1].validate();
  if (tiles.rows < 1 || tiles.cols < 1) throw ConfigError("tile layout must be at least 1 x 1");
  warp.validate(slm_shape);
  camera.validate(slm_shape);
  if (sources.empty()) throw ConfigError("model needs at least one source");
  for (const auto& s : sources) {
    if (!(s.intensity >= 0.0) || !std::isfinite(s.position.x) || !std::isfinite(s.position.y)) {
      throw DomainError("invalid source parameters");
    }
  }
}

void CaptureDataset::validate() const {
  if (records.empty()) throw ConfigError("capture dataset has no records");
  for (const auto& r : records) {
    if (r.slm1.size() != slm_shape.size() || r.slm2.size() != slm_shape.size()) {
      throw ShapeMismatch("capture record pattern does not match the dataset grid");
    }
    require_same_shape(r.capture.shape(), slm_shape, "capture vs dataset grid");
  }
}

// ---------------------------------------------------------------------------
// Engine

namespace {

struct Trace {
  std::vector<double> phi[2];
  std::vector<double> upphi[2];
  CVec s[2];
  std::vector<std::size_t> src;
  std::vector<CVec> pw, u0, a, b, g;
  std::vector<double> I;  // SLM resolution, before the camera warp
  std::vector<double> J;
};

class Engine {
 public:
  Engine(const CalibModel& m, unsigned groups)
      : m_(m),
        slm_(m.slm_shape),
        sim_(m.sim_shape()),
        U_(m.upsample),
        sp_(m.sim_pitch()),
        sampler_(sim_, m.pupil[0].freq_size),
        sampler1_(sim_, m.pupil[1].freq_size),
        gap_(cached_kernel<double>(sim_, sp_, m.wavelength, m.gap, m.band_limit), m.pupil[0], m.tiles, sampler_) {
    m.validate();
    if (!m.warp.is_identity() || (groups & kWarp)) {
      warp_basis_ = std::make_unique<TpsBasis>(m.warp.controls, sim_, U_);
      warp_disp_ = warp_basis_->displacement(m.warp.displacements);
    }
    if (!m.camera.is_identity() || (groups & kCamera)) {
      camera_basis_ = std::make_unique<TpsBasis>(m.camera.controls, slm_, 1);
      camera_disp_ = camera_basis_->displacement(m.camera.displacements);
    }
  }

  const PupilPropagator& image_leg(double z) {
    auto it = legs_.find(z);
    if (it == legs_.end()) {
      auto k = cached_kernel<double>(sim_, sp_, m_.wavelength, z, m_.band_limit);
      it = legs_.emplace(z, std::make_unique<PupilPropagator>(k, m_.pupil[1], m_.tiles, sampler1_)).first;
    }
    return *it->second;
  }

  // Engine is used from one thread; propagators for every plane are built
  // up front by prepare().
  void prepare(const std::vector<double>& planes) {
    for (double z : planes) image_leg(z);
  }

  void forward(Trace& tr, std::span<const double> d1, std::span<const double> d2, int config, double z,
               std::optional<int> patch, bool keep) const {
    if (d1.size() != slm_.size() || d2.size() != slm_.size()) throw ShapeMismatch("digital pattern size");
    const std::size_t N = sim_.size();
    const std::span<const double> d[2] = {d1, d2};
    for (int j = 0; j < 2; ++j) {
      tr.phi[j] = apply_lut(d[j], m_.slm[j].lut);
      tr.upphi[j].assign(N, 0.0);
      upsample_into<double>(tr.phi[j], slm_, U_, tr.upphi[j]);
      const auto psi = apply_fringing(tr.upphi[j], sim_, m_.slm[j].fringing);
      tr.s[j].resize(N);
      for (std::size_t p = 0; p < N; ++p) tr.s[j][p] = std::polar(1.0, psi[p]);
    }
    tr.src = m_.source_indices(config);
    const std::size_t S = tr.src.size();
    if (keep) {
      tr.pw.assign(S, {});
      tr.u0.assign(S, {});
      tr.a.assign(S, {});
      tr.b.assign(S, {});
      tr.g.assign(S, {});
    }
    const PupilPropagator& leg1 = *legs_.at(z);
    std::vector<double> iup(N, 0.0);
    const Vec2 bin = m_.bin();
    for (std::size_t k = 0; k < S; ++k) {
      const SourceParams& sp = m_.sources[tr.src[k]];
      const double mx = sp.position.x * bin.x;
      const double my = sp.position.y * bin.y;
      CVec pw(N);
      for (int r = 0; r < sim_.rows; ++r) {
        for (int c = 0; c < sim_.cols; ++c) {
          pw[static_cast<std::size_t>(r) * sim_.cols + c] = std::polar(1.0, mx * (c * sp_) + my * (r * sp_));
        }
      }
      CVec u0(N);
      for (std::size_t p = 0; p < N; ++p) u0[p] = pw[p] * tr.s[0][p];
      CVec a(N);
      gap_.forward(u0, a, patch);
      CVec b;
      if (warp_basis_) {
        b.assign(N, cd{});
        warp_bilinear<cd>(a, sim_, warp_disp_, b);
      } else {
        b = a;
      }
      CVec c(N);
      for (std::size_t p = 0; p < N; ++p) c[p] = b[p] * tr.s[1][p];
      CVec g(N);
      leg1.forward(c, g, patch);
      for (std::size_t p = 0; p < N; ++p) iup[p] += sp.intensity * std::norm(g[p]);
      if (keep) {
        tr.pw[k] = std::move(pw);
        tr.u0[k] = std::move(u0);
        tr.a[k] = std::move(a);
        tr.b[k] = std::move(b);
        tr.g[k] = std::move(g);
      }
    }
    tr.I.assign(slm_.size(), 0.0);
    block_sum_into<double>(iup, sim_, U_, tr.I);
    const double inv = 1.0 / (static_cast<double>(U_) * U_);
    for (double& v : tr.I) v *= inv;
    if (camera_basis_) {
      tr.J.assign(slm_.size(), 0.0);
      warp_bilinear<double>(tr.I, slm_, camera_disp_, tr.J);
    } else {
      tr.J = tr.I;
    }
  }

  void backward(const Trace& tr, std::span<const double> d1, std::span<const double> d2, double z,
                std::span<const double> dJ, unsigned groups, bool pattern_grad, std::optional<int> patch,
                CalibGradient& out) const {
    const std::size_t N = sim_.size();
    std::vector<double> dI(slm_.size(), 0.0);
    if (camera_basis_) {
      warp_bilinear_adjoint<double>(dJ, slm_, camera_disp_, dI);
      if (groups & kCamera) {
        std::vector<double> sx(slm_.size()), sy(slm_.size());
        warp_bilinear_slopes<double>(tr.I, slm_, camera_disp_, sx, sy);
        std::vector<Vec2> gp(slm_.size());
        for (std::size_t p = 0; p < gp.size(); ++p) gp[p] = {dJ[p] * sx[p], dJ[p] * sy[p]};
        const auto gc = camera_basis_->adjoint(gp);
        for (std::size_t i = 0; i < gc.size(); ++i) out.camera[i] = out.camera[i] + gc[i];
      }
    } else {
      std::copy(dJ.begin(), dJ.end(), dI.begin());
    }
    std::vector<double> R(N, 0.0);
    upsample_into<double>(dI, slm_, U_, R);
    const double inv = 1.0 / (static_cast<double>(U_) * U_);
    for (double& v : R) v *= inv;

    const PupilPropagator& leg1 = *legs_.at(z);
    const bool want_slm = (groups & (kLut | kFringing)) || pattern_grad;
    CVec gs[2] = {CVec(N, cd{}), CVec(N, cd{})};
    std::vector<Vec2> warp_pix;
    if (groups & kWarp) warp_pix.assign(N, Vec2{});
    const Vec2 bin = m_.bin();
    std::span<cd> gpup0 = (groups & kPupil) ? std::span<cd>(out.pupil[0]) : std::span<cd>();
    std::span<cd> gpup1 = (groups & kPupil) ? std::span<cd>(out.pupil[1]) : std::span<cd>();

    for (std::size_t k = 0; k < tr.src.size(); ++k) {
      const std::size_t i = tr.src[k];
      const double w = m_.sources[i].intensity;
      const CVec& g = tr.g[k];
      if (groups & kSourceIntensity) {
        double acc = 0.0;
        for (std::size_t p = 0; p < N; ++p) acc += R[p] * std::norm(g[p]);
        out.source_intensity[i] += acc;
      }
      CVec gg(N);
      for (std::size_t p = 0; p < N; ++p) gg[p] = (2.0 * w * R[p]) * g[p];
      CVec c(N);
      for (std::size_t p = 0; p < N; ++p) c[p] = tr.b[k][p] * tr.s[1][p];
      CVec gc(N, cd{});
      leg1.adjoint(c, gg, gc, sampler1_, gpup1, patch);
      CVec gb(N);
      for (std::size_t p = 0; p < N; ++p) {
        gs[1][p] += std::conj(tr.b[k][p]) * gc[p];
        gb[p] = std::conj(tr.s[1][p]) * gc[p];
      }
      CVec ga;
      if (warp_basis_) {
        ga.assign(N, cd{});
        warp_bilinear_adjoint<cd>(gb, sim_, warp_disp_, ga);
        if (groups & kWarp) {
          CVec sx(N), sy(N);
          warp_bilinear_slopes<cd>(tr.a[k], sim_, warp_disp_, sx, sy);
          for (std::size_t p = 0; p < N; ++p) {
            warp_pix[p].x += (std::conj(gb[p]) * sx[p]).real();
            warp_pix[p].y += (std::conj(gb[p]) * sy[p]).real();
          }
        }
      } else {
        ga = std::move(gb);
      }
      CVec gu(N, cd{});
      gap_.adjoint(tr.u0[k], ga, gu, sampler_, gpup0, patch);
      const CVec& pw = tr.pw[k];
      double dmx = 0.0;
      double dmy = 0.0;
      for (int r = 0; r < sim_.rows; ++r) {
        for (int cc = 0; cc < sim_.cols; ++cc) {
          const std::size_t p = static_cast<std::size_t>(r) * sim_.cols + cc;
          gs[0][p] += std::conj(pw[p]) * gu[p];
          if (groups & kSourcePosition) {
            const double im = (std::conj(tr.s[0][p]) * gu[p] * std::conj(pw[p])).imag();
            dmx += cc * sp_ * im;
            dmy += r * sp_ * im;
          }
        }
      }
      if (groups & kSourcePosition) {
        out.source_position[i].x += dmx * bin.x;
        out.source_position[i].y += dmy * bin.y;
      }
    }
    if (groups & kWarp) {
      const auto gw = warp_basis_->adjoint(warp_pix);
      for (std::size_t i = 0; i < gw.size(); ++i) out.warp[i] = out.warp[i] + gw[i];
    }
    if (!want_slm) return;
    const std::span<const double> d[2] = {d1, d2};
    std::vector<double>* gd[2] = {&out.slm1, &out.slm2};
    for (int j = 0; j < 2; ++j) {
      std::vector<double> dpsi(N);
      for (std::size_t p = 0; p < N; ++p) dpsi[p] = (gs[j][p] * std::conj(tr.s[j][p])).imag();
      std::vector<double> gup(N, 0.0);
      apply_fringing_adjoint(tr.upphi[j], sim_, m_.slm[j].fringing, dpsi, gup,
                             (groups & kFringing) ? std::span<double>(out.fringing[j]) : std::span<double>());
      std::vector<double> gphi(slm_.size(), 0.0);
      block_sum_into<double>(gup, sim_, U_, gphi);
      apply_lut_adjoint(d[j], m_.slm[j].lut, gphi,
                        (groups & kLut) ? std::span<double>(out.lut[j]) : std::span<double>(),
                        pattern_grad ? std::span<double>(*gd[j]) : std::span<double>());
    }
  }

 private:
  const CalibModel& m_;
  Shape slm_;
  Shape sim_;
  int U_;
  double sp_;
  PupilSampler sampler_;
  PupilSampler sampler1_;
  PupilPropagator gap_;
  std::map<double, std::unique_ptr<PupilPropagator>> legs_;
  std::unique_ptr<TpsBasis> warp_basis_;
  std::unique_ptr<TpsBasis> camera_basis_;
  std::vector<Vec2> warp_disp_;
  std::vector<Vec2> camera_disp_;
};

CalibGradient zero_gradient(const CalibModel& m, bool pattern_grad) {
  CalibGradient g;
  for (int j = 0; j < 2; ++j) {
    g.lut[j].assign(kLutSize, 0.0);
    g.fringing[j].assign(kFringingSize * kFringingSize, 0.0);
    g.pupil[j].assign(m.pupil[j].values.size(), cd{});
  }
  g.warp.assign(m.warp.controls.size(), Vec2{});
  g.camera.assign(m.camera.controls.size(), Vec2{});
  g.source_position.assign(m.sources.size(), Vec2{});
  g.source_intensity.assign(m.sources.size(), 0.0);
  if (pattern_grad) {
    g.slm1.assign(m.slm_shape.size(), 0.0);
    g.slm2.assign(m.slm_shape.size(), 0.0);
  }
  return g;
}

void accumulate(CalibGradient& into, const CalibGradient& from) {
  auto add = [](auto& a, const auto& b) {
    for (std::size_t i = 0; i < a.size() && i < b.size(); ++i) a[i] += b[i];
  };
  auto add_vec2 = [](std::vector<Vec2>& a, const std::vector<Vec2>& b) {
    for (std::size_t i = 0; i < a.size() && i < b.size(); ++i) a[i] = a[i] + b[i];
  };
  for (int j = 0; j < 2; ++j) {
    add(into.lut[j], from.lut[j]);
    add(into.fringing[j], from.fringing[j]);
    add(into.pupil[j], from.pupil[j]);
  }
  add_vec2(into.warp, from.warp);
  add_vec2(into.camera, from.camera);
  add_vec2(into.source_position, from.source_position);
  add(into.source_intensity, from.source_intensity);
  add(into.slm1, from.slm1);
  add(into.slm2, from.slm2);
}

}  // namespace

IntensityImage calibrated_forward(std::span<const double> slm1, std::span<const double> slm2, const CalibModel& model,
                                  int config_id, double z) {
  Engine e(model, 0);
  e.prepare({z});
  Trace tr;
  e.forward(tr, slm1, slm2, config_id, z, std::nullopt, false);
  return IntensityImage(model.slm_shape, model.pitch, std::move(tr.J));
}

CalibEvaluation evaluate_calibration(const CalibModel& model, const std::vector<CaptureRecord>& records,
                                     unsigned groups, std::optional<int> patch) {
  if (records.empty()) throw ConfigError("no records to evaluate");
  check_patch(model.tiles, patch);
  Engine e(model, groups);
  std::vector<double> planes;
  for (const auto& r : records) planes.push_back(r.z);
  e.prepare(planes);
  const double inv_r = 1.0 / static_cast<double>(records.size());
  std::vector<double> part_loss(records.size(), 0.0);
  std::vector<CalibGradient> part(records.size());
  auto task = [&](std::size_t n) {
    const CaptureRecord& rec = records[n];
    require_same_shape(rec.capture.shape(), model.slm_shape, "capture vs model grid");
    Trace tr;
    e.forward(tr, rec.slm1, rec.slm2, rec.config_id, rec.z, patch, groups != 0);
    std::vector<double> dJ(tr.J.size());
    double loss = 0.0;
    for (std::size_t p = 0; p < dJ.size(); ++p) {
      const double d = tr.J[p] - rec.capture.data()[p];
      loss += d * d;
      dJ[p] = 2.0 * inv_r * d;
    }
    part_loss[n] = loss * inv_r;
    if (groups != 0) {
      part[n] = zero_gradient(model, false);
      e.backward(tr, rec.slm1, rec.slm2, rec.z, dJ, groups, false, patch, part[n]);
    }
  };
  if (thread_count() <= 1) {
    for (std::size_t n = 0; n < records.size(); ++n) task(n);
  } else {
    parallel_for(records.size(), task);
  }
  CalibEvaluation ev;
  ev.gradient = zero_gradient(model, false);
  for (std::size_t n = 0; n < records.size(); ++n) {
    ev.loss += part_loss[n];
    if (groups != 0) accumulate(ev.gradient, part[n]);
  }
  return ev;
}

CalibGradient backpropagate(const CalibModel& model, std::span<const double> slm1, std::span<const double> slm2,
                            int config_id, double z, std::span<const double> d_intensity, unsigned groups,
                            bool pattern_grad) {
  if (d_intensity.size() != model.slm_shape.size()) throw ShapeMismatch("intensity gradient does not match grid");
  Engine e(model, groups);
  e.prepare({z});
  Trace tr;
  e.forward(tr, slm1, slm2, config_id, z, std::nullopt, true);
  CalibGradient g = zero_gradient(model, pattern_grad);
  e.backward(tr, slm1, slm2, z, d_intensity, groups, pattern_grad, std::nullopt, g);
  return g;
}

}  // namespace msholo
