#include "msholo/tps.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <iostream>

#include "msholo/optimizer.hpp"

namespace msholo {

TpsWarp TpsWarp::lattice(Shape shape, int n) {
  if (n < 2) throw ConfigError("TPS lattice needs at least 2 x 2 controls");
  if (shape.rows < 2 || shape.cols < 2) throw SizingError("TPS lattice needs a grid of at least 2 x 2");
  TpsWarp w;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      w.controls.push_back({(shape.cols - 1) * static_cast<double>(j) / (n - 1),
                            (shape.rows - 1) * static_cast<double>(i) / (n - 1)});
    }
  }
  w.displacements.assign(w.controls.size(), Vec2{});
  return w;
}

bool TpsWarp::is_identity() const {
  for (const Vec2& d : displacements) {
    if (d.x != 0.0 || d.y != 0.0) return false;
  }
  return true;
}

void TpsWarp::validate(Shape shape) const {
  if (controls.size() < 3) throw ConfigError("TPS warp needs at least 3 control points");
  if (controls.size() != displacements.size()) throw ShapeMismatch("TPS controls and displacements differ in count");
  for (const Vec2& c : controls) {
    if (!(c.x >= 0.0 && c.x <= shape.cols - 1 && c.y >= 0.0 && c.y <= shape.rows - 1)) {
      throw DomainError("TPS control point outside the field");
    }
  }
  for (const Vec2& d : displacements) {
    if (!std::isfinite(d.x) || !std::isfinite(d.y)) throw DomainError("TPS displacement is not finite");
  }
}

namespace {

double tps_u(double r2) { return r2 > 0.0 ? 0.5 * r2 * std::log(r2) : 0.0; }

}  // namespace

TpsBasis::TpsBasis(const std::vector<Vec2>& controls, Shape grid, int scale)
    : grid_(grid), n_(controls.size()), scale_(scale) {
  if (n_ < 3) throw ConfigError("TPS needs at least 3 control points");
  if (scale < 1) throw ConfigError("TPS scale must be >= 1");
  const Eigen::Index n = static_cast<Eigen::Index>(n_);
  Eigen::MatrixXd L = Eigen::MatrixXd::Zero(n + 3, n + 3);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      const Vec2 d = controls[i] - controls[j];
      L(i, j) = tps_u(d.x * d.x + d.y * d.y);
    }
    L(i, n) = L(n, i) = 1.0;
    L(i, n + 1) = L(n + 1, i) = controls[i].x;
    L(i, n + 2) = L(n + 2, i) = controls[i].y;
  }
  Eigen::FullPivLU<Eigen::MatrixXd> lu(L);
  if (!lu.isInvertible()) throw DomainError("TPS control points are degenerate (collinear or repeated)");
  const Eigen::MatrixXd rhs = Eigen::MatrixXd::Identity(n + 3, n);
  const Eigen::MatrixXd coef = lu.solve(rhs);  // (n + 3) x n

  weights_.assign(grid.size() * n_, 0.0);
  Eigen::RowVectorXd row(n + 3);
  for (int r = 0; r < grid.rows; ++r) {
    const double y = (r + 0.5) / scale - 0.5;
    for (int c = 0; c < grid.cols; ++c) {
      const double x = (c + 0.5) / scale - 0.5;
      for (Eigen::Index i = 0; i < n; ++i) {
        const double dx = x - controls[i].x;
        const double dy = y - controls[i].y;
        row(i) = tps_u(dx * dx + dy * dy);
      }
      row(n) = 1.0;
      row(n + 1) = x;
      row(n + 2) = y;
      const Eigen::RowVectorXd w = row * coef;
      double* dst = &weights_[(static_cast<std::size_t>(r) * grid.cols + c) * n_];
      for (Eigen::Index i = 0; i < n; ++i) dst[i] = w(i);
    }
  }
}

std::vector<Vec2> TpsBasis::displacement(std::span<const Vec2> d) const {
  if (d.size() != n_) throw ShapeMismatch("TPS displacement count differs from controls");
  std::vector<Vec2> out(grid_.size());
  for (std::size_t p = 0; p < out.size(); ++p) {
    const double* w = &weights_[p * n_];
    double x = 0.0;
    double y = 0.0;
    for (std::size_t i = 0; i < n_; ++i) {
      x += w[i] * d[i].x;
      y += w[i] * d[i].y;
    }
    out[p] = {scale_ * x, scale_ * y};
  }
  return out;
}

std::vector<Vec2> TpsBasis::adjoint(std::span<const Vec2> g) const {
  if (g.size() != grid_.size()) throw ShapeMismatch("TPS adjoint input does not match grid");
  std::vector<Vec2> out(n_);
  for (std::size_t p = 0; p < g.size(); ++p) {
    const double* w = &weights_[p * n_];
    for (std::size_t i = 0; i < n_; ++i) {
      out[i].x += scale_ * w[i] * g[p].x;
      out[i].y += scale_ * w[i] * g[p].y;
    }
  }
  return out;
}

namespace {

struct Taps {
  int x0, y0;
  double fx, fy;
};

inline Taps taps_at(int r, int c, Vec2 d) {
  const double x = c + d.x;
  const double y = r + d.y;
  const double xf = std::floor(x);
  const double yf = std::floor(y);
  return {static_cast<int>(xf), static_cast<int>(yf), x - xf, y - yf};
}

template <typename T>
inline T fetch(std::span<const T> src, Shape s, int r, int c) {
  if (r < 0 || c < 0 || r >= s.rows || c >= s.cols) return T{};
  return src[static_cast<std::size_t>(r) * s.cols + c];
}

void check_sizes(std::size_t a, std::size_t b, std::size_t c, Shape s) {
  if (a != s.size() || b != s.size() || c != s.size()) throw ShapeMismatch("warp buffers do not match the grid");
}

}  // namespace

template <typename T>
void warp_bilinear(std::span<const T> src, Shape s, std::span<const Vec2> disp, std::span<T> dst) {
  check_sizes(src.size(), disp.size(), dst.size(), s);
  for (int r = 0; r < s.rows; ++r) {
    for (int c = 0; c < s.cols; ++c) {
      const std::size_t p = static_cast<std::size_t>(r) * s.cols + c;
      const Taps t = taps_at(r, c, disp[p]);
      const T v00 = fetch(src, s, t.y0, t.x0);
      const T v01 = fetch(src, s, t.y0, t.x0 + 1);
      const T v10 = fetch(src, s, t.y0 + 1, t.x0);
      const T v11 = fetch(src, s, t.y0 + 1, t.x0 + 1);
      dst[p] = (1.0 - t.fy) * ((1.0 - t.fx) * v00 + t.fx * v01) + t.fy * ((1.0 - t.fx) * v10 + t.fx * v11);
    }
  }
}

template <typename T>
void warp_bilinear_adjoint(std::span<const T> g_dst, Shape s, std::span<const Vec2> disp, std::span<T> g_src) {
  check_sizes(g_dst.size(), disp.size(), g_src.size(), s);
  auto put = [&](int r, int c, T v) {
    if (r < 0 || c < 0 || r >= s.rows || c >= s.cols) return;
    g_src[static_cast<std::size_t>(r) * s.cols + c] += v;
  };
  for (int r = 0; r < s.rows; ++r) {
    for (int c = 0; c < s.cols; ++c) {
      const std::size_t p = static_cast<std::size_t>(r) * s.cols + c;
      const Taps t = taps_at(r, c, disp[p]);
      const T g = g_dst[p];
      put(t.y0, t.x0, ((1.0 - t.fy) * (1.0 - t.fx)) * g);
      put(t.y0, t.x0 + 1, ((1.0 - t.fy) * t.fx) * g);
      put(t.y0 + 1, t.x0, (t.fy * (1.0 - t.fx)) * g);
      put(t.y0 + 1, t.x0 + 1, (t.fy * t.fx) * g);
    }
  }
}

template <typename T>
void warp_bilinear_slopes(std::span<const T> src, Shape s, std::span<const Vec2> disp, std::span<T> d_dx,
                          std::span<T> d_dy) {
  check_sizes(src.size(), disp.size(), d_dx.size(), s);
  check_sizes(src.size(), disp.size(), d_dy.size(), s);
  for (int r = 0; r < s.rows; ++r) {
    for (int c = 0; c < s.cols; ++c) {
      const std::size_t p = static_cast<std::size_t>(r) * s.cols + c;
      const Taps t = taps_at(r, c, disp[p]);
      const T v00 = fetch(src, s, t.y0, t.x0);
      const T v01 = fetch(src, s, t.y0, t.x0 + 1);
      const T v10 = fetch(src, s, t.y0 + 1, t.x0);
      const T v11 = fetch(src, s, t.y0 + 1, t.x0 + 1);
      d_dx[p] = (1.0 - t.fy) * (v01 - v00) + t.fy * (v11 - v10);
      d_dy[p] = (1.0 - t.fx) * (v10 - v00) + t.fx * (v11 - v01);
    }
  }
}

template void warp_bilinear<double>(std::span<const double>, Shape, std::span<const Vec2>, std::span<double>);
template void warp_bilinear<std::complex<double>>(std::span<const std::complex<double>>, Shape,
                                                  std::span<const Vec2>, std::span<std::complex<double>>);
template void warp_bilinear_adjoint<double>(std::span<const double>, Shape, std::span<const Vec2>,
                                            std::span<double>);
template void warp_bilinear_adjoint<std::complex<double>>(std::span<const std::complex<double>>, Shape,
                                                          std::span<const Vec2>, std::span<std::complex<double>>);
template void warp_bilinear_slopes<double>(std::span<const double>, Shape, std::span<const Vec2>, std::span<double>,
                                           std::span<double>);
template void warp_bilinear_slopes<std::complex<double>>(std::span<const std::complex<double>>, Shape,
                                                         std::span<const Vec2>, std::span<std::complex<double>>,
                                                         std::span<std::complex<double>>);

bool warp_folds(std::span<const Vec2> disp, Shape s) {
  if (disp.size() != s.size()) throw ShapeMismatch("displacement field does not match the grid");
  for (int r = 0; r + 1 < s.rows; ++r) {
    for (int c = 0; c + 1 < s.cols; ++c) {
      const std::size_t p = static_cast<std::size_t>(r) * s.cols + c;
      const Vec2 d = disp[p];
      const Vec2 dx = disp[p + 1] - d;
      const Vec2 dy = disp[p + s.cols] - d;
      const double det = (1.0 + dx.x) * (1.0 + dy.y) - dy.x * dx.y;
      if (!(det > 0.0)) return true;
    }
  }
  return false;
}

namespace {

std::vector<Vec2> dense_field(const TpsWarp& warp, Shape shape) {
  warp.validate(shape);
  const auto disp = TpsBasis(warp.controls, shape).displacement(warp.displacements);
  if (warp_folds(disp, shape)) std::clog << "warning: TPS warp folds over; the mapping is not injective\n";
  return disp;
}

}  // namespace

ComplexField2D tps_apply(const ComplexField2D& field, const TpsWarp& warp) {
  if (warp.is_identity()) return field;
  const auto disp = dense_field(warp, field.shape());
  ComplexField2D out(field.shape(), field.pitch(), field.wavelength());
  warp_bilinear<std::complex<double>>(field.data(), field.shape(), disp, out.data());
  return out;
}

IntensityImage tps_apply(const IntensityImage& image, const TpsWarp& warp) {
  if (warp.is_identity()) return image;
  const auto disp = dense_field(warp, image.shape());
  std::vector<double> out(image.size());
  warp_bilinear<double>(image.data(), image.shape(), disp, out);
  return IntensityImage(image.shape(), image.pitch(), std::move(out));
}

TpsWarp fit_tps(const IntensityImage& source, const IntensityImage& target, TpsWarp init, int iterations,
                double step) {
  require_same_shape(source.shape(), target.shape(), "fit_tps");
  init.validate(source.shape());
  const Shape s = source.shape();
  const TpsBasis basis(init.controls, s);
  AdamSettings adam;
  adam.lr = step;
  AdamState state;
  std::vector<double> params(2 * init.displacements.size());
  for (std::size_t i = 0; i < init.displacements.size(); ++i) {
    params[2 * i] = init.displacements[i].x;
    params[2 * i + 1] = init.displacements[i].y;
  }
  std::vector<double> warped(s.size());
  std::vector<double> sx(s.size());
  std::vector<double> sy(s.size());
  std::vector<Vec2> gpix(s.size());
  std::vector<double> grad(params.size());
  for (int it = 0; it < iterations; ++it) {
    for (std::size_t i = 0; i < init.displacements.size(); ++i) init.displacements[i] = {params[2 * i], params[2 * i + 1]};
    const auto disp = basis.displacement(init.displacements);
    warp_bilinear<double>(source.data(), s, disp, warped);
    warp_bilinear_slopes<double>(source.data(), s, disp, sx, sy);
    for (std::size_t p = 0; p < s.size(); ++p) {
      const double e = 2.0 * (warped[p] - target.data()[p]);
      gpix[p] = {e * sx[p], e * sy[p]};
    }
    const auto g = basis.adjoint(gpix);
    for (std::size_t i = 0; i < g.size(); ++i) {
      grad[2 * i] = g[i].x;
      grad[2 * i + 1] = g[i].y;
    }
    adam_step(params, grad, state, adam);
  }
  for (std::size_t i = 0; i < init.displacements.size(); ++i) init.displacements[i] = {params[2 * i], params[2 * i + 1]};
  return init;
}

}  // namespace msholo
