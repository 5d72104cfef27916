#include "msholo/targets.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include "json.hpp"
#include "msholo/fft.hpp"
#include "msholo/png_io.hpp"

namespace msholo {

void FocalStackTarget::validate() const {
  if (images.empty()) throw DomainError("focal stack target has no planes");
  if (planes.size() != images.size()) throw ShapeMismatch("focal stack planes and images differ in count");
  for (const auto& im : images) require_same_shape(im.shape(), images.front().shape(), "focal stack images");
  if (!(normalization > 0.0) || !std::isfinite(normalization)) throw DomainError("invalid target normalization");
}

FocalStackTarget FocalStackTarget::normalized_to(double plane_energy) const {
  validate();
  double mean = 0.0;
  for (const auto& im : images) mean += im.sum();
  mean /= static_cast<double>(images.size());
  if (!(mean > 0.0)) throw DomainError("cannot normalize an all-zero target");
  const double c = plane_energy / mean;
  FocalStackTarget out = *this;
  for (auto& im : out.images) {
    for (double& v : im.data()) v *= c;
  }
  out.normalization = normalization * c;
  return out;
}

FocalStackTarget FocalStackTarget::subset(const std::vector<int>& indices) const {
  FocalStackTarget out;
  out.normalization = normalization;
  for (int i : indices) {
    if (i < 0 || static_cast<std::size_t>(i) >= images.size()) throw DomainError("target plane index out of range");
    out.planes.push_back(planes[static_cast<std::size_t>(i)]);
    out.images.push_back(images[static_cast<std::size_t>(i)]);
  }
  return out;
}

FocalStackTarget image_target(const IntensityImage& image, double z) {
  FocalStackTarget t;
  t.planes = {z};
  t.images = {image};
  return t;
}

void LayeredScene::validate() const {
  if (layers.empty()) throw DomainError("scene has no layers");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    require_same_shape(l.image.shape(), layers.front().image.shape(), "scene layer images");
    require_same_shape(l.mask.shape(), l.image.shape(), "scene layer mask");
    for (double m : l.mask.data()) {
      if (m > 1.0) throw DomainError("scene masks must lie in [0, 1]");
    }
    if (i > 0 && !(l.depth < layers[i - 1].depth)) {
      throw DomainError("scene layers must be ordered nearest (largest depth) first");
    }
  }
}

std::vector<double> disk_kernel(double radius, int& half_width) {
  if (!(radius >= 0.0) || !std::isfinite(radius)) throw DomainError("disk radius must be finite and nonnegative");
  if (radius < 0.5) {
    half_width = 0;
    return {1.0};
  }
  const int R = static_cast<int>(std::ceil(radius + 0.5)) - 1;
  half_width = R;
  const int n = 2 * R + 1;
  constexpr int kSub = 32;
  std::vector<double> k(static_cast<std::size_t>(n) * n, 0.0);
  const double r2 = radius * radius;
  double total = 0.0;
  for (int dy = -R; dy <= R; ++dy) {
    for (int dx = -R; dx <= R; ++dx) {
      const double nx = std::max(0.0, std::abs(dx) - 0.5);
      const double ny = std::max(0.0, std::abs(dy) - 0.5);
      const double fx = std::abs(dx) + 0.5;
      const double fy = std::abs(dy) + 0.5;
      double w = 0.0;
      if (fx * fx + fy * fy <= r2) {
        w = 1.0;
      } else if (nx * nx + ny * ny < r2) {
        int inside = 0;
        for (int sy = 0; sy < kSub; ++sy) {
          const double y = dy - 0.5 + (sy + 0.5) / kSub;
          for (int sx = 0; sx < kSub; ++sx) {
            const double x = dx - 0.5 + (sx + 0.5) / kSub;
            if (x * x + y * y <= r2) ++inside;
          }
        }
        w = static_cast<double>(inside) / (kSub * kSub);
      }
      k[static_cast<std::size_t>(dy + R) * n + (dx + R)] = w;
      total += w;
    }
  }
  for (double& v : k) v /= total;
  return k;
}

namespace {

int round_up(int v, int m) { return (v + m - 1) / m * m; }

}  // namespace

IntensityImage disk_blur(const IntensityImage& image, double radius) {
  int R = 0;
  const auto kernel = disk_kernel(radius, R);
  if (R == 0) return image;
  const int H = image.rows();
  const int W = image.cols();
  const Shape padded{round_up(H + 2 * R, 16), round_up(W + 2 * R, 16)};
  AlignedVector<std::complex<double>> a(padded.size());
  AlignedVector<std::complex<double>> k(padded.size(), {0.0, 0.0});
  for (int r = 0; r < padded.rows; ++r) {
    const int sr = std::clamp(r - R, 0, H - 1);
    for (int c = 0; c < padded.cols; ++c) {
      const int sc = std::clamp(c - R, 0, W - 1);
      a[static_cast<std::size_t>(r) * padded.cols + c] = image(sr, sc);
    }
  }
  const int n = 2 * R + 1;
  for (int dy = -R; dy <= R; ++dy) {
    const int r = (dy + padded.rows) % padded.rows;
    for (int dx = -R; dx <= R; ++dx) {
      const int c = (dx + padded.cols) % padded.cols;
      k[static_cast<std::size_t>(r) * padded.cols + c] = kernel[static_cast<std::size_t>(dy + R) * n + (dx + R)];
    }
  }
  fft2_inplace(a, padded, FftDirection::forward);
  fft2_inplace(k, padded, FftDirection::forward);
  // Unitary transforms: circular convolution = sqrt(N) * ifft(A * K).
  const double scale = std::sqrt(static_cast<double>(padded.size()));
  for (std::size_t i = 0; i < a.size(); ++i) a[i] *= k[i] * scale;
  fft2_inplace(a, padded, FftDirection::inverse);
  IntensityImage out(image.shape(), image.pitch());
  for (int r = 0; r < H; ++r) {
    for (int c = 0; c < W; ++c) {
      out(r, c) = std::max(0.0, a[static_cast<std::size_t>(r + R) * padded.cols + (c + R)].real());
    }
  }
  return out;
}

FocalStackTarget render_focal_stack(const LayeredScene& scene, const std::vector<double>& planes, double blur_rate) {
  scene.validate();
  if (!(blur_rate >= 0.0)) throw DomainError("blur rate must be nonnegative");
  if (planes.empty()) throw DomainError("no target planes to render");
  const Shape shape = scene.shape();
  const double pitch = scene.layers.front().image.pitch();

  std::vector<IntensityImage> premultiplied;
  for (const auto& l : scene.layers) {
    IntensityImage p(shape, pitch);
    for (std::size_t i = 0; i < shape.size(); ++i) p.data()[i] = l.image.data()[i] * l.mask.data()[i];
    premultiplied.push_back(std::move(p));
  }

  FocalStackTarget out;
  out.planes = planes;
  for (double z : planes) {
    std::vector<double> color(shape.size(), 0.0);
    std::vector<double> alpha(shape.size(), 0.0);
    for (std::size_t li = 0; li < scene.layers.size(); ++li) {
      const double radius = blur_rate * std::abs(z - scene.layers[li].depth) * 1e3;
      const IntensityImage c = disk_blur(premultiplied[li], radius);
      const IntensityImage a = disk_blur(scene.layers[li].mask, radius);
      for (std::size_t i = 0; i < shape.size(); ++i) {
        const double t = 1.0 - alpha[i];
        color[i] += t * c.data()[i];
        alpha[i] += t * std::min(1.0, a.data()[i]);
      }
    }
    for (double& v : color) v = std::clamp(v, 0.0, 1.0);
    out.images.emplace_back(shape, pitch, std::move(color));
  }
  return out;
}

FocalStackTarget make_grating_target(Shape shape, double pitch, int period_px, const std::vector<double>& planes,
                                     double z_focus, double blur_rate) {
  if (period_px < 2) throw DomainError("grating period must be at least 2 pixels");
  IntensityImage focus(shape, pitch);
  for (int r = 0; r < shape.rows; ++r) {
    for (int c = 0; c < shape.cols; ++c) focus(r, c) = (c % period_px) < period_px / 2 ? 1.0 : 0.0;
  }
  LayeredScene scene;
  scene.layers.push_back({z_focus, focus, IntensityImage(shape, pitch, std::vector<double>(shape.size(), 1.0))});
  return render_focal_stack(scene, planes, blur_rate);
}

namespace {

// Sum of bilinearly interpolated random lattices at several cell sizes.
std::vector<double> value_noise(Shape shape, std::mt19937_64& rng, std::initializer_list<int> cells) {
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::vector<double> out(shape.size(), 0.0);
  double amp = 1.0;
  double total = 0.0;
  for (int cell : cells) {
    const int gr = shape.rows / cell + 2;
    const int gc = shape.cols / cell + 2;
    std::vector<double> lattice(static_cast<std::size_t>(gr) * gc);
    for (double& v : lattice) v = uni(rng);
    for (int r = 0; r < shape.rows; ++r) {
      const double y = static_cast<double>(r) / cell;
      const int y0 = static_cast<int>(y);
      const double ty = y - y0;
      for (int c = 0; c < shape.cols; ++c) {
        const double x = static_cast<double>(c) / cell;
        const int x0 = static_cast<int>(x);
        const double tx = x - x0;
        auto at = [&](int yy, int xx) { return lattice[static_cast<std::size_t>(yy) * gc + xx]; };
        const double v = (1 - ty) * ((1 - tx) * at(y0, x0) + tx * at(y0, x0 + 1)) +
                         ty * ((1 - tx) * at(y0 + 1, x0) + tx * at(y0 + 1, x0 + 1));
        out[static_cast<std::size_t>(r) * shape.cols + c] += amp * v;
      }
    }
    total += amp;
    amp *= 0.6;
  }
  for (double& v : out) v /= total;
  return out;
}

double coverage(double signed_distance) { return std::clamp(0.5 - signed_distance, 0.0, 1.0); }

}  // namespace

LayeredScene builtin_scene(Shape shape, double pitch, double near_depth, double far_depth, std::uint64_t seed) {
  if (!(near_depth > far_depth)) throw DomainError("builtin scene needs near_depth > far_depth");
  std::mt19937_64 rng(seed);
  const int H = shape.rows;
  const int W = shape.cols;
  const double mid_depth = 0.5 * (near_depth + far_depth);
  const double unit = std::min(H, W);

  // Far: textured backdrop with a few soft horizontal bands.
  auto far_tex = value_noise(shape, rng, {std::max(2, H / 4), std::max(2, H / 8), std::max(2, H / 16), 2});
  IntensityImage far(shape, pitch);
  for (int r = 0; r < H; ++r) {
    for (int c = 0; c < W; ++c) {
      const double band = 0.5 + 0.5 * std::sin(2.0 * 3.14159265358979 * r / (unit / 3.0));
      far(r, c) = std::clamp(0.15 + 0.55 * far_tex[static_cast<std::size_t>(r) * W + c] + 0.2 * band, 0.0, 1.0);
    }
  }

  // Mid: disc with radial rings and fine texture.
  auto mid_tex = value_noise(shape, rng, {std::max(2, H / 16), 2});
  IntensityImage mid(shape, pitch);
  IntensityImage mid_mask(shape, pitch);
  const double cy = 0.38 * H;
  const double cx = 0.62 * W;
  const double radius = 0.24 * unit;
  for (int r = 0; r < H; ++r) {
    for (int c = 0; c < W; ++c) {
      const double d = std::hypot(r - cy, c - cx);
      const double ring = 0.5 + 0.5 * std::cos(d / radius * 4.0 * 3.14159265358979);
      mid(r, c) = std::clamp(0.35 + 0.35 * ring + 0.3 * mid_tex[static_cast<std::size_t>(r) * W + c], 0.0, 1.0);
      mid_mask(r, c) = coverage(d - radius);
    }
  }

  // Near: bright rectangle with a checker texture.
  IntensityImage near(shape, pitch);
  IntensityImage near_mask(shape, pitch);
  const double top = 0.56 * H;
  const double bottom = 0.9 * H;
  const double left = 0.1 * W;
  const double right = 0.46 * W;
  const int check = std::max(2, H / 16);
  for (int r = 0; r < H; ++r) {
    for (int c = 0; c < W; ++c) {
      const double sd = std::max({top - r, r - bottom, left - c, c - right});
      near_mask(r, c) = coverage(sd);
      near(r, c) = ((r / check + c / check) % 2 == 0) ? 0.95 : 0.55;
    }
  }

  LayeredScene scene;
  scene.layers.push_back({near_depth, std::move(near), std::move(near_mask)});
  scene.layers.push_back({mid_depth, std::move(mid), std::move(mid_mask)});
  scene.layers.push_back({far_depth, std::move(far), IntensityImage(shape, pitch, std::vector<double>(shape.size(), 1.0))});
  return scene;
}

IntensityImage resize_image(const IntensityImage& image, Shape shape) {
  if (image.shape() == shape) return image;
  const double sy = static_cast<double>(image.rows()) / shape.rows;
  const double sx = static_cast<double>(image.cols()) / shape.cols;
  IntensityImage out(shape, image.pitch() * sx);
  for (int r = 0; r < shape.rows; ++r) {
    const double y = std::clamp((r + 0.5) * sy - 0.5, 0.0, image.rows() - 1.0);
    const int y0 = std::min(static_cast<int>(y), image.rows() - 1);
    const int y1 = std::min(y0 + 1, image.rows() - 1);
    const double ty = y - y0;
    for (int c = 0; c < shape.cols; ++c) {
      const double x = std::clamp((c + 0.5) * sx - 0.5, 0.0, image.cols() - 1.0);
      const int x0 = std::min(static_cast<int>(x), image.cols() - 1);
      const int x1 = std::min(x0 + 1, image.cols() - 1);
      const double tx = x - x0;
      out(r, c) = (1 - ty) * ((1 - tx) * image(y0, x0) + tx * image(y0, x1)) +
                  ty * ((1 - tx) * image(y1, x0) + tx * image(y1, x1));
    }
  }
  return out;
}

LayeredScene load_scene(const std::filesystem::path& path, Shape shape, double pitch) {
  std::ifstream in(path);
  if (!in) throw ConfigError("scene file not found: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed scene file " + path.string() + ": " + e.what());
  }
  if (!j.contains("layers") || !j["layers"].is_array() || j["layers"].empty()) {
    throw ConfigError("scene file needs a non-empty 'layers' array");
  }
  const auto base = path.parent_path();
  auto load = [&](const std::string& rel) {
    const auto p = base / rel;
    if (!std::filesystem::exists(p)) throw ConfigError("scene image not found: " + p.string());
    const IntensityImage im = resize_image(read_png(p, pitch), shape);
    return IntensityImage(shape, pitch, im.values());
  };
  LayeredScene scene;
  for (const auto& lj : j["layers"]) {
    try {
      SceneLayer layer;
      layer.depth = lj.at("depth_mm").get<double>() * 1e-3;
      layer.image = load(lj.at("image").get<std::string>());
      layer.mask = lj.contains("mask") ? load(lj["mask"].get<std::string>())
                                       : IntensityImage(shape, pitch, std::vector<double>(shape.size(), 1.0));
      scene.layers.push_back(std::move(layer));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("bad scene layer entry: ") + e.what());
    }
  }
  std::stable_sort(scene.layers.begin(), scene.layers.end(),
                   [](const SceneLayer& a, const SceneLayer& b) { return a.depth > b.depth; });
  scene.validate();
  return scene;
}

}  // namespace msholo
