#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "msholo/field.hpp"

namespace msholo {

// Target intensities at a list of planes. Images share one shape; values are
// in [0, 1] until normalized_to() rescales them.
struct FocalStackTarget {
  std::vector<double> planes;
  std::vector<IntensityImage> images;
  double normalization = 1.0;

  std::size_t size() const { return images.size(); }
  const Shape& shape() const { return images.front().shape(); }
  void validate() const;

  // One common factor so the mean per-plane energy equals `plane_energy`.
  FocalStackTarget normalized_to(double plane_energy) const;
  // Target restricted to the given plane indices.
  FocalStackTarget subset(const std::vector<int>& indices) const;
};

// Single 2D image at one plane.
FocalStackTarget image_target(const IntensityImage& image, double z);

struct SceneLayer {
  double depth = 0.0;  // m
  IntensityImage image;
  IntensityImage mask;  // coverage in [0, 1]
};

// Layers ordered nearest to farthest from the viewer. The viewer sits past
// the last target plane, so "nearest" means largest depth.
struct LayeredScene {
  std::vector<SceneLayer> layers;

  const Shape& shape() const { return layers.front().image.shape(); }
  void validate() const;
};

// Area-sampled circular top-hat of the given radius (pixels), normalized to
// unit sum, on a (2R+1)^2 grid with R = ceil(radius + 0.5) - 1. Radii below
// 0.5 give a single-tap delta.
std::vector<double> disk_kernel(double radius, int& half_width);

// Convolution with disk_kernel(radius) using replicated borders.
IntensityImage disk_blur(const IntensityImage& image, double radius);

// For each plane z and layer l, blur by radius blur_rate * |z - z_l| pixels
// (blur_rate in pixels per mm) and composite nearest-first with the blurred
// coverage masks.
FocalStackTarget render_focal_stack(const LayeredScene& scene, const std::vector<double>& planes, double blur_rate);

// Binary square-wave grating (columns with (c mod period) < period/2 are 1)
// focused at z_focus and disk-blurred at every other plane.
FocalStackTarget make_grating_target(Shape shape, double pitch, int period_px, const std::vector<double>& planes,
                                     double z_focus, double blur_rate);

// Deterministic procedural three-layer scene: textured background, a
// mid-depth disc and a near rectangle.
LayeredScene builtin_scene(Shape shape, double pitch, double near_depth, double far_depth, std::uint64_t seed = 7);

// Bilinear resize to `shape`.
IntensityImage resize_image(const IntensityImage& image, Shape shape);

// JSON scene description:
//   { "layers": [ { "depth_mm": 24.0, "image": "near.png", "mask": "near_mask.png" }, ... ] }
// Paths are relative to the file; a missing mask means full coverage. Images
// are resized to `shape`. Layers are sorted nearest-first.
LayeredScene load_scene(const std::filesystem::path& path, Shape shape, double pitch);

}  // namespace msholo
