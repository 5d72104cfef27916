#include "msholo/png_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <memory>

namespace msholo {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

std::vector<std::uint16_t> quantize(std::span<const double> values, int bit_depth) {
  if (bit_depth != 8 && bit_depth != 16) throw DomainError("PNG bit depth must be 8 or 16");
  const double max_code = bit_depth == 8 ? 255.0 : 65535.0;
  std::vector<std::uint16_t> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double v = values[i];
    if (!(v >= 0.0 && v <= 1.0)) throw DomainError("PNG export expects values in [0, 1]");
    out[i] = static_cast<std::uint16_t>(std::floor(v * max_code + 0.5));
  }
  return out;
}

void write_png(const std::filesystem::path& path, const IntensityImage& image, int bit_depth) {
  const auto codes = quantize(image.data(), bit_depth);
  FilePtr file(std::fopen(path.string().c_str(), "wb"));
  if (!file) throw IoError("cannot open " + path.string() + " for writing");

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("png_create_info_struct failed");
  }
  const int width = image.cols();
  const int height = image.rows();
  const std::size_t bytes_per_sample = bit_depth == 8 ? 1 : 2;
  std::vector<png_byte> rows(static_cast<std::size_t>(width) * height * bytes_per_sample);
  for (std::size_t i = 0; i < codes.size(); ++i) {
    if (bit_depth == 8) {
      rows[i] = static_cast<png_byte>(codes[i]);
    } else {
      rows[2 * i] = static_cast<png_byte>(codes[i] >> 8);  // PNG is big-endian
      rows[2 * i + 1] = static_cast<png_byte>(codes[i] & 0xff);
    }
  }
  std::vector<png_bytep> row_ptrs(static_cast<std::size_t>(height));
  for (int r = 0; r < height; ++r) row_ptrs[r] = rows.data() + static_cast<std::size_t>(r) * width * bytes_per_sample;

  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng failed writing " + path.string());
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), bit_depth,
               PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, row_ptrs.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

IntensityImage read_png(const std::filesystem::path& path, double pitch) {
  FilePtr file(std::fopen(path.string().c_str(), "rb"));
  if (!file) throw IoError("cannot open " + path.string());
  png_byte sig[8];
  if (std::fread(sig, 1, 8, file.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw FormatError(path.string() + " is not a PNG file");
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw IoError("png_create_info_struct failed");
  }
  std::vector<png_byte> pixels;
  std::vector<png_bytep> row_ptrs;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("libpng failed reading " + path.string());
  }
  png_init_io(png, file.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);

  const int color_type = png_get_color_type(png, info);
  if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color_type == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_set_swap(png);  // 16-bit samples in host order (little-endian host)
  png_read_update_info(png, info);

  const auto width = static_cast<int>(png_get_image_width(png, info));
  const auto height = static_cast<int>(png_get_image_height(png, info));
  const int depth = png_get_bit_depth(png, info);
  const int channels = png_get_channels(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  pixels.resize(rowbytes * static_cast<std::size_t>(height));
  row_ptrs.resize(static_cast<std::size_t>(height));
  for (int r = 0; r < height; ++r) row_ptrs[r] = pixels.data() + static_cast<std::size_t>(r) * rowbytes;
  png_read_image(png, row_ptrs.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  const double max_code = depth == 16 ? 65535.0 : 255.0;
  std::vector<double> values(static_cast<std::size_t>(width) * height);
  for (int r = 0; r < height; ++r) {
    for (int c = 0; c < width; ++c) {
      double ch[3] = {0, 0, 0};
      for (int k = 0; k < std::min(channels, 3); ++k) {
        const std::size_t idx = static_cast<std::size_t>(c * channels + k);
        if (depth == 16) {
          std::uint16_t s;
          std::memcpy(&s, row_ptrs[r] + 2 * idx, 2);
          ch[k] = s / max_code;
        } else {
          ch[k] = row_ptrs[r][idx] / max_code;
        }
      }
      values[static_cast<std::size_t>(r) * width + c] =
          channels >= 3 ? 0.2126 * ch[0] + 0.7152 * ch[1] + 0.0722 * ch[2] : ch[0];
    }
  }
  return IntensityImage({height, width}, pitch, std::move(values));
}

}  // namespace msholo
