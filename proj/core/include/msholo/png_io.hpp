#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "msholo/field.hpp"

namespace msholo {

// Linear quantization of values in [0, 1] to 8 or 16 bits:
// q = floor(v * max_code + 0.5), i.e. round-half-up. Values outside [0, 1]
// raise DomainError; the caller normalizes.
std::vector<std::uint16_t> quantize(std::span<const double> values, int bit_depth);

void write_png(const std::filesystem::path& path, const IntensityImage& image, int bit_depth);

// Reads a grayscale or RGB(A) PNG as linear values in [0, 1]. Color images
// are reduced to Rec. 709 luma.
IntensityImage read_png(const std::filesystem::path& path, double pitch);

}  // namespace msholo
