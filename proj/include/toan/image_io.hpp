#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace toan {

// 8-bit RGB, interleaved, row-major.
struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;
};

// PNG (any bit depth / colour type, converted to 8-bit RGB) or binary PPM
// (P6, maxval 255), chosen by file signature. Throws kUnreadableImage.
RgbImage read_image(const std::filesystem::path& path);

void write_png(const std::filesystem::path& path, const RgbImage& image);
void write_ppm(const std::filesystem::path& path, const RgbImage& image);

// Planar float [3, size, size] in [0, 1], bilinearly resampled with no
// aspect-ratio preservation (pixel-centre alignment).
std::vector<float> to_planar(const RgbImage& image, int size);

// Inverse of to_planar at the native size: values are rounded to 8 bits.
RgbImage from_planar(const std::vector<float>& planar, int size);

}  // namespace toan
