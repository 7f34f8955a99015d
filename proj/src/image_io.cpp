#include "toan/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <string>

#include "toan/error.hpp"

namespace toan {
namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using File = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] void unreadable(const std::filesystem::path& path, const std::string& why) {
  throw Error(ErrorCode::kUnreadableImage, path.string() + ": " + why);
}

RgbImage read_png(const std::filesystem::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    unreadable(path, img.message);
  }
  img.format = PNG_FORMAT_RGB;
  RgbImage out;
  out.width = static_cast<int>(img.width);
  out.height = static_cast<int>(img.height);
  out.pixels.resize(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
    std::string why = img.message;
    png_image_free(&img);
    unreadable(path, why);
  }
  return out;
}

// Skips whitespace and '#' comments between PPM header tokens.
int ppm_token(std::istream& in) {
  while (true) {
    int c = in.peek();
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      break;
    }
  }
  int v = -1;
  in >> v;
  return v;
}

RgbImage read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::string magic(2, '\0');
  in.read(magic.data(), 2);
  if (magic != "P6") unreadable(path, "not a binary PPM");
  RgbImage out;
  out.width = ppm_token(in);
  out.height = ppm_token(in);
  const int maxval = ppm_token(in);
  if (out.width <= 0 || out.height <= 0 || maxval != 255) {
    unreadable(path, "unsupported PPM header");
  }
  in.get();
  out.pixels.resize(static_cast<std::size_t>(out.width) * out.height * 3);
  in.read(reinterpret_cast<char*>(out.pixels.data()),
          static_cast<std::streamsize>(out.pixels.size()));
  if (!in) unreadable(path, "truncated PPM data");
  return out;
}

}  // namespace

RgbImage read_image(const std::filesystem::path& path) {
  std::ifstream probe(path, std::ios::binary);
  if (!probe) unreadable(path, "cannot open");
  unsigned char sig[8] = {};
  probe.read(reinterpret_cast<char*>(sig), 8);
  if (probe.gcount() >= 2 && sig[0] == 'P' && sig[1] == '6') return read_ppm(path);
  if (probe.gcount() == 8 && png_sig_cmp(sig, 0, 8) == 0) return read_png(path);
  unreadable(path, "unknown image format");
}

void write_png(const std::filesystem::path& path, const RgbImage& image) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = PNG_FORMAT_RGB;
  File f(std::fopen(path.c_str(), "wb"));
  if (!f) throw Error(ErrorCode::kIoError, "cannot write " + path.string());
  if (!png_image_write_to_stdio(&img, f.get(), 0, image.pixels.data(), 0, nullptr)) {
    throw Error(ErrorCode::kIoError, path.string() + ": " + img.message);
  }
}

void write_ppm(const std::filesystem::path& path, const RgbImage& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIoError, "cannot write " + path.string());
  out << "P6\n" << image.width << ' ' << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()),
            static_cast<std::streamsize>(image.pixels.size()));
}

std::vector<float> to_planar(const RgbImage& image, int size) {
  const std::size_t n = static_cast<std::size_t>(size) * size;
  std::vector<float> out(3 * n);
  const double sx = static_cast<double>(image.width) / size;
  const double sy = static_cast<double>(image.height) / size;
  auto px = [&](int x, int y, int c) {
    return image.pixels[(static_cast<std::size_t>(y) * image.width + x) * 3 + c] / 255.0;
  };
  for (int y = 0; y < size; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, image.height - 1.0);
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, image.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < size; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, image.width - 1.0);
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, image.width - 1);
      const double wx = fx - x0;
      for (int c = 0; c < 3; ++c) {
        const double top = px(x0, y0, c) * (1 - wx) + px(x1, y0, c) * wx;
        const double bottom = px(x0, y1, c) * (1 - wx) + px(x1, y1, c) * wx;
        out[c * n + static_cast<std::size_t>(y) * size + x] =
            static_cast<float>(top * (1 - wy) + bottom * wy);
      }
    }
  }
  return out;
}

RgbImage from_planar(const std::vector<float>& planar, int size) {
  const std::size_t n = static_cast<std::size_t>(size) * size;
  RgbImage out;
  out.width = out.height = size;
  out.pixels.resize(3 * n);
  for (std::size_t i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c) {
      const double v = std::clamp(static_cast<double>(planar[c * n + i]), 0.0, 1.0);
      out.pixels[i * 3 + c] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
  return out;
}

}  // namespace toan
