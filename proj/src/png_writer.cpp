#include "gsocc/png_writer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include <png.h>

#include "gsocc/errors.hpp"

namespace gsocc::io {

void write_png(const std::filesystem::path& path, int width, int height, int channels,
               const std::vector<std::uint8_t>& pixels) {
  if (width <= 0 || height <= 0 || (channels != 1 && channels != 3)) {
    throw InvalidParameter("write_png: bad image shape");
  }
  if (pixels.size() != static_cast<std::size_t>(width) * height * channels) {
    throw ShapeMismatch("write_png: pixel buffer does not match the image shape");
  }
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!fp) throw Error("cannot open '" + path.string() + "' for writing");

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, nullptr);
    throw Error("libpng initialization failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("failed writing '" + path.string() + "'");
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
               channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const std::size_t stride = static_cast<std::size_t>(width) * channels;
  for (int y = 0; y < height; ++y) {
    png_write_row(png, pixels.data() + stride * static_cast<std::size_t>(y));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

std::vector<std::uint8_t> heatmap_rgb(const Eigen::ArrayXd& values, double lo, double hi) {
  std::vector<std::uint8_t> out(static_cast<std::size_t>(values.size()) * 3, 0);
  const double span = hi > lo ? hi - lo : 1.0;
  for (Eigen::Index i = 0; i < values.size(); ++i) {
    auto* px = &out[static_cast<std::size_t>(i) * 3];
    if (!std::isfinite(values[i])) {
      px[2] = 64;
      continue;
    }
    const double t = std::clamp((values[i] - lo) / span, 0.0, 1.0);
    px[0] = static_cast<std::uint8_t>(std::lround(255.0 * t));
    px[1] = static_cast<std::uint8_t>(std::lround(255.0 * t * t * 0.6));
  }
  return out;
}

}  // namespace gsocc::io
