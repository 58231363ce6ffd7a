#pragma once

#include <png.h>

#include <cstdio>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "dlat/datamodel.hpp"

// 8-bit RGB PNG IO. Pixel mapping: stored byte p <-> value 2*p/255 - 1.

namespace dlat {

inline void write_png(const std::string& path, const FaceImage& img) {
  img.check();
  const int64_t s = img.side();
  std::FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw IoError("cannot open for writing: " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
    std::fclose(fp);
    throw IoError("libpng failure writing " + path);
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(s), static_cast<png_uint_32>(s), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_byte> row(static_cast<size_t>(3 * s));
  for (int64_t y = 0; y < s; ++y) {
    for (int64_t x = 0; x < s; ++x)
      for (int64_t c = 0; c < 3; ++c) {
        const double v = img.pixels[(c * s + y) * s + x];
        const double u = std::round((std::min(1.0, std::max(-1.0, v)) + 1.0) * 0.5 * 255.0);
        row[static_cast<size_t>(3 * x + c)] = static_cast<png_byte>(u);
      }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

inline FaceImage read_png(const std::string& path) {
  std::FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw IoError("cannot open: " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    std::fclose(fp);
    throw IoError("libpng failure reading " + path);
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  png_set_expand(png);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_gray_to_rgb(png);
  png_read_update_info(png, info);
  const png_uint_32 w = png_get_image_width(png, info);
  const png_uint_32 h = png_get_image_height(png, info);
  if (w != h) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw IoError("expected a square image: " + path);
  }
  FaceImage img{Tensor({3, static_cast<int64_t>(h), static_cast<int64_t>(w)})};
  std::vector<png_byte> row(static_cast<size_t>(3 * w));
  for (png_uint_32 y = 0; y < h; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (png_uint_32 x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        img.pixels[(static_cast<int64_t>(c) * h + y) * w + x] =
            2.0 * row[3 * x + static_cast<size_t>(c)] / 255.0 - 1.0;
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  img.check();
  return img;
}

}  // namespace dlat
