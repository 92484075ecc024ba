#pragma once

// 8-bit PNG I/O (grayscale and RGB) and resampling.

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace dgn {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Interleaved 8-bit image, row-major.
struct Image8 {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 1;  // 1 (gray) or 3 (RGB)
  std::vector<std::uint8_t> pixels;

  Image8() = default;
  Image8(std::size_t w, std::size_t h, std::size_t c) : width(w), height(h), channels(c), pixels(w * h * c, 0) {}

  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c = 0) { return pixels[(y * width + x) * channels + c]; }
  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c = 0) const {
    return pixels[(y * width + x) * channels + c];
  }
};

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace detail

/// Reads any 8/16-bit PNG, converted to 8-bit gray (channels=1) or RGB (channels=3).
/// Alpha is dropped; palette images become RGB.
inline Image8 read_png(const std::string& path) {
  detail::FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw IoError("cannot open " + path);
  png_byte sig[8];
  if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) throw IoError("not a PNG file: " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("libpng init failed: " + path);
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw IoError("libpng init failed: " + path);
  }
  Image8 img;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("corrupt PNG: " + path);
  }
  png_init_io(png, f.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const png_byte color = png_get_color_type(png, info);
  const png_byte depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if ((color & PNG_COLOR_MASK_ALPHA) || png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  img.width = png_get_image_width(png, info);
  img.height = png_get_image_height(png, info);
  img.channels = png_get_channels(png, info);
  if (img.channels != 1 && img.channels != 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("unsupported PNG channel layout: " + path);
  }
  img.pixels.assign(img.width * img.height * img.channels, 0);
  rows.resize(img.height);
  for (std::size_t y = 0; y < img.height; ++y) rows[y] = img.pixels.data() + y * img.width * img.channels;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

/// Writes a non-interlaced 8-bit PNG with fixed compression settings and
/// no time chunk, so identical pixels give identical files.
inline void write_png(const std::string& path, const Image8& img) {
  if (img.channels != 1 && img.channels != 3) throw std::invalid_argument("write_png: channels must be 1 or 3");
  if (img.width == 0 || img.height == 0 || img.pixels.size() != img.width * img.height * img.channels) {
    throw std::invalid_argument("write_png: inconsistent image buffer for " + path);
  }
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(parent, ec);
  }
  detail::FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw IoError("cannot write " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("libpng init failed: " + path);
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("libpng init failed: " + path);
  }
  std::vector<png_bytep> rows(img.height);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("PNG write failed: " + path);
  }
  png_init_io(png, f.get());
  png_set_compression_level(png, 6);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
               img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < img.height; ++y) {
    rows[y] = const_cast<png_bytep>(img.pixels.data() + y * img.width * img.channels);
  }
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

/// Bilinear resampling with half-pixel centres (edges clamped); returns
/// unrounded values on the 0..255 scale, interleaved like the source.
inline std::vector<double> resample_bilinear(const Image8& src, std::size_t out_w, std::size_t out_h) {
  std::vector<double> dst(out_w * out_h * src.channels);
  auto tap = [](std::size_t o, std::size_t in, std::size_t out, std::size_t& i0, std::size_t& i1, double& t) {
    double s = (static_cast<double>(o) + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(in - 1));
    i0 = static_cast<std::size_t>(std::floor(s));
    i1 = std::min(i0 + 1, in - 1);
    t = s - static_cast<double>(i0);
  };
  for (std::size_t y = 0; y < out_h; ++y) {
    std::size_t y0, y1;
    double ty;
    tap(y, src.height, out_h, y0, y1, ty);
    for (std::size_t x = 0; x < out_w; ++x) {
      std::size_t x0, x1;
      double tx;
      tap(x, src.width, out_w, x0, x1, tx);
      for (std::size_t c = 0; c < src.channels; ++c) {
        const double top = src.at(y0, x0, c) * (1 - tx) + src.at(y0, x1, c) * tx;
        const double bottom = src.at(y1, x0, c) * (1 - tx) + src.at(y1, x1, c) * tx;
        dst[(y * out_w + x) * src.channels + c] = top * (1 - ty) + bottom * ty;
      }
    }
  }
  return dst;
}

inline Image8 resize_bilinear(const Image8& src, std::size_t out_w, std::size_t out_h) {
  if (src.width == out_w && src.height == out_h) return src;
  const auto v = resample_bilinear(src, out_w, out_h);
  Image8 dst(out_w, out_h, src.channels);
  for (std::size_t i = 0; i < v.size(); ++i) dst.pixels[i] = static_cast<std::uint8_t>(std::clamp(std::lround(v[i]), 0L, 255L));
  return dst;
}

/// Nearest-neighbour resize sampling the source pixel under each output centre.
inline Image8 resize_nearest(const Image8& src, std::size_t out_w, std::size_t out_h) {
  if (src.width == out_w && src.height == out_h) return src;
  Image8 dst(out_w, out_h, src.channels);
  for (std::size_t y = 0; y < out_h; ++y) {
    const std::size_t sy = std::min(src.height - 1, (2 * y + 1) * src.height / (2 * out_h));
    for (std::size_t x = 0; x < out_w; ++x) {
      const std::size_t sx = std::min(src.width - 1, (2 * x + 1) * src.width / (2 * out_w));
      for (std::size_t c = 0; c < src.channels; ++c) dst.at(y, x, c) = src.at(sy, sx, c);
    }
  }
  return dst;
}

/// Collapses RGB to gray with integer BT.601 weights; gray passes through.
inline Image8 to_gray(const Image8& src) {
  if (src.channels == 1) return src;
  Image8 dst(src.width, src.height, 1);
  for (std::size_t i = 0; i < src.width * src.height; ++i) {
    const unsigned r = src.pixels[3 * i], g = src.pixels[3 * i + 1], b = src.pixels[3 * i + 2];
    dst.pixels[i] = static_cast<std::uint8_t>((299 * r + 587 * g + 114 * b + 500) / 1000);
  }
  return dst;
}

/// Converts a probability in [0,1] to an 8-bit level (round to nearest).
inline std::uint8_t to_byte(double p) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(p * 255.0), 0L, 255L));
}

}  // namespace dgn
