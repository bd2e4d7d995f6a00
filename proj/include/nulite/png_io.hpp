#pragma once

#include <png.h>

#include <cstdio>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace nulite {

struct ImageU8 {
  int64_t height = 0, width = 0, channels = 0;
  std::vector<uint8_t> data;  // HWC

  uint8_t at(int64_t r, int64_t c, int64_t ch) const {
    return data[size_t((r * width + c) * channels + ch)];
  }
  uint8_t& at(int64_t r, int64_t c, int64_t ch) {
    return data[size_t((r * width + c) * channels + ch)];
  }
};

struct ImageU16 {
  int64_t height = 0, width = 0;
  std::vector<uint16_t> data;

  uint16_t at(int64_t r, int64_t c) const { return data[size_t(r * width + c)]; }
  uint16_t& at(int64_t r, int64_t c) { return data[size_t(r * width + c)]; }
};

namespace detail {

struct PngFile {
  FILE* f = nullptr;
  explicit PngFile(const std::string& path, const char* mode) : f(std::fopen(path.c_str(), mode)) {
    if (!f) throw std::runtime_error("cannot open " + path);
  }
  ~PngFile() {
    if (f) std::fclose(f);
  }
  PngFile(const PngFile&) = delete;
  PngFile& operator=(const PngFile&) = delete;
};

}  // namespace detail

// 8-bit RGB read; palette/gray/alpha inputs are expanded or stripped.
inline ImageU8 read_png_rgb8(const std::string& path) {
  detail::PngFile file(path, "rb");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("png read failed: " + path);
  }
  png_init_io(png, file.f);
  png_read_info(png, info);
  png_set_expand(png);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_gray_to_rgb(png);
  png_read_update_info(png, info);
  ImageU8 img;
  img.height = png_get_image_height(png, info);
  img.width = png_get_image_width(png, info);
  img.channels = 3;
  if (png_get_channels(png, info) != 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("png not reducible to RGB: " + path);
  }
  img.data.resize(size_t(img.height * img.width * 3));
  std::vector<png_bytep> rows(size_t(img.height));
  for (int64_t r = 0; r < img.height; ++r)
    rows[size_t(r)] = img.data.data() + r * img.width * 3;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

inline void write_png_rgb8(const std::string& path, const ImageU8& img) {
  if (img.channels != 3) throw std::invalid_argument("write_png_rgb8: need 3 channels");
  detail::PngFile file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("png write failed: " + path);
  }
  png_init_io(png, file.f);
  png_set_IHDR(png, info, png_uint_32(img.width), png_uint_32(img.height), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_bytep> rows(size_t(img.height));
  for (int64_t r = 0; r < img.height; ++r)
    rows[size_t(r)] = const_cast<uint8_t*>(img.data.data()) + r * img.width * 3;
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

// 16-bit single-channel label image.
inline ImageU16 read_png_gray16(const std::string& path) {
  detail::PngFile file(path, "rb");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("png read failed: " + path);
  }
  png_init_io(png, file.f);
  png_read_info(png, info);
  if (png_get_color_type(png, info) != PNG_COLOR_TYPE_GRAY) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("expected grayscale png: " + path);
  }
  if (png_get_bit_depth(png, info) < 16) png_set_expand_16(png);
  png_set_swap(png);  // png is big-endian on disk
  png_read_update_info(png, info);
  ImageU16 img;
  img.height = png_get_image_height(png, info);
  img.width = png_get_image_width(png, info);
  img.data.resize(size_t(img.height * img.width));
  std::vector<png_bytep> rows(size_t(img.height));
  for (int64_t r = 0; r < img.height; ++r)
    rows[size_t(r)] = reinterpret_cast<png_bytep>(img.data.data() + r * img.width);
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

inline void write_png_gray16(const std::string& path, const ImageU16& img) {
  detail::PngFile file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("png write failed: " + path);
  }
  png_init_io(png, file.f);
  png_set_IHDR(png, info, png_uint_32(img.width), png_uint_32(img.height), 16,
               PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_set_swap(png);
  std::vector<png_bytep> rows(size_t(img.height));
  for (int64_t r = 0; r < img.height; ++r)
    rows[size_t(r)] =
        reinterpret_cast<png_bytep>(const_cast<uint16_t*>(img.data.data()) + r * img.width);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

// 8-bit single-channel (type maps).
inline ImageU8 read_png_gray8(const std::string& path) {
  detail::PngFile file(path, "rb");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("png read failed: " + path);
  }
  png_init_io(png, file.f);
  png_read_info(png, info);
  if (png_get_color_type(png, info) != PNG_COLOR_TYPE_GRAY ||
      png_get_bit_depth(png, info) != 8) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("expected 8-bit grayscale png: " + path);
  }
  png_read_update_info(png, info);
  ImageU8 img;
  img.height = png_get_image_height(png, info);
  img.width = png_get_image_width(png, info);
  img.channels = 1;
  img.data.resize(size_t(img.height * img.width));
  std::vector<png_bytep> rows(size_t(img.height));
  for (int64_t r = 0; r < img.height; ++r) rows[size_t(r)] = img.data.data() + r * img.width;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

inline void write_png_gray8(const std::string& path, const ImageU8& img) {
  if (img.channels != 1) throw std::invalid_argument("write_png_gray8: need 1 channel");
  detail::PngFile file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("png write failed: " + path);
  }
  png_init_io(png, file.f);
  png_set_IHDR(png, info, png_uint_32(img.width), png_uint_32(img.height), 8,
               PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_bytep> rows(size_t(img.height));
  for (int64_t r = 0; r < img.height; ++r)
    rows[size_t(r)] = const_cast<uint8_t*>(img.data.data()) + r * img.width;
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace nulite
