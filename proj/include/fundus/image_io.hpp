#pragma once

#include <png.h>

#include <cctype>
#include <csetjmp>
#include <cstring>
#include <string>
#include <vector>

#include "fundus/io.hpp"
#include "fundus/raster.hpp"

namespace fundus {

// ---- binary PGM (P5) / PPM (P6), maxval 255 ------------------------------

inline std::string encode_pnm(const Raster& img) {
  std::string out = (img.channels() == 1 ? "P5\n" : "P6\n");
  out += std::to_string(img.width()) + " " + std::to_string(img.height()) + "\n255\n";
  out.append(reinterpret_cast<const char*>(img.samples().data()), img.samples().size());
  return out;
}

inline Raster decode_pnm(const std::string& bytes, const std::string& name = "<memory>") {
  std::size_t pos = 0;
  auto skip_space = [&] {
    for (;;) {
      while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
      if (pos < bytes.size() && bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        continue;
      }
      return;
    }
  };
  auto read_int = [&]() -> long {
    skip_space();
    long v = 0;
    bool any = false;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + (bytes[pos++] - '0');
      any = true;
      if (v > (1L << 24)) throw DataError(name + ": PNM header value too large");
    }
    if (!any) throw DataError(name + ": malformed PNM header");
    return v;
  };

  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6'))
    throw DataError(name + ": not a binary PGM/PPM file");
  const int channels = bytes[1] == '5' ? 1 : 3;
  pos = 2;
  const long w = read_int();
  const long h = read_int();
  const long maxval = read_int();
  if (maxval != 255) throw DataError(name + ": only 8-bit PNM (maxval 255) is supported");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos])))
    throw DataError(name + ": malformed PNM header");
  ++pos;
  const std::size_t n = static_cast<std::size_t>(w) * h * channels;
  if (bytes.size() - pos < n) throw DataError(name + ": truncated PNM data");
  std::vector<std::uint8_t> samples(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                                    bytes.begin() + static_cast<std::ptrdiff_t>(pos + n));
  return Raster(static_cast<int>(w), static_cast<int>(h), channels, std::move(samples));
}

// ---- PNG via libpng --------------------------------------------------------

inline Raster decode_png(const std::string& bytes, const std::string& name = "<memory>") {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size()))
    throw DataError(name + ": " + image.message);
  const bool color = (image.format & PNG_FORMAT_FLAG_COLOR) != 0;
  image.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> samples(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, samples.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw DataError(name + ": " + msg);
  }
  return Raster(static_cast<int>(image.width), static_cast<int>(image.height), color ? 3 : 1, std::move(samples));
}

inline std::string encode_png(const Raster& img, int compression_level = 3) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw std::runtime_error("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw std::runtime_error("png_create_info_struct failed");
  }
  std::string out;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("PNG encoding failed");
  }
  png_set_write_fn(
      png, &out,
      [](png_structp p, png_bytep data, png_size_t len) {
        static_cast<std::string*>(png_get_io_ptr(p))->append(reinterpret_cast<const char*>(data), len);
      },
      nullptr);
  png_set_compression_level(png, compression_level);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width()), static_cast<png_uint_32>(img.height()), 8,
               img.channels() == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const std::size_t stride = static_cast<std::size_t>(img.width()) * img.channels();
  for (int y = 0; y < img.height(); ++y)
    png_write_row(png, const_cast<png_bytep>(img.samples().data() + y * stride));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

// ---- format dispatch -------------------------------------------------------

inline Raster decode_image(const std::string& bytes, const std::string& name = "<memory>") {
  static constexpr unsigned char kPngMagic[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  if (bytes.size() >= 8 && std::memcmp(bytes.data(), kPngMagic, 8) == 0) return decode_png(bytes, name);
  if (bytes.size() >= 2 && bytes[0] == 'P') return decode_pnm(bytes, name);
  throw DataError(name + ": unrecognized image format");
}

inline Raster read_image(const fs::path& path) { return decode_image(read_file(path), path.string()); }

// Format chosen by extension: .png, or .pgm/.ppm/.pnm for binary PNM.
inline void write_image(const fs::path& path, const Raster& img) {
  const std::string ext = path.extension().string();
  if (ext == ".png") {
    write_file_atomic(path, encode_png(img));
  } else if (ext == ".pgm" || ext == ".ppm" || ext == ".pnm") {
    if (ext == ".pgm" && img.channels() != 1) throw UsageError("PGM output requires a gray image: " + path.string());
    write_file_atomic(path, encode_pnm(img));
  } else {
    throw UsageError("unsupported image extension: " + path.string());
  }
}

}  // namespace fundus
