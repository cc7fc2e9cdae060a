#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "fundus/error.hpp"

namespace fundus {

// 2-D 8-bit image, 1 (gray) or 3 (RGB) interleaved channels, row-major.
class Raster {
 public:
  Raster() = default;

  Raster(int width, int height, int channels, std::uint8_t fill = 0)
      : width_(width), height_(height), channels_(channels) {
    check_shape(width, height, channels);
    samples_.assign(static_cast<std::size_t>(width) * height * channels, fill);
  }

  Raster(int width, int height, int channels, std::vector<std::uint8_t> samples)
      : width_(width), height_(height), channels_(channels), samples_(std::move(samples)) {
    check_shape(width, height, channels);
    if (samples_.size() != static_cast<std::size_t>(width) * height * channels)
      throw DataError("raster sample count does not match " + std::to_string(width) + "x" +
                      std::to_string(height) + "x" + std::to_string(channels));
  }

  int width() const { return width_; }
  int height() const { return height_; }
  int channels() const { return channels_; }
  bool empty() const { return samples_.empty(); }
  std::size_t pixel_count() const { return static_cast<std::size_t>(width_) * height_; }

  std::uint8_t& at(int x, int y, int c = 0) { return samples_[index(x, y, c)]; }
  std::uint8_t at(int x, int y, int c = 0) const { return samples_[index(x, y, c)]; }

  std::uint8_t* row(int y) { return samples_.data() + index(0, y, 0); }
  const std::uint8_t* row(int y) const { return samples_.data() + index(0, y, 0); }

  std::vector<std::uint8_t>& samples() { return samples_; }
  const std::vector<std::uint8_t>& samples() const { return samples_; }

  bool operator==(const Raster&) const = default;

 private:
  static void check_shape(int w, int h, int c) {
    if (w < 1 || h < 1) throw DataError("raster dimensions must be positive");
    if (c != 1 && c != 3) throw DataError("raster must have 1 or 3 channels");
  }

  std::size_t index(int x, int y, int c) const {
    return (static_cast<std::size_t>(y) * width_ + x) * channels_ + c;
  }

  int width_ = 0;
  int height_ = 0;
  int channels_ = 1;
  std::vector<std::uint8_t> samples_;
};

// Cartesian offset from a transform center, in pixels.
struct Point {
  double u = 0.0;
  double v = 0.0;
};

struct PolarCoord {
  double r = 0.0;
  double theta = 0.0;  // radians, [0, 2*pi)
};

inline PolarCoord to_polar(Point p) {
  double theta = std::atan2(p.v, p.u);
  if (theta < 0.0) theta += 2.0 * std::numbers::pi;
  if (theta >= 2.0 * std::numbers::pi) theta = 0.0;
  return {std::hypot(p.u, p.v), theta};
}

inline Point from_polar(PolarCoord q) { return {q.r * std::cos(q.theta), q.r * std::sin(q.theta)}; }

// Round half up and saturate to the 8-bit range.
inline std::uint8_t to_u8(double v) {
  double t = v + 0.5;
  t = t > 0.0 ? t : 0.0;  // also maps NaN to 0
  t = t < 255.0 ? t : 255.0;
  return static_cast<std::uint8_t>(static_cast<int>(t));  // truncation == floor for t >= 0
}

inline std::uint8_t luma(std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  return to_u8(0.299 * r + 0.587 * g + 0.114 * b);
}

// Single-channel luminance plane; gray images are returned unchanged.
inline Raster luminance(const Raster& img) {
  if (img.channels() == 1) return img;
  Raster out(img.width(), img.height(), 1);
  // Per-channel product tables; the sum is formed in the same order as luma().
  static const auto tables = [] {
    std::array<std::array<double, 256>, 3> t{};
    for (int v = 0; v < 256; ++v) {
      t[0][v] = 0.299 * v;
      t[1][v] = 0.587 * v;
      t[2][v] = 0.114 * v;
    }
    return t;
  }();
  const auto& s = img.samples();
  auto& d = out.samples();
  for (std::size_t i = 0; i < d.size(); ++i)
    d[i] = to_u8(tables[0][s[3 * i]] + tables[1][s[3 * i + 1]] + tables[2][s[3 * i + 2]]);
  return out;
}

}  // namespace fundus
