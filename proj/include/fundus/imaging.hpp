#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "fundus/raster.hpp"
#include "fundus/rng.hpp"

namespace fundus {

namespace detail {

// Bilinear sample of channel c at continuous pixel coordinates, with the
// coordinates clamped to the image. Pixel centers sit at integer positions.
inline double sample_bilinear(const Raster& img, double fx, double fy, int c) {
  const int w = img.width();
  const int h = img.height();
  fx = std::clamp(fx, 0.0, static_cast<double>(w - 1));
  fy = std::clamp(fy, 0.0, static_cast<double>(h - 1));
  const int x0 = static_cast<int>(fx);
  const int y0 = static_cast<int>(fy);
  const int x1 = std::min(x0 + 1, w - 1);
  const int y1 = std::min(y0 + 1, h - 1);
  const double ax = fx - x0;
  const double ay = fy - y0;
  const double top = img.at(x0, y0, c) * (1.0 - ax) + img.at(x1, y0, c) * ax;
  const double bottom = img.at(x0, y1, c) * (1.0 - ax) + img.at(x1, y1, c) * ax;
  return top * (1.0 - ay) + bottom * ay;
}

// Inverse-mapped warp: for each output pixel, source(x, y) gives the source
// coordinate. Samples outside [-0.5, size - 0.5] are filled with `fill`.
template <int Ch, typename SourceFn>
void warp_kernel(const Raster& img, Raster& out, SourceFn& source, bool fill_outside, std::uint8_t fill) {
  const int w = img.width();
  const int h = img.height();
  const double max_x = w - 0.5;
  const double max_y = h - 0.5;
  const std::uint8_t* src = img.samples().data();
  const std::size_t stride = static_cast<std::size_t>(w) * Ch;
  const int out_w = out.width();
  const int out_h = out.height();
  for (int y = 0; y < out_h; ++y) {
    std::uint8_t* dst = out.row(y);
    for (int x = 0; x < out_w; ++x, dst += Ch) {
      const auto [sx, sy] = source(x, y);
      if (fill_outside && (sx < -0.5 || sy < -0.5 || sx > max_x || sy > max_y)) {
        for (int c = 0; c < Ch; ++c) dst[c] = fill;
        continue;
      }
      // Same arithmetic as sample_bilinear, shared across channels.
      const double fx = std::clamp(sx, 0.0, static_cast<double>(w - 1));
      const double fy = std::clamp(sy, 0.0, static_cast<double>(h - 1));
      const int x0 = static_cast<int>(fx);
      const int y0 = static_cast<int>(fy);
      const int x1 = std::min(x0 + 1, w - 1);
      const int y1 = std::min(y0 + 1, h - 1);
      const double ax = fx - x0;
      const double ay = fy - y0;
      const std::uint8_t* p00 = src + y0 * stride + x0 * Ch;
      const std::uint8_t* p01 = src + y0 * stride + x1 * Ch;
      const std::uint8_t* p10 = src + y1 * stride + x0 * Ch;
      const std::uint8_t* p11 = src + y1 * stride + x1 * Ch;
      std::uint8_t px[Ch];
      for (int c = 0; c < Ch; ++c) {
        const double top = p00[c] * (1.0 - ax) + p01[c] * ax;
        const double bottom = p10[c] * (1.0 - ax) + p11[c] * ax;
        px[c] = to_u8(top * (1.0 - ay) + bottom * ay);
      }
      for (int c = 0; c < Ch; ++c) dst[c] = px[c];
    }
  }
}

// Inverse-mapped warp: for each output pixel, source(x, y) gives the source
// coordinate. Samples outside [-0.5, size - 0.5] are filled with `fill`.
template <typename SourceFn>
Raster warp(const Raster& img, int out_w, int out_h, SourceFn&& source, bool fill_outside,
            std::uint8_t fill = 0) {
  Raster out(out_w, out_h, img.channels());
  if (img.channels() == 3)
    warp_kernel<3>(img, out, source, fill_outside, fill);
  else
    warp_kernel<1>(img, out, source, fill_outside, fill);
  return out;
}

}  // namespace detail

namespace detail {

template <int Ch>
void resize_kernel(const Raster& img, Raster& out) {
  const int out_w = out.width();
  const int out_h = out.height();
  std::vector<int> i0(out_w), i1(out_w);
  std::vector<double> ax(out_w);
  const double scale_x = static_cast<double>(img.width()) / out_w;
  for (int x = 0; x < out_w; ++x) {
    const double fx = std::clamp((x + 0.5) * scale_x - 0.5, 0.0, static_cast<double>(img.width() - 1));
    const int x0 = static_cast<int>(fx);
    i0[x] = x0 * Ch;
    i1[x] = std::min(x0 + 1, img.width() - 1) * Ch;
    ax[x] = fx - x0;
  }
  const double scale_y = static_cast<double>(img.height()) / out_h;
  for (int y = 0; y < out_h; ++y) {
    const double fy = std::clamp((y + 0.5) * scale_y - 0.5, 0.0, static_cast<double>(img.height() - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, img.height() - 1);
    const double ay = fy - y0;
    const std::uint8_t* r0 = img.row(y0);
    const std::uint8_t* r1 = img.row(y1);
    std::uint8_t* dst = out.row(y);
    const int* pi0 = i0.data();
    const int* pi1 = i1.data();
    const double* pax = ax.data();
    for (int x = 0; x < out_w; ++x, dst += Ch) {
      const double a = pax[x];
      const double bx = 1.0 - a;
      const std::uint8_t* s0 = r0 + pi0[x];
      const std::uint8_t* s1 = r0 + pi1[x];
      const std::uint8_t* t0 = r1 + pi0[x];
      const std::uint8_t* t1 = r1 + pi1[x];
      std::uint8_t px[Ch];
      for (int c = 0; c < Ch; ++c) {
        const double top = s0[c] * bx + s1[c] * a;
        const double bottom = t0[c] * bx + t1[c] * a;
        px[c] = to_u8(top * (1.0 - ay) + bottom * ay);
      }
      for (int c = 0; c < Ch; ++c) dst[c] = px[c];
    }
  }
}

}  // namespace detail

// Bilinear resize with pixel-center alignment and edge clamping.
inline Raster resize_bilinear(const Raster& img, int out_w, int out_h) {
  if (out_w < 1 || out_h < 1) throw UsageError("resize target must be at least 1x1");
  if (out_w == img.width() && out_h == img.height()) return img;
  Raster out(out_w, out_h, img.channels());
  if (img.channels() == 3)
    detail::resize_kernel<3>(img, out);
  else
    detail::resize_kernel<1>(img, out);
  return out;
}

// Copies the w x h window with top-left corner (x, y). The window must lie
// inside the image.
inline Raster crop(const Raster& img, int x, int y, int w, int h) {
  if (x < 0 || y < 0 || w < 1 || h < 1 || x + w > img.width() || y + h > img.height())
    throw DataError("crop window outside image");
  Raster out(w, h, img.channels());
  const std::size_t row = static_cast<std::size_t>(w) * img.channels();
  for (int r = 0; r < h; ++r) {
    const auto* src = img.row(y + r) + static_cast<std::size_t>(x) * img.channels();
    std::copy(src, src + row, out.row(r));
  }
  return out;
}

// Square crop centered in the image; an odd leftover pixel goes to the
// right/bottom margin.
inline Raster center_crop(const Raster& img, int size) {
  if (size < 1 || size > std::min(img.width(), img.height())) throw DataError("crop exceeds image");
  return crop(img, (img.width() - size) / 2, (img.height() - size) / 2, size, size);
}

struct ClaheParams {
  double clip_fraction = 0.01;
  int grid = 8;
};

namespace detail {

using Lut = std::array<std::uint8_t, 256>;

// Clips every bin at ceil(clip_fraction * n) and spreads the excess evenly:
// each bin gets the quotient, the remainder goes one count each to bins
// spaced 256 / remainder apart.
inline std::array<std::uint32_t, 256> clip_histogram(std::array<std::uint32_t, 256> hist, std::uint32_t n,
                                                     double clip_fraction) {
  const auto limit = static_cast<std::uint32_t>(std::ceil(clip_fraction * n));
  std::uint32_t excess = 0;
  for (auto& h : hist) {
    if (h > limit) {
      excess += h - limit;
      h = limit;
    }
  }
  const std::uint32_t quotient = excess / 256;
  const std::uint32_t remainder = excess % 256;
  for (auto& h : hist) h += quotient;
  for (std::uint32_t k = 0; k < remainder; ++k) ++hist[k * 256 / remainder];
  return hist;
}

// Clipped-histogram equalization table for one tile. A tile holding a single
// intensity keeps that intensity (identity table).
inline Lut tile_lut(const std::array<std::uint32_t, 256>& hist, std::uint32_t n, double clip_fraction) {
  Lut lut{};
  const auto distinct = std::count_if(hist.begin(), hist.end(), [](std::uint32_t h) { return h > 0; });
  if (distinct <= 1) {
    for (int v = 0; v < 256; ++v) lut[v] = static_cast<std::uint8_t>(v);
    return lut;
  }
  const auto clipped = clip_histogram(hist, n, clip_fraction);
  std::uint64_t cdf = 0;
  for (int v = 0; v < 256; ++v) {
    cdf += clipped[v];
    lut[v] = to_u8(255.0 * static_cast<double>(cdf) / n);
  }
  return lut;
}

inline Raster clahe_plane(const Raster& plane, const ClaheParams& p) {
  const int w = plane.width();
  const int h = plane.height();
  const int gx = std::min(p.grid, w);
  const int gy = std::min(p.grid, h);

  std::vector<Lut> luts(static_cast<std::size_t>(gx) * gy);
  for (int ty = 0; ty < gy; ++ty) {
    const int y0 = ty * h / gy;
    const int y1 = (ty + 1) * h / gy;
    for (int tx = 0; tx < gx; ++tx) {
      const int x0 = tx * w / gx;
      const int x1 = (tx + 1) * w / gx;
      std::array<std::uint32_t, 256> hist{};
      for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) ++hist[plane.at(x, y)];
      const auto n = static_cast<std::uint32_t>((x1 - x0) * (y1 - y0));
      luts[static_cast<std::size_t>(ty) * gx + tx] = tile_lut(hist, n, p.clip_fraction);
    }
  }

  // Tile i's center sits at fractional tile coordinate i.
  std::vector<int> tx0(w), tx1(w);
  std::vector<double> ax(w);
  for (int x = 0; x < w; ++x) {
    const double f = std::clamp((x + 0.5) * gx / w - 0.5, 0.0, static_cast<double>(gx - 1));
    tx0[x] = static_cast<int>(f);
    tx1[x] = std::min(tx0[x] + 1, gx - 1);
    ax[x] = f - tx0[x];
  }

  Raster out(w, h, 1);
  for (int y = 0; y < h; ++y) {
    const double f = std::clamp((y + 0.5) * gy / h - 0.5, 0.0, static_cast<double>(gy - 1));
    const int ty0 = static_cast<int>(f);
    const int ty1 = std::min(ty0 + 1, gy - 1);
    const double ay = f - ty0;
    const Lut* top = &luts[static_cast<std::size_t>(ty0) * gx];
    const Lut* bottom = &luts[static_cast<std::size_t>(ty1) * gx];
    for (int x = 0; x < w; ++x) {
      const std::uint8_t v = plane.at(x, y);
      const double t = top[tx0[x]][v] * (1.0 - ax[x]) + top[tx1[x]][v] * ax[x];
      const double b = bottom[tx0[x]][v] * (1.0 - ax[x]) + bottom[tx1[x]][v] * ax[x];
      out.at(x, y) = to_u8(t * (1.0 - ay) + b * ay);
    }
  }
  return out;
}

}  // namespace detail

// Contrast-limited adaptive histogram equalization. RGB input is equalized on
// its luminance and the color channels are rescaled by the luminance gain.
inline Raster clahe(const Raster& img, const ClaheParams& p = {}) {
  if (p.grid < 1) throw UsageError("CLAHE grid must be >= 1");
  if (!(p.clip_fraction > 0.0 && p.clip_fraction <= 1.0)) throw UsageError("CLAHE clip fraction must be in (0, 1]");
  if (img.channels() == 1) return detail::clahe_plane(img, p);

  const Raster y = luminance(img);
  const Raster y_eq = detail::clahe_plane(y, p);
  Raster out(img.width(), img.height(), 3);
  const auto& src = img.samples();
  auto& dst = out.samples();
  for (std::size_t i = 0; i < y.samples().size(); ++i) {
    const double before = y.samples()[i];
    const std::uint8_t after = y_eq.samples()[i];
    if (before == 0.0) {
      dst[3 * i] = dst[3 * i + 1] = dst[3 * i + 2] = after;
      continue;
    }
    const double gain = after / before;
    for (int c = 0; c < 3; ++c) dst[3 * i + c] = to_u8(src[3 * i + c] * gain);
  }
  return out;
}

inline Raster clahe(const Raster& img, double clip_fraction, int grid) { return clahe(img, {clip_fraction, grid}); }

// Cartesian -> polar resampling around the image center. Output columns run
// over angle, rows over radius: theta = 2*pi*(i + 0.5)/out_w,
// r = r_max*(j + 0.5)/out_h with r_max = min(width, height)/2.
inline Raster polar_transform(const Raster& img, int out_w, int out_h) {
  if (img.empty()) throw DataError("polar transform of empty image");
  if (out_w < 1 || out_h < 1) throw UsageError("polar output must be at least 1x1");
  const double cx = (img.width() - 1) / 2.0;
  const double cy = (img.height() - 1) / 2.0;
  const double r_max = std::min(img.width(), img.height()) / 2.0;

  std::vector<double> cos_t(out_w), sin_t(out_w);
  for (int i = 0; i < out_w; ++i) {
    const double theta = 2.0 * std::numbers::pi * (i + 0.5) / out_w;
    cos_t[i] = std::cos(theta);
    sin_t[i] = std::sin(theta);
  }
  std::vector<double> radius(out_h);
  for (int j = 0; j < out_h; ++j) radius[j] = r_max * (j + 0.5) / out_h;
  const double* ct = cos_t.data();
  const double* st = sin_t.data();
  const double* rt = radius.data();
  return detail::warp(
      img, out_w, out_h, [=](int i, int j) { return std::pair{cx + rt[j] * ct[i], cy + rt[j] * st[i]}; }, false);
}

inline Raster flip_h(const Raster& img) {
  Raster out(img.width(), img.height(), img.channels());
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x)
      for (int c = 0; c < img.channels(); ++c) out.at(img.width() - 1 - x, y, c) = img.at(x, y, c);
  return out;
}

inline Raster flip_v(const Raster& img) {
  Raster out(img.width(), img.height(), img.channels());
  const std::size_t row = static_cast<std::size_t>(img.width()) * img.channels();
  for (int y = 0; y < img.height(); ++y) {
    std::copy(img.row(y), img.row(y) + row, out.row(img.height() - 1 - y));
  }
  return out;
}

// Rotation about the image center (counter-clockwise on screen for positive
// angles). Uncovered pixels become 0.
inline Raster rotate(const Raster& img, double degrees) {
  if (degrees == 0.0) return img;
  const double rad = degrees * std::numbers::pi / 180.0;
  const double c = std::cos(rad);
  const double s = std::sin(rad);
  const double cx = (img.width() - 1) / 2.0;
  const double cy = (img.height() - 1) / 2.0;
  return detail::warp(
      img, img.width(), img.height(),
      [&](int x, int y) {
        const double dx = x - cx;
        const double dy = y - cy;
        return std::pair{cx + c * dx - s * dy, cy + s * dx + c * dy};
      },
      true);
}

// Magnifies (factor > 1) or shrinks (factor < 1) content about the center.
inline Raster scale_about_center(const Raster& img, double factor) {
  if (!(factor > 0.0)) throw UsageError("scale factor must be positive");
  if (factor == 1.0) return img;
  const double cx = (img.width() - 1) / 2.0;
  const double cy = (img.height() - 1) / 2.0;
  return detail::warp(
      img, img.width(), img.height(),
      [&](int x, int y) { return std::pair{cx + (x - cx) / factor, cy + (y - cy) / factor}; }, true);
}

struct AugmentPolicy {
  double hflip_prob = 0.5;
  double vflip_prob = 0.5;
  double rotation_range = 10.0;  // degrees, symmetric: [-range, +range]
  double scale_min = 1.0;
  double scale_max = 1.0;
  std::uint64_t seed = 0;

  static AugmentPolicy none() { return {0.0, 0.0, 0.0, 1.0, 1.0, 0}; }

  bool is_identity() const {
    return hflip_prob == 0.0 && vflip_prob == 0.0 && rotation_range == 0.0 && scale_min == 1.0 && scale_max == 1.0;
  }

  void validate() const {
    auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
    if (!prob(hflip_prob) || !prob(vflip_prob)) throw UsageError("flip probabilities must be in [0, 1]");
    if (!(rotation_range >= 0.0)) throw UsageError("rotation range must be >= 0");
    if (!(scale_min > 0.0) || !(scale_max >= scale_min)) throw UsageError("scale range must be positive and ordered");
  }
};

struct AugmentDraw {
  bool hflip = false;
  bool vflip = false;
  double degrees = 0.0;
  double scale = 1.0;
};

// Four draws per sample from the stream keyed on (policy.seed, sample_index).
inline AugmentDraw draw_augmentation(const AugmentPolicy& policy, std::uint64_t sample_index) {
  CounterRng rng(derive_key(policy.seed, sample_index));
  AugmentDraw d;
  d.hflip = rng.bernoulli(policy.hflip_prob);
  d.vflip = rng.bernoulli(policy.vflip_prob);
  d.degrees = rng.uniform(-policy.rotation_range, policy.rotation_range);
  d.scale = rng.uniform(policy.scale_min, policy.scale_max);
  return d;
}

// Applies scale, then rotation, then flips.
inline Raster augment(const Raster& img, const AugmentPolicy& policy, std::uint64_t sample_index) {
  policy.validate();
  const AugmentDraw d = draw_augmentation(policy, sample_index);
  Raster out = scale_about_center(img, d.scale);
  out = rotate(out, d.degrees);
  if (d.hflip) out = flip_h(out);
  if (d.vflip) out = flip_v(out);
  return out;
}

}  // namespace fundus
