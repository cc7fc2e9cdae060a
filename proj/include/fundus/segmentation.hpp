#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "fundus/imaging.hpp"
#include "fundus/raster.hpp"

namespace fundus {

// Binary optic-disc mask; nonzero = disc.
class Mask {
 public:
  Mask() = default;
  Mask(int width, int height, bool fill = false)
      : width_(width), height_(height), bits_(static_cast<std::size_t>(width) * height, fill ? 1 : 0) {
    if (width < 1 || height < 1) throw DataError("mask dimensions must be positive");
  }

  int width() const { return width_; }
  int height() const { return height_; }
  bool at(int x, int y) const { return bits_[static_cast<std::size_t>(y) * width_ + x] != 0; }
  void set(int x, int y, bool v = true) { bits_[static_cast<std::size_t>(y) * width_ + x] = v ? 1 : 0; }
  std::size_t area() const { return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), 1)); }
  bool empty() const { return area() == 0; }
  const std::vector<std::uint8_t>& bits() const { return bits_; }

  // Any nonzero sample counts as disc.
  static Mask from_raster(const Raster& img) {
    const Raster lum = luminance(img);
    Mask m(lum.width(), lum.height());
    for (std::size_t i = 0; i < m.bits_.size(); ++i) m.bits_[i] = lum.samples()[i] != 0 ? 1 : 0;
    return m;
  }

  Raster to_raster() const {
    Raster out(width_, height_, 1);
    for (std::size_t i = 0; i < bits_.size(); ++i) out.samples()[i] = bits_[i] ? 255 : 0;
    return out;
  }

  bool operator==(const Mask&) const = default;

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<std::uint8_t> bits_;
};

enum class Frame { resized256, original };

struct BoundingBox {
  int x = 0;
  int y = 0;
  int w = 1;
  int h = 1;
  Frame frame = Frame::resized256;

  int right() const { return x + w; }
  int bottom() const { return y + h; }
  bool contains(int px, int py) const { return px >= x && px < right() && py >= y && py < bottom(); }
  bool operator==(const BoundingBox&) const = default;
};

struct Component {
  int label = 0;  // 1-based, raster-scan discovery order
  std::size_t area = 0;
  BoundingBox bbox;
};

// 4-connected components, labeled in raster-scan order of their first pixel.
inline std::vector<Component> connected_components(const Mask& mask, std::vector<int>* labels_out = nullptr) {
  const int w = mask.width();
  const int h = mask.height();
  std::vector<int> labels(static_cast<std::size_t>(w) * h, 0);
  std::vector<Component> comps;
  std::vector<int> stack;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t idx = static_cast<std::size_t>(y) * w + x;
      if (!mask.at(x, y) || labels[idx] != 0) continue;
      const int label = static_cast<int>(comps.size()) + 1;
      int min_x = x, max_x = x, min_y = y, max_y = y;
      std::size_t area = 0;
      labels[idx] = label;
      stack.assign(1, static_cast<int>(idx));
      while (!stack.empty()) {
        const int cur = stack.back();
        stack.pop_back();
        const int cx = cur % w;
        const int cy = cur / w;
        ++area;
        min_x = std::min(min_x, cx);
        max_x = std::max(max_x, cx);
        min_y = std::min(min_y, cy);
        max_y = std::max(max_y, cy);
        const std::array<std::array<int, 2>, 4> nbrs{{{cx - 1, cy}, {cx + 1, cy}, {cx, cy - 1}, {cx, cy + 1}}};
        for (auto [nx, ny] : nbrs) {
          if (nx < 0 || ny < 0 || nx >= w || ny >= h) continue;
          const std::size_t n = static_cast<std::size_t>(ny) * w + nx;
          if (mask.at(nx, ny) && labels[n] == 0) {
            labels[n] = label;
            stack.push_back(static_cast<int>(n));
          }
        }
      }
      comps.push_back({label, area, {min_x, min_y, max_x - min_x + 1, max_y - min_y + 1, Frame::resized256}});
    }
  }
  if (labels_out) *labels_out = std::move(labels);
  return comps;
}

// Maps a 256x256 (CLAHE-processed) image to an optic-disc mask. Real
// segmentation networks plug in here; their masks can also be loaded from
// files (see commands.hpp).
using Segmenter = std::function<Mask(const Raster&)>;

constexpr int kFrameSize = 256;

// Built-in fallback segmenter: threshold luminance at its 99th percentile,
// keeping only pixels strictly brighter than the darkest level, then keep
// the largest 4-connected component.
struct BrightnessSegmenter {
  double percentile = 0.99;

  Mask operator()(const Raster& img256) const {
    if (img256.width() != kFrameSize || img256.height() != kFrameSize)
      throw DataError("segmenter expects a 256x256 image, got " + std::to_string(img256.width()) + "x" +
                      std::to_string(img256.height()));
    const Raster lum = luminance(img256);
    std::array<std::size_t, 256> hist{};
    for (auto v : lum.samples()) ++hist[v];

    // Value at sorted position floor(percentile * (n - 1)).
    const std::size_t n = lum.samples().size();
    const auto rank = static_cast<std::size_t>(std::floor(percentile * static_cast<double>(n - 1)));
    int threshold = 0;
    std::size_t seen = 0;
    for (int v = 0; v < 256; ++v) {
      seen += hist[v];
      if (seen > rank) {
        threshold = v;
        break;
      }
    }
    int darkest = 0;
    while (hist[darkest] == 0) ++darkest;
    threshold = std::max(threshold, darkest + 1);

    Mask bright(lum.width(), lum.height());
    for (int y = 0; y < lum.height(); ++y)
      for (int x = 0; x < lum.width(); ++x)
        if (lum.at(x, y) >= threshold) bright.set(x, y);

    std::vector<int> labels;
    const auto comps = connected_components(bright, &labels);
    if (comps.empty()) return bright;
    const auto largest = std::max_element(comps.begin(), comps.end(), [](const Component& a, const Component& b) {
      return a.area < b.area;  // first of equal-area components wins
    });
    Mask out(lum.width(), lum.height());
    for (int y = 0; y < lum.height(); ++y)
      for (int x = 0; x < lum.width(); ++x)
        if (labels[static_cast<std::size_t>(y) * lum.width() + x] == largest->label) out.set(x, y);
    return out;
  }
};

inline Mask segment_disc(const Raster& img256) { return BrightnessSegmenter{}(img256); }

// Tightest box around the true pixels, in the 256 frame.
inline std::optional<BoundingBox> mask_to_bbox(const Mask& mask) {
  int min_x = mask.width(), min_y = mask.height(), max_x = -1, max_y = -1;
  for (int y = 0; y < mask.height(); ++y) {
    for (int x = 0; x < mask.width(); ++x) {
      if (!mask.at(x, y)) continue;
      min_x = std::min(min_x, x);
      max_x = std::max(max_x, x);
      min_y = std::min(min_y, y);
      max_y = std::max(max_y, y);
    }
  }
  if (max_x < 0) return std::nullopt;
  return BoundingBox{min_x, min_y, max_x - min_x + 1, max_y - min_y + 1, Frame::resized256};
}

inline int disc_diameter(const BoundingBox& box) {
  if (box.frame != Frame::resized256) throw UsageError("disc diameter is defined in the 256 frame");
  return std::max(box.w, box.h);
}

struct PaddingRule {
  double fraction = 0.30;
  int minimum = 20;
};

// Padding in pixels: round-half-up(fraction * diameter), raised to the
// minimum when smaller.
inline int padding_for(int diameter, const PaddingRule& rule = {}) {
  const int p = static_cast<int>(std::floor(rule.fraction * diameter + 0.5 + 1e-9));
  return std::max(p, rule.minimum);
}

inline BoundingBox pad_bbox(const BoundingBox& box, int diameter, const PaddingRule& rule = {},
                            int frame_size = kFrameSize) {
  if (box.frame != Frame::resized256) throw UsageError("padding is applied in the 256 frame");
  const int p = padding_for(diameter, rule);
  const int x0 = std::max(0, box.x - p);
  const int y0 = std::max(0, box.y - p);
  const int x1 = std::min(frame_size, box.right() + p);
  const int y1 = std::min(frame_size, box.bottom() + p);
  return {x0, y0, x1 - x0, y1 - y0, Frame::resized256};
}

// Maps a 256-frame box onto an original of the given size, rounding outward
// and clamping to the image.
inline BoundingBox rescale_to_original(const BoundingBox& box, int orig_w, int orig_h, int frame_size = kFrameSize) {
  const double sx = static_cast<double>(orig_w) / frame_size;
  const double sy = static_cast<double>(orig_h) / frame_size;
  const int x0 = std::clamp(static_cast<int>(std::floor(box.x * sx)), 0, orig_w);
  const int y0 = std::clamp(static_cast<int>(std::floor(box.y * sy)), 0, orig_h);
  const int x1 = std::clamp(static_cast<int>(std::ceil(box.right() * sx)), 0, orig_w);
  const int y1 = std::clamp(static_cast<int>(std::ceil(box.bottom() * sy)), 0, orig_h);
  return {x0, y0, std::max(0, x1 - x0), std::max(0, y1 - y0), Frame::original};
}

struct PreprocessConfig {
  int view_size = 256;
  ClaheParams clahe{};
  PaddingRule padding{};
  double majority_fraction = 0.5;  // mask area above this share of the frame -> fallback
  int fallback_crop = 272;         // native pixels, clamped to the shorter side
  int min_crop = 8;                // crops narrower than this -> fallback
};

enum class FallbackReason { none, empty_mask, majority_mask, degenerate_crop };

struct ViewSet {
  Raster original_view;
  Raster cropped_view;
  Raster polar_view;
  bool used_fallback = false;
  FallbackReason reason = FallbackReason::none;
  BoundingBox crop_box{0, 0, 1, 1, Frame::original};  // region of the original that became cropped_view

  bool operator==(const ViewSet&) const = default;
};

// Full disc-aware preprocessing of one fundus image into its three views.
inline ViewSet preprocess_sample(const Raster& original, const Segmenter& segmenter, const PreprocessConfig& cfg = {}) {
  if (original.empty()) throw DataError("empty input image");
  const int s = cfg.view_size;
  const Raster resized = resize_bilinear(original, s, s);
  const Raster enhanced = clahe(resized, cfg.clahe);
  const Mask mask = segmenter(enhanced);
  if (mask.width() != s || mask.height() != s)
    throw DataError("segmenter returned a " + std::to_string(mask.width()) + "x" + std::to_string(mask.height()) +
                    " mask for a " + std::to_string(s) + "x" + std::to_string(s) + " frame");

  ViewSet views;
  const std::size_t area = mask.area();
  std::optional<BoundingBox> crop_box;
  if (area == 0) {
    views.reason = FallbackReason::empty_mask;
  } else if (static_cast<double>(area) > cfg.majority_fraction * s * s) {
    views.reason = FallbackReason::majority_mask;
  } else {
    const BoundingBox tight = *mask_to_bbox(mask);
    const BoundingBox padded = pad_bbox(tight, disc_diameter(tight), cfg.padding, s);
    const BoundingBox box = rescale_to_original(padded, original.width(), original.height(), s);
    if (box.w < cfg.min_crop || box.h < cfg.min_crop)
      views.reason = FallbackReason::degenerate_crop;
    else
      crop_box = box;
  }

  Raster cropped;
  if (crop_box) {
    cropped = crop(original, crop_box->x, crop_box->y, crop_box->w, crop_box->h);
    views.crop_box = *crop_box;
  } else {
    views.used_fallback = true;
    const int side = std::min({cfg.fallback_crop, original.width(), original.height()});
    cropped = center_crop(original, side);
    views.crop_box = {(original.width() - side) / 2, (original.height() - side) / 2, side, side, Frame::original};
  }
  views.cropped_view = resize_bilinear(cropped, s, s);
  views.polar_view = polar_transform(views.cropped_view, s, s);
  views.original_view = resized;
  return views;
}

}  // namespace fundus
