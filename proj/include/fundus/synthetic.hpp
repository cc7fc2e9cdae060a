#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "fundus/dataset.hpp"
#include "fundus/image_io.hpp"
#include "fundus/parallel.hpp"
#include "fundus/raster.hpp"
#include "fundus/rng.hpp"

namespace fundus {

// Synthetic fundus-like images for desk-scale runs. Two noisy diagnostic
// signals: referable cases draw a larger cup and, on average, a deeper
// nerve-fibre-layer defect (a dark wedge leaving the disc, outside the crop).
struct SynthConfig {
  std::size_t n = 1000;
  double imbalance_ratio = 9.0;  // label-0 count : label-1 count
  int image_size = 384;
  std::uint64_t seed = 0;
  double noise_sigma = 6.0;
  double disc_scale = 1.0;     // multiplies the disc radius (domain shift knob)
  double brightness = 1.0;     // global intensity gain (domain shift knob)
  double artifact_rate = 0.3;  // share of images with a bright reflection spot
  double left_eye_rate = 0.0;  // share of mirrored (left-eye) images (domain shift knob)
  std::string format = "png";  // png | ppm
  std::string id_prefix = "syn";

  // Cup-to-disc ratio ranges per label.
  double cdr0_min = 0.20, cdr0_max = 0.55;
  double cdr1_min = 0.45, cdr1_max = 0.80;
  // Fractional darkening of the wedge per label.
  double rnfl0_min = 0.00, rnfl0_max = 0.15;
  double rnfl1_min = 0.08, rnfl1_max = 0.40;
};

// Geometry of one generated image, in pixels of the generated image.
struct SynthGeometry {
  int label = 0;
  double disc_x = 0, disc_y = 0, disc_r = 0;
  double cup_x = 0, cup_y = 0, cup_r = 0;
  bool left_eye = false;
  bool artifact = false;
  double artifact_x = 0, artifact_y = 0, artifact_r = 0;
  double illumination = 1.0;
  double rnfl_depth = 0, rnfl_angle = 0;  // wedge darkening and direction (radians)
};

namespace detail {

constexpr std::uint64_t kSynthLabelStream = 0x6c6162656c73ULL;
constexpr std::uint64_t kSynthGeometryStream = 0x67656f6dULL;
constexpr std::uint64_t kSynthNoiseStream = 0x6e6f697365ULL;

struct Rgb {
  double r, g, b;
};

}  // namespace detail

// Labels: exactly round(n / (ratio + 1)) positives, placed by a seeded shuffle.
inline std::vector<int> synthetic_labels(const SynthConfig& cfg) {
  if (cfg.n < 2) throw UsageError("synthetic dataset needs n >= 2");
  if (!(cfg.imbalance_ratio > 0.0)) throw UsageError("imbalance ratio must be positive");
  auto positives = static_cast<std::size_t>(std::floor(static_cast<double>(cfg.n) / (cfg.imbalance_ratio + 1.0) + 0.5));
  positives = std::clamp<std::size_t>(positives, 1, cfg.n - 1);
  std::vector<int> labels(cfg.n, 0);
  std::fill(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(positives), 1);
  CounterRng rng(derive_key(cfg.seed, detail::kSynthLabelStream));
  shuffle(std::span<int>(labels), rng);
  return labels;
}

inline SynthGeometry synthetic_geometry(const SynthConfig& cfg, std::size_t index, int label) {
  CounterRng rng(derive_key(cfg.seed, detail::kSynthGeometryStream, index));
  const double s = cfg.image_size;
  SynthGeometry g;
  g.label = label;
  g.disc_r = cfg.disc_scale * rng.uniform(0.075, 0.095) * s;
  g.disc_x = s * (0.66 + rng.uniform(-0.05, 0.05));
  g.disc_y = s * (0.50 + rng.uniform(-0.05, 0.05));
  const double cdr = label == 1 ? rng.uniform(cfg.cdr1_min, cfg.cdr1_max) : rng.uniform(cfg.cdr0_min, cfg.cdr0_max);
  g.cup_r = cdr * g.disc_r;
  const double max_shift = std::max(0.0, g.disc_r - g.cup_r) * 0.3;
  g.cup_x = g.disc_x + rng.uniform(-max_shift, max_shift);
  g.cup_y = g.disc_y + rng.uniform(-max_shift, max_shift);
  g.illumination = rng.uniform(0.85, 1.15) * cfg.brightness;
  g.rnfl_depth = label == 1 ? rng.uniform(cfg.rnfl1_min, cfg.rnfl1_max) : rng.uniform(cfg.rnfl0_min, cfg.rnfl0_max);
  // Superior or inferior arcade, towards the macula.
  g.rnfl_angle = std::numbers::pi + (rng.bernoulli(0.5) ? 0.6 : -0.6) + rng.uniform(-0.15, 0.15);
  g.artifact = rng.bernoulli(cfg.artifact_rate);
  if (g.artifact) {
    // A reflection somewhere in the left half of the field of view.
    g.artifact_r = rng.uniform(0.03, 0.05) * s;
    g.artifact_x = s * rng.uniform(0.18, 0.42);
    g.artifact_y = s * rng.uniform(0.25, 0.75);
  }
  g.left_eye = rng.bernoulli(cfg.left_eye_rate);
  if (g.left_eye) {
    const auto mirror = [&](double x) { return (s - 1.0) - x; };
    g.disc_x = mirror(g.disc_x);
    g.cup_x = mirror(g.cup_x);
    g.artifact_x = mirror(g.artifact_x);
    g.rnfl_angle = std::numbers::pi - g.rnfl_angle;
  }
  return g;
}

// Renders an image from its geometry; noise_sigma = 0 gives the clean image.
inline Raster render_synthetic(const SynthGeometry& g, int size, double noise_sigma, std::uint64_t noise_key) {
  using detail::Rgb;
  const Rgb retina{150, 62, 32};
  const Rgb disc{235, 188, 120};
  const Rgb cup{252, 236, 200};
  const Rgb glare{255, 255, 250};
  const double c = (size - 1) / 2.0;
  const double fov_r = 0.47 * size;

  Raster img(size, size, 3);
  CounterRng noise(noise_key);
  const auto sq = [](double v) { return v * v; };
  const double disc_r2 = sq(g.disc_r);
  const double cup_r2 = sq(g.cup_r);
  const double glare_r2 = sq(g.artifact_r);
  const double wedge_in2 = sq(1.9 * g.disc_r);
  const double wedge_out2 = sq(0.32 * size);
  for (int y = 0; y < size; ++y) {
    std::uint8_t* out = img.row(y);
    for (int x = 0; x < size; ++x, out += 3) {
      const double rc2 = sq(x - c) + sq(y - c);
      if (rc2 > fov_r * fov_r) continue;  // black outside the camera's field of view
      double shade = 1.0 - 0.35 * rc2 / (fov_r * fov_r);
      const double dr2 = sq(x - g.disc_x) + sq(y - g.disc_y);
      if (g.rnfl_depth > 0.0 && dr2 >= wedge_in2 && dr2 <= wedge_out2) {
        double da = std::atan2(y - g.disc_y, x - g.disc_x) - g.rnfl_angle;
        da = std::remainder(da, 2.0 * std::numbers::pi);
        if (std::abs(da) <= 0.35) shade *= 1.0 - g.rnfl_depth;
      }
      Rgb px{retina.r * shade, retina.g * shade, retina.b * shade};
      if (dr2 <= disc_r2) px = disc;
      if (sq(x - g.cup_x) + sq(y - g.cup_y) <= cup_r2) px = cup;
      if (g.artifact && sq(x - g.artifact_x) + sq(y - g.artifact_y) <= glare_r2) px = glare;
      const double n = noise_sigma > 0.0 ? noise_sigma * noise.fast_normal() : 0.0;
      out[0] = to_u8(px.r * g.illumination + n);
      out[1] = to_u8(px.g * g.illumination + n);
      out[2] = to_u8(px.b * g.illumination + n);
    }
  }
  return img;
}

inline Raster synthetic_image(const SynthConfig& cfg, std::size_t index, const SynthGeometry& g) {
  return render_synthetic(g, cfg.image_size, cfg.noise_sigma, derive_key(cfg.seed, detail::kSynthNoiseStream, index));
}

struct SynthDataset {
  Manifest manifest;
  std::vector<SynthGeometry> geometry;
};

inline std::string synthetic_id(const SynthConfig& cfg, std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%05zu", index);
  return cfg.id_prefix + "_" + buf;
}

// Writes <out_dir>/images/<id>.<format> and <out_dir>/manifest.csv.
inline SynthDataset generate_synthetic(const SynthConfig& cfg, const fs::path& out_dir, int jobs = 1) {
  if (cfg.format != "png" && cfg.format != "ppm") throw UsageError("synthetic format must be png or ppm");
  if (cfg.image_size < 64) throw UsageError("synthetic image size must be >= 64");
  for (double rate : {cfg.artifact_rate, cfg.left_eye_rate})
    if (!(rate >= 0.0 && rate <= 1.0)) throw UsageError("synthetic rates must be in [0, 1]");
  if (!(cfg.disc_scale > 0.0 && cfg.brightness > 0.0 && cfg.noise_sigma >= 0.0))
    throw UsageError("disc scale and brightness must be positive, noise sigma non-negative");
  const auto labels = synthetic_labels(cfg);
  SynthDataset out;
  out.manifest.resize(cfg.n);
  out.geometry.resize(cfg.n);
  const fs::path image_dir = out_dir / "images";
  fs::create_directories(image_dir);
  parallel_for(cfg.n, jobs, [&](std::size_t i) {
    const SynthGeometry g = synthetic_geometry(cfg, i, labels[i]);
    const std::string id = synthetic_id(cfg, i);
    const fs::path path = image_dir / (id + "." + cfg.format);
    write_image(path, synthetic_image(cfg, i, g));
    out.manifest[i] = {id, path.string(), labels[i]};
    out.geometry[i] = g;
  });
  write_manifest(out_dir / "manifest.csv", out.manifest);
  return out;
}

// Manifest rows only (no pixels), for split-size experiments at full scale.
inline Manifest synthetic_manifest(std::size_t n0, std::size_t n1, std::uint64_t seed) {
  SynthConfig cfg;
  cfg.n = n0 + n1;
  cfg.seed = seed;
  cfg.imbalance_ratio = static_cast<double>(n0) / static_cast<double>(n1);
  auto labels = synthetic_labels(cfg);
  Manifest m(cfg.n);
  for (std::size_t i = 0; i < cfg.n; ++i) m[i] = {synthetic_id(cfg, i), "images/" + synthetic_id(cfg, i) + ".png", labels[i]};
  return m;
}

}  // namespace fundus
