#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <string_view>

#include "fundus/error.hpp"

namespace fundus {

// Per-class probabilities for one sample (class 0 = normal, 1 = referable).
struct ProbVector {
  std::array<double, 2> p{0.5, 0.5};

  double operator[](std::size_t c) const { return p[c]; }
  double& operator[](std::size_t c) { return p[c]; }

  bool valid(double sum_tol = 1e-9) const {
    for (double v : p)
      if (!(v >= 0.0 && v <= 1.0)) return false;
    return std::abs(p[0] + p[1] - 1.0) <= sum_tol;
  }

  bool operator==(const ProbVector&) const = default;
};

// Max-subtracted exponential normalization.
inline ProbVector softmax(const std::array<double, 2>& logits) {
  const double m = std::max(logits[0], logits[1]);
  const double e0 = std::exp(logits[0] - m);
  const double e1 = std::exp(logits[1] - m);
  const double z = e0 + e1;
  return {{e0 / z, e1 / z}};
}

// Which image view a model or prediction belongs to. `fused` marks ensemble
// output.
enum class View { original, cropped, polar, fused };

inline constexpr std::array<View, 3> kModelViews{View::original, View::cropped, View::polar};

inline const char* view_name(View v) {
  switch (v) {
    case View::original: return "original";
    case View::cropped: return "cropped";
    case View::polar: return "polar";
    case View::fused: return "fused";
  }
  return "?";
}

inline View parse_view(std::string_view s) {
  if (s == "original") return View::original;
  if (s == "cropped") return View::cropped;
  if (s == "polar") return View::polar;
  if (s == "fused") return View::fused;
  throw UsageError("unknown view '" + std::string(s) + "' (expected original, cropped, polar or fused)");
}

}  // namespace fundus
