#pragma once

#include <cmath>
#include <map>
#include <string>

#include "fundus/config.hpp"
#include "fundus/prob.hpp"

namespace fundus {

// Per-view fusion weights. The original-image model gets the larger share.
struct EnsembleConfig {
  std::map<View, double> weights{{View::original, 2.0}, {View::cropped, 0.5}, {View::polar, 0.5}};

  void validate() const {
    bool any = false;
    for (const auto& [view, w] : weights) {
      if (!(w >= 0.0) || !std::isfinite(w))
        throw UsageError(std::string("fusion weight for ") + view_name(view) + " must be a finite value >= 0");
      any = any || w > 0.0;
    }
    if (!any) throw UsageError("at least one fusion weight must be positive");
  }

  // Reads `weight.original`, `weight.cropped`, `weight.polar`; absent keys keep
  // their defaults.
  static EnsembleConfig from(const KeyValueConfig& kv) {
    EnsembleConfig cfg;
    for (View v : kModelViews) cfg.weights[v] = kv.get(std::string("weight.") + view_name(v), cfg.weights[v]);
    cfg.validate();
    return cfg;
  }
};

// Weighted mean of the per-view probabilities, normalized by the weights of
// the views actually present.
inline ProbVector fuse(const std::map<View, ProbVector>& preds, const EnsembleConfig& cfg) {
  if (preds.empty()) throw DataError("no view predictions to fuse");
  double total = 0.0;
  std::array<double, 2> acc{0.0, 0.0};
  for (const auto& [view, p] : preds) {
    const auto it = cfg.weights.find(view);
    if (it == cfg.weights.end()) throw UsageError(std::string("no fusion weight for view ") + view_name(view));
    total += it->second;
    acc[0] += it->second * p[0];
    acc[1] += it->second * p[1];
  }
  if (!(total > 0.0)) throw DataError("all fusion weights for the present views are zero");
  return {{acc[0] / total, acc[1] / total}};
}

// Arg-max label; near-ties go to the referable class.
inline int decide(const ProbVector& p) { return std::abs(p[0] - p[1]) < 1e-12 ? 1 : (p[1] > p[0] ? 1 : 0); }

}  // namespace fundus
