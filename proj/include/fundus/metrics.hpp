#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "fundus/error.hpp"
#include "fundus/prob.hpp"

namespace fundus {

// Mann-Whitney AUC: fraction of (positive, negative) pairs where the positive
// scores higher, ties counting one half. O(n log n) over tie groups.
inline double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw UsageError("scores and labels differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  double pos = 0, neg = 0, wins = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    double group_pos = 0, group_neg = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] == 1 ? group_pos : group_neg) += 1;
      ++j;
    }
    wins += group_pos * (neg + 0.5 * group_neg);
    pos += group_pos;
    neg += group_neg;
    i = j;
  }
  if (pos == 0 || neg == 0) throw DataError("AUC needs both classes present");
  return wins / (pos * neg);
}

struct RocPoint {
  double threshold;
  double fpr;
  double tpr;
};

// ROC vertices from the strictest threshold down, starting at (0, 0).
inline std::vector<RocPoint> roc_points(std::span<const double> scores, std::span<const int> labels) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  const double pos = static_cast<double>(std::count(labels.begin(), labels.end(), 1));
  const double neg = static_cast<double>(labels.size()) - pos;
  if (pos == 0 || neg == 0) throw DataError("ROC needs both classes present");
  std::vector<RocPoint> pts{{INFINITY, 0.0, 0.0}};
  double tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double s = scores[order[i]];
    while (i < order.size() && scores[order[i]] == s) (labels[order[i++]] == 1 ? tp : fp) += 1;
    pts.push_back({s, fp / neg, tp / pos});
  }
  return pts;
}

struct Confusion {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  std::size_t total() const { return tp + fp + tn + fn; }
  bool operator==(const Confusion&) const = default;
};

inline Confusion confusion(std::span<const int> preds, std::span<const int> labels, int positive = 1) {
  if (preds.size() != labels.size()) throw UsageError("predictions and labels differ in length");
  Confusion c;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const bool p = preds[i] == positive;
    const bool t = labels[i] == positive;
    if (p && t) ++c.tp;
    else if (p) ++c.fp;
    else if (t) ++c.fn;
    else ++c.tn;
  }
  return c;
}

// 2TP / (2TP + FP + FN); 0 when nothing is predicted or actually positive.
inline double f1_from(const Confusion& c) {
  const double denom = 2.0 * c.tp + c.fp + c.fn;
  return denom == 0.0 ? 0.0 : 2.0 * c.tp / denom;
}

inline double f1(std::span<const int> preds, std::span<const int> labels, int positive = 1) {
  return f1_from(confusion(preds, labels, positive));
}

struct EvalReport {
  double auc = 0.0;
  double f1 = 0.0;
  Confusion confusion;
  double threshold = 0.5;

  std::size_t count() const { return confusion.total(); }
};

// AUC on p1 plus F1/confusion at `threshold` (p1 >= threshold -> positive).
// `ids`, `probs` are parallel; truth maps every id to its label.
inline EvalReport evaluate(std::span<const std::string> ids, std::span<const ProbVector> probs,
                           const std::map<std::string, int>& truth, double threshold = 0.5) {
  if (ids.size() != probs.size()) throw UsageError("ids and probabilities differ in length");
  std::vector<std::string> missing;
  std::vector<double> scores;
  std::vector<int> labels, preds;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto it = truth.find(ids[i]);
    if (it == truth.end()) {
      missing.push_back(ids[i]);
      continue;
    }
    scores.push_back(probs[i][1]);
    labels.push_back(it->second);
    preds.push_back(probs[i][1] >= threshold ? 1 : 0);
  }
  if (!missing.empty()) {
    std::string msg = std::to_string(missing.size()) + " prediction id(s) have no truth label:";
    for (std::size_t i = 0; i < missing.size() && i < 10; ++i) msg += " " + missing[i];
    if (missing.size() > 10) msg += " ...";
    throw DataError(msg);
  }
  EvalReport r;
  r.threshold = threshold;
  r.auc = roc_auc(scores, labels);
  r.confusion = confusion(preds, labels);
  r.f1 = f1_from(r.confusion);
  return r;
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // population standard deviation

  std::string render() const {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2f \xC2\xB1 %.2f", mean, std);
    return buf;
  }
};

inline MeanStd mean_std(std::span<const double> v) {
  if (v.empty()) throw UsageError("mean of empty list");
  MeanStd out;
  out.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - out.mean) * (x - out.mean);
  out.std = std::sqrt(ss / static_cast<double>(v.size()));
  return out;
}

struct FoldAggregate {
  std::vector<EvalReport> per_fold;
  MeanStd auc;
  MeanStd f1;
};

inline FoldAggregate aggregate_folds(std::span<const EvalReport> reports) {
  if (reports.empty()) throw UsageError("no fold reports to aggregate");
  FoldAggregate agg;
  agg.per_fold.assign(reports.begin(), reports.end());
  std::vector<double> aucs, f1s;
  for (const auto& r : reports) {
    aucs.push_back(r.auc);
    f1s.push_back(r.f1);
  }
  agg.auc = mean_std(aucs);
  agg.f1 = mean_std(f1s);
  return agg;
}

}  // namespace fundus
