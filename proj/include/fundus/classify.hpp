#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "fundus/dataset.hpp"
#include "fundus/imaging.hpp"
#include "fundus/io.hpp"
#include "fundus/metrics.hpp"
#include "fundus/prob.hpp"
#include "fundus/rng.hpp"

namespace fundus {

using Logits = std::array<double, 2>;

constexpr double kProbFloor = 1e-12;

// -w[label] * ln(p[label]), with p floored at 1e-12.
inline double weighted_ce(const ProbVector& probs, int label, const ClassWeights& weights) {
  return -weights.w[label] * std::log(std::max(probs[label], kProbFloor));
}

// Gradient of weighted_ce(softmax(logits)) w.r.t. the logits:
// w[label] * (softmax_j - [j == label]).
inline Logits weighted_ce_grad(const Logits& logits, int label, const ClassWeights& weights) {
  const ProbVector p = softmax(logits);
  Logits g{};
  for (int j = 0; j < 2; ++j) g[j] = weights.w[label] * (p[j] - (j == label ? 1.0 : 0.0));
  return g;
}

// How a view raster becomes a feature vector: luminance, optional CLAHE,
// mean pooling down to downsample x downsample, scaled to [0, 1].
struct FeatureSpec {
  int input_size = 256;
  int downsample = 16;
  bool clahe = false;
  ClaheParams clahe_params{};

  std::size_t dim() const { return static_cast<std::size_t>(downsample) * downsample; }
  bool operator==(const FeatureSpec& o) const {
    return input_size == o.input_size && downsample == o.downsample && clahe == o.clahe &&
           clahe_params.clip_fraction == o.clahe_params.clip_fraction && clahe_params.grid == o.clahe_params.grid;
  }
};

using Features = std::vector<double>;

inline Features extract_features(const Raster& view, const FeatureSpec& spec = {}) {
  if (view.width() != spec.input_size || view.height() != spec.input_size)
    throw DataError("feature extraction expects a " + std::to_string(spec.input_size) + "x" +
                    std::to_string(spec.input_size) + " view, got " + std::to_string(view.width()) + "x" +
                    std::to_string(view.height()));
  if (spec.downsample < 1 || spec.input_size % spec.downsample != 0)
    throw UsageError("downsample size must divide the input size");
  Raster lum = luminance(view);
  if (spec.clahe) lum = clahe(lum, spec.clahe_params);
  const int block = spec.input_size / spec.downsample;
  Features f(spec.dim(), 0.0);
  for (int y = 0; y < spec.input_size; ++y) {
    const auto* row = lum.row(y);
    double* out = &f[static_cast<std::size_t>(y / block) * spec.downsample];
    for (int x = 0; x < spec.input_size; ++x) out[x / block] += row[x];
  }
  const double norm = 1.0 / (255.0 * block * block);
  for (double& v : f) v *= norm;
  return f;
}

// Multinomial logistic regression over pooled luminance features.
struct LinearModel {
  std::array<std::vector<double>, 2> weights;  // [class][feature]
  std::array<double, 2> bias{0.0, 0.0};
  FeatureSpec spec{};
  View view = View::original;

  static LinearModel zeros(const FeatureSpec& spec, View view = View::original) {
    LinearModel m;
    m.spec = spec;
    m.view = view;
    for (auto& w : m.weights) w.assign(spec.dim(), 0.0);
    return m;
  }

  bool operator==(const LinearModel& o) const {
    return weights == o.weights && bias == o.bias && spec == o.spec && view == o.view;
  }
};

inline Logits model_logits(const LinearModel& m, std::span<const double> f) {
  if (f.size() != m.weights[0].size())
    throw DataError("feature dimension " + std::to_string(f.size()) + " does not match model (" +
                    std::to_string(m.weights[0].size()) + ")");
  Logits z = m.bias;
  for (int c = 0; c < 2; ++c) z[c] += std::inner_product(f.begin(), f.end(), m.weights[c].begin(), 0.0);
  return z;
}

inline ProbVector predict_features(const LinearModel& m, std::span<const double> f) { return softmax(model_logits(m, f)); }

inline ProbVector predict(const LinearModel& m, const Raster& view) { return predict_features(m, extract_features(view, m.spec)); }

struct TrainConfig {
  int epochs = 50;
  int batch_size = 64;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  // SGD runs on z-scored features; the result is folded back into raw-feature
  // weights, so the returned model is always softmax(W f + b).
  bool standardize = true;

  void validate() const {
    if (epochs < 1) throw UsageError("epochs must be >= 1");
    if (batch_size < 1) throw UsageError("batch size must be >= 1");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw UsageError("learning rate must be >= 0");
  }
};

struct TrainLog {
  double initial_loss = 0.0;
  std::vector<double> epoch_loss;  // mean weighted CE on the (unaugmented) train set after each epoch
  std::vector<double> val_auc;     // NaN when the validation set lacks a class
  int best_epoch = -1;             // 0-based; -1 when no epoch improved on the initial parameters
};

struct Example {
  Features features;
  int label = 0;
};

namespace detail {

constexpr std::uint64_t kTrainShuffleStream = 0x73686f6666ULL;

struct Standardizer {
  std::vector<double> mean, scale;  // z = (f - mean) * scale

  static Standardizer fit(std::span<const Example> data, std::size_t dim, bool enabled) {
    Standardizer s;
    s.mean.assign(dim, 0.0);
    s.scale.assign(dim, 1.0);
    if (!enabled || data.empty()) return s;
    for (const auto& e : data)
      for (std::size_t j = 0; j < dim; ++j) s.mean[j] += e.features[j];
    for (double& m : s.mean) m /= static_cast<double>(data.size());
    std::vector<double> var(dim, 0.0);
    for (const auto& e : data)
      for (std::size_t j = 0; j < dim; ++j) var[j] += (e.features[j] - s.mean[j]) * (e.features[j] - s.mean[j]);
    for (std::size_t j = 0; j < dim; ++j) {
      const double sd = std::sqrt(var[j] / static_cast<double>(data.size()));
      s.scale[j] = sd > 1e-8 ? 1.0 / sd : 1.0;
    }
    return s;
  }

  void apply(std::span<const double> f, std::span<double> z) const {
    for (std::size_t j = 0; j < f.size(); ++j) z[j] = (f[j] - mean[j]) * scale[j];
  }

  // Raw-space model -> standardized-space parameters.
  void to_standard(const LinearModel& raw, std::array<std::vector<double>, 2>& w, Logits& b) const {
    for (int c = 0; c < 2; ++c) {
      w[c].resize(mean.size());
      b[c] = raw.bias[c];
      for (std::size_t j = 0; j < mean.size(); ++j) {
        w[c][j] = raw.weights[c][j] / scale[j];
        b[c] += raw.weights[c][j] * mean[j];
      }
    }
  }

  // Standardized-space parameters -> raw-space model.
  void to_raw(const std::array<std::vector<double>, 2>& w, const Logits& b, LinearModel& raw) const {
    for (int c = 0; c < 2; ++c) {
      raw.bias[c] = b[c];
      for (std::size_t j = 0; j < mean.size(); ++j) {
        raw.weights[c][j] = w[c][j] * scale[j];
        raw.bias[c] -= raw.weights[c][j] * mean[j];
      }
    }
  }
};

inline double mean_loss(const LinearModel& m, std::span<const Example> data, const ClassWeights& weights) {
  double total = 0.0;
  for (const auto& e : data) total += weighted_ce(predict_features(m, e.features), e.label, weights);
  return data.empty() ? 0.0 : total / static_cast<double>(data.size());
}

inline std::optional<double> auc_of(const LinearModel& m, std::span<const Example> data) {
  std::vector<double> scores;
  std::vector<int> labels;
  for (const auto& e : data) {
    scores.push_back(predict_features(m, e.features)[1]);
    labels.push_back(e.label);
  }
  const auto pos = std::count(labels.begin(), labels.end(), 1);
  if (pos == 0 || pos == static_cast<std::ptrdiff_t>(labels.size())) return std::nullopt;
  return roc_auc(scores, labels);
}

// Mini-batch SGD on the mean weighted CE. `sample(i, epoch)` yields the raw
// feature vector used for training example i in that epoch.
template <typename SampleFn>
LinearModel train_sgd(std::span<const Example> train, std::span<const Example> val, const ClassWeights& weights,
                      const TrainConfig& cfg, const FeatureSpec& spec, View view, const LinearModel* init,
                      TrainLog* log, SampleFn&& sample) {
  cfg.validate();
  std::array<bool, 2> present{};
  for (const auto& e : train) present.at(static_cast<std::size_t>(e.label)) = true;
  if (!present[0] || !present[1]) throw DataError("training set must contain both classes");

  const std::size_t dim = spec.dim();
  for (const auto& e : train)
    if (e.features.size() != dim) throw DataError("training feature dimension mismatch");

  LinearModel model = init ? *init : LinearModel::zeros(spec, view);
  if (model.weights[0].size() != dim) throw DataError("initial model does not match the feature spec");
  model.spec = spec;
  model.view = view;

  const Standardizer stdz = Standardizer::fit(train, dim, cfg.standardize);
  std::array<std::vector<double>, 2> w;
  Logits b{};
  stdz.to_standard(model, w, b);

  TrainLog local;
  TrainLog& lg = log ? *log : local;
  lg = TrainLog{};
  lg.initial_loss = mean_loss(model, train, weights);

  LinearModel best = model;
  double best_auc = -1.0;
  if (auto a = auc_of(model, val)) best_auc = *a;

  const std::size_t n = train.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<double> z(dim);
  std::array<std::vector<double>, 2> gw{std::vector<double>(dim), std::vector<double>(dim)};

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    CounterRng rng(derive_key(cfg.seed, kTrainShuffleStream, static_cast<std::uint64_t>(epoch)));
    shuffle(std::span<std::size_t>(order), rng);
    for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(n, start + static_cast<std::size_t>(cfg.batch_size));
      std::fill(gw[0].begin(), gw[0].end(), 0.0);
      std::fill(gw[1].begin(), gw[1].end(), 0.0);
      Logits gb{};
      for (std::size_t k = start; k < end; ++k) {
        const std::size_t i = order[k];
        stdz.apply(sample(i, epoch), z);
        Logits logit = b;
        for (int c = 0; c < 2; ++c) logit[c] += std::inner_product(z.begin(), z.end(), w[c].begin(), 0.0);
        const Logits g = weighted_ce_grad(logit, train[i].label, weights);
        for (int c = 0; c < 2; ++c) {
          gb[c] += g[c];
          for (std::size_t j = 0; j < dim; ++j) gw[c][j] += g[c] * z[j];
        }
      }
      const double step = cfg.learning_rate / static_cast<double>(end - start);
      for (int c = 0; c < 2; ++c) {
        b[c] -= step * gb[c];
        for (std::size_t j = 0; j < dim; ++j) w[c][j] -= step * gw[c][j];
      }
    }
    stdz.to_raw(w, b, model);
    lg.epoch_loss.push_back(mean_loss(model, train, weights));
    const auto auc = auc_of(model, val);
    lg.val_auc.push_back(auc ? *auc : NAN);
    if (!auc) {
      best = model;  // no usable validation signal: keep the latest parameters
      lg.best_epoch = epoch;
    } else if (*auc > best_auc) {
      best_auc = *auc;
      best = model;
      lg.best_epoch = epoch;
    }
  }
  return best;
}

}  // namespace detail

// Trains the reference classifier on precomputed features and returns the
// parameters from the epoch with the best validation AUC. With `init`, SGD
// starts from that model (fine-tuning) instead of zeros.
inline LinearModel train_reference(std::span<const Example> train, std::span<const Example> val,
                                   const ClassWeights& weights, const TrainConfig& cfg, const FeatureSpec& spec = {},
                                   View view = View::original, const LinearModel* init = nullptr,
                                   TrainLog* log = nullptr) {
  return detail::train_sgd(train, val, weights, cfg, spec, view, init, log,
                           [&](std::size_t i, int) -> std::span<const double> { return train[i].features; });
}

struct LabeledView {
  const Raster* view = nullptr;
  int label = 0;
};

// Raster variant: each epoch sees augment(view, policy, epoch * N + i).
inline LinearModel train_reference(std::span<const LabeledView> train, std::span<const LabeledView> val,
                                   const ClassWeights& weights, const TrainConfig& cfg, const AugmentPolicy& policy,
                                   const FeatureSpec& spec = {}, View view = View::original,
                                   const LinearModel* init = nullptr, TrainLog* log = nullptr) {
  policy.validate();
  auto to_examples = [&](std::span<const LabeledView> in) {
    std::vector<Example> out;
    out.reserve(in.size());
    for (const auto& v : in) out.push_back({extract_features(*v.view, spec), v.label});
    return out;
  };
  const auto train_ex = to_examples(train);
  const auto val_ex = to_examples(val);
  if (policy.is_identity())
    return train_reference(train_ex, val_ex, weights, cfg, spec, view, init, log);
  Features scratch;
  const std::uint64_t n = train.size();
  return detail::train_sgd(std::span<const Example>(train_ex), std::span<const Example>(val_ex), weights, cfg, spec,
                           view, init, log, [&](std::size_t i, int epoch) -> std::span<const double> {
                             scratch = extract_features(augment(*train[i].view, policy, epoch * n + i), spec);
                             return scratch;
                           });
}

// ---- checkpoint format -----------------------------------------------------
//
//   fundus-linear-model 1
//   view <original|cropped|polar>
//   input_size <px>
//   downsample <px>
//   clahe <0|1> <clip_fraction> <grid>
//   bias <b0> <b1>
//   weights0 <d values>
//   weights1 <d values>
//
// Values use %.17g so a save/load round trip is exact.

inline std::string encode_model(const LinearModel& m) {
  std::ostringstream out;
  out << "fundus-linear-model 1\n";
  out << "view " << view_name(m.view) << "\n";
  out << "input_size " << m.spec.input_size << "\n";
  out << "downsample " << m.spec.downsample << "\n";
  out << "clahe " << (m.spec.clahe ? 1 : 0) << " " << format_g(m.spec.clahe_params.clip_fraction, 17) << " "
      << m.spec.clahe_params.grid << "\n";
  out << "bias " << format_g(m.bias[0], 17) << " " << format_g(m.bias[1], 17) << "\n";
  for (int c = 0; c < 2; ++c) {
    out << "weights" << c;
    for (double v : m.weights[c]) out << " " << format_g(v, 17);
    out << "\n";
  }
  return out.str();
}

inline LinearModel decode_model(const std::string& text, const std::string& name = "<memory>") {
  std::istringstream in(text);
  std::string tag;
  int version = 0;
  if (!(in >> tag >> version) || tag != "fundus-linear-model") throw DataError(name + ": not a model file");
  if (version != 1) throw DataError(name + ": unsupported model version " + std::to_string(version));
  LinearModel m;
  std::string view;
  int clahe_flag = 0;
  auto expect = [&](const char* key) {
    if (!(in >> tag) || tag != key) throw DataError(name + ": expected '" + key + "'");
  };
  expect("view");
  in >> view;
  m.view = parse_view(view);
  expect("input_size");
  in >> m.spec.input_size;
  expect("downsample");
  in >> m.spec.downsample;
  expect("clahe");
  in >> clahe_flag >> m.spec.clahe_params.clip_fraction >> m.spec.clahe_params.grid;
  m.spec.clahe = clahe_flag != 0;
  expect("bias");
  in >> m.bias[0] >> m.bias[1];
  if (!in || m.spec.downsample < 1) throw DataError(name + ": malformed model header");
  for (int c = 0; c < 2; ++c) {
    expect(c == 0 ? "weights0" : "weights1");
    m.weights[c].resize(m.spec.dim());
    for (double& v : m.weights[c])
      if (!(in >> v)) throw DataError(name + ": truncated weights");
  }
  for (int c = 0; c < 2; ++c) {
    if (!std::isfinite(m.bias[c])) throw DataError(name + ": non-finite parameter");
    for (double v : m.weights[c])
      if (!std::isfinite(v)) throw DataError(name + ": non-finite parameter");
  }
  return m;
}

inline void save_model(const fs::path& path, const LinearModel& m) { write_file_atomic(path, encode_model(m)); }
inline LinearModel load_model(const fs::path& path) { return decode_model(read_file(path), path.string()); }

// ---- prediction CSV: id,view,p0,p1 ----------------------------------------

struct PredictionRecord {
  std::string id;
  View view = View::original;
  ProbVector probs;

  bool operator==(const PredictionRecord&) const = default;
};

inline std::string encode_predictions(std::span<const PredictionRecord> records) {
  std::string out = "id,view,p0,p1\n";
  for (const auto& r : records)
    out += r.id + "," + view_name(r.view) + "," + format_g(r.probs[0]) + "," + format_g(r.probs[1]) + "\n";
  return out;
}

inline void write_predictions(const fs::path& path, std::span<const PredictionRecord> records) {
  write_file_atomic(path, encode_predictions(records));
}

inline std::vector<PredictionRecord> read_predictions(const fs::path& path) {
  const auto lines = read_lines(path);
  const std::string name = path.string();
  if (lines.empty() || trim(lines[0]) != "id,view,p0,p1") throw data_error_at(name, 1, "expected header 'id,view,p0,p1'");
  std::vector<PredictionRecord> out;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const std::size_t line_no = i + 1;
    if (trim(lines[i]).empty()) continue;
    const auto f = split_csv(lines[i]);
    if (f.size() != 4) throw data_error_at(name, line_no, "expected 4 fields");
    PredictionRecord r;
    r.id = std::string(trim(f[0]));
    if (r.id.empty()) throw data_error_at(name, line_no, "empty id");
    try {
      r.view = parse_view(trim(f[1]));
    } catch (const UsageError& e) {
      throw data_error_at(name, line_no, e.what());
    }
    for (int c = 0; c < 2; ++c) {
      const std::string s(trim(f[2 + c]));
      std::size_t used = 0;
      try {
        r.probs[c] = std::stod(s, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used == 0 || used != s.size()) throw data_error_at(name, line_no, "bad probability '" + s + "'");
    }
    if (!r.probs.valid(1e-6))
      throw data_error_at(name, line_no, "probabilities must lie in [0, 1] and sum to 1 (got " + format_g(r.probs[0]) +
                                             " + " + format_g(r.probs[1]) + ")");
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace fundus
