#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "fundus/classify.hpp"
#include "fundus/config.hpp"
#include "fundus/dataset.hpp"
#include "fundus/ensemble.hpp"
#include "fundus/image_io.hpp"
#include "fundus/metrics.hpp"
#include "fundus/parallel.hpp"
#include "fundus/segmentation.hpp"
#include "fundus/synthetic.hpp"

namespace fundus {

// Everything one experiment needs, resolved from a key = value file.
struct RunConfig {
  std::uint64_t seed = 0;
  PreprocessConfig preprocess{};
  std::size_t test_count = 10000;
  int k = 5;
  double val_fraction = 0.2;
  TrainConfig train{};
  FeatureSpec features{};
  EnsembleConfig ensemble{};
  bool augment = false;
  AugmentPolicy augment_policy{};
  bool save_views = true;

  static RunConfig from(const KeyValueConfig& kv) {
    RunConfig c;
    c.seed = static_cast<std::uint64_t>(kv.get("seed", static_cast<std::int64_t>(0)));
    auto& p = c.preprocess;
    p.clahe.clip_fraction = kv.get("clahe.clip_fraction", p.clahe.clip_fraction);
    p.clahe.grid = kv.get("clahe.grid", p.clahe.grid);
    p.padding.fraction = kv.get("pad.fraction", p.padding.fraction);
    p.padding.minimum = kv.get("pad.min", p.padding.minimum);
    p.majority_fraction = kv.get("fallback.majority", p.majority_fraction);
    p.fallback_crop = kv.get("fallback.crop", p.fallback_crop);
    p.min_crop = kv.get("fallback.min_crop", p.min_crop);
    c.test_count = static_cast<std::size_t>(kv.get("split.test_count", static_cast<std::int64_t>(c.test_count)));
    c.k = kv.get("split.k", c.k);
    c.val_fraction = kv.get("split.val_fraction", c.val_fraction);
    c.train.epochs = kv.get("train.epochs", c.train.epochs);
    c.train.batch_size = kv.get("train.batch_size", c.train.batch_size);
    c.train.learning_rate = kv.get("train.learning_rate", c.train.learning_rate);
    c.train.standardize = kv.get("train.standardize", c.train.standardize);
    c.features.downsample = kv.get("train.downsample", c.features.downsample);
    c.features.clahe = kv.get("train.clahe", c.features.clahe);
    c.features.clahe_params = p.clahe;
    c.ensemble = EnsembleConfig::from(kv);
    c.augment = kv.get("augment.enabled", c.augment);
    auto& a = c.augment_policy;
    a.hflip_prob = kv.get("augment.hflip_prob", a.hflip_prob);
    a.vflip_prob = kv.get("augment.vflip_prob", a.vflip_prob);
    a.rotation_range = kv.get("augment.rotation", a.rotation_range);
    a.scale_min = kv.get("augment.scale_min", a.scale_min);
    a.scale_max = kv.get("augment.scale_max", a.scale_max);
    c.save_views = kv.get("crossval.save_views", c.save_views);
    if (const auto unused = kv.unused_keys(); !unused.empty())
      throw UsageError("unknown config key '" + *unused.begin() + "'");
    c.validate();
    return c;
  }

  void validate() const {
    if (preprocess.clahe.grid < 1 || !(preprocess.clahe.clip_fraction > 0.0 && preprocess.clahe.clip_fraction <= 1.0))
      throw UsageError("invalid CLAHE parameters");
    if (preprocess.padding.minimum < 0 || !(preprocess.padding.fraction >= 0.0)) throw UsageError("invalid padding rule");
    if (preprocess.fallback_crop < 1) throw UsageError("fallback crop must be positive");
    train.validate();
    ensemble.validate();
    augment_policy.validate();
  }

  // Fully resolved configuration, every key spelled out.
  std::string render() const {
    KeyValueConfig kv;
    auto num = [](double v) { return format_g(v, 17); };
    kv.set("seed", std::to_string(seed));
    kv.set("clahe.clip_fraction", num(preprocess.clahe.clip_fraction));
    kv.set("clahe.grid", std::to_string(preprocess.clahe.grid));
    kv.set("pad.fraction", num(preprocess.padding.fraction));
    kv.set("pad.min", std::to_string(preprocess.padding.minimum));
    kv.set("fallback.majority", num(preprocess.majority_fraction));
    kv.set("fallback.crop", std::to_string(preprocess.fallback_crop));
    kv.set("fallback.min_crop", std::to_string(preprocess.min_crop));
    kv.set("split.test_count", std::to_string(test_count));
    kv.set("split.k", std::to_string(k));
    kv.set("split.val_fraction", num(val_fraction));
    kv.set("train.epochs", std::to_string(train.epochs));
    kv.set("train.batch_size", std::to_string(train.batch_size));
    kv.set("train.learning_rate", num(train.learning_rate));
    kv.set("train.standardize", train.standardize ? "true" : "false");
    kv.set("train.downsample", std::to_string(features.downsample));
    kv.set("train.clahe", features.clahe ? "true" : "false");
    for (View v : kModelViews) kv.set(std::string("weight.") + view_name(v), num(ensemble.weights.at(v)));
    kv.set("augment.enabled", augment ? "true" : "false");
    kv.set("augment.hflip_prob", num(augment_policy.hflip_prob));
    kv.set("augment.vflip_prob", num(augment_policy.vflip_prob));
    kv.set("augment.rotation", num(augment_policy.rotation_range));
    kv.set("augment.scale_min", num(augment_policy.scale_min));
    kv.set("augment.scale_max", num(augment_policy.scale_max));
    kv.set("crossval.save_views", save_views ? "true" : "false");
    return kv.render();
  }
};

// Seed of the model for (fold, view); shared by `train` and `crossval` so both
// produce identical models.
inline std::uint64_t model_seed(std::uint64_t seed, int fold, View view) {
  return derive_key(seed, 0x747261696eULL, static_cast<std::uint64_t>(fold) * 4 + static_cast<std::uint64_t>(view));
}

inline const char* fallback_reason_name(FallbackReason r) {
  switch (r) {
    case FallbackReason::none: return "none";
    case FallbackReason::empty_mask: return "empty_mask";
    case FallbackReason::majority_mask: return "majority_mask";
    case FallbackReason::degenerate_crop: return "degenerate_crop";
  }
  return "?";
}

inline const Raster& view_of(const ViewSet& vs, View v) {
  switch (v) {
    case View::original: return vs.original_view;
    case View::cropped: return vs.cropped_view;
    case View::polar: return vs.polar_view;
    default: throw UsageError("no raster for the fused view");
  }
}

// Segmenter reading `<dir>/<id>.pgm` (nonzero = disc) in place of the
// built-in one.
inline Segmenter mask_file_segmenter(const fs::path& dir, const std::string& id) {
  return [path = dir / (id + ".pgm")](const Raster&) { return Mask::from_raster(read_image(path)); };
}

// ---- synth -------------------------------------------------------------------

inline SynthDataset cmd_synth(const SynthConfig& cfg, const fs::path& out_dir, int jobs) {
  return generate_synthetic(cfg, out_dir, jobs);
}

// ---- preprocess ----------------------------------------------------------------

struct PreprocessSummary {
  std::size_t count = 0;
  std::size_t fallback_count = 0;
  double fallback_rate() const { return count == 0 ? 0.0 : static_cast<double>(fallback_count) / count; }
};

struct ViewIndexRow {
  std::string id;
  int label = 0;
  bool used_fallback = false;
  FallbackReason reason = FallbackReason::none;
};

namespace detail {

inline std::string encode_view_index(std::span<const ViewIndexRow> rows) {
  std::string out = "id,label,used_fallback,fallback_reason\n";
  for (const auto& r : rows)
    out += r.id + "," + std::to_string(r.label) + "," + (r.used_fallback ? "1" : "0") + "," +
           fallback_reason_name(r.reason) + "\n";
  return out;
}

inline std::string encode_preprocess_stats(const PreprocessSummary& s) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "images = %zu\nfallback = %zu\nfallback_rate = %.4f\n", s.count, s.fallback_count,
                s.fallback_rate());
  return buf;
}

inline fs::path view_path(const fs::path& views_dir, View v, const std::string& id) {
  return views_dir / view_name(v) / (id + ".png");
}

}  // namespace detail

// Runs the three-view preprocessing for every manifest record, calling
// sink(i, record, views) from worker threads.
template <typename Sink>
std::vector<ViewIndexRow> preprocess_records(const Manifest& records, const PreprocessConfig& cfg,
                                             const std::optional<fs::path>& masks_dir, int jobs, Sink&& sink) {
  std::vector<ViewIndexRow> rows(records.size());
  parallel_for(records.size(), jobs, [&](std::size_t i) {
    const auto& r = records[i];
    const Raster original = read_image(r.path);
    const ViewSet views = masks_dir ? preprocess_sample(original, mask_file_segmenter(*masks_dir, r.id), cfg)
                                    : preprocess_sample(original, BrightnessSegmenter{}, cfg);
    rows[i] = {r.id, r.label, views.used_fallback, views.reason};
    sink(i, r, views);
  });
  return rows;
}

inline PreprocessSummary summarize(std::span<const ViewIndexRow> rows) {
  PreprocessSummary s;
  s.count = rows.size();
  for (const auto& r : rows) s.fallback_count += r.used_fallback ? 1 : 0;
  return s;
}

// Writes <out>/<view>/<id>.png for the three views, <out>/views.csv and
// <out>/preprocess_stats.txt.
inline PreprocessSummary cmd_preprocess(const fs::path& manifest_path, const fs::path& out_dir,
                                        const std::optional<fs::path>& masks_dir, const RunConfig& cfg, int jobs) {
  const Manifest records = load_manifest(manifest_path);
  const auto rows = preprocess_records(records, cfg.preprocess, masks_dir, jobs,
                                       [&](std::size_t, const ManifestRecord& r, const ViewSet& vs) {
                                         for (View v : kModelViews) write_image(detail::view_path(out_dir, v, r.id), view_of(vs, v));
                                       });
  const PreprocessSummary s = summarize(rows);
  write_file_atomic(out_dir / "views.csv", detail::encode_view_index(rows));
  write_file_atomic(out_dir / "preprocess_stats.txt", detail::encode_preprocess_stats(s));
  return s;
}

inline std::vector<ViewIndexRow> read_view_index(const fs::path& views_dir) {
  const fs::path path = views_dir / "views.csv";
  const auto lines = read_lines(path);
  if (lines.empty() || trim(lines[0]) != "id,label,used_fallback,fallback_reason")
    throw data_error_at(path.string(), 1, "expected header 'id,label,used_fallback,fallback_reason'");
  std::vector<ViewIndexRow> rows;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (trim(lines[i]).empty()) continue;
    const auto f = split_csv(lines[i]);
    if (f.size() != 4 || (f[1] != "0" && f[1] != "1") || (f[2] != "0" && f[2] != "1"))
      throw data_error_at(path.string(), i + 1, "malformed row");
    ViewIndexRow r;
    r.id = f[0];
    r.label = f[1] == "1";
    r.used_fallback = f[2] == "1";
    rows.push_back(std::move(r));
  }
  return rows;
}

// ---- split ---------------------------------------------------------------------

inline FoldPlan cmd_split(const fs::path& manifest_path, std::size_t test_count, int k, double val_fraction,
                          std::uint64_t seed, const fs::path& out_csv) {
  const Manifest records = load_manifest(manifest_path);
  FoldPlan plan = make_fold_plan(records, test_count, k, val_fraction, seed);
  write_fold_plan(out_csv, plan);
  return plan;
}

// ---- train / predict -------------------------------------------------------------

namespace detail {

inline std::vector<Example> load_examples(const fs::path& views_dir, View view, std::span<const std::string> ids,
                                          const std::map<std::string, int>& labels, const FeatureSpec& spec, int jobs) {
  std::vector<Example> out(ids.size());
  parallel_for(ids.size(), jobs, [&](std::size_t i) {
    const auto it = labels.find(ids[i]);
    if (it == labels.end()) throw DataError("id '" + ids[i] + "' is not in views.csv");
    out[i] = {extract_features(read_image(view_path(views_dir, view, ids[i])), spec), it->second};
  });
  return out;
}

inline std::map<std::string, int> label_map(std::span<const ViewIndexRow> rows) {
  std::map<std::string, int> m;
  for (const auto& r : rows) m[r.id] = r.label;
  return m;
}

inline std::string encode_train_log(const TrainLog& log) {
  std::string out = "epoch,loss,val_auc\n0," + format_g(log.initial_loss) + ",\n";
  for (std::size_t e = 0; e < log.epoch_loss.size(); ++e)
    out += std::to_string(e + 1) + "," + format_g(log.epoch_loss[e]) + "," +
           (std::isnan(log.val_auc[e]) ? std::string() : format_g(log.val_auc[e])) + "\n";
  return out;
}

}  // namespace detail

// Trains one view's model on one fold of a plan. Writes the model and
// "<out_model>.log.csv".
inline TrainLog cmd_train(const fs::path& views_dir, const fs::path& plan_csv, int fold, View view,
                          const RunConfig& cfg, const fs::path& out_model, int jobs) {
  if (view == View::fused) throw UsageError("cannot train a model for the fused view");
  const FoldPlan plan = read_fold_plan(plan_csv);
  if (fold < 0 || fold >= plan.k) throw UsageError("fold must be in [0, " + std::to_string(plan.k) + ")");
  const auto labels = detail::label_map(read_view_index(views_dir));
  const auto train_ids = plan.ids(fold, Role::train);
  const auto val_ids = plan.ids(fold, Role::val);
  const auto train = detail::load_examples(views_dir, view, train_ids, labels, cfg.features, jobs);
  const auto val = detail::load_examples(views_dir, view, val_ids, labels, cfg.features, jobs);

  std::array<std::size_t, kNumClasses> counts{};
  for (const auto& e : train) ++counts[e.label];
  TrainConfig tc = cfg.train;
  tc.seed = model_seed(cfg.seed, fold, view);
  TrainLog log;
  LinearModel model;
  if (cfg.augment) {
    std::vector<Raster> train_views(train_ids.size()), val_views(val_ids.size());
    std::vector<LabeledView> tv, vv;
    for (std::size_t i = 0; i < train_ids.size(); ++i) {
      train_views[i] = read_image(detail::view_path(views_dir, view, train_ids[i]));
      tv.push_back({&train_views[i], train[i].label});
    }
    for (std::size_t i = 0; i < val_ids.size(); ++i) {
      val_views[i] = read_image(detail::view_path(views_dir, view, val_ids[i]));
      vv.push_back({&val_views[i], val[i].label});
    }
    AugmentPolicy policy = cfg.augment_policy;
    policy.seed = tc.seed;
    model = train_reference(tv, vv, class_weights(counts), tc, policy, cfg.features, view, nullptr, &log);
  } else {
    model = train_reference(train, val, class_weights(counts), tc, cfg.features, view, nullptr, &log);
  }
  save_model(out_model, model);
  fs::path log_path = out_model;
  log_path += ".log.csv";
  write_file_atomic(log_path, detail::encode_train_log(log));
  return log;
}

// Predicts every id of the chosen subset (all ids in views.csv when no plan
// is given).
inline std::vector<PredictionRecord> cmd_predict(const fs::path& model_path, const fs::path& views_dir,
                                                 const std::optional<fs::path>& plan_csv, int fold, Role role,
                                                 const fs::path& out_csv, int jobs) {
  const LinearModel model = load_model(model_path);
  std::vector<std::string> ids;
  if (plan_csv) {
    const FoldPlan plan = read_fold_plan(*plan_csv);
    if (role != Role::test && (fold < 0 || fold >= plan.k)) throw UsageError("fold out of range");
    ids = plan.ids(fold, role);
  } else {
    for (const auto& r : read_view_index(views_dir)) ids.push_back(r.id);
  }
  std::vector<PredictionRecord> out(ids.size());
  parallel_for(ids.size(), jobs, [&](std::size_t i) {
    out[i] = {ids[i], model.view, predict(model, read_image(detail::view_path(views_dir, model.view, ids[i])))};
  });
  write_predictions(out_csv, out);
  return out;
}

// ---- fuse ----------------------------------------------------------------------

// Groups rows by id (first-appearance order) and fuses each id's views.
inline std::vector<PredictionRecord> fuse_records(std::span<const PredictionRecord> rows, const EnsembleConfig& cfg) {
  std::vector<std::string> order;
  std::map<std::string, std::map<View, ProbVector>> by_id;
  for (const auto& r : rows) {
    if (r.view == View::fused) throw DataError("input for id '" + r.id + "' is already fused");
    auto [it, inserted] = by_id.try_emplace(r.id);
    if (inserted) order.push_back(r.id);
    if (!it->second.emplace(r.view, r.probs).second)
      throw DataError(std::string("duplicate ") + view_name(r.view) + " prediction for id '" + r.id + "'");
  }
  std::vector<PredictionRecord> out;
  out.reserve(order.size());
  for (const auto& id : order) out.push_back({id, View::fused, fuse(by_id[id], cfg)});
  return out;
}

inline std::vector<PredictionRecord> cmd_fuse(std::span<const fs::path> inputs, const EnsembleConfig& cfg,
                                              const fs::path& out_csv) {
  if (inputs.empty()) throw UsageError("fuse needs at least one prediction file");
  std::vector<PredictionRecord> rows;
  for (const auto& p : inputs) {
    auto part = read_predictions(p);
    rows.insert(rows.end(), part.begin(), part.end());
  }
  auto fused = fuse_records(rows, cfg);
  write_predictions(out_csv, fused);
  return fused;
}

// ---- eval ----------------------------------------------------------------------

namespace detail {

inline nlohmann::json report_json(const EvalReport& r) {
  return {{"auc", r.auc},
          {"f1", r.f1},
          {"threshold", r.threshold},
          {"tp", r.confusion.tp},
          {"fp", r.confusion.fp},
          {"tn", r.confusion.tn},
          {"fn", r.confusion.fn},
          {"count", r.count()}};
}

inline std::string report_table(const EvalReport& r, const std::string& title) {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "%s\n  samples   %zu\n  AUC       %.4f\n  F1        %.4f  (threshold %.2f)\n"
                "  confusion TP=%zu FP=%zu TN=%zu FN=%zu\n",
                title.c_str(), r.count(), r.auc, r.f1, r.threshold, r.confusion.tp, r.confusion.fp, r.confusion.tn,
                r.confusion.fn);
  return buf;
}

inline std::string encode_roc(std::span<const RocPoint> pts) {
  std::string out = "threshold,fpr,tpr\n";
  for (const auto& p : pts) out += format_g(p.threshold) + "," + format_g(p.fpr) + "," + format_g(p.tpr) + "\n";
  return out;
}

}  // namespace detail

// Evaluates a prediction CSV against manifest labels. Writes the text report
// to `out_report` and a JSON line to the same path with extension .jsonl;
// optionally ROC vertices to `roc_csv`.
inline EvalReport cmd_eval(const fs::path& pred_csv, const fs::path& manifest_path, const fs::path& out_report,
                           double threshold, std::optional<View> view_filter, const std::optional<fs::path>& roc_csv) {
  const auto rows = read_predictions(pred_csv);
  std::map<std::string, int> truth;
  for (const auto& r : load_manifest(manifest_path)) truth[r.id] = r.label;
  std::vector<std::string> ids;
  std::vector<ProbVector> probs;
  std::set<std::string> seen;
  for (const auto& r : rows) {
    if (view_filter && r.view != *view_filter) continue;
    if (!seen.insert(r.id).second)
      throw DataError("id '" + r.id + "' appears more than once; select a single view with --view");
    ids.push_back(r.id);
    probs.push_back(r.probs);
  }
  if (ids.empty()) throw DataError("no predictions to evaluate");
  const EvalReport rep = evaluate(ids, probs, truth, threshold);
  write_file_atomic(out_report, detail::report_table(rep, "Evaluation of " + pred_csv.filename().string()));
  fs::path jsonl = out_report;
  jsonl.replace_extension(".jsonl");
  nlohmann::json j = detail::report_json(rep);
  j["predictions"] = pred_csv.filename().string();
  write_file_atomic(jsonl, j.dump() + "\n");
  if (roc_csv) {
    std::vector<double> scores;
    std::vector<int> labels;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      scores.push_back(probs[i][1]);
      labels.push_back(truth.at(ids[i]));
    }
    write_file_atomic(*roc_csv, detail::encode_roc(roc_points(scores, labels)));
  }
  return rep;
}

// ---- crossval ----------------------------------------------------------------------

struct FoldResult {
  std::map<View, EvalReport> test;  // includes View::fused
  std::map<View, TrainLog> logs;
  std::size_t train_size = 0, val_size = 0, test_size = 0;
};

struct CrossvalResult {
  FoldPlan plan;
  PreprocessSummary preprocess;
  std::vector<FoldResult> folds;
  std::map<View, FoldAggregate> aggregate;  // includes View::fused
};

namespace detail {

inline void check_fold_plan(const FoldPlan& plan) {
  std::vector<int> seen(plan.pool_ids.size(), 0);
  for (std::size_t i = 0; i < plan.pool_ids.size(); ++i)
    if (plan.shard[i] >= 0) ++seen[i];
  const bool exact_partition = std::all_of(seen.begin(), seen.end(), [](int s) { return s == 1; });
  const std::size_t val_total = static_cast<std::size_t>(std::count(seen.begin(), seen.end(), 1));
  std::size_t expected = 0;
  for (int f = 0; f < plan.k; ++f) expected += plan.ids(f, Role::val).size();
  if (val_total != expected) throw std::logic_error("validation shards overlap");
  // Shards cover the pool exactly whenever the pool divides evenly into them.
  if (expected == plan.pool_ids.size() && !exact_partition) throw std::logic_error("validation shards do not cover the pool");
}

inline std::string fold_table(const CrossvalResult& res) {
  std::ostringstream out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-6s %10s %10s %10s %10s\n", "fold", "original", "cropped", "polar", "ensemble");
  out << "Test AUC per fold\n" << buf;
  for (std::size_t f = 0; f < res.folds.size(); ++f) {
    const auto& t = res.folds[f].test;
    std::snprintf(buf, sizeof buf, "%-6zu %10.4f %10.4f %10.4f %10.4f\n", f, t.at(View::original).auc,
                  t.at(View::cropped).auc, t.at(View::polar).auc, t.at(View::fused).auc);
    out << buf;
  }
  out << "\n";
  std::snprintf(buf, sizeof buf, "%-10s %-14s %-14s\n", "model", "Test AUC", "Test F1");
  out << buf;
  for (View v : {View::original, View::cropped, View::polar, View::fused}) {
    const auto& a = res.aggregate.at(v);
    std::snprintf(buf, sizeof buf, "%-10s %-14s %-14s\n", v == View::fused ? "ensemble" : view_name(v),
                  a.auc.render().c_str(), a.f1.render().c_str());
    out << buf;
  }
  std::snprintf(buf, sizeof buf, "\nfallback crops: %zu of %zu images (%.1f%%)\n", res.preprocess.fallback_count,
                res.preprocess.count, 100.0 * res.preprocess.fallback_rate());
  out << buf;
  return out.str();
}

}  // namespace detail

// Full protocol: stratified holdout + k folds, per-fold per-view training and
// test prediction, per-fold fusion, evaluation, and mean +- std aggregation.
//
// Output layout under out_dir:
//   config.txt            resolved configuration
//   folds.csv             fold plan (id,fold,role)
//   views/                <view>/<id>.png and views.csv (crossval.save_views)
//   fold<f>/model_<view>.txt, model_<view>.txt.log.csv
//   fold<f>/pred_<view>.csv, pred_fused.csv   test-set predictions
//   fold_metrics.csv      fold,view,auc,f1,tp,fp,tn,fn
//   summary.txt           per-fold AUC table and mean +- std rows
//   summary.jsonl         one JSON object per (fold, view) plus aggregates
inline CrossvalResult cmd_crossval(const fs::path& manifest_path, const RunConfig& cfg, const fs::path& out_dir, int jobs,
                                   const std::optional<fs::path>& masks_dir = std::nullopt) {
  cfg.validate();
  const Manifest records = load_manifest(manifest_path);
  fs::create_directories(out_dir);
  write_file_atomic(out_dir / "config.txt", cfg.render());

  CrossvalResult res;
  res.plan = make_fold_plan(records, cfg.test_count, cfg.k, cfg.val_fraction, cfg.seed);
  detail::check_fold_plan(res.plan);
  write_fold_plan(out_dir / "folds.csv", res.plan);

  // Preprocess once; keep features (and luminance views when augmenting).
  const std::size_t n = records.size();
  std::array<std::vector<Features>, 3> features;
  std::array<std::vector<Raster>, 3> lum_views;
  for (int v = 0; v < 3; ++v) {
    features[v].resize(n);
    if (cfg.augment) lum_views[v].resize(n);
  }
  const fs::path views_dir = out_dir / "views";
  const auto rows = preprocess_records(records, cfg.preprocess, masks_dir, jobs,
                                       [&](std::size_t i, const ManifestRecord& r, const ViewSet& vs) {
                                         for (View v : kModelViews) {
                                           const Raster& img = view_of(vs, v);
                                           const int vi = static_cast<int>(v);
                                           features[vi][i] = extract_features(img, cfg.features);
                                           if (cfg.augment) lum_views[vi][i] = luminance(img);
                                           if (cfg.save_views) write_image(detail::view_path(views_dir, v, r.id), img);
                                         }
                                       });
  res.preprocess = summarize(rows);
  if (cfg.save_views) {
    write_file_atomic(views_dir / "views.csv", detail::encode_view_index(rows));
    write_file_atomic(views_dir / "preprocess_stats.txt", detail::encode_preprocess_stats(res.preprocess));
  }

  std::map<std::string, std::size_t> index_of;
  for (std::size_t i = 0; i < n; ++i) index_of[records[i].id] = i;
  auto indices = [&](const std::vector<std::string>& ids) {
    std::vector<std::size_t> out;
    for (const auto& id : ids) out.push_back(index_of.at(id));
    return out;
  };

  const int k = res.plan.k;
  const auto test_idx = indices(res.plan.test_ids);
  res.folds.resize(k);
  // Each (fold, view) task writes only its own slots.
  std::vector<std::array<std::vector<PredictionRecord>, 3>> preds(k);
  std::vector<std::array<TrainLog, 3>> logs(k);

  parallel_for(static_cast<std::size_t>(k) * 3, jobs, [&](std::size_t task) {
    const int f = static_cast<int>(task / 3);
    const View view = kModelViews[task % 3];
    const int vi = static_cast<int>(view);
    const auto train_idx = indices(res.plan.ids(f, Role::train));
    const auto val_idx = indices(res.plan.ids(f, Role::val));
    auto examples = [&](const std::vector<std::size_t>& idx) {
      std::vector<Example> out;
      out.reserve(idx.size());
      for (auto i : idx) out.push_back({features[vi][i], records[i].label});
      return out;
    };
    const auto train = examples(train_idx);
    const auto val = examples(val_idx);
    std::array<std::size_t, kNumClasses> counts{};
    for (const auto& e : train) ++counts[e.label];

    TrainConfig tc = cfg.train;
    tc.seed = model_seed(cfg.seed, f, view);
    TrainLog log;
    LinearModel model;
    if (cfg.augment) {
      std::vector<LabeledView> tv, vv;
      for (auto i : train_idx) tv.push_back({&lum_views[vi][i], records[i].label});
      for (auto i : val_idx) vv.push_back({&lum_views[vi][i], records[i].label});
      AugmentPolicy policy = cfg.augment_policy;
      policy.seed = tc.seed;
      model = train_reference(tv, vv, class_weights(counts), tc, policy, cfg.features, view, nullptr, &log);
    } else {
      model = train_reference(train, val, class_weights(counts), tc, cfg.features, view, nullptr, &log);
    }

    const fs::path fold_dir = out_dir / ("fold" + std::to_string(f));
    const fs::path model_path = fold_dir / (std::string("model_") + view_name(view) + ".txt");
    save_model(model_path, model);
    fs::path log_path = model_path;
    log_path += ".log.csv";
    write_file_atomic(log_path, detail::encode_train_log(log));

    auto& out = preds[f][vi];
    for (auto i : test_idx) out.push_back({records[i].id, view, predict_features(model, features[vi][i])});
    write_predictions(fold_dir / (std::string("pred_") + view_name(view) + ".csv"), out);

    logs[f][vi] = std::move(log);
  });

  std::map<std::string, int> truth;
  for (const auto& r : records) truth[r.id] = r.label;
  std::string metrics_csv = "fold,view,auc,f1,tp,fp,tn,fn\n";
  std::string jsonl;
  std::map<View, std::vector<EvalReport>> per_view;
  for (int f = 0; f < k; ++f) {
    auto& fr = res.folds[f];
    fr.test_size = test_idx.size();
    fr.train_size = res.plan.ids(f, Role::train).size();
    fr.val_size = res.plan.ids(f, Role::val).size();
    for (View v : kModelViews) fr.logs[v] = std::move(logs[f][static_cast<int>(v)]);
    std::vector<PredictionRecord> all;
    for (int v = 0; v < 3; ++v) all.insert(all.end(), preds[f][v].begin(), preds[f][v].end());
    const auto fused = fuse_records(all, cfg.ensemble);
    write_predictions(out_dir / ("fold" + std::to_string(f)) / "pred_fused.csv", fused);

    auto eval_rows = [&](std::span<const PredictionRecord> rows) {
      std::vector<std::string> ids;
      std::vector<ProbVector> probs;
      for (const auto& r : rows) {
        ids.push_back(r.id);
        probs.push_back(r.probs);
      }
      return evaluate(ids, probs, truth);
    };
    for (View v : kModelViews) fr.test[v] = eval_rows(preds[f][static_cast<int>(v)]);
    fr.test[View::fused] = eval_rows(fused);

    for (const auto& [view, rep] : fr.test) {
      per_view[view].push_back(rep);
      metrics_csv += std::to_string(f) + "," + view_name(view) + "," + format_g(rep.auc) + "," + format_g(rep.f1) + "," +
                     std::to_string(rep.confusion.tp) + "," + std::to_string(rep.confusion.fp) + "," +
                     std::to_string(rep.confusion.tn) + "," + std::to_string(rep.confusion.fn) + "\n";
      nlohmann::json j = detail::report_json(rep);
      j["fold"] = f;
      j["view"] = view_name(view);
      jsonl += j.dump() + "\n";
    }
  }
  for (auto& [view, reps] : per_view) {
    res.aggregate[view] = aggregate_folds(reps);
    const auto& a = res.aggregate[view];
    nlohmann::json j{{"view", view_name(view)},
                     {"auc_mean", a.auc.mean},
                     {"auc_std", a.auc.std},
                     {"f1_mean", a.f1.mean},
                     {"f1_std", a.f1.std},
                     {"folds", reps.size()}};
    jsonl += j.dump() + "\n";
  }
  write_file_atomic(out_dir / "fold_metrics.csv", metrics_csv);
  write_file_atomic(out_dir / "summary.jsonl", jsonl);
  write_file_atomic(out_dir / "summary.txt", detail::fold_table(res));
  return res;
}

}  // namespace fundus
