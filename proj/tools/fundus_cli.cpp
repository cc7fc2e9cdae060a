// Command-line front end for the fundus screening pipeline.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "fundus/commands.hpp"

namespace {

using namespace fundus;

struct Globals {
  std::optional<std::uint64_t> seed;
  int jobs = 0;
  std::string config_path;
};

KeyValueConfig load_config(const Globals& g) {
  return g.config_path.empty() ? KeyValueConfig{} : KeyValueConfig::load(g.config_path);
}

RunConfig run_config(const Globals& g) {
  RunConfig cfg = RunConfig::from(load_config(g));
  if (g.seed) cfg.seed = *g.seed;
  return cfg;
}

Role parse_role(const std::string& s) {
  if (s == "train") return Role::train;
  if (s == "val") return Role::val;
  if (s == "test") return Role::test;
  throw UsageError("unknown role '" + s + "'");
}

int run(int argc, char** argv) {
  CLI::App app{"Optic-disc-aware fundus preprocessing, per-view classifiers and weighted ensemble evaluation"};
  app.require_subcommand(1);
  Globals g;
  std::uint64_t seed_value = 0;
  auto* seed_opt = app.add_option("--seed", seed_value, "Random seed (overrides the config file)");
  app.add_option("--jobs", g.jobs, "Worker threads (default: $PIPELINE_JOBS or hardware concurrency)");
  app.add_option("--config", g.config_path, "key = value configuration file")->check(CLI::ExistingFile);

  // synth
  SynthConfig synth;
  std::string synth_out;
  auto* c_synth = app.add_subcommand("synth", "Generate a synthetic fundus dataset with a manifest");
  c_synth->add_option("--n", synth.n, "Number of images")->required();
  c_synth->add_option("--imbalance", synth.imbalance_ratio, "Label-0 : label-1 ratio")->capture_default_str();
  c_synth->add_option("--size", synth.image_size, "Image side in pixels")->capture_default_str();
  c_synth->add_option("--format", synth.format, "png or ppm")->capture_default_str();
  c_synth->add_option("--noise", synth.noise_sigma, "Pixel noise sigma")->capture_default_str();
  c_synth->add_option("--artifact-rate", synth.artifact_rate, "Share of images with a bright reflection")->capture_default_str();
  c_synth->add_option("--disc-scale", synth.disc_scale, "Disc radius multiplier")->capture_default_str();
  c_synth->add_option("--brightness", synth.brightness, "Global intensity gain")->capture_default_str();
  c_synth->add_option("--left-eye-rate", synth.left_eye_rate, "Share of mirrored (left-eye) images")->capture_default_str();
  c_synth->add_option("--out", synth_out, "Output directory")->required();

  // preprocess
  std::string pre_manifest, pre_out, pre_masks;
  auto* c_pre = app.add_subcommand("preprocess", "Produce original/cropped/polar views for every manifest image");
  c_pre->add_option("--manifest", pre_manifest, "Manifest CSV (id,path,label)")->required()->check(CLI::ExistingFile);
  c_pre->add_option("--out", pre_out, "Output directory")->required();
  c_pre->add_option("--masks", pre_masks, "Directory of precomputed <id>.pgm disc masks")->check(CLI::ExistingDirectory);

  // split
  std::string split_manifest, split_out;
  std::optional<std::size_t> split_test;
  std::optional<int> split_k;
  std::optional<double> split_val;
  auto* c_split = app.add_subcommand("split", "Stratified holdout + k-fold plan");
  c_split->add_option("--manifest", split_manifest, "Manifest CSV")->required()->check(CLI::ExistingFile);
  c_split->add_option("--test-count", split_test, "Test set size (default 10000)");
  c_split->add_option("--k", split_k, "Number of folds (default 5)");
  c_split->add_option("--val-fraction", split_val, "Validation share of the pool per fold (default 0.2)");
  c_split->add_option("--out", split_out, "Fold plan CSV (id,fold,role)")->required();

  // train
  std::string train_views, train_plan, train_view = "original", train_out;
  int train_fold = 0;
  auto* c_train = app.add_subcommand("train", "Train one view's reference model on one fold");
  c_train->add_option("--views", train_views, "Directory written by preprocess")->required()->check(CLI::ExistingDirectory);
  c_train->add_option("--plan", train_plan, "Fold plan CSV")->required()->check(CLI::ExistingFile);
  c_train->add_option("--fold", train_fold, "Fold index")->capture_default_str();
  c_train->add_option("--view", train_view, "original, cropped or polar")->capture_default_str();
  c_train->add_option("--out", train_out, "Model file")->required();

  // predict
  std::string pred_model, pred_views, pred_plan, pred_role = "test", pred_out;
  int pred_fold = 0;
  auto* c_pred = app.add_subcommand("predict", "Emit per-id class probabilities for one model");
  c_pred->add_option("--model", pred_model, "Model file")->required()->check(CLI::ExistingFile);
  c_pred->add_option("--views", pred_views, "Directory written by preprocess")->required()->check(CLI::ExistingDirectory);
  c_pred->add_option("--plan", pred_plan, "Fold plan CSV; without it every id in views.csv is predicted")
      ->check(CLI::ExistingFile);
  c_pred->add_option("--fold", pred_fold, "Fold index (with --plan)")->capture_default_str();
  c_pred->add_option("--role", pred_role, "train, val or test (with --plan)")->capture_default_str();
  c_pred->add_option("--out", pred_out, "Prediction CSV (id,view,p0,p1)")->required();

  // fuse
  std::vector<std::string> fuse_inputs;
  std::string fuse_out;
  auto* c_fuse = app.add_subcommand("fuse", "Weighted fusion of per-view predictions (weights from --config)");
  c_fuse->add_option("inputs", fuse_inputs, "Prediction CSVs")->required()->check(CLI::ExistingFile);
  c_fuse->add_option("--out", fuse_out, "Fused prediction CSV")->required();

  // eval
  std::string eval_pred, eval_manifest, eval_out, eval_view, eval_roc;
  double eval_threshold = 0.5;
  auto* c_eval = app.add_subcommand("eval", "AUC, F1 and confusion counts for a prediction CSV");
  c_eval->add_option("--pred", eval_pred, "Prediction CSV")->required()->check(CLI::ExistingFile);
  c_eval->add_option("--manifest", eval_manifest, "Manifest with truth labels")->required()->check(CLI::ExistingFile);
  c_eval->add_option("--out", eval_out, "Text report; a .jsonl twin is written alongside")->required();
  c_eval->add_option("--threshold", eval_threshold, "Positive-class probability threshold")->capture_default_str();
  c_eval->add_option("--view", eval_view, "Only evaluate rows of this view");
  c_eval->add_option("--roc", eval_roc, "Also write ROC vertices to this CSV");

  // crossval
  std::string cv_manifest, cv_out, cv_masks;
  auto* c_cv = app.add_subcommand("crossval", "Full k-fold experiment: split, train, predict, fuse, evaluate");
  c_cv->add_option("--manifest", cv_manifest, "Manifest CSV")->required()->check(CLI::ExistingFile);
  c_cv->add_option("--out", cv_out, "Output directory")->required();
  c_cv->add_option("--masks", cv_masks, "Directory of precomputed <id>.pgm disc masks")->check(CLI::ExistingDirectory);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(ExitCode::usage);
  }
  if (*seed_opt) g.seed = seed_value;
  const int jobs = resolve_jobs(g.jobs);

  if (*c_synth) {
    if (g.seed) synth.seed = *g.seed;
    const auto ds = cmd_synth(synth, synth_out, jobs);
    std::size_t pos = 0;
    for (const auto& r : ds.manifest) pos += r.label;
    std::printf("wrote %zu images (%zu label-1) and %s\n", ds.manifest.size(), pos,
                (fs::path(synth_out) / "manifest.csv").string().c_str());
  } else if (*c_pre) {
    const RunConfig cfg = run_config(g);
    const auto s = cmd_preprocess(pre_manifest, pre_out,
                                  pre_masks.empty() ? std::nullopt : std::optional<fs::path>(pre_masks), cfg, jobs);
    std::printf("preprocessed %zu images; fallback crop used for %zu (%.1f%%)\n", s.count, s.fallback_count,
                100.0 * s.fallback_rate());
  } else if (*c_split) {
    const RunConfig cfg = run_config(g);
    const auto plan = cmd_split(split_manifest, split_test.value_or(cfg.test_count), split_k.value_or(cfg.k),
                                split_val.value_or(cfg.val_fraction), cfg.seed, split_out);
    std::printf("folds %d: train %zu / val %zu / test %zu per fold\n", plan.k, plan.ids(0, Role::train).size(),
                plan.ids(0, Role::val).size(), plan.test_ids.size());
  } else if (*c_train) {
    const RunConfig cfg = run_config(g);
    const auto log = cmd_train(train_views, train_plan, train_fold, parse_view(train_view), cfg, train_out, jobs);
    std::printf("trained %s model on fold %d: final loss %.6f, best epoch %d\n", train_view.c_str(), train_fold,
                log.epoch_loss.back(), log.best_epoch + 1);
  } else if (*c_pred) {
    const auto rows = cmd_predict(pred_model, pred_views,
                                  pred_plan.empty() ? std::nullopt : std::optional<fs::path>(pred_plan), pred_fold,
                                  parse_role(pred_role), pred_out, jobs);
    std::printf("wrote %zu predictions to %s\n", rows.size(), pred_out.c_str());
  } else if (*c_fuse) {
    const EnsembleConfig cfg = EnsembleConfig::from(load_config(g));
    std::vector<fs::path> inputs(fuse_inputs.begin(), fuse_inputs.end());
    const auto rows = cmd_fuse(inputs, cfg, fuse_out);
    std::printf("fused %zu ids into %s\n", rows.size(), fuse_out.c_str());
  } else if (*c_eval) {
    const auto rep = cmd_eval(eval_pred, eval_manifest, eval_out, eval_threshold,
                              eval_view.empty() ? std::nullopt : std::optional<View>(parse_view(eval_view)),
                              eval_roc.empty() ? std::nullopt : std::optional<fs::path>(eval_roc));
    std::printf("AUC %.4f  F1 %.4f  (n=%zu)\n", rep.auc, rep.f1, rep.count());
  } else if (*c_cv) {
    const RunConfig cfg = run_config(g);
    cmd_crossval(cv_manifest, cfg, cv_out, jobs, cv_masks.empty() ? std::nullopt : std::optional<fs::path>(cv_masks));
    std::fputs(read_file(fs::path(cv_out) / "summary.txt").c_str(), stdout);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const fundus::UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return static_cast<int>(fundus::ExitCode::usage);
  } catch (const fundus::DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return static_cast<int>(fundus::ExitCode::data);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "internal error: %s\n", e.what());
    return static_cast<int>(fundus::ExitCode::internal);
  }
}
