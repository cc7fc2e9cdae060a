// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
// failure. Usage: acceptance <work_dir>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <unistd.h>

#include "fundus/commands.hpp"

using namespace fundus;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = true;
  std::string detail;
};

// Collects the first few failure messages of a criterion.
struct Check {
  bool ok = true;
  std::string first;
  int failures = 0;

  void expect(bool cond, const std::string& what) {
    if (cond) return;
    ok = false;
    if (failures++ == 0) first = what;
  }
  std::string summary(const std::string& good) const {
    if (ok) return good;
    return first + (failures > 1 ? " (+" + std::to_string(failures - 1) + " more)" : "");
  }
};

int g_failed = 0;

void report(int id, const std::string& name, double limit_s, const std::function<Outcome()>& body) {
  const auto t0 = Clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double dt = seconds_since(t0);
  if (limit_s > 0 && dt >= limit_s) {
    o.pass = false;
    o.detail += "; over time limit " + format_g(limit_s, 4) + " s";
  }
  if (!o.pass) ++g_failed;
  std::printf("%s  criterion %2d  %-34s %7.2f s  %s\n", o.pass ? "PASS" : "FAIL", id, name.c_str(), dt,
              o.detail.c_str());
  std::fflush(stdout);
}

std::string fmt(double v, int digits = 4) { return format_g(v, digits); }

// Hash of every CSV under dir, keyed by relative path.
std::map<std::string, std::uint64_t> csv_hashes(const fs::path& dir) {
  std::map<std::string, std::uint64_t> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".csv")
      out[fs::relative(e.path(), dir).string()] = fnv1a(read_file(e.path()));
  return out;
}

// ---- shared state between criteria ----

fs::path g_work;
int g_jobs = 1;
constexpr int kC7Seeds = 20;
constexpr std::uint64_t kFirstSeed = 1;
std::optional<CrossvalResult> g_first_run;  // seed 1 of criterion 7, reused by 8 and 10

SynthConfig c7_synth(std::uint64_t seed) {
  SynthConfig s;
  s.n = 3000;
  s.imbalance_ratio = 9.0;
  s.image_size = 256;
  s.seed = seed;
  s.format = "ppm";
  return s;
}

RunConfig c7_run(std::uint64_t seed) {
  RunConfig c;
  c.seed = seed;
  c.test_count = 300;
  c.save_views = false;
  return c;
}

fs::path g_scratch;  // synthetic images; tmpfs when available, they are large

fs::path seed_dir(std::uint64_t seed) { return g_work / "c7" / ("seed" + std::to_string(seed)); }
fs::path seed_data(std::uint64_t seed) { return g_scratch / ("seed" + std::to_string(seed)); }

fs::path pick_scratch(const fs::path& work) {
  if (const char* env = std::getenv("FUNDUS_SCRATCH")) return fs::path(env) / "fundus-acceptance";
  std::error_code ec;
  if (fs::is_directory("/dev/shm", ec)) return fs::path("/dev/shm") / ("fundus-acceptance-" + std::to_string(::getpid()));
  return work / "scratch";
}

// ---- criteria ----

Outcome split_sizes() {
  const Manifest m = synthetic_manifest(96402, 5040, 0);
  const fs::path manifest = g_work / "c1" / "manifest.csv";
  fs::create_directories(manifest.parent_path());
  write_manifest(manifest, m);
  const RunConfig d;
  const FoldPlan plan = cmd_split(manifest, d.test_count, d.k, d.val_fraction, d.seed, g_work / "c1" / "folds.csv");

  std::map<std::string, int> label;
  for (const auto& r : m) label[r.id] = r.label;
  auto positives = [&](const std::vector<std::string>& ids) {
    std::size_t n = 0;
    for (const auto& id : ids) n += static_cast<std::size_t>(label.at(id));
    return n;
  };
  Check c;
  c.expect(m.size() == 101442, "manifest has " + std::to_string(m.size()) + " rows");
  const auto test = plan.test_ids;
  const double ratio = 5040.0 / 101442.0;
  c.expect(test.size() == 10000, "test size " + std::to_string(test.size()));
  c.expect(std::abs(positives(test) - ratio * test.size()) <= 1.0, "test class 1 count " + std::to_string(positives(test)));
  const double pool_ratio = static_cast<double>(positives(plan.pool_ids)) / plan.pool_ids.size();
  for (int f = 0; f < plan.k; ++f) {
    const auto tr = plan.ids(f, Role::train);
    const auto va = plan.ids(f, Role::val);
    const std::string tag = "fold " + std::to_string(f) + ": ";
    c.expect(tr.size() == 73154, tag + "train size " + std::to_string(tr.size()));
    c.expect(va.size() == 18288, tag + "val size " + std::to_string(va.size()));
    c.expect(std::abs(positives(va) - pool_ratio * va.size()) <= 1.0, tag + "val class 1 count off");
    c.expect(std::abs(positives(tr) - pool_ratio * tr.size()) <= 1.0, tag + "train class 1 count off");
  }
  return {c.ok, c.summary("73154 / 18288 / 10000 in all " + std::to_string(plan.k) + " folds, strata within 1")};
}

Outcome padding_rule() {
  Check c;
  for (int d = 1; d <= 500; ++d) {
    const int expected = std::max((3 * d + 5) / 10, 20);
    c.expect(padding_for(d) == expected, "d = " + std::to_string(d) + " gave " + std::to_string(padding_for(d)));
  }

  CounterRng rng(derive_key(7, 0, 0));
  auto noise = [&](int w, int h) {
    Raster img(w, h, 3);
    for (auto& s : img.samples()) s = static_cast<std::uint8_t>(rng.below(256));
    return img;
  };
  auto fixed = [](Mask m) { return [m](const Raster&) { return m; }; };
  Mask majority(256, 256);
  for (int y = 0; y < 256; ++y)
    for (int x = 0; x < 256; ++x)
      if (y < 128 || (y == 128 && x == 0)) majority.set(x, y);
  Mask corner(256, 256);
  corner.set(0, 0);

  struct Case {
    const char* name;
    Raster img;
    Segmenter seg;
    FallbackReason reason;
  };
  const std::vector<Case> cases = {
      {"empty", noise(400, 300), fixed(Mask(256, 256)), FallbackReason::empty_mask},
      {"majority", noise(400, 300), fixed(majority), FallbackReason::majority_mask},
      {"degenerate", noise(64, 64), fixed(corner), FallbackReason::degenerate_crop},
  };
  for (const auto& k : cases) {
    const ViewSet vs = preprocess_sample(k.img, k.seg);
    const int side = std::min({272, k.img.width(), k.img.height()});
    c.expect(vs.used_fallback, std::string(k.name) + ": fallback not engaged");
    c.expect(vs.reason == k.reason, std::string(k.name) + ": wrong reason");
    c.expect(vs.cropped_view == resize_bilinear(center_crop(k.img, side), 256, 256),
             std::string(k.name) + ": cropped view is not the center crop");
  }
  return {c.ok, c.summary("500 diameters exact, 3 fallback paths engaged")};
}

Outcome auc_oracle() {
  CounterRng rng(derive_key(3, 0, 0));
  double worst = 0.0;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = 2 + rng.below(199);
    std::vector<double> s(n);
    std::vector<int> y(n);
    const std::uint64_t levels = 2 + rng.below(30);  // few levels -> many ties
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng.below(levels)) / static_cast<double>(levels);
      y[i] = static_cast<int>(rng.below(2));
    }
    y[0] = 0;
    y[1] = 1;
    double wins = 0.0, pairs = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (y[i] == 1 && y[j] == 0) {
          pairs += 1.0;
          wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
        }
    worst = std::max(worst, std::abs(roc_auc(s, y) - wins / pairs));
  }
  return {worst <= 1e-12, "max |fast - brute| = " + fmt(worst, 3)};
}

Outcome gradient_check() {
  CounterRng rng(derive_key(4, 0, 0));
  const double h = 1e-5;
  double worst = 0.0;
  for (int t = 0; t < 500; ++t) {
    const Logits z{rng.uniform(-6, 6), rng.uniform(-6, 6)};
    const int y = static_cast<int>(rng.below(2));
    const ClassWeights w{{rng.uniform(0.1, 20.0), rng.uniform(0.1, 20.0)}};
    const Logits g = weighted_ce_grad(z, y, w);
    for (int j = 0; j < 2; ++j) {
      Logits up = z, down = z;
      up[j] += h;
      down[j] -= h;
      const double numeric = (weighted_ce(softmax(up), y, w) - weighted_ce(softmax(down), y, w)) / (2 * h);
      const double scale = std::max({std::abs(numeric), std::abs(g[j]), 1e-3});
      worst = std::max(worst, std::abs(numeric - g[j]) / scale);
    }
  }
  return {worst < 1e-6, "max rel err = " + fmt(worst, 3)};
}

Outcome polar_fidelity() {
  Check c;
  // Concentric rings, intensity a function of radius only.
  const int n = 256;
  Raster rings(n, n, 1);
  const double cx = (n - 1) / 2.0;
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      const double r = std::hypot(x - cx, y - cx);
      rings.at(x, y) = to_u8(127.5 + 127.5 * std::cos(r / 6.0));
    }
  const Raster p = polar_transform(rings, n, n);
  double worst = 0.0;
  for (int j = 0; j < p.height(); ++j) {
    double sum = 0.0, sq = 0.0;
    for (int i = 0; i < p.width(); ++i) {
      sum += p.at(i, j);
      sq += static_cast<double>(p.at(i, j)) * p.at(i, j);
    }
    const double mean = sum / p.width();
    worst = std::max(worst, std::sqrt(std::max(0.0, sq / p.width() - mean * mean)));
  }
  c.expect(worst <= 2.0, "row std " + fmt(worst));

  const PolarCoord pt = to_polar({3.0, 4.0});
  c.expect(std::abs(pt.r - 5.0) <= 1e-12, "r = " + format_g(pt.r, 17));
  c.expect(std::abs(pt.theta - std::atan2(4.0, 3.0)) <= 1e-12, "theta = " + format_g(pt.theta, 17));
  return {c.ok, c.summary("max row std " + fmt(worst, 3) + ", (3,4) -> r = 5")};
}

Outcome fusion_exactness() {
  Check c;
  const EnsembleConfig cfg;
  const ProbVector f =
      fuse({{View::original, {0.8, 0.2}}, {View::cropped, {0.4, 0.6}}, {View::polar, {0.5, 0.5}}}, cfg);
  c.expect(std::abs(f[0] - 41.0 / 60.0) <= 1e-9,
           "example p0 = " + format_g(f[0], 17));
  c.expect(std::abs(f[1] - 19.0 / 60.0) <= 1e-9, "example p1 = " + format_g(f[1], 17));

  CounterRng rng(derive_key(6, 0, 0));
  for (int t = 0; t < 10000; ++t) {
    std::map<View, ProbVector> preds;
    EnsembleConfig w, scaled;
    const double k = rng.uniform(0.01, 100.0);
    for (View v : kModelViews) {
      const double p = rng.uniform();
      preds[v] = {1.0 - p, p};
      w.weights[v] = rng.uniform(0.01, 10.0);
      scaled.weights[v] = w.weights[v] * k;
    }
    const ProbVector a = fuse(preds, w);
    const ProbVector b = fuse(preds, scaled);
    double lo = 1.0, hi = 0.0;
    for (const auto& [v, p] : preds) {
      lo = std::min(lo, p[1]);
      hi = std::max(hi, p[1]);
    }
    c.expect(std::abs(a[0] - b[0]) <= 1e-12 && std::abs(a[1] - b[1]) <= 1e-12,
             "case " + std::to_string(t) + ": not scale invariant");
    c.expect(a[1] >= lo - 1e-12 && a[1] <= hi + 1e-12, "case " + std::to_string(t) + ": outside convex hull");
    c.expect(std::abs(a[0] + a[1] - 1.0) <= 1e-12, "case " + std::to_string(t) + ": does not sum to 1");
  }
  return {c.ok, c.summary("(" + fmt(f[0], 6) + ", " + fmt(f[1], 6) + "), 10000 random cases hold")};
}

Outcome ensemble_beats_views() {
  Check c;
  int strictly = 0;
  std::string worst_margin_note;
  double worst_margin = 1.0;
  for (int s = 0; s < kC7Seeds; ++s) {
    const std::uint64_t seed = kFirstSeed + s;
    const fs::path dir = seed_dir(seed);
    fs::remove_all(dir);
    fs::remove_all(seed_data(seed));
    generate_synthetic(c7_synth(seed), seed_data(seed), g_jobs);
    CrossvalResult res = cmd_crossval(seed_data(seed) / "manifest.csv", c7_run(seed), dir / "cv", g_jobs);
    for (std::size_t f = 0; f < res.folds.size(); ++f) {
      double best = 0.0;
      for (View v : kModelViews) best = std::max(best, res.folds[f].test.at(v).auc);
      const double margin = res.folds[f].test.at(View::fused).auc - best;
      if (margin < worst_margin) {
        worst_margin = margin;
        worst_margin_note = "seed " + std::to_string(seed) + " fold " + std::to_string(f);
      }
      c.expect(margin >= -0.005, "seed " + std::to_string(seed) + " fold " + std::to_string(f) + ": fused trails by " +
                                     fmt(-margin, 3));
    }
    double best_mean = 0.0;
    for (View v : kModelViews) best_mean = std::max(best_mean, res.aggregate.at(v).auc.mean);
    if (res.aggregate.at(View::fused).auc.mean > best_mean) ++strictly;
    if (seed == kFirstSeed) {
      g_first_run = std::move(res);
      fs::copy_file(seed_data(seed) / "manifest.csv", dir / "manifest.csv");  // for the determinism rerun
    } else {
      fs::remove_all(dir);
    }
    fs::remove_all(seed_data(seed));
  }
  c.expect(strictly * 5 >= kC7Seeds * 4, "fused strictly better in only " + std::to_string(strictly) + " seeds");
  return {c.ok, c.summary("fused > best view in " + std::to_string(strictly) + "/" + std::to_string(kC7Seeds) +
                          " seeds, worst fold margin " + fmt(worst_margin, 3) + " (" + worst_margin_note + ")")};
}

Outcome end_to_end_signal() {
  if (!g_first_run) return {false, "criterion 7 did not produce a run"};
  const CrossvalResult& res = *g_first_run;
  Check c;
  double min_auc = 1.0;
  for (std::size_t f = 0; f < res.folds.size(); ++f) {
    const double auc = res.folds[f].test.at(View::fused).auc;
    min_auc = std::min(min_auc, auc);
    c.expect(auc >= 0.85, "fold " + std::to_string(f) + " fused AUC " + fmt(auc, 3));
    for (View v : kModelViews) {
      const TrainLog& log = res.folds[f].logs.at(v);
      const std::string tag = "fold " + std::to_string(f) + " " + view_name(v) + ": ";
      c.expect(log.epoch_loss.size() >= 5, tag + "fewer than 5 epochs");
      double prev = log.initial_loss;
      for (std::size_t e = 0; e < 5 && e < log.epoch_loss.size(); ++e) {
        c.expect(log.epoch_loss[e] < prev, tag + "loss rose at epoch " + std::to_string(e + 1));
        prev = log.epoch_loss[e];
      }
    }
  }
  return {c.ok, c.summary("fused AUC " + fmt(res.aggregate.at(View::fused).auc.mean, 3) + " mean, " + fmt(min_auc, 3) +
                          " min; loss falls for 5 epochs in every fold and view")};
}

// ---- fine-tuning across a domain shift ----

struct Domain {
  Manifest records;
  std::map<std::string, Features> features;
};

Domain make_domain(const SynthConfig& cfg) {
  const auto labels = synthetic_labels(cfg);
  Domain d;
  d.records.resize(cfg.n);
  std::vector<Features> feats(cfg.n);
  parallel_for(cfg.n, g_jobs, [&](std::size_t i) {
    const Raster img = synthetic_image(cfg, i, synthetic_geometry(cfg, i, labels[i]));
    feats[i] = extract_features(preprocess_sample(img, BrightnessSegmenter{}).original_view);
  });
  for (std::size_t i = 0; i < cfg.n; ++i) {
    d.records[i] = {synthetic_id(cfg, i), "", labels[i]};
    d.features[d.records[i].id] = std::move(feats[i]);
  }
  return d;
}

std::vector<Example> examples(const Domain& d, const std::vector<std::string>& ids) {
  std::map<std::string, int> label;
  for (const auto& r : d.records) label[r.id] = r.label;
  std::vector<Example> out;
  for (const auto& id : ids) out.push_back({d.features.at(id), label.at(id)});
  return out;
}

Manifest subset(const Domain& d, const std::vector<std::string>& ids) {
  std::map<std::string, int> label;
  for (const auto& r : d.records) label[r.id] = r.label;
  Manifest out;
  for (const auto& id : ids) out.push_back({id, "", label.at(id)});
  return out;
}

struct TransferResult {
  double zero_shot = 0.0, fine_tuned = 0.0;
};

// Pretrain on domain A, score B's test set, fine-tune on half of B's train
// split and score again. Writes both prediction CSVs under out_dir.
TransferResult transfer(std::uint64_t seed, const fs::path& out_dir) {
  SynthConfig a;
  a.n = 2000;
  a.image_size = 256;
  a.seed = seed;
  a.id_prefix = "a";
  SynthConfig b = a;
  b.n = 1500;
  b.seed = seed + 1000;
  b.id_prefix = "b";
  b.left_eye_rate = 0.5;
  b.disc_scale = 1.1;
  b.brightness = 0.9;
  const Domain da = make_domain(a), db = make_domain(b);
  const FoldPlan pa = make_fold_plan(da.records, 200, 5, 0.2, seed);
  const FoldPlan pb = make_fold_plan(db.records, 300, 5, 0.2, seed);

  TrainConfig tc;
  tc.seed = seed;
  const auto train_a = subset(da, pa.ids(0, Role::train));
  const LinearModel pre = train_reference(examples(da, pa.ids(0, Role::train)), examples(da, pa.ids(0, Role::val)),
                                          class_weights(train_a), tc);
  const Manifest half = subsample_fraction(subset(db, pb.ids(0, Role::train)), 0.5, seed);
  std::vector<std::string> half_ids;
  for (const auto& r : half) half_ids.push_back(r.id);
  const LinearModel tuned = train_reference(examples(db, half_ids), examples(db, pb.ids(0, Role::val)),
                                            class_weights(half), tc, {}, View::original, &pre);

  auto score = [&](const LinearModel& m, const fs::path& csv) {
    std::vector<PredictionRecord> preds;
    for (const auto& id : pb.test_ids) preds.push_back({id, View::original, predict_features(m, db.features.at(id))});
    write_predictions(csv, preds);
    std::vector<ProbVector> probs;
    for (const auto& p : preds) probs.push_back(p.probs);
    std::map<std::string, int> truth;
    for (const auto& r : db.records) truth[r.id] = r.label;
    return evaluate(pb.test_ids, probs, truth).auc;
  };
  fs::create_directories(out_dir);
  return {score(pre, out_dir / "pred_zero_shot.csv"), score(tuned, out_dir / "pred_fine_tuned.csv")};
}

Outcome fine_tune_gain() {
  int wins = 0;
  std::string detail;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const TransferResult r = transfer(seed, g_work / "c9" / ("seed" + std::to_string(seed)));
    const double gain = r.fine_tuned - r.zero_shot;
    if (gain >= 0.05) ++wins;
    detail += (seed > 1 ? ", " : "") + fmt(r.zero_shot, 3) + "->" + fmt(r.fine_tuned, 3);
  }
  return {wins >= 4, std::to_string(wins) + "/5 seeds gain >= 0.05 (" + detail + ")"};
}

Outcome determinism() {
  Check c;
  std::size_t compared = 0;
  auto same = [&](const fs::path& x, const fs::path& y, const std::string& what) {
    const auto hx = csv_hashes(x), hy = csv_hashes(y);
    c.expect(!hx.empty(), what + ": no CSV outputs");
    c.expect(hx == hy, what + ": CSV hashes differ");
    compared += hx.size();
  };

  // split
  {
    const fs::path again = g_work / "c10" / "split";
    fs::create_directories(again);
    fs::copy_file(g_work / "c1" / "manifest.csv", again / "manifest.csv", fs::copy_options::overwrite_existing);
    const RunConfig d;
    cmd_split(again / "manifest.csv", d.test_count, d.k, d.val_fraction, d.seed, again / "folds.csv");
    same(g_work / "c1", again, "split");
  }
  // synth + crossval, first seed of criterion 7
  {
    // The manifest records image paths, so regenerate in place.
    const fs::path data = seed_data(kFirstSeed);
    const std::string manifest = read_file(seed_dir(kFirstSeed) / "manifest.csv");
    fs::remove_all(data);
    generate_synthetic(c7_synth(kFirstSeed), data, g_jobs);
    c.expect(read_file(data / "manifest.csv") == manifest, "synth: manifest differs");
    ++compared;
    const fs::path again = g_work / "c10" / "crossval";
    cmd_crossval(data / "manifest.csv", c7_run(kFirstSeed), again, g_jobs);
    same(seed_dir(kFirstSeed) / "cv", again, "crossval");
    fs::remove_all(data);
  }
  // fine-tuning predictions
  {
    const fs::path again = g_work / "c10" / "transfer";
    transfer(1, again);
    same(g_work / "c9" / "seed1", again, "transfer");
  }
  return {c.ok, c.summary(std::to_string(compared) + " CSV files byte-identical across reruns")};
}

}  // namespace

int main(int argc, char** argv) {
  if (argc != 2) {
    std::fprintf(stderr, "usage: acceptance <work_dir>\n");
    return 1;
  }
  g_work = argv[1];
  fs::remove_all(g_work);
  fs::create_directories(g_work);
  g_scratch = pick_scratch(g_work);
  g_jobs = resolve_jobs(0);
  std::printf("acceptance: work dir %s, scratch %s, %d job(s)\n", g_work.string().c_str(), g_scratch.string().c_str(), g_jobs);

  report(1, "split sizes", 5, split_sizes);
  report(2, "padding and fallback rules", 1, padding_rule);
  report(3, "AUC vs pair counting", 10, auc_oracle);
  report(4, "weighted CE gradient", 5, gradient_check);
  report(5, "polar fidelity", 5, polar_fidelity);
  report(6, "fusion exactness", 5, fusion_exactness);
  report(7, "ensemble beats single views", 180, ensemble_beats_views);
  report(8, "end-to-end signal", 180, end_to_end_signal);
  report(9, "fine-tuning gain", 120, fine_tune_gain);
  report(10, "determinism", 0, determinism);

  fs::remove_all(g_scratch);
  std::printf("%s: %d of 10 criteria failed\n", g_failed == 0 ? "PASS" : "FAIL", g_failed);
  return g_failed == 0 ? 0 : 1;
}
