#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "fundus/io.hpp"
#include "fundus/rng.hpp"

namespace fundus {

constexpr int kNumClasses = 2;  // 0 = no referable glaucoma, 1 = referable glaucoma

struct ManifestRecord {
  std::string id;
  std::string path;
  int label = 0;

  bool operator==(const ManifestRecord&) const = default;
};

using Manifest = std::vector<ManifestRecord>;

// Reads a CSV manifest with header `id,path,label`. Relative image paths are
// resolved against the manifest's directory.
inline Manifest load_manifest(const fs::path& path) {
  const auto lines = read_lines(path);
  const std::string name = path.string();
  if (lines.empty() || trim(lines[0]) != "id,path,label")
    throw data_error_at(name, 1, "expected header 'id,path,label'");

  Manifest out;
  std::unordered_map<std::string, std::size_t> seen;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const std::size_t line_no = i + 1;
    if (trim(lines[i]).empty()) continue;
    const auto f = split_csv(lines[i]);
    if (f.size() != 3) throw data_error_at(name, line_no, "expected 3 fields, got " + std::to_string(f.size()));
    ManifestRecord r;
    r.id = std::string(trim(f[0]));
    if (r.id.empty()) throw data_error_at(name, line_no, "empty id");
    const auto label = trim(f[2]);
    if (label == "0")
      r.label = 0;
    else if (label == "1")
      r.label = 1;
    else
      throw data_error_at(name, line_no, "unknown label '" + std::string(label) + "'");
    const fs::path p(std::string(trim(f[1])));
    r.path = (p.is_relative() ? path.parent_path() / p : p).string();
    if (auto [it, inserted] = seen.emplace(r.id, line_no); !inserted)
      throw data_error_at(name, line_no, "duplicate id '" + r.id + "' (first on line " + std::to_string(it->second) + ")");
    out.push_back(std::move(r));
  }
  return out;
}

// Writes a manifest; image paths are stored relative to the manifest file when
// they live underneath it.
inline void write_manifest(const fs::path& path, const Manifest& records) {
  std::string out = "id,path,label\n";
  const fs::path base = path.parent_path();
  for (const auto& r : records) {
    fs::path p(r.path);
    if (!base.empty()) {
      const auto rel = p.lexically_relative(base);
      if (!rel.empty() && *rel.begin() != "..") p = rel;
    }
    out += r.id + "," + p.generic_string() + "," + std::to_string(r.label) + "\n";
  }
  write_file_atomic(path, out);
}

inline std::array<std::size_t, kNumClasses> class_counts(const Manifest& records) {
  std::array<std::size_t, kNumClasses> n{};
  for (const auto& r : records) ++n.at(static_cast<std::size_t>(r.label));
  return n;
}

// Splits `total` across classes proportionally to `counts`; leftover units go
// to the largest fractional remainders (ties to the lower class index).
inline std::array<std::size_t, kNumClasses> apportion(std::size_t total, const std::array<std::size_t, kNumClasses>& counts) {
  const std::size_t n = std::accumulate(counts.begin(), counts.end(), std::size_t{0});
  std::array<std::size_t, kNumClasses> quota{};
  if (n == 0) return quota;
  std::array<std::uint64_t, kNumClasses> rem{};
  std::size_t assigned = 0;
  for (int c = 0; c < kNumClasses; ++c) {
    const std::uint64_t num = static_cast<std::uint64_t>(total) * counts[c];
    quota[c] = static_cast<std::size_t>(num / n);
    rem[c] = num % n;
    assigned += quota[c];
  }
  std::array<int, kNumClasses> order{};
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return rem[a] > rem[b]; });
  for (std::size_t k = 0; assigned < total; ++k, ++assigned) ++quota[order[k % kNumClasses]];
  return quota;
}

namespace detail {

// Manifest indices of each class, shuffled by a stream derived from
// (seed, purpose, class).
inline std::array<std::vector<std::size_t>, kNumClasses> shuffled_by_class(const Manifest& records, std::uint64_t seed,
                                                                           std::uint64_t purpose) {
  std::array<std::vector<std::size_t>, kNumClasses> idx;
  for (std::size_t i = 0; i < records.size(); ++i) idx[records[i].label].push_back(i);
  for (int c = 0; c < kNumClasses; ++c) {
    CounterRng rng(derive_key(seed, purpose, static_cast<std::uint64_t>(c)));
    shuffle(std::span<std::size_t>(idx[c]), rng);
  }
  return idx;
}

// Takes quota[c] shuffled members of each class; returns a keep-flag per record.
inline std::vector<bool> stratified_pick(const Manifest& records, const std::array<std::size_t, kNumClasses>& quota,
                                         std::uint64_t seed, std::uint64_t purpose) {
  const auto idx = shuffled_by_class(records, seed, purpose);
  std::vector<bool> picked(records.size(), false);
  for (int c = 0; c < kNumClasses; ++c)
    for (std::size_t k = 0; k < quota[c]; ++k) picked[idx[c][k]] = true;
  return picked;
}

constexpr std::uint64_t kHoldoutStream = 0x686f6c646f7574ULL;
constexpr std::uint64_t kFoldStream = 0x6b666f6c64ULL;
constexpr std::uint64_t kSubsampleStream = 0x7375627361ULL;

}  // namespace detail

struct Holdout {
  Manifest train_pool;
  Manifest test;
};

// Stratified test split of exactly test_count records. Both parts keep
// manifest order.
inline Holdout stratified_holdout(const Manifest& records, std::size_t test_count, std::uint64_t seed) {
  if (test_count == 0 || test_count >= records.size())
    throw UsageError("test count must be in (0, " + std::to_string(records.size()) + ")");
  const auto quota = apportion(test_count, class_counts(records));
  const auto picked = detail::stratified_pick(records, quota, seed, detail::kHoldoutStream);
  Holdout out;
  for (std::size_t i = 0; i < records.size(); ++i) (picked[i] ? out.test : out.train_pool).push_back(records[i]);
  return out;
}

enum class Role { train, val, test };

inline const char* role_name(Role r) {
  switch (r) {
    case Role::train: return "train";
    case Role::val: return "val";
    case Role::test: return "test";
  }
  return "?";
}

// Fold assignment for the train pool plus the shared test set.
//
// Each pool id carries the index of the validation shard it belongs to, or -1
// when it is never validated (only when k * shard size < pool size).
struct FoldPlan {
  int k = 5;
  std::uint64_t seed = 0;
  std::vector<std::string> pool_ids;
  std::vector<int> shard;
  std::vector<std::string> test_ids;

  std::vector<std::string> ids(int fold, Role role) const {
    if (role == Role::test) return test_ids;
    std::vector<std::string> out;
    for (std::size_t i = 0; i < pool_ids.size(); ++i)
      if ((shard[i] == fold) == (role == Role::val)) out.push_back(pool_ids[i]);
    return out;
  }

  bool operator==(const FoldPlan&) const = default;
};

// Stratified k-fold assignment of the pool into k disjoint validation shards
// of round(val_fraction * N) records each (at most N / k).
//
// Each class is shuffled, then the classes are merged into one sequence
// ordered by within-class position (j + 0.5) / n_c. Any contiguous run of
// that sequence has per-class counts within one of the proportional ideal,
// so shard i is simply run [i * V, (i + 1) * V).
inline FoldPlan kfold(const Manifest& pool, int k, double val_fraction, std::uint64_t seed) {
  if (k < 2) throw UsageError("k must be >= 2");
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw UsageError("validation fraction must be in (0, 1)");
  const auto counts = class_counts(pool);
  for (int c = 0; c < kNumClasses; ++c)
    if (counts[c] < static_cast<std::size_t>(k))
      throw DataError("k = " + std::to_string(k) + " exceeds the size of class " + std::to_string(c) + " (" +
                      std::to_string(counts[c]) + ")");
  const std::size_t n = pool.size();
  // Rounding up may not fit k shards (e.g. 130 ids, k = 4); cap at floor(n / k).
  const auto shard_size = std::min(static_cast<std::size_t>(std::floor(val_fraction * static_cast<double>(n) + 0.5)),
                                   n / static_cast<std::size_t>(k));
  if (shard_size == 0)
    throw UsageError("cannot carve " + std::to_string(k) + " validation shards of " + std::to_string(shard_size) +
                     " from a pool of " + std::to_string(n));

  const auto idx = detail::shuffled_by_class(pool, seed, detail::kFoldStream);
  struct Entry {
    double key;
    int cls;
    std::size_t index;
  };
  std::vector<Entry> seq;
  seq.reserve(n);
  for (int c = 0; c < kNumClasses; ++c)
    for (std::size_t j = 0; j < idx[c].size(); ++j)
      seq.push_back({(static_cast<double>(j) + 0.5) / static_cast<double>(idx[c].size()), c, idx[c][j]});
  std::sort(seq.begin(), seq.end(), [](const Entry& a, const Entry& b) {
    return a.key != b.key ? a.key < b.key : a.cls < b.cls;
  });

  FoldPlan plan;
  plan.k = k;
  plan.seed = seed;
  plan.shard.assign(n, -1);
  for (std::size_t pos = 0; pos < static_cast<std::size_t>(k) * shard_size; ++pos)
    plan.shard[seq[pos].index] = static_cast<int>(pos / shard_size);
  for (const auto& r : pool) plan.pool_ids.push_back(r.id);
  return plan;
}

// Holdout followed by k-fold over the remaining pool.
inline FoldPlan make_fold_plan(const Manifest& records, std::size_t test_count, int k, double val_fraction,
                               std::uint64_t seed) {
  const Holdout h = stratified_holdout(records, test_count, seed);
  FoldPlan plan = kfold(h.train_pool, k, val_fraction, seed);
  for (const auto& r : h.test) plan.test_ids.push_back(r.id);
  return plan;
}

// CSV `id,fold,role`: one row per pool id per fold, then one row per test id
// with an empty fold field.
inline std::string encode_fold_plan(const FoldPlan& plan) {
  std::string out = "id,fold,role\n";
  for (int f = 0; f < plan.k; ++f) {
    const std::string fold = std::to_string(f);
    for (std::size_t i = 0; i < plan.pool_ids.size(); ++i) {
      out += plan.pool_ids[i];
      out += ',';
      out += fold;
      out += plan.shard[i] == f ? ",val\n" : ",train\n";
    }
  }
  for (const auto& id : plan.test_ids) out += id + ",,test\n";
  return out;
}

inline void write_fold_plan(const fs::path& path, const FoldPlan& plan) { write_file_atomic(path, encode_fold_plan(plan)); }

inline FoldPlan read_fold_plan(const fs::path& path) {
  const auto lines = read_lines(path);
  const std::string name = path.string();
  if (lines.empty() || trim(lines[0]) != "id,fold,role") throw data_error_at(name, 1, "expected header 'id,fold,role'");

  FoldPlan plan;
  std::unordered_map<std::string, std::size_t> pool_index;
  std::unordered_set<std::string> test_seen;
  std::vector<std::vector<bool>> seen_in_fold;
  int max_fold = -1;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const std::size_t line_no = i + 1;
    if (trim(lines[i]).empty()) continue;
    const auto f = split_csv(lines[i]);
    if (f.size() != 3) throw data_error_at(name, line_no, "expected 3 fields");
    const std::string id(trim(f[0]));
    const std::string fold_s(trim(f[1]));
    const std::string role(trim(f[2]));
    if (role == "test") {
      if (!fold_s.empty()) throw data_error_at(name, line_no, "test rows must have an empty fold");
      if (!test_seen.insert(id).second) throw data_error_at(name, line_no, "duplicate test id '" + id + "'");
      if (pool_index.count(id)) throw data_error_at(name, line_no, "id '" + id + "' is both pool and test");
      plan.test_ids.push_back(id);
      continue;
    }
    if (role != "train" && role != "val") throw data_error_at(name, line_no, "unknown role '" + role + "'");
    int fold = -1;
    try {
      std::size_t used = 0;
      fold = std::stoi(fold_s, &used);
      if (used != fold_s.size() || fold < 0) throw std::invalid_argument("fold");
    } catch (const std::exception&) {
      throw data_error_at(name, line_no, "bad fold '" + fold_s + "'");
    }
    if (test_seen.count(id)) throw data_error_at(name, line_no, "id '" + id + "' is both pool and test");
    auto [it, inserted] = pool_index.emplace(id, plan.pool_ids.size());
    if (inserted) {
      plan.pool_ids.push_back(id);
      plan.shard.push_back(-1);
    }
    if (static_cast<int>(seen_in_fold.size()) <= fold) seen_in_fold.resize(fold + 1);
    auto& seen = seen_in_fold[fold];
    if (seen.size() <= it->second) seen.resize(it->second + 1, false);
    if (seen[it->second]) throw data_error_at(name, line_no, "id '" + id + "' listed twice in fold " + fold_s);
    seen[it->second] = true;
    if (role == "val") {
      if (plan.shard[it->second] != -1) throw data_error_at(name, line_no, "id '" + id + "' validated in two folds");
      plan.shard[it->second] = fold;
    }
    max_fold = std::max(max_fold, fold);
  }
  plan.k = max_fold + 1;
  for (int f = 0; f < plan.k; ++f) {
    auto& seen = seen_in_fold[f];
    seen.resize(plan.pool_ids.size(), false);
    if (std::find(seen.begin(), seen.end(), false) != seen.end())
      throw DataError(name + ": fold " + std::to_string(f) + " does not cover every pool id");
  }
  return plan;
}

struct ClassWeights {
  std::array<double, kNumClasses> w{1.0, 1.0};
};

// Inverse-frequency weights w_j = N / (C * n_j).
inline ClassWeights class_weights(const std::array<std::size_t, kNumClasses>& counts) {
  const double n = static_cast<double>(std::accumulate(counts.begin(), counts.end(), std::size_t{0}));
  ClassWeights out;
  for (int c = 0; c < kNumClasses; ++c) {
    if (counts[c] == 0) throw DataError("class " + std::to_string(c) + " has no samples; cannot weight it");
    out.w[c] = n / (kNumClasses * static_cast<double>(counts[c]));
  }
  return out;
}

inline ClassWeights class_weights(const Manifest& records) { return class_weights(class_counts(records)); }

// Stratified random subset of round(fraction * N) records, in manifest order.
inline Manifest subsample_fraction(const Manifest& records, double fraction, std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw UsageError("fraction must be in [0, 1]");
  const auto size = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(records.size()) + 0.5));
  const auto quota = apportion(size, class_counts(records));
  const auto picked = detail::stratified_pick(records, quota, seed, detail::kSubsampleStream);
  Manifest out;
  for (std::size_t i = 0; i < records.size(); ++i)
    if (picked[i]) out.push_back(records[i]);
  return out;
}

}  // namespace fundus
