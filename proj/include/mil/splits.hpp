#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "mil/bag.hpp"
#include "mil/error.hpp"
#include "mil/rng.hpp"

namespace mil {

struct Fold {
  std::vector<std::string> train_ids;
  std::vector<std::string> val_ids;
};

struct SplitAssignment {
  int fold_count = 0;
  std::vector<std::string> test_ids;
  std::vector<Fold> folds;
};

namespace detail {

struct Patient {
  std::string id;
  int cls = 0;                       // majority label, ties toward the lowest
  std::vector<std::string> bag_ids;  // sorted
  std::uint64_t order_key = 0;       // seeded hash; fixes all ordering
};

/// Picks a subset of patients whose bag counts sum as close to `target` as
/// possible, preferring earlier patients in the given order. Exact sums win;
/// among equal distances the smaller sum wins.
inline std::vector<int> pick_subset(const std::vector<const Patient*>& patients, int target) {
  const int cap = target;
  // reach[s] = index of the last patient used to first reach sum s; -1 marks
  // the empty subset, -2 unreachable.
  std::vector<int> reach(cap + 1, -2);
  reach[0] = -1;
  for (std::size_t i = 0; i < patients.size(); ++i) {
    const int w = static_cast<int>(patients[i]->bag_ids.size());
    if (w > cap) continue;
    for (int s = cap; s >= w; --s) {
      if (reach[s] == -2 && reach[s - w] != -2) reach[s] = static_cast<int>(i);
    }
  }
  int best = 0;
  for (int s = cap; s >= 0; --s) {
    if (reach[s] != -2) {
      best = s;
      break;
    }
  }
  // If the exact target is unreachable the closest not-exceeding sum is used;
  // overshooting by one patient is handled by the caller if closer.
  std::vector<int> chosen;
  int s = best;
  while (s > 0) {
    const int i = reach[s];
    chosen.push_back(i);
    s -= static_cast<int>(patients[i]->bag_ids.size());
  }
  std::sort(chosen.begin(), chosen.end());
  return chosen;
}

}  // namespace detail

/// Patient-disjoint stratified splits: a held-out test set of ~test_ratio of
/// the bags, then fold_count cross-validation folds over the remaining pool.
/// Per-class bag counts follow global proportions where patient granularity
/// allows. Deterministic for a fixed seed and invariant to entry order.
///
/// fold_count == 1 degenerates to a single train/val run with a 1/5
/// validation holdout, mirroring the 5-fold geometry.
inline SplitAssignment make_splits(const DatasetManifest& manifest, double test_ratio, int fold_count,
                                   std::uint64_t seed) {
  validate_manifest(manifest);
  if (fold_count < 1) throw ValidationError("make_splits: fold_count must be >= 1");
  if (test_ratio < 0.0 || test_ratio >= 1.0) throw ValidationError("make_splits: test_ratio must be in [0, 1)");

  std::vector<ManifestEntry> entries = manifest.entries;
  std::sort(entries.begin(), entries.end(),
            [](const ManifestEntry& a, const ManifestEntry& b) { return a.bag_id < b.bag_id; });

  // Group bags by patient; a patient's class is its majority label.
  std::map<std::string, detail::Patient> by_patient;
  for (const auto& e : entries) {
    auto& p = by_patient[e.patient_id];
    p.id = e.patient_id;
    p.bag_ids.push_back(e.bag_id);
  }
  std::map<std::string, std::map<int, int>> label_counts;
  for (const auto& e : entries) label_counts[e.patient_id][e.label]++;
  for (auto& [id, p] : by_patient) {
    int best = -1, best_count = -1;
    for (const auto& [cls, count] : label_counts[id]) {
      if (count > best_count) {
        best = cls;
        best_count = count;
      }
    }
    p.cls = best;
    p.order_key = mix64(fnv1a(id) ^ mix64(seed));
  }

  std::vector<std::vector<detail::Patient*>> per_class(manifest.class_count);
  for (auto& [id, p] : by_patient) per_class[p.cls].push_back(&p);
  for (auto& group : per_class) {
    std::sort(group.begin(), group.end(), [](const detail::Patient* a, const detail::Patient* b) {
      return a->order_key != b->order_key ? a->order_key < b->order_key : a->id < b->id;
    });
  }
  for (int c = 0; c < manifest.class_count; ++c) {
    if (static_cast<int>(per_class[c].size()) < fold_count + 1)
      throw ValidationError("make_splits: class " + std::to_string(c) + " has " +
                            std::to_string(per_class[c].size()) + " patients; needs at least " +
                            std::to_string(fold_count + 1) + " to stratify");
  }

  // Per-class test-bag targets: floor shares, remainder by largest fraction.
  std::vector<int> class_bags(manifest.class_count, 0);
  for (const auto& e : entries) class_bags[e.label]++;
  const int total = static_cast<int>(entries.size());
  const int test_total = static_cast<int>(std::lround(test_ratio * total));
  std::vector<int> targets(manifest.class_count);
  std::vector<std::pair<double, int>> fractions;
  int assigned = 0;
  for (int c = 0; c < manifest.class_count; ++c) {
    const double share = test_ratio * class_bags[c];
    targets[c] = static_cast<int>(share);
    assigned += targets[c];
    fractions.push_back({share - targets[c], c});
  }
  std::sort(fractions.begin(), fractions.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first > b.first : a.second < b.second;
  });
  for (int i = 0; i < test_total - assigned && i < static_cast<int>(fractions.size()); ++i)
    targets[fractions[i].second]++;

  SplitAssignment out;
  out.fold_count = fold_count;
  std::vector<std::vector<detail::Patient*>> pool(manifest.class_count);
  for (int c = 0; c < manifest.class_count; ++c) {
    std::vector<const detail::Patient*> cands(per_class[c].begin(), per_class[c].end());
    // Keep at least fold_count patients in the pool so every fold can be fed.
    const int max_take = static_cast<int>(cands.size()) - fold_count;
    std::vector<int> chosen;
    if (targets[c] > 0 && max_take > 0) chosen = detail::pick_subset(cands, targets[c]);
    std::set<int> chosen_set(chosen.begin(), chosen.end());
    while (static_cast<int>(chosen_set.size()) > max_take) chosen_set.erase(std::prev(chosen_set.end()));
    for (std::size_t i = 0; i < per_class[c].size(); ++i) {
      if (chosen_set.count(static_cast<int>(i))) {
        for (const auto& id : per_class[c][i]->bag_ids) out.test_ids.push_back(id);
      } else {
        pool[c].push_back(per_class[c][i]);
      }
    }
  }
  std::sort(out.test_ids.begin(), out.test_ids.end());

  // Partition the pool into validation chunks: fold_count of them, or the
  // 5-fold geometry when fold_count == 1.
  const int chunk_count = fold_count >= 2 ? fold_count : 5;
  std::vector<std::vector<std::string>> chunks(chunk_count);
  std::vector<int> chunk_load(chunk_count, 0);
  for (int c = 0; c < manifest.class_count; ++c) {
    std::vector<int> class_load(chunk_count, 0);
    // Larger patients first gives tighter balance; hash order breaks ties.
    std::stable_sort(pool[c].begin(), pool[c].end(), [](const detail::Patient* a, const detail::Patient* b) {
      return a->bag_ids.size() > b->bag_ids.size();
    });
    for (const auto* p : pool[c]) {
      int best = 0;
      for (int k = 1; k < chunk_count; ++k) {
        if (class_load[k] < class_load[best] ||
            (class_load[k] == class_load[best] && chunk_load[k] < chunk_load[best]))
          best = k;
      }
      for (const auto& id : p->bag_ids) chunks[best].push_back(id);
      class_load[best] += static_cast<int>(p->bag_ids.size());
      chunk_load[best] += static_cast<int>(p->bag_ids.size());
    }
  }
  for (auto& chunk : chunks) std::sort(chunk.begin(), chunk.end());

  for (int f = 0; f < fold_count; ++f) {
    Fold fold;
    fold.val_ids = chunks[f];
    for (int k = 0; k < chunk_count; ++k) {
      if (k == f) continue;
      fold.train_ids.insert(fold.train_ids.end(), chunks[k].begin(), chunks[k].end());
    }
    std::sort(fold.train_ids.begin(), fold.train_ids.end());
    out.folds.push_back(std::move(fold));
  }
  return out;
}

inline nlohmann::json splits_to_json(const SplitAssignment& s) {
  nlohmann::json j;
  j["fold_count"] = s.fold_count;
  j["test_ids"] = s.test_ids;
  j["folds"] = nlohmann::json::array();
  for (const auto& f : s.folds) j["folds"].push_back({{"train_ids", f.train_ids}, {"val_ids", f.val_ids}});
  return j;
}

inline SplitAssignment splits_from_json(const nlohmann::json& j) {
  SplitAssignment s;
  s.fold_count = j.at("fold_count").get<int>();
  s.test_ids = j.at("test_ids").get<std::vector<std::string>>();
  for (const auto& jf : j.at("folds"))
    s.folds.push_back({jf.at("train_ids").get<std::vector<std::string>>(),
                       jf.at("val_ids").get<std::vector<std::string>>()});
  if (static_cast<int>(s.folds.size()) != s.fold_count)
    throw ValidationError("splits: fold_count does not match folds");
  return s;
}

inline void save_splits(const SplitAssignment& s, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw IoError("save_splits: cannot open '" + path.string() + "'");
  os << splits_to_json(s).dump(2) << "\n";
}

inline SplitAssignment load_splits(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("load_splits: cannot open '" + path.string() + "'");
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("load_splits: parse failure: " + std::string(e.what()));
  }
  return splits_from_json(j);
}

}  // namespace mil
