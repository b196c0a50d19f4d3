#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "mil/error.hpp"
#include "mil/types.hpp"

namespace mil {

struct Prediction {
  std::string bag_id;
  int label = 0;
  VecXd probs;
};

using PredictionSet = std::vector<Prediction>;

inline int class_count_of(const PredictionSet& preds) {
  if (preds.empty()) throw ValidationError("metrics: empty prediction set");
  return static_cast<int>(preds.front().probs.size());
}

inline void validate_predictions(const PredictionSet& preds) {
  const int c = class_count_of(preds);
  for (const auto& p : preds) {
    if (static_cast<int>(p.probs.size()) != c) throw ValidationError("metrics: ragged probability rows");
    if (std::abs(p.probs.sum() - 1.0) > 1e-5)
      throw ValidationError("metrics: probabilities for '" + p.bag_id + "' do not sum to 1");
    if (p.label < 0 || p.label >= c) throw ValidationError("metrics: label out of range for '" + p.bag_id + "'");
  }
}

/// Argmax with ties broken toward the lowest class index.
inline int predicted_class(const VecXd& probs) {
  int best = 0;
  for (int i = 1; i < probs.size(); ++i)
    if (probs(i) > probs(best)) best = i;
  return best;
}

inline double accuracy(const PredictionSet& preds) {
  validate_predictions(preds);
  long correct = 0;
  for (const auto& p : preds) correct += predicted_class(p.probs) == p.label;
  return static_cast<double>(correct) / static_cast<double>(preds.size());
}

inline Eigen::MatrixXi confusion_matrix(const PredictionSet& preds) {
  const int c = class_count_of(preds);
  Eigen::MatrixXi m = Eigen::MatrixXi::Zero(c, c);
  for (const auto& p : preds) m(p.label, predicted_class(p.probs))++;
  return m;
}

/// Unweighted mean of per-class F1. Zero-division convention: a class with
/// no true and no predicted positives contributes 0.
inline double macro_f1(const PredictionSet& preds) {
  validate_predictions(preds);
  const Eigen::MatrixXi m = confusion_matrix(preds);
  const int c = static_cast<int>(m.rows());
  double sum = 0.0;
  for (int k = 0; k < c; ++k) {
    const double tp = m(k, k);
    const double fp = m.col(k).sum() - tp;
    const double fn = m.row(k).sum() - tp;
    const double denom = 2.0 * tp + fp + fn;
    sum += denom > 0.0 ? 2.0 * tp / denom : 0.0;
  }
  return sum / c;
}

/// Rank-based one-vs-rest AUROC for class `cls` (Mann-Whitney, average ranks
/// give half credit to score ties). Returns nullopt if the class lacks a
/// positive or a negative.
inline std::optional<double> auroc_one_vs_rest(const PredictionSet& preds, int cls) {
  std::vector<std::pair<double, bool>> scored;
  long n_pos = 0;
  for (const auto& p : preds) {
    const bool pos = p.label == cls;
    n_pos += pos;
    scored.push_back({p.probs(cls), pos});
  }
  const long n_neg = static_cast<long>(scored.size()) - n_pos;
  if (n_pos == 0 || n_neg == 0) return std::nullopt;
  std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  double pos_rank_sum = 0.0;
  std::size_t i = 0;
  while (i < scored.size()) {
    std::size_t j = i;
    while (j < scored.size() && scored[j].first == scored[i].first) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // 1-based average over the tie group
    for (std::size_t k = i; k < j; ++k)
      if (scored[k].second) pos_rank_sum += avg_rank;
    i = j;
  }
  const double u = pos_rank_sum - 0.5 * static_cast<double>(n_pos) * (n_pos + 1);
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

/// Macro AUROC over evaluable classes; skipped class indices are reported.
inline double auroc_macro(const PredictionSet& preds, std::vector<int>* skipped = nullptr) {
  validate_predictions(preds);
  const int c = class_count_of(preds);
  double sum = 0.0;
  int used = 0;
  for (int k = 0; k < c; ++k) {
    if (auto a = auroc_one_vs_rest(preds, k)) {
      sum += *a;
      ++used;
    } else if (skipped) {
      skipped->push_back(k);
    }
  }
  if (used == 0) throw ValidationError("auroc_macro: no class has both positives and negatives");
  return sum / used;
}

struct PrPoint {
  double threshold;
  double precision;
  double recall;
};

/// Precision-recall curve for one class over descending score thresholds,
/// one point per distinct score, anchored at (recall 0, precision 1).
inline std::vector<PrPoint> pr_curve(const PredictionSet& preds, int cls) {
  std::vector<std::pair<double, bool>> scored;
  long n_pos = 0;
  for (const auto& p : preds) {
    scored.push_back({p.probs(cls), p.label == cls});
    n_pos += p.label == cls;
  }
  if (n_pos == 0) return {};
  std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<PrPoint> curve;
  curve.push_back({std::numeric_limits<double>::infinity(), 1.0, 0.0});
  long tp = 0, taken = 0;
  std::size_t i = 0;
  while (i < scored.size()) {
    std::size_t j = i;
    while (j < scored.size() && scored[j].first == scored[i].first) ++j;
    for (std::size_t k = i; k < j; ++k) {
      ++taken;
      tp += scored[k].second;
    }
    curve.push_back({scored[i].first, static_cast<double>(tp) / static_cast<double>(taken),
                     static_cast<double>(tp) / static_cast<double>(n_pos)});
    i = j;
  }
  return curve;
}

/// Step-wise area sum(delta recall * precision); no trapezoidal interpolation.
inline std::optional<double> pr_auc(const PredictionSet& preds, int cls) {
  const auto curve = pr_curve(preds, cls);
  if (curve.empty()) return std::nullopt;
  double area = 0.0;
  for (std::size_t i = 1; i < curve.size(); ++i) area += (curve[i].recall - curve[i - 1].recall) * curve[i].precision;
  return area;
}

/// Per-class PR-AUC; classes without positives are reported absent.
inline std::vector<std::optional<double>> pr_auc_per_class(const PredictionSet& preds) {
  validate_predictions(preds);
  std::vector<std::optional<double>> out;
  for (int k = 0; k < class_count_of(preds); ++k) out.push_back(pr_auc(preds, k));
  return out;
}

struct MetricsReport {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  double auroc_macro = 0.0;
  std::vector<int> auroc_skipped_classes;
  std::vector<std::optional<double>> pr_auc;  // per class, absent if no positives
  Eigen::MatrixXi confusion;
};

inline MetricsReport compute_metrics(const PredictionSet& preds) {
  MetricsReport r;
  r.accuracy = accuracy(preds);
  r.macro_f1 = macro_f1(preds);
  r.auroc_macro = auroc_macro(preds, &r.auroc_skipped_classes);
  r.pr_auc = pr_auc_per_class(preds);
  r.confusion = confusion_matrix(preds);
  return r;
}

/// Fold-wise mean and sample (n-1) standard deviation.
struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};

inline MeanStd aggregate(const std::vector<double>& values) {
  MeanStd out;
  if (values.empty()) return out;
  for (double v : values) out.mean += v;
  out.mean /= static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - out.mean) * (v - out.mean);
    out.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return out;
}

}  // namespace mil
