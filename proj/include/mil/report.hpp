#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "mil/error.hpp"
#include "mil/metrics.hpp"
#include "mil/train.hpp"

namespace mil {

inline nlohmann::json metrics_to_json(const MetricsReport& r) {
  nlohmann::json j;
  j["accuracy"] = r.accuracy;
  j["macro_f1"] = r.macro_f1;
  j["auroc_macro"] = r.auroc_macro;
  j["auroc_skipped_classes"] = r.auroc_skipped_classes;
  j["pr_auc"] = nlohmann::json::array();
  for (const auto& v : r.pr_auc) {
    if (v)
      j["pr_auc"].push_back(*v);
    else
      j["pr_auc"].push_back(nullptr);
  }
  j["confusion"] = nlohmann::json::array();
  for (Eigen::Index r0 = 0; r0 < r.confusion.rows(); ++r0) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index c = 0; c < r.confusion.cols(); ++c) row.push_back(r.confusion(r0, c));
    j["confusion"].push_back(row);
  }
  return j;
}

inline MetricsReport metrics_from_json(const nlohmann::json& j) {
  MetricsReport r;
  r.accuracy = j.at("accuracy").get<double>();
  r.macro_f1 = j.at("macro_f1").get<double>();
  r.auroc_macro = j.at("auroc_macro").get<double>();
  r.auroc_skipped_classes = j.at("auroc_skipped_classes").get<std::vector<int>>();
  for (const auto& v : j.at("pr_auc")) {
    if (v.is_null())
      r.pr_auc.push_back(std::nullopt);
    else
      r.pr_auc.push_back(v.get<double>());
  }
  const auto& conf = j.at("confusion");
  r.confusion.resize(conf.size(), conf.empty() ? 0 : conf[0].size());
  for (std::size_t r0 = 0; r0 < conf.size(); ++r0)
    for (std::size_t c = 0; c < conf[r0].size(); ++c) r.confusion(r0, c) = conf[r0][c].get<int>();
  return r;
}

inline nlohmann::json predictions_to_json(const PredictionSet& preds) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& p : preds) {
    std::vector<double> probs(p.probs.data(), p.probs.data() + p.probs.size());
    j.push_back({{"bag_id", p.bag_id}, {"label", p.label}, {"probs", probs}});
  }
  return j;
}

inline PredictionSet predictions_from_json(const nlohmann::json& j) {
  PredictionSet preds;
  for (const auto& jp : j) {
    Prediction p;
    p.bag_id = jp.at("bag_id").get<std::string>();
    p.label = jp.at("label").get<int>();
    const auto probs = jp.at("probs").get<std::vector<double>>();
    p.probs = Eigen::Map<const VecXd>(probs.data(), static_cast<Eigen::Index>(probs.size()));
    preds.push_back(std::move(p));
  }
  validate_predictions(preds);
  return preds;
}

inline nlohmann::json train_report_to_json(const TrainReport& r) {
  nlohmann::json j;
  j["best_epoch"] = r.best_epoch;
  j["best_val_accuracy"] = r.best_val_accuracy;
  j["epochs"] = nlohmann::json::array();
  for (const auto& e : r.epochs)
    j["epochs"].push_back({{"train_ce", e.train_ce}, {"train_bel", e.train_bel}, {"val_accuracy", e.val_accuracy}});
  return j;
}

inline nlohmann::json aggregate_to_json(const AggregateMetrics& a) {
  auto ms = [](const MeanStd& m) { return nlohmann::json{{"mean", m.mean}, {"std", m.std}}; };
  nlohmann::json j;
  j["accuracy"] = ms(a.accuracy);
  j["macro_f1"] = ms(a.macro_f1);
  j["auroc_macro"] = ms(a.auroc_macro);
  j["pr_auc"] = nlohmann::json::array();
  for (const auto& m : a.pr_auc) j["pr_auc"].push_back(ms(m));
  j["std_convention"] = "sample";
  return j;
}

namespace detail {

inline std::string format_threshold(double t) {
  if (std::isinf(t)) return "inf";
  std::ostringstream os;
  os << std::setprecision(17) << t;
  return os.str();
}

}  // namespace detail

/// One CSV per class: threshold,precision,recall rows, one per distinct
/// score plus the (recall 0, precision 1) anchor.
inline void write_pr_curves_csv(const PredictionSet& preds, const std::filesystem::path& dir,
                                const std::string& stem = "pr_curve") {
  std::filesystem::create_directories(dir);
  for (int cls = 0; cls < class_count_of(preds); ++cls) {
    const auto curve = pr_curve(preds, cls);
    if (curve.empty()) continue;
    const auto path = dir / (stem + "_class" + std::to_string(cls) + ".csv");
    std::ofstream os(path);
    if (!os) throw IoError("write_pr_curves_csv: cannot open '" + path.string() + "'");
    os << "threshold,precision,recall\n";
    for (const auto& pt : curve)
      os << detail::format_threshold(pt.threshold) << "," << std::setprecision(17) << pt.precision << ","
         << pt.recall << "\n";
  }
}

/// Per-bag attention export: bag_id followed by its alpha entries.
inline void write_attention_csv(const std::vector<std::pair<std::string, VecXd>>& rows,
                                const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw IoError("write_attention_csv: cannot open '" + path.string() + "'");
  for (const auto& [bag_id, alpha] : rows) {
    os << bag_id;
    for (Eigen::Index i = 0; i < alpha.size(); ++i) os << "," << std::setprecision(17) << alpha(i);
    os << "\n";
  }
}

/// MetricsReport as JSON plus per-class PR-curve CSVs under `dir`.
inline void emit_report(const MetricsReport& report, const PredictionSet& preds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream os(dir / "metrics.json");
    if (!os) throw IoError("emit_report: cannot open metrics.json");
    os << metrics_to_json(report).dump(2) << "\n";
  }
  write_pr_curves_csv(preds, dir);
}

inline void write_json_file(const nlohmann::json& j, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  os << j.dump(2) << "\n";
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open '" + path.string() + "'");
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("bad JSON in '" + path.string() + "': " + e.what());
  }
  return j;
}

}  // namespace mil
