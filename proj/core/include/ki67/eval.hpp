#pragma once

#include <array>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "ki67/dataset.hpp"
#include "ki67/geometry.hpp"

namespace ki67 {

struct MatchedDetection {
  Detection det;
  /// Index into the image's full ground-truth list, when matched.
  std::optional<std::size_t> truth_index;
};

struct ClassMatch {
  std::vector<MatchedDetection> detections;  // descending confidence
  std::size_t truths = 0;
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
};

struct MatchOutcome {
  std::array<ClassMatch, 2> per_class;

  const ClassMatch& of(CellClass c) const { return per_class[class_code(c)]; }
};

/// Greedy matching, run for each class on its own. Detections are visited by
/// descending confidence; each claims the unmatched same-class truth with the
/// highest IoU (lowest index on ties) if that IoU reaches `iou_thresh`.
MatchOutcome match_image(std::span<const Detection> dets, std::span<const GroundTruth> truths,
                         double iou_thresh = kDefaultMatchIou);

struct PRPoint {
  double threshold = 0;
  double precision = 0;
  double recall = 0;
  friend bool operator==(const PRPoint&, const PRPoint&) = default;
};

/// One point per distinct confidence, emitted after the whole tie group.
/// Throws Error{NoGroundTruth} when no outcome has truths of `cls`.
std::vector<PRPoint> pr_curve(std::span<const MatchOutcome> outcomes, CellClass cls);

/// All-point interpolated AP: area under the right-to-left running maximum of
/// precision over recall in [0, 1]. Empty curve gives 0.
double average_precision(std::span<const PRPoint> curve);

struct ClassMetrics {
  /// Absent when the evaluated images have no truths of this class.
  std::optional<double> ap50;
  double precision = 0;
  double recall = 0;
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  std::size_t instances = 0;
  std::size_t detections = 0;
  std::vector<PRPoint> curve;
};

inline constexpr int kReportSchemaVersion = 1;

struct EvaluationReport {
  std::string run_label;
  double iou_threshold = kDefaultMatchIou;
  std::size_t images = 0;
  std::array<ClassMetrics, 2> classes;
  /// Mean AP over classes that have at least one truth.
  double map50 = 0;

  const ClassMetrics& of(CellClass c) const { return classes[class_code(c)]; }
};

/// Evaluates predictions over `image_ids` of the manifest. Images without an entry
/// in `predictions` count as silent. Throws Error{EmptySubset} for no images.
EvaluationReport evaluate_run(const std::string& run_label,
                              const std::map<std::string, std::vector<Detection>>& predictions,
                              const DatasetManifest& m, std::span<const std::string> image_ids,
                              double iou_thresh = kDefaultMatchIou);

struct ComparisonRow {
  std::size_t rank = 0;
  std::string run_label;
  double map50 = 0;
  std::optional<double> ap_positive;
  std::optional<double> ap_negative;
};

struct ComparisonTable {
  std::vector<ComparisonRow> rows;
};

/// Ranks by map50, then positive-class AP, then label.
ComparisonTable compare_runs(std::span<const EvaluationReport> reports);

nlohmann::json report_to_json(const EvaluationReport& r);
EvaluationReport report_from_json(const nlohmann::json& doc);
std::string pr_curve_csv(std::span<const PRPoint> curve);
nlohmann::json comparison_to_json(const ComparisonTable& t);
std::string comparison_to_text(const ComparisonTable& t);

}  // namespace ki67
