#include "ki67/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ki67/error.hpp"

namespace ki67 {

using nlohmann::json;

MatchOutcome match_image(std::span<const Detection> dets, std::span<const GroundTruth> truths, double iou_thresh) {
  MatchOutcome out;
  std::vector<bool> taken(truths.size(), false);

  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].confidence > dets[b].confidence; });

  for (const auto& t : truths) out.per_class[class_code(t.cls)].truths += 1;

  for (std::size_t di : order) {
    const Detection& d = dets[di];
    ClassMatch& cm = out.per_class[class_code(d.cls)];
    std::optional<std::size_t> best;
    double best_iou = -1;
    for (std::size_t ti = 0; ti < truths.size(); ++ti) {
      if (taken[ti] || truths[ti].cls != d.cls) continue;
      const double v = iou(d.box, truths[ti].box);
      if (v > best_iou) {
        best_iou = v;
        best = ti;
      }
    }
    MatchedDetection md{d, std::nullopt};
    if (best && best_iou >= iou_thresh) {
      taken[*best] = true;
      md.truth_index = best;
      cm.tp += 1;
    } else {
      cm.fp += 1;
    }
    cm.detections.push_back(md);
  }
  for (auto& cm : out.per_class) cm.fn = cm.truths - cm.tp;
  return out;
}

std::vector<PRPoint> pr_curve(std::span<const MatchOutcome> outcomes, CellClass cls) {
  std::size_t total = 0;
  std::vector<std::pair<double, bool>> hits;
  for (const auto& o : outcomes) {
    const ClassMatch& cm = o.of(cls);
    total += cm.truths;
    for (const auto& md : cm.detections) hits.emplace_back(md.det.confidence, md.truth_index.has_value());
  }
  if (total == 0) {
    throw Error(ErrorCode::NoGroundTruth, std::string("no ground truth of class ") + std::string(class_name(cls)));
  }
  std::sort(hits.begin(), hits.end(), [](const auto& a, const auto& b) { return a.first > b.first; });

  std::vector<PRPoint> curve;
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < hits.size();) {
    const double conf = hits[i].first;
    for (; i < hits.size() && hits[i].first == conf; ++i) (hits[i].second ? tp : fp) += 1;
    curve.push_back({conf, static_cast<double>(tp) / static_cast<double>(tp + fp),
                     static_cast<double>(tp) / static_cast<double>(total)});
  }
  return curve;
}

double average_precision(std::span<const PRPoint> curve) {
  if (curve.empty()) return 0.0;
  // Sentinels: recall 0 on the left, precision 0 past the last point.
  std::vector<double> recall{0.0}, precision{0.0};
  for (const auto& p : curve) {
    recall.push_back(p.recall);
    precision.push_back(p.precision);
  }
  recall.push_back(1.0);
  precision.push_back(0.0);
  for (std::size_t i = precision.size() - 1; i > 0; --i) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0;
  for (std::size_t i = 1; i < recall.size(); ++i) {
    if (recall[i] != recall[i - 1]) ap += (recall[i] - recall[i - 1]) * precision[i];
  }
  return std::clamp(ap, 0.0, 1.0);
}

EvaluationReport evaluate_run(const std::string& run_label,
                              const std::map<std::string, std::vector<Detection>>& predictions,
                              const DatasetManifest& m, std::span<const std::string> image_ids, double iou_thresh) {
  if (image_ids.empty()) throw Error(ErrorCode::EmptySubset, "no images to evaluate");
  EvaluationReport report;
  report.run_label = run_label;
  report.iou_threshold = iou_thresh;
  report.images = image_ids.size();

  static const std::vector<Detection> kSilent;
  std::vector<MatchOutcome> outcomes;
  outcomes.reserve(image_ids.size());
  for (const auto& id : image_ids) {
    if (m.find(id) == nullptr) throw Error(ErrorCode::UnknownImage, "image " + id + " not in manifest");
    auto it = predictions.find(id);
    outcomes.push_back(match_image(it == predictions.end() ? kSilent : it->second, m.truths_of(id), iou_thresh));
  }

  double ap_sum = 0;
  int ap_classes = 0;
  for (CellClass c : kAllClasses) {
    ClassMetrics& cm = report.classes[class_code(c)];
    for (const auto& o : outcomes) {
      const ClassMatch& x = o.of(c);
      cm.tp += x.tp;
      cm.fp += x.fp;
      cm.fn += x.fn;
      cm.instances += x.truths;
      cm.detections += x.detections.size();
    }
    cm.precision = cm.tp + cm.fp == 0 ? 0.0 : static_cast<double>(cm.tp) / static_cast<double>(cm.tp + cm.fp);
    cm.recall = cm.instances == 0 ? 0.0 : static_cast<double>(cm.tp) / static_cast<double>(cm.instances);
    if (cm.instances > 0) {
      cm.curve = pr_curve(outcomes, c);
      cm.ap50 = average_precision(cm.curve);
      ap_sum += *cm.ap50;
      ++ap_classes;
    }
  }
  report.map50 = ap_classes == 0 ? 0.0 : ap_sum / ap_classes;
  return report;
}

ComparisonTable compare_runs(std::span<const EvaluationReport> reports) {
  std::vector<const EvaluationReport*> sorted;
  for (const auto& r : reports) sorted.push_back(&r);
  std::stable_sort(sorted.begin(), sorted.end(), [](const EvaluationReport* a, const EvaluationReport* b) {
    if (a->map50 != b->map50) return a->map50 > b->map50;
    const double pa = a->of(CellClass::Ki67Positive).ap50.value_or(-1.0);
    const double pb = b->of(CellClass::Ki67Positive).ap50.value_or(-1.0);
    if (pa != pb) return pa > pb;
    return a->run_label < b->run_label;
  });
  ComparisonTable t;
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    const auto* r = sorted[i];
    t.rows.push_back({i + 1, r->run_label, r->map50, r->of(CellClass::Ki67Positive).ap50,
                      r->of(CellClass::Ki67Negative).ap50});
  }
  return t;
}

namespace {

json optional_number(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::optional<double> number_or_null(const json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

}  // namespace

json report_to_json(const EvaluationReport& r) {
  json classes = json::object();
  for (CellClass c : kAllClasses) {
    const ClassMetrics& cm = r.of(c);
    classes[std::string(class_name(c))] = {{"ap50", optional_number(cm.ap50)},
                                           {"precision", cm.precision},
                                           {"recall", cm.recall},
                                           {"tp", cm.tp},
                                           {"fp", cm.fp},
                                           {"fn", cm.fn},
                                           {"instances", cm.instances},
                                           {"detections", cm.detections}};
  }
  return {{"schema_version", kReportSchemaVersion},
          {"run", r.run_label},
          {"iou_threshold", r.iou_threshold},
          {"images", r.images},
          {"map50", r.map50},
          {"classes", std::move(classes)}};
}

EvaluationReport report_from_json(const json& doc) {
  try {
    EvaluationReport r;
    r.run_label = doc.at("run").get<std::string>();
    r.iou_threshold = doc.at("iou_threshold").get<double>();
    r.images = doc.at("images").get<std::size_t>();
    r.map50 = doc.at("map50").get<double>();
    for (CellClass c : kAllClasses) {
      const json& jc = doc.at("classes").at(std::string(class_name(c)));
      ClassMetrics& cm = r.classes[class_code(c)];
      cm.ap50 = number_or_null(jc.at("ap50"));
      cm.precision = jc.at("precision").get<double>();
      cm.recall = jc.at("recall").get<double>();
      cm.tp = jc.at("tp").get<std::size_t>();
      cm.fp = jc.at("fp").get<std::size_t>();
      cm.fn = jc.at("fn").get<std::size_t>();
      cm.instances = jc.at("instances").get<std::size_t>();
      cm.detections = jc.at("detections").get<std::size_t>();
    }
    return r;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::MalformedDocument, std::string("evaluation report: ") + e.what());
  }
}

std::string pr_curve_csv(std::span<const PRPoint> curve) {
  std::string out = "threshold,precision,recall\n";
  char buf[96];
  for (const auto& p : curve) {
    std::snprintf(buf, sizeof buf, "%.6f,%.6f,%.6f\n", p.threshold, p.precision, p.recall);
    out += buf;
  }
  return out;
}

json comparison_to_json(const ComparisonTable& t) {
  json rows = json::array();
  for (const auto& r : t.rows) {
    rows.push_back({{"rank", r.rank},
                    {"run", r.run_label},
                    {"map50", r.map50},
                    {"ap50_ki67_positive", optional_number(r.ap_positive)},
                    {"ap50_ki67_negative", optional_number(r.ap_negative)}});
  }
  return {{"rows", std::move(rows)}};
}

std::string comparison_to_text(const ComparisonTable& t) {
  std::size_t label_w = 3;
  for (const auto& r : t.rows) label_w = std::max(label_w, r.run_label.size());
  auto cell = [](const std::optional<double>& v) {
    char buf[16];
    if (!v) return std::string("     -");
    std::snprintf(buf, sizeof buf, "%6.4f", *v);
    return std::string(buf);
  };
  std::ostringstream out;
  char buf[512];
  std::snprintf(buf, sizeof buf, "%-4s  %-*s  %6s  %6s  %6s\n", "rank", static_cast<int>(label_w), "run", "mAP50",
                "AP+", "AP-");
  out << buf;
  for (const auto& r : t.rows) {
    std::snprintf(buf, sizeof buf, "%-4zu  %-*s  ", r.rank, static_cast<int>(label_w), r.run_label.c_str());
    out << buf << cell(r.map50) << "  " << cell(r.ap_positive) << "  " << cell(r.ap_negative) << '\n';
  }
  return out.str();
}

}  // namespace ki67
