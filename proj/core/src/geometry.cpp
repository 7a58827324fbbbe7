#include "ki67/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "ki67/error.hpp"

namespace ki67 {

BoundingBox BoundingBox::make(double x_min, double y_min, double x_max, double y_max) {
  for (double v : {x_min, y_min, x_max, y_max}) {
    if (!std::isfinite(v) || v < 0) {
      throw Error(ErrorCode::InvalidBox, "box coordinate must be finite and non-negative");
    }
  }
  if (!(x_min < x_max) || !(y_min < y_max)) {
    throw Error(ErrorCode::DegenerateBox,
                "degenerate box (" + std::to_string(x_min) + "," + std::to_string(y_min) + ")-(" +
                    std::to_string(x_max) + "," + std::to_string(y_max) + ")");
  }
  return BoundingBox{x_min, y_min, x_max, y_max};
}

BoundingBox BoundingBox::from_corners(double x1, double y1, double x2, double y2) {
  return make(std::min(x1, x2), std::min(y1, y2), std::max(x1, x2), std::max(y1, y2));
}

bool BoundingBox::valid() const noexcept {
  return std::isfinite(x_min) && std::isfinite(y_min) && std::isfinite(x_max) &&
         std::isfinite(y_max) && x_min >= 0 && y_min >= 0 && x_min < x_max && y_min < y_max;
}

std::optional<CellClass> class_from_code(long long code) noexcept {
  switch (code) {
    case 0: return CellClass::Ki67Positive;
    case 1: return CellClass::Ki67Negative;
    default: return std::nullopt;
  }
}

std::string_view class_name(CellClass c) noexcept {
  return c == CellClass::Ki67Positive ? "ki67_positive" : "ki67_negative";
}

std::optional<CellClass> class_from_name(std::string_view name) noexcept {
  if (name == "ki67_positive") return CellClass::Ki67Positive;
  if (name == "ki67_negative") return CellClass::Ki67Negative;
  return std::nullopt;
}

CellClass other_class(CellClass c) noexcept {
  return c == CellClass::Ki67Positive ? CellClass::Ki67Negative : CellClass::Ki67Positive;
}

double iou(const BoundingBox& a, const BoundingBox& b) noexcept {
  // min/max are symmetric in their arguments, so iou(a,b) == iou(b,a) bit for bit.
  const double iw = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
  const double ih = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  if (uni <= 0) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

std::vector<Detection> filter_confidence(std::span<const Detection> dets, double min_conf) {
  std::vector<Detection> out;
  out.reserve(dets.size());
  std::copy_if(dets.begin(), dets.end(), std::back_inserter(out),
               [min_conf](const Detection& d) { return d.confidence >= min_conf; });
  return out;
}

bool nms_precedes(const Detection& a, const Detection& b) noexcept {
  if (a.confidence != b.confidence) return a.confidence > b.confidence;
  if (a.box.x_min != b.box.x_min) return a.box.x_min < b.box.x_min;
  if (a.box.y_min != b.box.y_min) return a.box.y_min < b.box.y_min;
  return class_code(a.cls) < class_code(b.cls);
}

std::vector<Detection> nms(std::span<const Detection> dets, double iou_threshold, bool class_aware) {
  std::vector<Detection> sorted(dets.begin(), dets.end());
  std::stable_sort(sorted.begin(), sorted.end(), nms_precedes);

  std::vector<Detection> kept;
  std::vector<bool> removed(sorted.size(), false);
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    if (removed[i]) continue;
    kept.push_back(sorted[i]);
    for (std::size_t j = i + 1; j < sorted.size(); ++j) {
      if (removed[j]) continue;
      if (class_aware && sorted[j].cls != sorted[i].cls) continue;
      if (iou(sorted[i].box, sorted[j].box) > iou_threshold) removed[j] = true;
    }
  }
  return kept;
}

}  // namespace ki67
