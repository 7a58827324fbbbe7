#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

namespace ki67 {

/// Axis-aligned rectangle in pixel coordinates, origin at the top-left corner.
/// Construct through `BoundingBox::make` to get the invariants checked.
struct BoundingBox {
  double x_min = 0;
  double y_min = 0;
  double x_max = 0;
  double y_max = 0;

  /// Throws Error{DegenerateBox} for zero/negative extent and Error{InvalidBox}
  /// for non-finite or negative coordinates.
  static BoundingBox make(double x_min, double y_min, double x_max, double y_max);

  /// Same as make() but the two corners may come in any order.
  static BoundingBox from_corners(double x1, double y1, double x2, double y2);

  bool valid() const noexcept;
  double width() const noexcept { return x_max - x_min; }
  double height() const noexcept { return y_max - y_min; }
  double area() const noexcept { return width() * height(); }

  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

/// Serialized codes are fixed: 0 = positive, 1 = negative.
enum class CellClass : std::uint8_t { Ki67Positive = 0, Ki67Negative = 1 };

inline constexpr CellClass kAllClasses[] = {CellClass::Ki67Positive, CellClass::Ki67Negative};

inline constexpr int class_code(CellClass c) noexcept { return static_cast<int>(c); }
std::optional<CellClass> class_from_code(long long code) noexcept;
std::string_view class_name(CellClass c) noexcept;
std::optional<CellClass> class_from_name(std::string_view name) noexcept;
CellClass other_class(CellClass c) noexcept;

struct Detection {
  BoundingBox box;
  CellClass cls = CellClass::Ki67Positive;
  double confidence = 0;

  friend bool operator==(const Detection&, const Detection&) = default;
};

struct GroundTruth {
  BoundingBox box;
  CellClass cls = CellClass::Ki67Positive;

  friend bool operator==(const GroundTruth&, const GroundTruth&) = default;
};

inline constexpr double kDefaultNmsThreshold = 0.3;
inline constexpr double kDefaultMatchIou = 0.5;

/// Intersection over union. Boxes that only share an edge score 0.
double iou(const BoundingBox& a, const BoundingBox& b) noexcept;

std::vector<Detection> filter_confidence(std::span<const Detection> dets, double min_conf);

/// Strict weak order used by nms: confidence descending, then x_min, y_min and
/// class code ascending.
bool nms_precedes(const Detection& a, const Detection& b) noexcept;

/// Greedy non-maximum suppression. A detection is dropped when its IoU with an
/// already kept detection exceeds `iou_threshold` (and, with `class_aware`, the
/// two share a class). Output is ordered by nms_precedes.
std::vector<Detection> nms(std::span<const Detection> dets,
                           double iou_threshold = kDefaultNmsThreshold,
                           bool class_aware = true);

}  // namespace ki67
