#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "ki67/dataset.hpp"
#include "ki67/error.hpp"
#include "ki67/geometry.hpp"

namespace ki67 {

/// One detector output in original-image pixel coordinates.
struct RawPrediction {
  std::string image_id;
  BoundingBox box;
  CellClass cls = CellClass::Ki67Positive;
  double confidence = 0;

  Detection detection() const { return {box, cls, confidence}; }
  friend bool operator==(const RawPrediction&, const RawPrediction&) = default;
};

struct PredictionSet {
  std::string run_label;
  std::map<std::string, std::vector<RawPrediction>> by_image;
  /// The producer already ran NMS; postprocess only filters by confidence.
  bool post_nms = false;

  std::size_t size() const;
};

struct LineError {
  std::size_t line = 0;  // 1-based
  ErrorCode code = ErrorCode::MalformedLine;
  std::string message;
};

struct PredictionParse {
  PredictionSet set;
  std::vector<LineError> errors;
};

/// Parses newline-delimited JSON objects with keys image_id, class_id, x_min,
/// y_min, x_max, y_max and confidence. Each line is handled independently; bad
/// lines are reported and skipped. Blank lines are ignored.
PredictionParse parse_predictions(std::istream& in, std::string run_label);
PredictionParse load_predictions(const std::filesystem::path& path);

std::string prediction_to_jsonl(const RawPrediction& p);

/// Image ids of the set that the manifest does not know.
std::vector<std::string> unresolved_images(const PredictionSet& set, const DatasetManifest& m);

/// Per image: confidence filter, then class-aware greedy NMS (skipped when the
/// set is flagged post_nms, in which case input order is kept).
std::map<std::string, std::vector<Detection>> postprocess(const PredictionSet& set, double min_conf,
                                                          double nms_thresh = kDefaultNmsThreshold);

inline constexpr int kModelInputSize = 640;
inline constexpr std::uint8_t kLetterboxFill = 114;

/// Aspect-preserving fit of an image into the square model frame.
struct LetterboxSpec {
  int source_width = 0;
  int source_height = 0;
  int target = kModelInputSize;
  double scale = 1.0;
  int scaled_width = 0;
  int scaled_height = 0;
  int pad_left = 0;
  int pad_top = 0;
  std::uint8_t pad_fill = kLetterboxFill;
};

LetterboxSpec letterbox_map(int width, int height, int target = kModelInputSize,
                            std::uint8_t pad_fill = kLetterboxFill);

/// Original frame -> model frame.
BoundingBox letterbox_box(const BoundingBox& b, const LetterboxSpec& spec);

/// Model frame -> original frame: remove padding, undo the scale, clamp.
BoundingBox unletterbox(const BoundingBox& b, const LetterboxSpec& spec);

}  // namespace ki67
