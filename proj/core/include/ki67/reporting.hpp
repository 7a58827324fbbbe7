#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "ki67/eval.hpp"
#include "ki67/geometry.hpp"
#include "ki67/raster.hpp"
#include "ki67/scoring.hpp"

namespace ki67 {

struct OverlayStyle {
  Rgb positive{255, 0, 0};
  Rgb negative{0, 255, 0};
  int stroke = 2;
  bool show_confidence = false;
};

/// Pixels covered by a box: columns floor(x_min)..ceil(x_max)-1, same for rows,
/// clipped to the image. Returns false when nothing is left after clipping.
struct PixelRect {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // inclusive
};
std::optional<PixelRect> pixel_rect(const BoundingBox& b, int width, int height);

/// Draws unfilled rectangles in class colour, in input order (later boxes paint
/// over earlier ones). No anti-aliasing. Boxes sticking out of the frame are
/// clipped and reported through `warnings`.
RasterImage render_overlay(const RasterImage& img, std::span<const Detection> dets, const OverlayStyle& style = {},
                           std::vector<std::string>* warnings = nullptr);

nlohmann::json case_score_to_json(const CaseScore& s);
CaseScore case_score_from_json(const nlohmann::json& doc);

struct CaseReport {
  std::string json;
  std::string text;
};

/// Machine (JSON) and human (plain text) renderings of a case score. The
/// evaluation section is left out entirely when `evaluation` is empty.
CaseReport emit_case_report(const CaseScore& score, const std::optional<EvaluationReport>& evaluation = std::nullopt);

/// The exact JSON text used for case scores everywhere (files and HTTP).
std::string case_score_document(const CaseScore& score,
                                const std::optional<EvaluationReport>& evaluation = std::nullopt);

}  // namespace ki67
