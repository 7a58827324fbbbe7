#include "ki67/reporting.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ki67/error.hpp"

namespace ki67 {

using nlohmann::json;

std::optional<PixelRect> pixel_rect(const BoundingBox& b, int width, int height) {
  PixelRect r;
  r.x0 = std::max(0, static_cast<int>(std::floor(b.x_min)));
  r.y0 = std::max(0, static_cast<int>(std::floor(b.y_min)));
  r.x1 = std::min(width - 1, static_cast<int>(std::ceil(b.x_max)) - 1);
  r.y1 = std::min(height - 1, static_cast<int>(std::ceil(b.y_max)) - 1);
  if (r.x0 > r.x1 || r.y0 > r.y1) return std::nullopt;
  return r;
}

namespace {

// 3x5 glyphs, one row per entry, bit 2 = leftmost column.
struct Glyph {
  char ch;
  unsigned char rows[5];
};

constexpr Glyph kGlyphs[] = {
    {'0', {7, 5, 5, 5, 7}}, {'1', {2, 6, 2, 2, 7}}, {'2', {7, 1, 7, 4, 7}}, {'3', {7, 1, 7, 1, 7}},
    {'4', {5, 5, 7, 1, 1}}, {'5', {7, 4, 7, 1, 7}}, {'6', {7, 4, 7, 5, 7}}, {'7', {7, 1, 1, 1, 1}},
    {'8', {7, 5, 7, 5, 7}}, {'9', {7, 5, 7, 1, 7}}, {'.', {0, 0, 0, 0, 2}},
};

void put(RasterImage& img, int x, int y, const Rgb& c) {
  if (x >= 0 && y >= 0 && x < img.width() && y < img.height()) img.at(x, y) = c;
}

void draw_text(RasterImage& img, int x, int y, const std::string& text, const Rgb& c) {
  for (char ch : text) {
    auto g = std::find_if(std::begin(kGlyphs), std::end(kGlyphs), [ch](const Glyph& g) { return g.ch == ch; });
    if (g != std::end(kGlyphs)) {
      for (int row = 0; row < 5; ++row) {
        for (int col = 0; col < 3; ++col) {
          if (g->rows[row] & (4 >> col)) put(img, x + col, y + row, c);
        }
      }
    }
    x += 4;
  }
}

}  // namespace

RasterImage render_overlay(const RasterImage& img, std::span<const Detection> dets, const OverlayStyle& style,
                           std::vector<std::string>* warnings) {
  if (style.stroke < 1) throw Error(ErrorCode::InvalidArgument, "stroke width must be at least 1");
  RasterImage out = img;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    const Detection& d = dets[i];
    if ((d.box.x_max > img.width() || d.box.y_max > img.height()) && warnings) {
      warnings->push_back("detection " + std::to_string(i) + " clipped to the image frame");
    }
    const auto rect = pixel_rect(d.box, img.width(), img.height());
    if (!rect) continue;
    const Rgb& color = d.cls == CellClass::Ki67Positive ? style.positive : style.negative;
    const int s = style.stroke;
    for (int y = rect->y0; y <= rect->y1; ++y) {
      const bool edge_row = y < rect->y0 + s || y > rect->y1 - s;
      for (int x = rect->x0; x <= rect->x1; ++x) {
        if (edge_row || x < rect->x0 + s || x > rect->x1 - s) out.at(x, y) = color;
      }
    }
    if (style.show_confidence) {
      char label[16];
      std::snprintf(label, sizeof label, "%.2f", d.confidence);
      const int ty = rect->y0 >= 6 ? rect->y0 - 6 : rect->y0 + s + 1;
      draw_text(out, rect->x0, ty, label, color);
    }
  }
  return out;
}

json case_score_to_json(const CaseScore& s) {
  json hotspots = json::array();
  for (const auto& h : s.hotspots) {
    hotspots.push_back(
        {{"image_id", h.image_id}, {"n_pos", h.n_pos}, {"n_neg", h.n_neg}, {"index_percent", h.index_percent}});
  }
  return {{"schema_version", kReportSchemaVersion},
          {"case_id", s.case_id},
          {"config",
           {{"min_conf", s.config.min_conf},
            {"nms_threshold", s.config.nms_threshold},
            {"aggregation", aggregation_name(s.config.aggregation)}}},
          {"hotspots", std::move(hotspots)},
          {"excluded_images", s.excluded_images},
          {"pooled_pos", s.pooled_pos},
          {"pooled_neg", s.pooled_neg},
          {"total_cells", s.total_cells},
          {"index_percent", s.index_percent},
          {"adequate", s.adequate},
          {"band", band_name(s.band)}};
}

CaseScore case_score_from_json(const json& doc) {
  try {
    CaseScore s;
    s.case_id = doc.at("case_id").get<std::string>();
    const json& cfg = doc.at("config");
    s.config.min_conf = cfg.at("min_conf").get<double>();
    s.config.nms_threshold = cfg.at("nms_threshold").get<double>();
    auto agg = aggregation_from_name(cfg.at("aggregation").get<std::string>());
    if (!agg) throw Error(ErrorCode::MalformedDocument, "unknown aggregation mode");
    s.config.aggregation = *agg;
    for (const auto& h : doc.at("hotspots")) {
      s.hotspots.push_back({h.at("image_id").get<std::string>(), h.at("n_pos").get<long long>(),
                            h.at("n_neg").get<long long>(), h.at("index_percent").get<double>()});
    }
    s.excluded_images = doc.at("excluded_images").get<std::vector<std::string>>();
    s.pooled_pos = doc.at("pooled_pos").get<long long>();
    s.pooled_neg = doc.at("pooled_neg").get<long long>();
    s.total_cells = doc.at("total_cells").get<long long>();
    s.index_percent = doc.at("index_percent").get<double>();
    s.adequate = doc.at("adequate").get<bool>();
    auto band = band_from_name(doc.at("band").get<std::string>());
    if (!band) throw Error(ErrorCode::MalformedDocument, "unknown clinical band");
    s.band = *band;
    return s;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::MalformedDocument, std::string("case score: ") + e.what());
  }
}

std::string case_score_document(const CaseScore& score, const std::optional<EvaluationReport>& evaluation) {
  json doc = case_score_to_json(score);
  if (evaluation) doc["evaluation"] = report_to_json(*evaluation);
  return doc.dump(2) + "\n";
}

CaseReport emit_case_report(const CaseScore& s, const std::optional<EvaluationReport>& evaluation) {
  std::ostringstream text;
  char buf[256];
  text << "Ki-67 case report: " << s.case_id << '\n';
  std::snprintf(buf, sizeof buf, "Index: %.2f%% (%s over %zu hotspot%s)\n", s.index_percent,
                s.config.aggregation == Aggregation::Pooled ? "pooled" : "mean", s.hotspots.size(),
                s.hotspots.size() == 1 ? "" : "s");
  text << buf;
  text << "Band: " << band_name(s.band) << '\n';
  text << "Adequate: " << (s.adequate ? "true" : "false") << " (" << s.total_cells << " cells counted, "
       << kAdequateCellCount << " required)\n";
  text << "Cells: " << s.pooled_pos << " positive, " << s.pooled_neg << " negative\n";
  text << "Hotspots:\n";
  for (const auto& h : s.hotspots) {
    std::snprintf(buf, sizeof buf, "  %-24s %6lld pos %6lld neg %7.2f%%\n", h.image_id.c_str(), h.n_pos, h.n_neg,
                  h.index_percent);
    text << buf;
  }
  for (const auto& id : s.excluded_images) text << "  " << id << " excluded: no cells counted\n";
  std::snprintf(buf, sizeof buf, "Config: min_conf=%g nms_threshold=%g aggregation=%s\n", s.config.min_conf,
                s.config.nms_threshold, std::string(aggregation_name(s.config.aggregation)).c_str());
  text << buf;
  if (evaluation) {
    std::snprintf(buf, sizeof buf, "Evaluation (%s, IoU %.2f): mAP50 %.4f\n", evaluation->run_label.c_str(),
                  evaluation->iou_threshold, evaluation->map50);
    text << buf;
  }
  return {case_score_document(s, evaluation), text.str()};
}

}  // namespace ki67
