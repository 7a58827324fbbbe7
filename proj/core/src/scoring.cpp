#include "ki67/scoring.hpp"

#include "ki67/error.hpp"

namespace ki67 {

std::string_view band_name(ClinicalBand b) noexcept {
  switch (b) {
    case ClinicalBand::Low: return "Low";
    case ClinicalBand::Intermediate: return "Intermediate";
    case ClinicalBand::High: return "High";
  }
  return "Low";
}

std::optional<ClinicalBand> band_from_name(std::string_view name) noexcept {
  if (name == "Low") return ClinicalBand::Low;
  if (name == "Intermediate") return ClinicalBand::Intermediate;
  if (name == "High") return ClinicalBand::High;
  return std::nullopt;
}

std::string_view aggregation_name(Aggregation a) noexcept {
  return a == Aggregation::Pooled ? "pooled" : "mean";
}

std::optional<Aggregation> aggregation_from_name(std::string_view name) noexcept {
  if (name == "pooled") return Aggregation::Pooled;
  if (name == "mean") return Aggregation::MeanOfHotspots;
  return std::nullopt;
}

double ki67_index(long long n_pos, long long n_neg) {
  if (n_pos < 0 || n_neg < 0) throw Error(ErrorCode::InvalidArgument, "cell counts must be non-negative");
  if (n_pos + n_neg == 0) throw Error(ErrorCode::NoCells, "no cells counted");
  return 100.0 * static_cast<double>(n_pos) / static_cast<double>(n_pos + n_neg);
}

ClinicalBand classify_band(double index_percent) noexcept {
  if (index_percent < kLowBandUpper) return ClinicalBand::Low;
  if (index_percent > kHighBandLower) return ClinicalBand::High;
  return ClinicalBand::Intermediate;
}

HotspotScore score_image(std::string image_id, std::span<const Detection> dets) {
  HotspotScore s{std::move(image_id), 0, 0, 0.0};
  for (const auto& d : dets) (d.cls == CellClass::Ki67Positive ? s.n_pos : s.n_neg) += 1;
  try {
    s.index_percent = ki67_index(s.n_pos, s.n_neg);
  } catch (const Error& e) {
    throw Error(e.code(), s.image_id + ": " + e.what());
  }
  return s;
}

CaseScore score_case(std::string case_id, std::span<const HotspotScore> hotspots, const ScoringConfig& config) {
  if (hotspots.empty()) throw Error(ErrorCode::EmptyCase, case_id + ": case has no hotspots");
  CaseScore cs;
  cs.case_id = std::move(case_id);
  cs.config = config;
  cs.hotspots.assign(hotspots.begin(), hotspots.end());
  double index_sum = 0;
  for (const auto& h : hotspots) {
    cs.pooled_pos += h.n_pos;
    cs.pooled_neg += h.n_neg;
    index_sum += h.index_percent;
  }
  cs.total_cells = cs.pooled_pos + cs.pooled_neg;
  if (config.aggregation == Aggregation::Pooled) {
    cs.index_percent = ki67_index(cs.pooled_pos, cs.pooled_neg);
  } else {
    if (cs.total_cells == 0) throw Error(ErrorCode::NoCells, cs.case_id + ": no cells counted");
    cs.index_percent = index_sum / static_cast<double>(hotspots.size());
  }
  cs.adequate = cs.total_cells >= kAdequateCellCount;
  cs.band = classify_band(cs.index_percent);
  return cs;
}

CaseScore score_case_images(std::string case_id, std::span<const ImageDetections> images,
                            const ScoringConfig& config) {
  std::vector<HotspotScore> hotspots;
  std::vector<std::string> excluded;
  for (const auto& img : images) {
    if (img.detections.empty()) {
      excluded.push_back(img.image_id);
      continue;
    }
    hotspots.push_back(score_image(img.image_id, img.detections));
  }
  if (images.empty()) throw Error(ErrorCode::EmptyCase, case_id + ": case has no hotspots");
  if (hotspots.empty()) throw Error(ErrorCode::NoCells, case_id + ": no image of the case has counted cells");
  CaseScore cs = score_case(std::move(case_id), hotspots, config);
  cs.excluded_images = std::move(excluded);
  return cs;
}

}  // namespace ki67
