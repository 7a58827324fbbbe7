#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ki67/geometry.hpp"

namespace ki67 {

/// Minimum number of counted tumour cells for an adequate assessment.
inline constexpr long long kAdequateCellCount = 500;
inline constexpr double kLowBandUpper = 5.0;
inline constexpr double kHighBandLower = 30.0;

enum class ClinicalBand { Low, Intermediate, High };

std::string_view band_name(ClinicalBand b) noexcept;
std::optional<ClinicalBand> band_from_name(std::string_view name) noexcept;

/// How hotspots combine into one case index.
enum class Aggregation { Pooled, MeanOfHotspots };

std::string_view aggregation_name(Aggregation a) noexcept;
std::optional<Aggregation> aggregation_from_name(std::string_view name) noexcept;

/// Settings echoed into every case score.
struct ScoringConfig {
  double min_conf = 0.0;
  double nms_threshold = kDefaultNmsThreshold;
  Aggregation aggregation = Aggregation::Pooled;

  friend bool operator==(const ScoringConfig&, const ScoringConfig&) = default;
};

struct HotspotScore {
  std::string image_id;
  long long n_pos = 0;
  long long n_neg = 0;
  double index_percent = 0;

  friend bool operator==(const HotspotScore&, const HotspotScore&) = default;
};

struct CaseScore {
  std::string case_id;
  std::vector<HotspotScore> hotspots;
  /// Images left out of the case because they had no counted cells.
  std::vector<std::string> excluded_images;
  long long pooled_pos = 0;
  long long pooled_neg = 0;
  long long total_cells = 0;
  double index_percent = 0;
  bool adequate = false;
  ClinicalBand band = ClinicalBand::Low;
  ScoringConfig config;

  friend bool operator==(const CaseScore&, const CaseScore&) = default;
};

/// 100 * pos / (pos + neg). Throws Error{NoCells} when both are zero.
double ki67_index(long long n_pos, long long n_neg);

/// < 5 is Low, > 30 is High, everything in between (5 and 30 included) is Intermediate.
ClinicalBand classify_band(double index_percent) noexcept;

/// Counts detections per class. The list is taken as already post-processed.
HotspotScore score_image(std::string image_id, std::span<const Detection> dets);

/// Pools hotspot counts (or averages indices in MeanOfHotspots mode).
/// Throws Error{EmptyCase} for no hotspots and Error{NoCells} for zero cells.
CaseScore score_case(std::string case_id, std::span<const HotspotScore> hotspots, const ScoringConfig& config = {});

struct ImageDetections {
  std::string image_id;
  std::vector<Detection> detections;
};

/// Scores every image of a case and drops images with no cells into
/// `excluded_images` instead of failing.
CaseScore score_case_images(std::string case_id, std::span<const ImageDetections> images,
                            const ScoringConfig& config = {});

}  // namespace ki67
