#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "ki67/geometry.hpp"

namespace ki67 {

inline constexpr int kManifestSchemaVersion = 1;

struct ImageRecord {
  std::string image_id;
  std::string case_id;
  int width = 0;
  int height = 0;
  /// Relative paths resolve against the manifest's directory.
  std::string source_path;
  /// Set only for augmented variants; names a base (non-augmented) record.
  std::optional<std::string> parent_id;

  bool augmented() const noexcept { return parent_id.has_value(); }

  friend bool operator==(const ImageRecord&, const ImageRecord&) = default;
};

struct AnnotationSet {
  std::string image_id;
  std::vector<GroundTruth> truths;

  friend bool operator==(const AnnotationSet&, const AnnotationSet&) = default;
};

enum class SplitName { Train, Val, Test };

std::string_view split_name(SplitName s) noexcept;
std::optional<SplitName> split_from_name(std::string_view name) noexcept;

struct DatasetManifest {
  std::vector<ImageRecord> records;
  std::map<std::string, AnnotationSet> annotations;
  std::map<std::string, SplitName> split;
  /// Directory that relative source paths are resolved against. Not serialized.
  std::filesystem::path base_dir;

  const ImageRecord* find(std::string_view image_id) const;
  /// Ground truths of an image; empty when the image has no annotation entry.
  const std::vector<GroundTruth>& truths_of(std::string_view image_id) const;
  std::filesystem::path resolve_source(const ImageRecord& r) const;
  /// Case ids in first-appearance order of their base records.
  std::vector<std::string> case_ids() const;
  /// Base (non-augmented) image ids of a case, in manifest order. These are the
  /// hotspots that get scored.
  std::vector<std::string> hotspot_ids(std::string_view case_id) const;

  friend bool operator==(const DatasetManifest& a, const DatasetManifest& b) {
    return a.records == b.records && a.annotations == b.annotations && a.split == b.split;
  }
};

using LabelMap = std::map<std::string, CellClass, std::less<>>;

LabelMap default_label_map();

/// Maximum amount (in pixels) a box may overhang the image before it is rejected
/// rather than clamped.
inline constexpr double kClampTolerancePx = 2.0;

/// Parses one rectangle-annotation document
/// ({"imagePath","imageWidth","imageHeight","shapes":[...]}).
/// Clamping and skipped non-rectangle shapes are reported through `warnings`.
AnnotationSet parse_rect_annotations(const nlohmann::json& doc, const LabelMap& labels = default_label_map(),
                                     std::vector<std::string>* warnings = nullptr,
                                     std::optional<std::string> image_id = std::nullopt);

/// "class_id cx cy w h" with values normalized to [0,1].
GroundTruth parse_yolo_line(std::string_view line, int width, int height);

/// Inverse of parse_yolo_line, fixed 6-decimal precision, no trailing newline.
std::string export_yolo_line(const GroundTruth& t, int width, int height);

struct Finding {
  enum class Severity { Warning, Error };
  Severity severity = Severity::Error;
  std::string image_id;
  std::string message;
};

std::vector<Finding> validate_manifest(const DatasetManifest& m);

struct SplitSpec {
  /// Fractions (train, val, test); used when `counts` is empty.
  std::array<double, 3> fractions{0.8, 0.1, 0.1};
  /// Explicit unit counts; must sum to the number of split units.
  std::optional<std::array<std::size_t, 3>> counts;
  std::uint64_t seed = 0;
  /// Split whole cases instead of individual base images.
  bool group_by_case = false;
  /// Treat every record (augmented ones included) as its own unit. This mirrors
  /// splitting the post-augmentation pool and can leak augmented twins across
  /// splits; validate_manifest reports such leakage.
  bool pool_augmented = false;
  bool overwrite = false;
};

DatasetManifest split_dataset(const DatasetManifest& m, const SplitSpec& spec);

/// Sizes per split by largest-remainder rounding of `fractions` over `n` units.
std::array<std::size_t, 3> largest_remainder(std::size_t n, const std::array<double, 3>& fractions);

nlohmann::json manifest_to_json(const DatasetManifest& m);
DatasetManifest manifest_from_json(const nlohmann::json& doc);
/// Re-expresses relative source paths so they resolve from `new_base_dir`.
DatasetManifest rebase_manifest(DatasetManifest m, const std::filesystem::path& new_base_dir);

void save_manifest(const std::filesystem::path& path, const DatasetManifest& m);
DatasetManifest load_manifest(const std::filesystem::path& path);

enum class AnnotationFormat { RectJson, Yolo };

struct IngestResult {
  DatasetManifest manifest;
  std::vector<std::string> warnings;
};

/// Builds a manifest from a directory of PNG images and a directory of annotation
/// files named after the image stems. Images inside a subdirectory belong to the
/// case named after that subdirectory; top-level images form their own case.
/// Source paths are stored relative to `manifest_dir`.
IngestResult ingest_directory(const std::filesystem::path& images_dir, const std::filesystem::path& annotations_dir,
                              AnnotationFormat format, const std::filesystem::path& manifest_dir,
                              const LabelMap& labels = default_label_map());

}  // namespace ki67
