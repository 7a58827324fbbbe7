#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "ki67/dataset.hpp"
#include "ki67/geometry.hpp"
#include "ki67/raster.hpp"

namespace ki67 {

inline constexpr double kMaxCropFraction = 0.08;
inline constexpr double kMaxBrightnessDelta = 0.24;

struct HFlip { friend bool operator==(HFlip, HFlip) = default; };
struct VFlip { friend bool operator==(VFlip, VFlip) = default; };
struct Rot90CW { friend bool operator==(Rot90CW, Rot90CW) = default; };
struct Rot90CCW { friend bool operator==(Rot90CCW, Rot90CCW) = default; };
struct Rot180 { friend bool operator==(Rot180, Rot180) = default; };

/// Fractions of width (left/right) and height (top/bottom) removed, each in [0, 0.08].
struct Crop {
  double left = 0, top = 0, right = 0, bottom = 0;
  friend bool operator==(const Crop&, const Crop&) = default;
};

/// Relative intensity change in [-0.24, +0.24].
struct Brightness {
  double delta = 0;
  friend bool operator==(const Brightness&, const Brightness&) = default;
};

using Transform = std::variant<HFlip, VFlip, Rot90CW, Rot90CCW, Rot180, Crop, Brightness>;

/// Throws Error{InvalidArgument} when a parameter is outside its legal range.
void validate_transform(const Transform& t);
std::string describe(const Transform& t);

struct AugmentOptions {
  /// Boxes clipped by a crop survive only if they keep this share of their area.
  double min_retained_area = 0.3;
  /// Brightness adds delta*255 instead of scaling by (1+delta).
  bool additive_brightness = false;
};

struct Augmented {
  RasterImage image;
  std::vector<GroundTruth> truths;
};

/// Applies one transform to an image and its boxes. Flips and rotations are pixel
/// permutations; box corners follow the same continuous mapping (x -> W - x for
/// a horizontal flip), which is exact for coordinates representable on a binary
/// grid such as integers or multiples of 1/8.
Augmented apply_transform(const RasterImage& img, const std::vector<GroundTruth>& truths, const Transform& t,
                          const AugmentOptions& opts = {});

Augmented apply_chain(const RasterImage& img, const std::vector<GroundTruth>& truths,
                      const std::vector<Transform>& chain, const AugmentOptions& opts = {});

/// Box-only counterpart of apply_transform for geometric transforms, given the
/// frame size before the transform.
BoundingBox transform_box(const BoundingBox& b, int width, int height, const Transform& t);

class Rng;

/// One random chain: an optional flip/rotation, an optional crop with each side
/// drawn from U[0, 0.08], an optional brightness change from U[-0.24, 0.24], in
/// that order. May be empty.
std::vector<Transform> sample_chain(Rng& rng);

struct PlanEntry {
  std::string source_id;
  std::vector<Transform> transforms;
  std::string new_id;
  friend bool operator==(const PlanEntry&, const PlanEntry&) = default;
};

struct AugmentPlan {
  std::uint64_t seed = 0;
  std::size_t target_total = 0;
  std::vector<PlanEntry> entries;
  friend bool operator==(const AugmentPlan&, const AugmentPlan&) = default;
};

/// Samples transform chains for every base image so that base images plus plan
/// entries total `target_total`. Per-image chain counts differ by at most one.
AugmentPlan generate_plan(const DatasetManifest& m, std::uint64_t seed, std::size_t target_total);

nlohmann::json plan_to_json(const AugmentPlan& plan);
AugmentPlan plan_from_json(const nlohmann::json& doc);

struct ExecuteResult {
  DatasetManifest manifest;
  /// Per-entry failures ("new_id: message"); failed entries are not appended.
  std::vector<std::string> errors;
};

/// Runs every plan entry, writing `<out_dir>/<new_id>.png` and appending records
/// whose source paths are relative to `manifest.base_dir`. With overwrite off, a
/// plan id that already exists in the manifest raises Error{DuplicateId}.
ExecuteResult execute_plan(const DatasetManifest& m, const AugmentPlan& plan, const std::filesystem::path& out_dir,
                           const AugmentOptions& opts = {}, bool overwrite = false);

}  // namespace ki67
