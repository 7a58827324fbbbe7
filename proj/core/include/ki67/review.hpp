#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "ki67/dataset.hpp"
#include "ki67/detector.hpp"
#include "ki67/geometry.hpp"
#include "ki67/scoring.hpp"

namespace ki67 {

enum class Provenance { Model, Human };

struct ReviewedDetection {
  Detection det;
  Provenance provenance = Provenance::Model;
  friend bool operator==(const ReviewedDetection&, const ReviewedDetection&) = default;
};

struct ToggleClass {
  std::size_t index = 0;
  friend bool operator==(const ToggleClass&, const ToggleClass&) = default;
};
struct DeleteDetection {
  std::size_t index = 0;
  friend bool operator==(const DeleteDetection&, const DeleteDetection&) = default;
};
struct AddDetection {
  BoundingBox box;
  CellClass cls = CellClass::Ki67Positive;
  friend bool operator==(const AddDetection&, const AddDetection&) = default;
};

using CorrectionAction = std::variant<ToggleClass, DeleteDetection, AddDetection>;

struct CorrectionEvent {
  std::uint64_t event_id = 0;
  std::string image_id;
  CorrectionAction action;
  std::string actor;
  std::string timestamp;  // UTC, ISO 8601
  std::uint64_t base_version = 0;
  friend bool operator==(const CorrectionEvent&, const CorrectionEvent&) = default;
};

struct ImageReviewState {
  std::string image_id;
  std::vector<ReviewedDetection> detections;
  std::uint64_t version = 0;
  friend bool operator==(const ImageReviewState&, const ImageReviewState&) = default;

  std::vector<Detection> plain() const;
};

/// Pure state transition. Toggle flips the class, Delete removes, Add appends
/// with confidence 1.0 and Human provenance; the version goes up by one.
/// Throws VersionConflict, IndexOutOfRange or InvalidBox (box must fit the
/// `width` x `height` frame).
ImageReviewState apply_correction(const ImageReviewState& state, const CorrectionEvent& ev, int width, int height);

nlohmann::json action_to_json(const CorrectionAction& a);
CorrectionAction action_from_json(const nlohmann::json& j);
nlohmann::json event_to_json(const CorrectionEvent& ev);
CorrectionEvent event_from_json(const nlohmann::json& j);
nlohmann::json state_to_json(const ImageReviewState& s);

/// Append-only persistence of correction events, one stream per case.
class EventLog {
public:
  virtual ~EventLog() = default;
  /// Must be durable when it returns.
  virtual void append(const std::string& case_id, const CorrectionEvent& ev) = 0;
  virtual std::vector<CorrectionEvent> load(const std::string& case_id) const = 0;
};

/// `<dir>/<case_id>.jsonl`, one event per line, each appended with a single
/// write(2) followed by fsync.
class JsonlEventLog final : public EventLog {
public:
  explicit JsonlEventLog(std::filesystem::path dir);
  void append(const std::string& case_id, const CorrectionEvent& ev) override;
  std::vector<CorrectionEvent> load(const std::string& case_id) const override;
  std::filesystem::path path_for(const std::string& case_id) const;

private:
  std::filesystem::path dir_;
  std::mutex mu_;
};

class MemoryEventLog final : public EventLog {
public:
  void append(const std::string& case_id, const CorrectionEvent& ev) override;
  std::vector<CorrectionEvent> load(const std::string& case_id) const override;

private:
  mutable std::mutex mu_;
  std::map<std::string, std::vector<CorrectionEvent>> events_;
};

using Clock = std::function<std::string()>;
std::string utc_now_iso8601();

/// Optional overrides for a what-if score; empty fields keep the service config.
struct WhatIf {
  std::optional<double> min_conf;
  std::optional<double> nms_threshold;
  std::optional<Aggregation> aggregation;
};

struct CorrectionResult {
  ImageReviewState state;
  CorrectionEvent event;
};

/// In-memory review state for every hotspot image, rebuilt from the model
/// detections (after NMS, before the confidence filter) plus the event log at
/// construction. Reads take a shared lock on
/// one image; writes serialize per image.
class ReviewStore {
public:
  ReviewStore(DatasetManifest manifest, const PredictionSet& predictions, ScoringConfig config,
              std::shared_ptr<EventLog> log, Clock clock = utc_now_iso8601);

  const DatasetManifest& manifest() const noexcept { return manifest_; }
  const ScoringConfig& config() const noexcept { return config_; }
  std::vector<std::string> case_ids() const { return manifest_.case_ids(); }
  bool has_image(const std::string& image_id) const { return images_.contains(image_id); }

  ImageReviewState state(const std::string& image_id) const;
  ImageReviewState original(const std::string& image_id) const;
  /// Detections of the current state that count towards the score: human ones
  /// and model ones at or above the configured confidence.
  std::vector<Detection> counted(const std::string& image_id) const;

  /// Validates, persists and applies one correction. The event is on disk before
  /// this returns.
  CorrectionResult submit(const std::string& image_id, const CorrectionAction& action, const std::string& actor,
                          std::uint64_t base_version);

  /// Scores the case from the current states. Throws UnknownCase.
  CaseScore recompute_scores(const std::string& case_id) const;

  /// Like recompute_scores, with model detections re-filtered at `min_conf` and
  /// re-suppressed at `nms_threshold`. Human detections are never filtered or
  /// suppressed. Nothing is persisted.
  CaseScore what_if(const std::string& case_id, const WhatIf& params) const;

private:
  struct Entry {
    const ImageRecord* record = nullptr;
    ImageReviewState original;
    mutable std::shared_mutex mu;
    ImageReviewState current;
  };

  Entry& entry(const std::string& image_id) const;
  std::vector<ImageDetections> case_detections(const std::string& case_id, const WhatIf* params) const;

  DatasetManifest manifest_;
  ScoringConfig config_;
  std::shared_ptr<EventLog> log_;
  Clock clock_;
  std::map<std::string, std::unique_ptr<Entry>> images_;
  std::atomic<std::uint64_t> next_event_id_{1};
};

/// Per-image detections after the standard post-processing, for every hotspot
/// image of the manifest (images without predictions map to an empty list).
std::map<std::string, std::vector<Detection>> hotspot_detections(const DatasetManifest& m, const PredictionSet& set,
                                                                  const ScoringConfig& config);

/// Batch scoring of one case, the reference the review service must agree with.
CaseScore score_manifest_case(const DatasetManifest& m, const std::map<std::string, std::vector<Detection>>& dets,
                              const std::string& case_id, const ScoringConfig& config);

}  // namespace ki67
