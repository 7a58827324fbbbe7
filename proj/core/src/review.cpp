#include "ki67/review.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cstring>
#include <ctime>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "ki67/error.hpp"

namespace ki67 {

using nlohmann::json;

std::vector<Detection> ImageReviewState::plain() const {
  std::vector<Detection> out;
  out.reserve(detections.size());
  for (const auto& d : detections) out.push_back(d.det);
  return out;
}

ImageReviewState apply_correction(const ImageReviewState& state, const CorrectionEvent& ev, int width, int height) {
  if (ev.base_version != state.version) {
    throw Error(ErrorCode::VersionConflict, ev.image_id + ": base_version " + std::to_string(ev.base_version) +
                                                " but image is at version " + std::to_string(state.version));
  }
  ImageReviewState next = state;
  auto check_index = [&](std::size_t i) {
    if (i >= next.detections.size()) {
      throw Error(ErrorCode::IndexOutOfRange, "detection index " + std::to_string(i) + " out of range (" +
                                                  std::to_string(next.detections.size()) + " detections)");
    }
  };
  std::visit(
      [&](const auto& a) {
        using A = std::decay_t<decltype(a)>;
        if constexpr (std::is_same_v<A, ToggleClass>) {
          check_index(a.index);
          auto& d = next.detections[a.index].det;
          d.cls = other_class(d.cls);
        } else if constexpr (std::is_same_v<A, DeleteDetection>) {
          check_index(a.index);
          next.detections.erase(next.detections.begin() + static_cast<std::ptrdiff_t>(a.index));
        } else {
          if (!a.box.valid() || a.box.x_max > width || a.box.y_max > height) {
            throw Error(ErrorCode::InvalidBox, "added box must be non-empty and inside the image");
          }
          next.detections.push_back({{a.box, a.cls, 1.0}, Provenance::Human});
        }
      },
      ev.action);
  next.version += 1;
  return next;
}

json action_to_json(const CorrectionAction& a) {
  return std::visit(
      [](const auto& act) -> json {
        using A = std::decay_t<decltype(act)>;
        if constexpr (std::is_same_v<A, ToggleClass>) {
          return {{"type", "toggle"}, {"index", act.index}};
        } else if constexpr (std::is_same_v<A, DeleteDetection>) {
          return {{"type", "delete"}, {"index", act.index}};
        } else {
          return {{"type", "add"},
                  {"box", {act.box.x_min, act.box.y_min, act.box.x_max, act.box.y_max}},
                  {"class_id", class_code(act.cls)}};
        }
      },
      a);
}

CorrectionAction action_from_json(const json& j) {
  try {
    const auto type = j.at("type").get<std::string>();
    if (type == "toggle") return ToggleClass{j.at("index").get<std::size_t>()};
    if (type == "delete") return DeleteDetection{j.at("index").get<std::size_t>()};
    if (type == "add") {
      const json& b = j.at("box");
      if (!b.is_array() || b.size() != 4) throw Error(ErrorCode::InvalidBox, "box must be [x_min,y_min,x_max,y_max]");
      auto cls = class_from_code(j.at("class_id").get<long long>());
      if (!cls) throw Error(ErrorCode::UnknownClassId, "unknown class_id");
      BoundingBox box{b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()};
      if (!box.valid()) throw Error(ErrorCode::InvalidBox, "added box is degenerate or negative");
      return AddDetection{box, *cls};
    }
    throw Error(ErrorCode::MalformedDocument, "unknown action type '" + type + "'");
  } catch (const json::exception& e) {
    throw Error(ErrorCode::MalformedDocument, std::string("correction action: ") + e.what());
  }
}

json event_to_json(const CorrectionEvent& ev) {
  return {{"event_id", ev.event_id},   {"image_id", ev.image_id},         {"action", action_to_json(ev.action)},
          {"actor", ev.actor},         {"timestamp", ev.timestamp},       {"base_version", ev.base_version}};
}

CorrectionEvent event_from_json(const json& j) {
  try {
    CorrectionEvent ev;
    ev.event_id = j.at("event_id").get<std::uint64_t>();
    ev.image_id = j.at("image_id").get<std::string>();
    ev.action = action_from_json(j.at("action"));
    ev.actor = j.at("actor").get<std::string>();
    ev.timestamp = j.at("timestamp").get<std::string>();
    ev.base_version = j.at("base_version").get<std::uint64_t>();
    return ev;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::MalformedDocument, std::string("correction event: ") + e.what());
  }
}

json state_to_json(const ImageReviewState& s) {
  json dets = json::array();
  for (const auto& d : s.detections) {
    dets.push_back({{"box", {d.det.box.x_min, d.det.box.y_min, d.det.box.x_max, d.det.box.y_max}},
                    {"class_id", class_code(d.det.cls)},
                    {"confidence", d.det.confidence},
                    {"provenance", d.provenance == Provenance::Model ? "model" : "human"}});
  }
  return {{"image_id", s.image_id}, {"version", s.version}, {"detections", std::move(dets)}};
}

JsonlEventLog::JsonlEventLog(std::filesystem::path dir) : dir_(std::move(dir)) {
  std::filesystem::create_directories(dir_);
}

std::filesystem::path JsonlEventLog::path_for(const std::string& case_id) const {
  return dir_ / (case_id + ".jsonl");
}

void JsonlEventLog::append(const std::string& case_id, const CorrectionEvent& ev) {
  const std::string line = event_to_json(ev).dump() + "\n";
  std::lock_guard lock(mu_);
  const std::string path = path_for(case_id).string();
  const int fd = ::open(path.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
  if (fd < 0) throw Error(ErrorCode::Io, "cannot open " + path + ": " + std::strerror(errno));
  const ssize_t n = ::write(fd, line.data(), line.size());
  const int saved = errno;
  const bool synced = ::fsync(fd) == 0;
  ::close(fd);
  if (n != static_cast<ssize_t>(line.size())) {
    throw Error(ErrorCode::Io, "short write to " + path + ": " + std::strerror(saved));
  }
  if (!synced) throw Error(ErrorCode::Io, "fsync failed on " + path);
}

std::vector<CorrectionEvent> JsonlEventLog::load(const std::string& case_id) const {
  std::vector<CorrectionEvent> out;
  std::ifstream in(path_for(case_id));
  if (!in) return out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(event_from_json(json::parse(line)));
    } catch (const std::exception& e) {
      throw Error(ErrorCode::MalformedDocument,
                  path_for(case_id).string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void MemoryEventLog::append(const std::string& case_id, const CorrectionEvent& ev) {
  std::lock_guard lock(mu_);
  events_[case_id].push_back(ev);
}

std::vector<CorrectionEvent> MemoryEventLog::load(const std::string& case_id) const {
  std::lock_guard lock(mu_);
  auto it = events_.find(case_id);
  return it == events_.end() ? std::vector<CorrectionEvent>{} : it->second;
}

std::string utc_now_iso8601() {
  using namespace std::chrono;
  const auto now = system_clock::now();
  const std::time_t t = system_clock::to_time_t(now);
  const auto ms = duration_cast<milliseconds>(now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%04d-%02d-%02dT%02d:%02d:%02d.%03dZ", tm.tm_year + 1900, tm.tm_mon + 1, tm.tm_mday,
                tm.tm_hour, tm.tm_min, tm.tm_sec, static_cast<int>(ms));
  return buf;
}

std::map<std::string, std::vector<Detection>> hotspot_detections(const DatasetManifest& m, const PredictionSet& set,
                                                                  const ScoringConfig& config) {
  auto processed = postprocess(set, config.min_conf, config.nms_threshold);
  std::map<std::string, std::vector<Detection>> out;
  for (const auto& r : m.records) {
    if (r.augmented()) continue;
    auto it = processed.find(r.image_id);
    out[r.image_id] = it == processed.end() ? std::vector<Detection>{} : std::move(it->second);
  }
  return out;
}

CaseScore score_manifest_case(const DatasetManifest& m, const std::map<std::string, std::vector<Detection>>& dets,
                              const std::string& case_id, const ScoringConfig& config) {
  const auto ids = m.hotspot_ids(case_id);
  if (ids.empty()) throw Error(ErrorCode::UnknownCase, "unknown case " + case_id);
  std::vector<ImageDetections> images;
  for (const auto& id : ids) {
    auto it = dets.find(id);
    images.push_back({id, it == dets.end() ? std::vector<Detection>{} : it->second});
  }
  return score_case_images(case_id, images, config);
}

ReviewStore::ReviewStore(DatasetManifest manifest, const PredictionSet& predictions, ScoringConfig config,
                         std::shared_ptr<EventLog> log, Clock clock)
    : manifest_(std::move(manifest)), config_(config), log_(std::move(log)), clock_(std::move(clock)) {
  if (!log_) throw Error(ErrorCode::InvalidArgument, "review store needs an event log");
  // Model detections are kept unfiltered so what-if scoring can lower the
  // confidence threshold; the service threshold applies at scoring time.
  ScoringConfig unfiltered = config_;
  unfiltered.min_conf = 0.0;
  auto dets = hotspot_detections(manifest_, predictions, unfiltered);
  for (const auto& r : manifest_.records) {
    if (r.augmented()) continue;
    auto e = std::make_unique<Entry>();
    e->record = &r;
    e->original.image_id = r.image_id;
    for (const auto& d : dets[r.image_id]) e->original.detections.push_back({d, Provenance::Model});
    e->current = e->original;
    images_.emplace(r.image_id, std::move(e));
  }

  std::uint64_t max_id = 0;
  std::set<std::uint64_t> seen_ids;
  std::map<std::string, std::uint64_t> last_id;
  for (const auto& case_id : manifest_.case_ids()) {
    for (const auto& ev : log_->load(case_id)) {
      auto it = images_.find(ev.image_id);
      if (it == images_.end()) {
        throw Error(ErrorCode::UnknownImage, "event log of " + case_id + " references unknown image " + ev.image_id);
      }
      Entry& e = *it->second;
      if (!seen_ids.insert(ev.event_id).second) {
        throw Error(ErrorCode::DuplicateId, "event log repeats event_id " + std::to_string(ev.event_id));
      }
      if (auto& last = last_id[ev.image_id]; ev.event_id <= last) {
        throw Error(ErrorCode::MalformedDocument, "event ids of " + ev.image_id + " are not increasing");
      } else {
        last = ev.event_id;
      }
      e.current = apply_correction(e.current, ev, e.record->width, e.record->height);
      max_id = std::max(max_id, ev.event_id);
    }
  }
  next_event_id_ = max_id + 1;
}

ReviewStore::Entry& ReviewStore::entry(const std::string& image_id) const {
  auto it = images_.find(image_id);
  if (it == images_.end()) throw Error(ErrorCode::UnknownImage, "unknown image " + image_id);
  return *it->second;
}

ImageReviewState ReviewStore::state(const std::string& image_id) const {
  Entry& e = entry(image_id);
  std::shared_lock lock(e.mu);
  return e.current;
}

ImageReviewState ReviewStore::original(const std::string& image_id) const { return entry(image_id).original; }

CorrectionResult ReviewStore::submit(const std::string& image_id, const CorrectionAction& action,
                                     const std::string& actor, std::uint64_t base_version) {
  Entry& e = entry(image_id);
  std::unique_lock lock(e.mu);
  CorrectionEvent ev{0, image_id, action, actor, clock_(), base_version};
  // Validate against the current state before an id is consumed or anything is written.
  ImageReviewState next = apply_correction(e.current, ev, e.record->width, e.record->height);
  ev.event_id = next_event_id_.fetch_add(1);
  log_->append(e.record->case_id, ev);
  e.current = next;
  return {std::move(next), std::move(ev)};
}

std::vector<ImageDetections> ReviewStore::case_detections(const std::string& case_id, const WhatIf* params) const {
  const auto ids = manifest_.hotspot_ids(case_id);
  if (ids.empty()) throw Error(ErrorCode::UnknownCase, "unknown case " + case_id);
  std::vector<ImageDetections> images;
  for (const auto& id : ids) {
    if (params == nullptr) {
      images.push_back({id, counted(id)});
      continue;
    }
    const ImageReviewState s = state(id);
    const double min_conf = params->min_conf.value_or(config_.min_conf);
    std::vector<Detection> model, human;
    for (const auto& d : s.detections) {
      if (d.provenance == Provenance::Human) {
        human.push_back(d.det);
      } else if (d.det.confidence >= min_conf) {
        model.push_back(d.det);
      }
    }
    model = nms(model, params->nms_threshold.value_or(config_.nms_threshold), true);
    model.insert(model.end(), human.begin(), human.end());
    images.push_back({id, std::move(model)});
  }
  return images;
}

std::vector<Detection> ReviewStore::counted(const std::string& image_id) const {
  std::vector<Detection> out;
  for (const auto& d : state(image_id).detections) {
    if (d.provenance == Provenance::Human || d.det.confidence >= config_.min_conf) out.push_back(d.det);
  }
  return out;
}

CaseScore ReviewStore::recompute_scores(const std::string& case_id) const {
  return score_case_images(case_id, case_detections(case_id, nullptr), config_);
}

CaseScore ReviewStore::what_if(const std::string& case_id, const WhatIf& params) const {
  if (!params.min_conf && !params.nms_threshold && !params.aggregation) return recompute_scores(case_id);
  ScoringConfig cfg = config_;
  if (params.min_conf) cfg.min_conf = *params.min_conf;
  if (params.nms_threshold) cfg.nms_threshold = *params.nms_threshold;
  if (params.aggregation) cfg.aggregation = *params.aggregation;
  if (!(cfg.min_conf >= 0 && cfg.min_conf <= 1) || !(cfg.nms_threshold >= 0 && cfg.nms_threshold <= 1)) {
    throw Error(ErrorCode::InvalidArgument, "min_conf and nms must lie in [0,1]");
  }
  return score_case_images(case_id, case_detections(case_id, &params), cfg);
}

}  // namespace ki67
