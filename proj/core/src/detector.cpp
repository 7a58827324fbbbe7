#include "ki67/detector.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <set>

#include <nlohmann/json.hpp>

namespace ki67 {

using nlohmann::json;

std::size_t PredictionSet::size() const {
  std::size_t n = 0;
  for (const auto& [id, preds] : by_image) n += preds.size();
  return n;
}

namespace {

double number_field(const json& obj, const char* key) {
  auto it = obj.find(key);
  if (it == obj.end() || !it->is_number()) {
    throw Error(ErrorCode::MalformedLine, std::string("missing or non-numeric field '") + key + "'");
  }
  return it->get<double>();
}

RawPrediction parse_line(const std::string& line) {
  json obj;
  try {
    obj = json::parse(line);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::MalformedLine, std::string("invalid JSON: ") + e.what());
  }
  if (!obj.is_object()) throw Error(ErrorCode::MalformedLine, "line is not a JSON object");
  auto id = obj.find("image_id");
  if (id == obj.end() || !id->is_string()) throw Error(ErrorCode::MalformedLine, "missing string field 'image_id'");
  auto cid = obj.find("class_id");
  if (cid == obj.end() || !cid->is_number_integer()) {
    throw Error(ErrorCode::MalformedLine, "missing integer field 'class_id'");
  }
  auto cls = class_from_code(cid->get<long long>());
  if (!cls) throw Error(ErrorCode::UnknownClassId, "unknown class_id " + cid->dump());
  const double conf = number_field(obj, "confidence");
  if (!(conf >= 0.0 && conf <= 1.0)) {
    throw Error(ErrorCode::ConfidenceOutOfRange, "confidence " + obj["confidence"].dump() + " outside [0,1]");
  }
  const BoundingBox box = BoundingBox::make(number_field(obj, "x_min"), number_field(obj, "y_min"),
                                            number_field(obj, "x_max"), number_field(obj, "y_max"));
  return {id->get<std::string>(), box, *cls, conf};
}

}  // namespace

PredictionParse parse_predictions(std::istream& in, std::string run_label) {
  PredictionParse out;
  out.set.run_label = std::move(run_label);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    try {
      RawPrediction p = parse_line(line);
      out.set.by_image[p.image_id].push_back(std::move(p));
    } catch (const Error& e) {
      out.errors.push_back({lineno, e.code(), e.what()});
    }
  }
  return out;
}

PredictionParse load_predictions(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
  return parse_predictions(in, path.stem().string());
}

std::string prediction_to_jsonl(const RawPrediction& p) {
  json obj = {{"image_id", p.image_id}, {"class_id", class_code(p.cls)}, {"x_min", p.box.x_min},
              {"y_min", p.box.y_min},   {"x_max", p.box.x_max},          {"y_max", p.box.y_max},
              {"confidence", p.confidence}};
  return obj.dump();
}

std::vector<std::string> unresolved_images(const PredictionSet& set, const DatasetManifest& m) {
  std::vector<std::string> out;
  for (const auto& [id, preds] : set.by_image) {
    if (m.find(id) == nullptr) out.push_back(id);
  }
  return out;
}

std::map<std::string, std::vector<Detection>> postprocess(const PredictionSet& set, double min_conf,
                                                          double nms_thresh) {
  if (!(min_conf >= 0.0 && min_conf <= 1.0)) throw Error(ErrorCode::InvalidArgument, "min_conf outside [0,1]");
  if (!(nms_thresh >= 0.0 && nms_thresh <= 1.0)) throw Error(ErrorCode::InvalidArgument, "nms threshold outside [0,1]");
  std::map<std::string, std::vector<Detection>> out;
  for (const auto& [id, preds] : set.by_image) {
    std::vector<Detection> dets;
    dets.reserve(preds.size());
    for (const auto& p : preds) dets.push_back(p.detection());
    dets = filter_confidence(dets, min_conf);
    if (!set.post_nms) dets = nms(dets, nms_thresh, true);
    out.emplace(id, std::move(dets));
  }
  return out;
}

LetterboxSpec letterbox_map(int width, int height, int target, std::uint8_t pad_fill) {
  if (width <= 0 || height <= 0 || target <= 0) throw Error(ErrorCode::InvalidArgument, "dimensions must be positive");
  LetterboxSpec s;
  s.source_width = width;
  s.source_height = height;
  s.target = target;
  s.pad_fill = pad_fill;
  s.scale = std::min(static_cast<double>(target) / width, static_cast<double>(target) / height);
  s.scaled_width = std::min<int>(target, static_cast<int>(std::lround(width * s.scale)));
  s.scaled_height = std::min<int>(target, static_cast<int>(std::lround(height * s.scale)));
  s.pad_left = (target - s.scaled_width) / 2;
  s.pad_top = (target - s.scaled_height) / 2;
  return s;
}

BoundingBox letterbox_box(const BoundingBox& b, const LetterboxSpec& s) {
  return {b.x_min * s.scale + s.pad_left, b.y_min * s.scale + s.pad_top, b.x_max * s.scale + s.pad_left,
          b.y_max * s.scale + s.pad_top};
}

BoundingBox unletterbox(const BoundingBox& b, const LetterboxSpec& s) {
  auto map_x = [&](double x) { return std::clamp((x - s.pad_left) / s.scale, 0.0, double(s.source_width)); };
  auto map_y = [&](double y) { return std::clamp((y - s.pad_top) / s.scale, 0.0, double(s.source_height)); };
  return {map_x(b.x_min), map_y(b.y_min), map_x(b.x_max), map_y(b.y_max)};
}

}  // namespace ki67
