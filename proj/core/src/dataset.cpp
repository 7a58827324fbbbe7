#include "ki67/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ki67/error.hpp"
#include "ki67/raster.hpp"
#include "ki67/rng.hpp"

namespace ki67 {

using nlohmann::json;

std::string_view split_name(SplitName s) noexcept {
  switch (s) {
    case SplitName::Train: return "train";
    case SplitName::Val: return "val";
    case SplitName::Test: return "test";
  }
  return "train";
}

std::optional<SplitName> split_from_name(std::string_view name) noexcept {
  if (name == "train") return SplitName::Train;
  if (name == "val") return SplitName::Val;
  if (name == "test") return SplitName::Test;
  return std::nullopt;
}

const ImageRecord* DatasetManifest::find(std::string_view image_id) const {
  for (const auto& r : records) {
    if (r.image_id == image_id) return &r;
  }
  return nullptr;
}

const std::vector<GroundTruth>& DatasetManifest::truths_of(std::string_view image_id) const {
  static const std::vector<GroundTruth> kNone;
  auto it = annotations.find(std::string(image_id));
  return it == annotations.end() ? kNone : it->second.truths;
}

std::filesystem::path DatasetManifest::resolve_source(const ImageRecord& r) const {
  std::filesystem::path p(r.source_path);
  if (p.is_absolute() || base_dir.empty()) return p;
  return base_dir / p;
}

std::vector<std::string> DatasetManifest::case_ids() const {
  std::vector<std::string> out;
  std::set<std::string> seen;
  for (const auto& r : records) {
    if (r.augmented()) continue;
    if (seen.insert(r.case_id).second) out.push_back(r.case_id);
  }
  return out;
}

std::vector<std::string> DatasetManifest::hotspot_ids(std::string_view case_id) const {
  std::vector<std::string> out;
  for (const auto& r : records) {
    if (!r.augmented() && r.case_id == case_id) out.push_back(r.image_id);
  }
  return out;
}

LabelMap default_label_map() {
  return {{"ki67_positive", CellClass::Ki67Positive}, {"ki67_negative", CellClass::Ki67Negative}};
}

namespace {

// Clamps [lo, hi] into [0, limit] when the overhang is within tolerance.
bool clamp_axis(double& lo, double& hi, double limit, bool& clamped) {
  const double over = std::max(0.0 - lo, hi - limit);
  if (over > kClampTolerancePx) return false;
  if (over > 0) {
    lo = std::max(lo, 0.0);
    hi = std::min(hi, limit);
    clamped = true;
  }
  return true;
}

double point_coord(const json& pt, std::size_t i) {
  if (!pt.is_array() || pt.size() != 2 || !pt[i].is_number()) {
    throw Error(ErrorCode::MalformedDocument, "rectangle point must be [x, y]");
  }
  return pt[i].get<double>();
}

}  // namespace

AnnotationSet parse_rect_annotations(const json& doc, const LabelMap& labels, std::vector<std::string>* warnings,
                                     std::optional<std::string> image_id) {
  if (!doc.is_object()) throw Error(ErrorCode::MalformedDocument, "annotation document is not an object");
  auto require = [&](const char* key) -> const json& {
    auto it = doc.find(key);
    if (it == doc.end()) throw Error(ErrorCode::MalformedDocument, std::string("missing field ") + key);
    return *it;
  };
  const json& path = require("imagePath");
  const json& jw = require("imageWidth");
  const json& jh = require("imageHeight");
  const json& shapes = require("shapes");
  if (!path.is_string() || !jw.is_number_integer() || !jh.is_number_integer() || !shapes.is_array()) {
    throw Error(ErrorCode::MalformedDocument, "annotation header has wrong field types");
  }
  const auto width = jw.get<long long>();
  const auto height = jh.get<long long>();
  if (width <= 0 || height <= 0) throw Error(ErrorCode::MalformedDocument, "image dimensions must be positive");

  AnnotationSet out;
  out.image_id = image_id ? *image_id : std::filesystem::path(path.get<std::string>()).stem().string();

  for (std::size_t i = 0; i < shapes.size(); ++i) {
    const json& s = shapes[i];
    if (!s.is_object() || !s.contains("label") || !s["label"].is_string() || !s.contains("points")) {
      throw Error(ErrorCode::MalformedDocument, "shape " + std::to_string(i) + " lacks label or points");
    }
    const std::string shape_type = s.value("shape_type", std::string("rectangle"));
    if (shape_type != "rectangle") {
      if (warnings) warnings->push_back(out.image_id + ": skipped non-rectangle shape " + std::to_string(i));
      continue;
    }
    const std::string label = s["label"].get<std::string>();
    auto cls = labels.find(label);
    if (cls == labels.end()) throw Error(ErrorCode::UnknownLabel, "unknown label '" + label + "'");
    const json& pts = s["points"];
    if (!pts.is_array() || pts.size() != 2) {
      throw Error(ErrorCode::MalformedDocument, "rectangle " + std::to_string(i) + " needs exactly two points");
    }
    double x1 = point_coord(pts[0], 0), y1 = point_coord(pts[0], 1);
    double x2 = point_coord(pts[1], 0), y2 = point_coord(pts[1], 1);
    double x_lo = std::min(x1, x2), x_hi = std::max(x1, x2);
    double y_lo = std::min(y1, y2), y_hi = std::max(y1, y2);
    bool clamped = false;
    if (!clamp_axis(x_lo, x_hi, static_cast<double>(width), clamped) ||
        !clamp_axis(y_lo, y_hi, static_cast<double>(height), clamped)) {
      throw Error(ErrorCode::OutOfRange, out.image_id + ": rectangle " + std::to_string(i) +
                                             " overhangs the image by more than 2 px");
    }
    if (clamped && warnings) {
      warnings->push_back(out.image_id + ": clamped rectangle " + std::to_string(i) + " to image bounds");
    }
    out.truths.push_back({BoundingBox::make(x_lo, y_lo, x_hi, y_hi), cls->second});
  }
  return out;
}

GroundTruth parse_yolo_line(std::string_view line, int width, int height) {
  if (width <= 0 || height <= 0) throw Error(ErrorCode::InvalidArgument, "image dimensions must be positive");
  std::istringstream in{std::string(line)};
  std::string tok[6];
  int n = 0;
  while (n < 6 && in >> tok[n]) ++n;
  if (n != 5) throw Error(ErrorCode::MalformedLine, "expected 5 fields: '" + std::string(line) + "'");

  long long class_id = 0;
  {
    auto [p, ec] = std::from_chars(tok[0].data(), tok[0].data() + tok[0].size(), class_id);
    if (ec != std::errc{} || p != tok[0].data() + tok[0].size()) {
      throw Error(ErrorCode::MalformedLine, "class id is not an integer: '" + tok[0] + "'");
    }
  }
  double v[4];
  for (int i = 0; i < 4; ++i) {
    std::size_t used = 0;
    try {
      v[i] = std::stod(tok[i + 1], &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != tok[i + 1].size() || !std::isfinite(v[i])) {
      throw Error(ErrorCode::MalformedLine, "not a number: '" + tok[i + 1] + "'");
    }
    if (v[i] < 0.0 || v[i] > 1.0) throw Error(ErrorCode::OutOfRange, "normalized value outside [0,1]: " + tok[i + 1]);
  }
  auto cls = class_from_code(class_id);
  if (!cls) throw Error(ErrorCode::UnknownClassId, "unknown class id " + tok[0]);

  const double W = width, H = height;
  double x0 = (v[0] - v[2] / 2) * W, x1 = (v[0] + v[2] / 2) * W;
  double y0 = (v[1] - v[3] / 2) * H, y1 = (v[1] + v[3] / 2) * H;
  bool clamped = false;
  if (!clamp_axis(x0, x1, W, clamped) || !clamp_axis(y0, y1, H, clamped)) {
    throw Error(ErrorCode::OutOfRange, "box extends outside the image: '" + std::string(line) + "'");
  }
  return {BoundingBox::make(x0, y0, x1, y1), *cls};
}

std::string export_yolo_line(const GroundTruth& t, int width, int height) {
  if (width <= 0 || height <= 0) throw Error(ErrorCode::InvalidArgument, "image dimensions must be positive");
  if (!t.box.valid()) throw Error(ErrorCode::DegenerateBox, "cannot export an invalid box");
  const double W = width, H = height;
  const double cx = (t.box.x_min + t.box.x_max) / 2 / W;
  const double cy = (t.box.y_min + t.box.y_max) / 2 / H;
  const double bw = t.box.width() / W;
  const double bh = t.box.height() / H;
  for (double v : {cx, cy, bw, bh}) {
    if (v < 0.0 || v > 1.0) throw Error(ErrorCode::OutOfRange, "box lies outside the image");
  }
  char buf[96];
  std::snprintf(buf, sizeof buf, "%d %.6f %.6f %.6f %.6f", class_code(t.cls), cx, cy, bw, bh);
  return buf;
}

std::vector<Finding> validate_manifest(const DatasetManifest& m) {
  std::vector<Finding> out;
  auto error = [&](const std::string& id, std::string msg) {
    out.push_back({Finding::Severity::Error, id, std::move(msg)});
  };

  std::map<std::string, const ImageRecord*> by_id;
  for (const auto& r : m.records) {
    if (!by_id.emplace(r.image_id, &r).second) error(r.image_id, "duplicate image_id");
    if (r.width <= 0 || r.height <= 0) error(r.image_id, "non-positive image dimensions");
  }

  for (const auto& r : m.records) {
    if (!r.parent_id) continue;
    auto parent = by_id.find(*r.parent_id);
    if (parent == by_id.end()) {
      error(r.image_id, "parent_id '" + *r.parent_id + "' does not exist");
    } else if (parent->second->augmented()) {
      error(r.image_id, "parent_id '" + *r.parent_id + "' is itself augmented");
    }
  }

  for (const auto& [id, set] : m.annotations) {
    auto rec = by_id.find(id);
    if (rec == by_id.end()) {
      error(id, "annotations for unknown image");
      continue;
    }
    const ImageRecord& r = *rec->second;
    for (std::size_t i = 0; i < set.truths.size(); ++i) {
      const BoundingBox& b = set.truths[i].box;
      if (!b.valid()) {
        error(id, "degenerate box " + std::to_string(i));
      } else if (b.x_max > r.width || b.y_max > r.height) {
        error(id, "out of bounds: box " + std::to_string(i));
      }
    }
  }

  for (const auto& r : m.records) {
    if (m.truths_of(r.image_id).empty()) {
      out.push_back({Finding::Severity::Warning, r.image_id, "image has zero annotations"});
    }
  }

  if (!m.split.empty()) {
    for (const auto& r : m.records) {
      if (!m.split.contains(r.image_id)) error(r.image_id, "split is not a partition: record unassigned");
    }
    for (const auto& [id, s] : m.split) {
      if (!by_id.contains(id)) error(id, "split is not a partition: unknown image");
    }
    for (const auto& r : m.records) {
      if (!r.parent_id) continue;
      auto child = m.split.find(r.image_id);
      auto parent = m.split.find(*r.parent_id);
      if (child != m.split.end() && parent != m.split.end() && child->second != parent->second) {
        error(r.image_id, "split leakage: augmented child in " + std::string(split_name(child->second)) +
                              ", parent in " + std::string(split_name(parent->second)));
      }
    }
  }
  return out;
}

std::array<std::size_t, 3> largest_remainder(std::size_t n, const std::array<double, 3>& fractions) {
  double sum = 0;
  for (double f : fractions) {
    if (!(f >= 0.0 && f <= 1.0)) throw Error(ErrorCode::InvalidArgument, "split fractions must lie in [0,1]");
    sum += f;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw Error(ErrorCode::InvalidArgument, "split fractions must sum to 1");

  std::array<std::size_t, 3> sizes{};
  std::array<double, 3> rem{};
  std::size_t assigned = 0;
  for (int i = 0; i < 3; ++i) {
    const double quota = fractions[i] * static_cast<double>(n);
    // Absorb representation error such as 0.1 * 10 = 1.0000000000000002.
    const double fl = std::floor(quota + 1e-9);
    sizes[i] = static_cast<std::size_t>(fl);
    rem[i] = std::max(0.0, quota - fl);
    assigned += sizes[i];
  }
  std::array<int, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return rem[a] > rem[b]; });
  for (std::size_t k = 0; assigned < n; ++k, ++assigned) sizes[order[k % 3]] += 1;
  while (assigned > n) {
    // Only reachable through the epsilon above; take from the largest split.
    auto it = std::max_element(sizes.begin(), sizes.end());
    --*it;
    --assigned;
  }
  return sizes;
}

DatasetManifest split_dataset(const DatasetManifest& m, const SplitSpec& spec) {
  if (!m.split.empty() && !spec.overwrite) {
    throw Error(ErrorCode::SplitExists, "manifest already has a split (pass overwrite to replace it)");
  }

  // Unit key for each record that is split directly.
  auto unit_of = [&](const ImageRecord& r) { return spec.group_by_case ? r.case_id : r.image_id; };
  std::set<std::string> unit_set;
  for (const auto& r : m.records) {
    if (r.augmented() && !spec.pool_augmented) continue;
    unit_set.insert(unit_of(r));
  }
  std::vector<std::string> units(unit_set.begin(), unit_set.end());
  Rng rng(spec.seed);
  shuffle(units, rng);

  std::array<std::size_t, 3> sizes{};
  if (spec.counts) {
    sizes = *spec.counts;
    if (sizes[0] + sizes[1] + sizes[2] != units.size()) {
      throw Error(ErrorCode::CountMismatch, "split counts sum to " + std::to_string(sizes[0] + sizes[1] + sizes[2]) +
                                                " but there are " + std::to_string(units.size()) + " split units");
    }
  } else {
    sizes = largest_remainder(units.size(), spec.fractions);
  }

  std::map<std::string, SplitName> unit_split;
  std::size_t i = 0;
  for (int s = 0; s < 3; ++s) {
    for (std::size_t k = 0; k < sizes[s]; ++k, ++i) unit_split[units[i]] = static_cast<SplitName>(s);
  }

  DatasetManifest out = m;
  out.split.clear();
  for (const auto& r : m.records) {
    if (r.augmented() && !spec.pool_augmented) continue;
    out.split[r.image_id] = unit_split.at(unit_of(r));
  }
  for (const auto& r : m.records) {
    if (!r.augmented() || spec.pool_augmented) continue;
    auto parent = out.split.find(*r.parent_id);
    if (parent == out.split.end()) {
      throw Error(ErrorCode::InvalidArgument, r.image_id + ": parent '" + *r.parent_id + "' is not a base record");
    }
    out.split[r.image_id] = parent->second;
  }
  return out;
}

json manifest_to_json(const DatasetManifest& m) {
  json records = json::array();
  for (const auto& r : m.records) {
    json jr = {{"image_id", r.image_id},
               {"case_id", r.case_id},
               {"width", r.width},
               {"height", r.height},
               {"source_path", r.source_path}};
    if (r.parent_id) jr["parent_id"] = *r.parent_id;
    records.push_back(std::move(jr));
  }
  json annotations = json::object();
  for (const auto& [id, set] : m.annotations) {
    json truths = json::array();
    for (const auto& t : set.truths) {
      truths.push_back({{"cls", class_code(t.cls)}, {"box", {t.box.x_min, t.box.y_min, t.box.x_max, t.box.y_max}}});
    }
    annotations[id] = std::move(truths);
  }
  json doc = {{"schema_version", kManifestSchemaVersion}, {"records", std::move(records)},
              {"annotations", std::move(annotations)}};
  if (!m.split.empty()) {
    json split = json::object();
    for (const auto& [id, s] : m.split) split[id] = split_name(s);
    doc["split"] = std::move(split);
  }
  return doc;
}

DatasetManifest manifest_from_json(const json& doc) {
  try {
    if (doc.at("schema_version").get<int>() != kManifestSchemaVersion) {
      throw Error(ErrorCode::MalformedDocument, "unsupported manifest schema_version");
    }
    DatasetManifest m;
    for (const auto& jr : doc.at("records")) {
      ImageRecord r;
      r.image_id = jr.at("image_id").get<std::string>();
      r.case_id = jr.at("case_id").get<std::string>();
      r.width = jr.at("width").get<int>();
      r.height = jr.at("height").get<int>();
      r.source_path = jr.at("source_path").get<std::string>();
      if (jr.contains("parent_id")) r.parent_id = jr["parent_id"].get<std::string>();
      m.records.push_back(std::move(r));
    }
    for (const auto& [id, truths] : doc.at("annotations").items()) {
      AnnotationSet set{id, {}};
      for (const auto& jt : truths) {
        auto cls = class_from_code(jt.at("cls").get<long long>());
        if (!cls) throw Error(ErrorCode::UnknownClassId, id + ": unknown class id");
        const auto& b = jt.at("box");
        set.truths.push_back({BoundingBox::make(b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(),
                                                b.at(3).get<double>()),
                              *cls});
      }
      m.annotations.emplace(id, std::move(set));
    }
    if (doc.contains("split")) {
      for (const auto& [id, name] : doc["split"].items()) {
        auto s = split_from_name(name.get<std::string>());
        if (!s) throw Error(ErrorCode::MalformedDocument, id + ": unknown split name");
        m.split[id] = *s;
      }
    }
    return m;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::MalformedDocument, std::string("manifest: ") + e.what());
  }
}

DatasetManifest rebase_manifest(DatasetManifest m, const std::filesystem::path& new_base_dir) {
  namespace fs = std::filesystem;
  const fs::path target = fs::absolute(new_base_dir).lexically_normal();
  for (auto& r : m.records) {
    if (fs::path(r.source_path).is_absolute()) continue;
    const fs::path abs = fs::absolute(m.resolve_source(r)).lexically_normal();
    r.source_path = abs.lexically_relative(target).generic_string();
  }
  m.base_dir = new_base_dir;
  return m;
}

void save_manifest(const std::filesystem::path& path, const DatasetManifest& m) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out << manifest_to_json(m).dump(2) << '\n';
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::MalformedDocument, path.string() + ": " + e.what());
  }
  DatasetManifest m = manifest_from_json(doc);
  m.base_dir = path.parent_path();
  return m;
}

IngestResult ingest_directory(const std::filesystem::path& images_dir, const std::filesystem::path& annotations_dir,
                              AnnotationFormat format, const std::filesystem::path& manifest_dir,
                              const LabelMap& labels) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(images_dir)) throw Error(ErrorCode::Io, images_dir.string() + " is not a directory");
  if (!fs::is_directory(annotations_dir)) throw Error(ErrorCode::Io, annotations_dir.string() + " is not a directory");

  std::vector<fs::path> images;
  for (const auto& e : fs::recursive_directory_iterator(images_dir)) {
    if (e.is_regular_file() && e.path().extension() == ".png") images.push_back(e.path());
  }
  std::sort(images.begin(), images.end());

  const std::string ext = format == AnnotationFormat::RectJson ? ".json" : ".txt";
  std::map<std::string, fs::path> ann_files;
  for (const auto& e : fs::recursive_directory_iterator(annotations_dir)) {
    if (e.is_regular_file() && e.path().extension() == ext) ann_files.emplace(e.path().stem().string(), e.path());
  }

  IngestResult result;
  DatasetManifest& m = result.manifest;
  m.base_dir = manifest_dir;
  std::set<std::string> ids;
  const fs::path base = fs::absolute(manifest_dir).lexically_normal();
  for (const auto& img : images) {
    ImageRecord r;
    r.image_id = img.stem().string();
    if (!ids.insert(r.image_id).second) throw Error(ErrorCode::DuplicateId, "duplicate image stem " + r.image_id);
    const fs::path rel = img.lexically_relative(images_dir);
    r.case_id = std::distance(rel.begin(), rel.end()) > 1 ? rel.begin()->string() : r.image_id;
    const ImageSize size = read_png_size(img);
    r.width = size.width;
    r.height = size.height;
    r.source_path = fs::absolute(img).lexically_normal().lexically_relative(base).generic_string();

    AnnotationSet set{r.image_id, {}};
    auto af = ann_files.find(r.image_id);
    if (af == ann_files.end()) {
      result.warnings.push_back(r.image_id + ": no annotation file");
    } else if (format == AnnotationFormat::RectJson) {
      std::ifstream in(af->second);
      json doc;
      try {
        doc = json::parse(in);
      } catch (const json::exception& e) {
        throw Error(ErrorCode::MalformedDocument, af->second.string() + ": " + e.what());
      }
      set = parse_rect_annotations(doc, labels, &result.warnings, r.image_id);
      if (doc["imageWidth"].get<int>() != r.width || doc["imageHeight"].get<int>() != r.height) {
        result.warnings.push_back(r.image_id + ": annotation dimensions differ from the PNG");
      }
    } else {
      std::ifstream in(af->second);
      std::string line;
      int lineno = 0;
      while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
          set.truths.push_back(parse_yolo_line(line, r.width, r.height));
        } catch (const Error& e) {
          throw Error(e.code(), af->second.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
      }
    }
    m.annotations.emplace(r.image_id, std::move(set));
    m.records.push_back(std::move(r));
  }
  return result;
}

}  // namespace ki67
