#include "ki67/augment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <mutex>
#include <set>
#include <thread>

#include <nlohmann/json.hpp>

#include "ki67/error.hpp"
#include "ki67/rng.hpp"

namespace ki67 {

using nlohmann::json;

namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};

bool in_range(double v, double lo, double hi) { return std::isfinite(v) && v >= lo && v <= hi; }

RasterImage remap(const RasterImage& img, int out_w, int out_h, auto&& source_of) {
  RasterImage out(out_w, out_h);
  for (int y = 0; y < out_h; ++y) {
    for (int x = 0; x < out_w; ++x) {
      const auto [sx, sy] = source_of(x, y);
      out.at(x, y) = img.at(sx, sy);
    }
  }
  return out;
}

std::uint8_t scale_channel(std::uint8_t v, double delta, bool additive) {
  const double scaled = additive ? v + delta * 255.0 : v * (1.0 + delta);
  return static_cast<std::uint8_t>(std::clamp(std::lround(scaled), 0L, 255L));
}

}  // namespace

void validate_transform(const Transform& t) {
  std::visit(overloaded{
                 [](const Crop& c) {
                   for (double f : {c.left, c.top, c.right, c.bottom}) {
                     if (!in_range(f, 0.0, kMaxCropFraction)) {
                       throw Error(ErrorCode::InvalidArgument, "crop fraction outside [0, 0.08]");
                     }
                   }
                 },
                 [](const Brightness& b) {
                   if (!in_range(b.delta, -kMaxBrightnessDelta, kMaxBrightnessDelta)) {
                     throw Error(ErrorCode::InvalidArgument, "brightness delta outside [-0.24, 0.24]");
                   }
                 },
                 [](const auto&) {},
             },
             t);
}

std::string describe(const Transform& t) {
  return std::visit(overloaded{
                        [](HFlip) -> std::string { return "hflip"; },
                        [](VFlip) -> std::string { return "vflip"; },
                        [](Rot90CW) -> std::string { return "rot90cw"; },
                        [](Rot90CCW) -> std::string { return "rot90ccw"; },
                        [](Rot180) -> std::string { return "rot180"; },
                        [](const Crop& c) -> std::string {
                          char buf[96];
                          std::snprintf(buf, sizeof buf, "crop(%.4f,%.4f,%.4f,%.4f)", c.left, c.top, c.right,
                                        c.bottom);
                          return buf;
                        },
                        [](const Brightness& b) -> std::string {
                          char buf[48];
                          std::snprintf(buf, sizeof buf, "brightness(%+.4f)", b.delta);
                          return buf;
                        },
                    },
                    t);
}

BoundingBox transform_box(const BoundingBox& b, int width, int height, const Transform& t) {
  const double W = width, H = height;
  return std::visit(
      overloaded{
          [&](HFlip) { return BoundingBox{W - b.x_max, b.y_min, W - b.x_min, b.y_max}; },
          [&](VFlip) { return BoundingBox{b.x_min, H - b.y_max, b.x_max, H - b.y_min}; },
          // (x, y) -> (H - y, x)
          [&](Rot90CW) { return BoundingBox{H - b.y_max, b.x_min, H - b.y_min, b.x_max}; },
          // (x, y) -> (y, W - x)
          [&](Rot90CCW) { return BoundingBox{b.y_min, W - b.x_max, b.y_max, W - b.x_min}; },
          [&](Rot180) { return BoundingBox{W - b.x_max, H - b.y_max, W - b.x_min, H - b.y_min}; },
          [&](const auto&) -> BoundingBox {
            throw Error(ErrorCode::InvalidArgument, "transform_box only handles flips and rotations");
          },
      },
      t);
}

Augmented apply_transform(const RasterImage& img, const std::vector<GroundTruth>& truths, const Transform& t,
                          const AugmentOptions& opts) {
  validate_transform(t);
  const int W = img.width(), H = img.height();

  auto geometric = [&](int out_w, int out_h, auto&& source_of) {
    Augmented out{remap(img, out_w, out_h, source_of), {}};
    out.truths.reserve(truths.size());
    for (const auto& gt : truths) out.truths.push_back({transform_box(gt.box, W, H, t), gt.cls});
    return out;
  };

  return std::visit(
      overloaded{
          [&](HFlip) { return geometric(W, H, [&](int x, int y) { return std::pair{W - 1 - x, y}; }); },
          [&](VFlip) { return geometric(W, H, [&](int x, int y) { return std::pair{x, H - 1 - y}; }); },
          // Output pixel (x, y) of a clockwise turn comes from source (y, H - 1 - x).
          [&](Rot90CW) { return geometric(H, W, [&](int x, int y) { return std::pair{y, H - 1 - x}; }); },
          [&](Rot90CCW) { return geometric(H, W, [&](int x, int y) { return std::pair{W - 1 - y, x}; }); },
          [&](Rot180) { return geometric(W, H, [&](int x, int y) { return std::pair{W - 1 - x, H - 1 - y}; }); },
          [&](const Crop& c) {
            const long left = std::lround(c.left * W), right = std::lround(c.right * W);
            const long top = std::lround(c.top * H), bottom = std::lround(c.bottom * H);
            const long out_w = W - left - right, out_h = H - top - bottom;
            if (out_w <= 0 || out_h <= 0) throw Error(ErrorCode::EmptyResult, "crop leaves an empty image");
            Augmented out{remap(img, static_cast<int>(out_w), static_cast<int>(out_h),
                                [&](int x, int y) { return std::pair{x + static_cast<int>(left), y + static_cast<int>(top)}; }),
                          {}};
            for (const auto& gt : truths) {
              const double x0 = std::max(gt.box.x_min - left, 0.0);
              const double y0 = std::max(gt.box.y_min - top, 0.0);
              const double x1 = std::min(gt.box.x_max - left, static_cast<double>(out_w));
              const double y1 = std::min(gt.box.y_max - top, static_cast<double>(out_h));
              if (!(x0 < x1) || !(y0 < y1)) continue;
              const BoundingBox clipped{x0, y0, x1, y1};
              if (clipped.area() < opts.min_retained_area * gt.box.area()) continue;
              out.truths.push_back({clipped, gt.cls});
            }
            return out;
          },
          [&](const Brightness& b) {
            Augmented out{img, truths};
            for (int y = 0; y < H; ++y) {
              for (int x = 0; x < W; ++x) {
                for (auto& ch : out.image.at(x, y)) ch = scale_channel(ch, b.delta, opts.additive_brightness);
              }
            }
            return out;
          },
      },
      t);
}

Augmented apply_chain(const RasterImage& img, const std::vector<GroundTruth>& truths,
                      const std::vector<Transform>& chain, const AugmentOptions& opts) {
  Augmented cur{img, truths};
  for (const auto& t : chain) cur = apply_transform(cur.image, cur.truths, t, opts);
  return cur;
}

std::vector<Transform> sample_chain(Rng& rng) {
  std::vector<Transform> chain;
  switch (rng.below(6)) {
    case 1: chain.emplace_back(HFlip{}); break;
    case 2: chain.emplace_back(VFlip{}); break;
    case 3: chain.emplace_back(Rot90CW{}); break;
    case 4: chain.emplace_back(Rot90CCW{}); break;
    case 5: chain.emplace_back(Rot180{}); break;
    default: break;
  }
  if (rng.coin()) {
    Crop c;
    c.left = rng.uniform(0.0, kMaxCropFraction);
    c.top = rng.uniform(0.0, kMaxCropFraction);
    c.right = rng.uniform(0.0, kMaxCropFraction);
    c.bottom = rng.uniform(0.0, kMaxCropFraction);
    chain.emplace_back(c);
  }
  if (rng.coin()) chain.emplace_back(Brightness{rng.uniform(-kMaxBrightnessDelta, kMaxBrightnessDelta)});
  return chain;
}

namespace {

constexpr int kMaxDrawsPerChain = 1000;

}  // namespace

AugmentPlan generate_plan(const DatasetManifest& m, std::uint64_t seed, std::size_t target_total) {
  std::vector<const ImageRecord*> bases;
  std::set<std::string> taken;
  for (const auto& r : m.records) {
    taken.insert(r.image_id);
    if (!r.augmented()) bases.push_back(&r);
  }
  if (target_total < bases.size()) {
    throw Error(ErrorCode::InvalidArgument, "target total is smaller than the number of base images");
  }
  AugmentPlan plan{seed, target_total, {}};
  const std::size_t extra = target_total - bases.size();
  if (extra == 0) return plan;

  Rng rng(seed);
  const std::size_t per_image = extra / bases.size();
  std::vector<std::size_t> order(bases.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  shuffle(order, rng);
  std::vector<std::size_t> quota(bases.size(), per_image);
  for (std::size_t k = 0; k < extra % bases.size(); ++k) quota[order[k]] += 1;

  for (std::size_t i = 0; i < bases.size(); ++i) {
    const ImageRecord& src = *bases[i];
    std::vector<std::vector<Transform>> chains;
    while (chains.size() < quota[i]) {
      int draws = 0;
      std::vector<Transform> chain;
      do {
        if (++draws > kMaxDrawsPerChain) {
          throw Error(ErrorCode::TargetTooLarge, src.image_id + ": ran out of distinct transform chains");
        }
        chain = sample_chain(rng);
      } while (chain.empty() || std::find(chains.begin(), chains.end(), chain) != chains.end());
      chains.push_back(chain);

      std::string id;
      for (std::size_t k = chains.size();; ++k) {
        char suffix[32];
        std::snprintf(suffix, sizeof suffix, "_aug%02zu", k);
        id = src.image_id + suffix;
        if (!taken.contains(id)) break;
      }
      taken.insert(id);
      plan.entries.push_back({src.image_id, std::move(chain), std::move(id)});
    }
  }
  return plan;
}

json plan_to_json(const AugmentPlan& plan) {
  json entries = json::array();
  for (const auto& e : plan.entries) {
    json ts = json::array();
    for (const auto& t : e.transforms) {
      ts.push_back(std::visit(overloaded{
                                  [](HFlip) { return json{{"op", "hflip"}}; },
                                  [](VFlip) { return json{{"op", "vflip"}}; },
                                  [](Rot90CW) { return json{{"op", "rot90cw"}}; },
                                  [](Rot90CCW) { return json{{"op", "rot90ccw"}}; },
                                  [](Rot180) { return json{{"op", "rot180"}}; },
                                  [](const Crop& c) {
                                    return json{{"op", "crop"}, {"left", c.left}, {"top", c.top},
                                                {"right", c.right}, {"bottom", c.bottom}};
                                  },
                                  [](const Brightness& b) { return json{{"op", "brightness"}, {"delta", b.delta}}; },
                              },
                              t));
    }
    entries.push_back({{"source_id", e.source_id}, {"new_id", e.new_id}, {"transforms", std::move(ts)}});
  }
  return {{"schema_version", 1}, {"seed", plan.seed}, {"target_total", plan.target_total},
          {"entries", std::move(entries)}};
}

AugmentPlan plan_from_json(const json& doc) {
  try {
    AugmentPlan plan;
    plan.seed = doc.at("seed").get<std::uint64_t>();
    plan.target_total = doc.at("target_total").get<std::size_t>();
    for (const auto& je : doc.at("entries")) {
      PlanEntry e;
      e.source_id = je.at("source_id").get<std::string>();
      e.new_id = je.at("new_id").get<std::string>();
      for (const auto& jt : je.at("transforms")) {
        const auto op = jt.at("op").get<std::string>();
        Transform t;
        if (op == "hflip") t = HFlip{};
        else if (op == "vflip") t = VFlip{};
        else if (op == "rot90cw") t = Rot90CW{};
        else if (op == "rot90ccw") t = Rot90CCW{};
        else if (op == "rot180") t = Rot180{};
        else if (op == "crop")
          t = Crop{jt.at("left").get<double>(), jt.at("top").get<double>(), jt.at("right").get<double>(),
                   jt.at("bottom").get<double>()};
        else if (op == "brightness") t = Brightness{jt.at("delta").get<double>()};
        else throw Error(ErrorCode::MalformedDocument, "unknown transform op '" + op + "'");
        validate_transform(t);
        e.transforms.push_back(t);
      }
      plan.entries.push_back(std::move(e));
    }
    return plan;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::MalformedDocument, std::string("plan: ") + e.what());
  }
}

ExecuteResult execute_plan(const DatasetManifest& m, const AugmentPlan& plan, const std::filesystem::path& out_dir,
                           const AugmentOptions& opts, bool overwrite) {
  namespace fs = std::filesystem;
  std::set<std::string> plan_ids;
  for (const auto& e : plan.entries) {
    if (!plan_ids.insert(e.new_id).second) throw Error(ErrorCode::DuplicateId, "plan repeats id " + e.new_id);
    const ImageRecord* src = m.find(e.source_id);
    if (src == nullptr) throw Error(ErrorCode::UnknownImage, "plan source " + e.source_id + " not in manifest");
    if (src->augmented()) throw Error(ErrorCode::InvalidArgument, "plan source " + e.source_id + " is augmented");
    if (m.find(e.new_id) != nullptr && !overwrite) {
      throw Error(ErrorCode::DuplicateId, "image id " + e.new_id + " already exists in the manifest");
    }
  }

  // Entries are grouped by source so each source image is decoded once.
  std::map<std::string, std::vector<std::size_t>> by_source;
  for (std::size_t i = 0; i < plan.entries.size(); ++i) by_source[plan.entries[i].source_id].push_back(i);
  std::vector<const std::vector<std::size_t>*> groups;
  for (const auto& [id, idx] : by_source) groups.push_back(&idx);

  struct Output {
    std::optional<ImageRecord> record;
    AnnotationSet annotations;
    std::string error;
  };
  std::vector<Output> outputs(plan.entries.size());
  const fs::path base = fs::absolute(m.base_dir.empty() ? fs::current_path() : m.base_dir).lexically_normal();

  auto run_group = [&](const std::vector<std::size_t>& idx) {
    const ImageRecord& src = *m.find(plan.entries[idx.front()].source_id);
    RasterImage img;
    try {
      img = read_png(m.resolve_source(src));
    } catch (const std::exception& e) {
      for (std::size_t i : idx) outputs[i].error = plan.entries[i].new_id + ": " + e.what();
      return;
    }
    for (std::size_t i : idx) {
      const PlanEntry& e = plan.entries[i];
      try {
        Augmented out = apply_chain(img, m.truths_of(src.image_id), e.transforms, opts);
        const fs::path path = out_dir / (e.new_id + ".png");
        write_png(path, out.image);
        ImageRecord r{e.new_id, src.case_id, out.image.width(), out.image.height(),
                      fs::absolute(path).lexically_normal().lexically_relative(base).generic_string(), src.image_id};
        outputs[i].record = std::move(r);
        outputs[i].annotations = {e.new_id, std::move(out.truths)};
      } catch (const std::exception& ex) {
        outputs[i].error = e.new_id + ": " + ex.what();
      }
    }
  };

  const std::size_t workers = std::max(1u, std::min<unsigned>(std::thread::hardware_concurrency(), 8u));
  std::size_t next = 0;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < std::min(workers, groups.size()); ++w) {
    pool.emplace_back([&] {
      for (;;) {
        std::size_t g;
        {
          std::lock_guard lock(mu);
          if (next >= groups.size()) return;
          g = next++;
        }
        run_group(*groups[g]);
      }
    });
  }
  for (auto& t : pool) t.join();

  ExecuteResult result{m, {}};
  DatasetManifest& out = result.manifest;
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    Output& o = outputs[i];
    if (!o.record) {
      result.errors.push_back(std::move(o.error));
      continue;
    }
    const std::string id = o.record->image_id;
    auto existing = std::find_if(out.records.begin(), out.records.end(),
                                 [&](const ImageRecord& r) { return r.image_id == id; });
    if (existing != out.records.end()) {
      *existing = std::move(*o.record);
    } else {
      out.records.push_back(std::move(*o.record));
    }
    out.annotations[id] = std::move(o.annotations);
    if (auto parent = out.split.find(plan.entries[i].source_id); parent != out.split.end()) {
      out.split[id] = parent->second;
    }
  }
  return result;
}

}  // namespace ki67
