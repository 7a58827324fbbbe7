#include "ki67/fixture.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include <nlohmann/json.hpp>

#include "ki67/dataset.hpp"
#include "ki67/detector.hpp"
#include "ki67/error.hpp"
#include "ki67/raster.hpp"
#include "ki67/rng.hpp"

namespace ki67 {

using nlohmann::json;

namespace {

constexpr int kGrid = 10;

void fill_ellipse(RasterImage& img, const BoundingBox& b, Rgb color) {
  const double cx = (b.x_min + b.x_max) / 2, cy = (b.y_min + b.y_max) / 2;
  const double rx = b.width() / 2, ry = b.height() / 2;
  for (int y = static_cast<int>(b.y_min); y < static_cast<int>(b.y_max); ++y) {
    for (int x = static_cast<int>(b.x_min); x < static_cast<int>(b.x_max); ++x) {
      const double dx = (x + 0.5 - cx) / rx, dy = (y + 0.5 - cy) / ry;
      if (dx * dx + dy * dy <= 1.0) img.at(x, y) = color;
    }
  }
}

std::uint8_t jitter(std::uint8_t v, Rng& rng, int amp) {
  const int d = static_cast<int>(rng.below(2 * amp + 1)) - amp;
  return static_cast<std::uint8_t>(std::clamp(v + d, 0, 255));
}

void write_text(const std::filesystem::path& p, const std::string& text) {
  std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::trunc);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + p.string());
  out << text;
}

}  // namespace

FixtureSummary generate_fixture(const std::filesystem::path& out_dir, const FixtureOptions& opts) {
  namespace fs = std::filesystem;
  if (opts.size < 2 * kGrid * 8) throw Error(ErrorCode::InvalidArgument, "fixture images must be at least 160 px");
  Rng rng(opts.seed);
  FixtureSummary summary;
  summary.root = out_dir;

  std::string perfect, drop20, noisy;
  const int slot = opts.size / kGrid;

  for (int c = 0; c < opts.cases; ++c) {
    char case_id[32];
    std::snprintf(case_id, sizeof case_id, "case%02d", c + 1);
    // Odd cases are sparse and mostly negative, even cases dense and mostly positive.
    const bool proliferative = c % 2 == 1;
    for (int h = 0; h < opts.images_per_case; ++h) {
      char image_id[48];
      std::snprintf(image_id, sizeof image_id, "%s_h%d", case_id, h + 1);
      const int n_pos = proliferative ? 70 + 5 * static_cast<int>(rng.below(3)) : 5 + 5 * static_cast<int>(rng.below(2));
      const int n_neg = proliferative ? 15 + 5 * static_cast<int>(rng.below(2)) : 45 + 5 * static_cast<int>(rng.below(3));

      std::vector<int> slots(kGrid * kGrid);
      for (int i = 0; i < kGrid * kGrid; ++i) slots[i] = i;
      shuffle(slots, rng);

      RasterImage img(opts.size, opts.size);
      for (int y = 0; y < opts.size; ++y) {
        for (int x = 0; x < opts.size; ++x) img.at(x, y) = {jitter(226, rng, 6), jitter(222, rng, 6), jitter(232, rng, 6)};
      }

      std::vector<GroundTruth> truths;
      for (int k = 0; k < n_pos + n_neg; ++k) {
        const int sx = slots[k] % kGrid, sy = slots[k] / kGrid;
        const int w = 16 + static_cast<int>(rng.below(static_cast<std::uint64_t>(slot - 24)));
        const int hgt = 16 + static_cast<int>(rng.below(static_cast<std::uint64_t>(slot - 24)));
        const int x0 = sx * slot + 2 + static_cast<int>(rng.below(static_cast<std::uint64_t>(slot - w - 3)));
        const int y0 = sy * slot + 2 + static_cast<int>(rng.below(static_cast<std::uint64_t>(slot - hgt - 3)));
        const CellClass cls = k < n_pos ? CellClass::Ki67Positive : CellClass::Ki67Negative;
        const BoundingBox box{double(x0), double(y0), double(x0 + w), double(y0 + hgt)};
        fill_ellipse(img, box,
                     cls == CellClass::Ki67Positive ? Rgb{jitter(135, rng, 10), jitter(85, rng, 8), jitter(45, rng, 8)}
                                                    : Rgb{jitter(95, rng, 8), jitter(115, rng, 8), jitter(185, rng, 10)});
        truths.push_back({box, cls});
      }

      const fs::path png = out_dir / "images" / case_id / (std::string(image_id) + ".png");
      write_png(png, img);

      json shapes = json::array();
      for (const auto& t : truths) {
        shapes.push_back({{"label", class_name(t.cls)},
                          {"shape_type", "rectangle"},
                          {"points", {{t.box.x_min, t.box.y_min}, {t.box.x_max, t.box.y_max}}}});
      }
      json doc = {{"imagePath", std::string(image_id) + ".png"},
                  {"imageWidth", opts.size},
                  {"imageHeight", opts.size},
                  {"shapes", std::move(shapes)}};
      write_text(out_dir / "annotations" / (std::string(image_id) + ".json"), doc.dump(2) + "\n");

      // Predictions. Dropped truths: the first fifth of each class in a shuffled order.
      std::vector<std::size_t> pos_idx, neg_idx;
      for (std::size_t i = 0; i < truths.size(); ++i) {
        (truths[i].cls == CellClass::Ki67Positive ? pos_idx : neg_idx).push_back(i);
      }
      shuffle(pos_idx, rng);
      shuffle(neg_idx, rng);
      std::vector<bool> dropped(truths.size(), false);
      for (std::size_t i = 0; i < pos_idx.size() / 5; ++i) dropped[pos_idx[i]] = true;
      for (std::size_t i = 0; i < neg_idx.size() / 5; ++i) dropped[neg_idx[i]] = true;

      for (std::size_t i = 0; i < truths.size(); ++i) {
        const auto& t = truths[i];
        const double conf = std::round(rng.uniform(0.5, 0.99) * 1e4) / 1e4;
        const std::string line = prediction_to_jsonl({image_id, t.box, t.cls, conf}) + "\n";
        perfect += line;
        if (!dropped[i]) drop20 += line;

        // Noisy: 1 px jitter, a weaker duplicate shifted by 2 px, 5% class flips.
        const double dx = static_cast<double>(rng.below(3)) - 1.0, dy = static_cast<double>(rng.below(3)) - 1.0;
        const BoundingBox j{std::max(0.0, t.box.x_min + dx), std::max(0.0, t.box.y_min + dy), t.box.x_max + dx,
                            t.box.y_max + dy};
        const CellClass cls = rng.below(20) == 0 ? other_class(t.cls) : t.cls;
        noisy += prediction_to_jsonl({image_id, j, cls, conf}) + "\n";
        if (rng.below(3) == 0) {
          const double off = j.x_max + 2 <= opts.size && j.y_max + 2 <= opts.size ? 2.0 : -2.0;
          const BoundingBox dup{j.x_min + off, j.y_min + off, j.x_max + off, j.y_max + off};
          noisy += prediction_to_jsonl({image_id, dup, cls, std::round(conf * 0.8 * 1e4) / 1e4}) + "\n";
        }
      }
      // A few false positives in empty slots.
      for (int k = n_pos + n_neg; k < std::min(n_pos + n_neg + 3, kGrid * kGrid); ++k) {
        const int sx = slots[k] % kGrid, sy = slots[k] / kGrid;
        const BoundingBox fp{double(sx * slot + 10), double(sy * slot + 10), double(sx * slot + 34),
                             double(sy * slot + 34)};
        noisy += prediction_to_jsonl({image_id, fp, k % 2 ? CellClass::Ki67Negative : CellClass::Ki67Positive,
                                      std::round(rng.uniform(0.05, 0.6) * 1e4) / 1e4}) +
                 "\n";
      }

      for (const auto& t : truths) (t.cls == CellClass::Ki67Positive ? summary.positives : summary.negatives) += 1;
      summary.image_ids.push_back(image_id);
      summary.truths.emplace(image_id, std::move(truths));
    }
  }

  write_text(out_dir / "predictions" / "perfect.jsonl", perfect);
  write_text(out_dir / "predictions" / "drop20.jsonl", drop20);
  write_text(out_dir / "predictions" / "noisy.jsonl", noisy);

  IngestResult ingest = ingest_directory(out_dir / "images", out_dir / "annotations", AnnotationFormat::RectJson, out_dir);
  save_manifest(out_dir / "manifest.json", ingest.manifest);
  return summary;
}

}  // namespace ki67
