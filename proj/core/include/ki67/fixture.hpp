#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "ki67/geometry.hpp"

namespace ki67 {

struct FixtureOptions {
  std::uint64_t seed = 67;
  int cases = 2;
  int images_per_case = 6;
  int size = 640;
};

struct FixtureSummary {
  std::filesystem::path root;
  std::vector<std::string> image_ids;
  std::map<std::string, std::vector<GroundTruth>> truths;
  std::size_t positives = 0;
  std::size_t negatives = 0;
};

/// Writes a small synthetic IHC-like dataset with exactly known cells:
///
///   images/<case>/<image>.png      RGB, `size` x `size`
///   annotations/<image>.json       rectangle annotations
///   predictions/perfect.jsonl      every truth, exact box
///   predictions/drop20.jsonl       perfect minus exactly 20% of each class per image
///   predictions/noisy.jsonl        jittered boxes, NMS-able duplicates, false positives
///   manifest.json                  ingested manifest, no split
///
/// Cells sit in a grid of non-overlapping slots, so no two truths overlap.
/// Per-image class counts are multiples of 5.
FixtureSummary generate_fixture(const std::filesystem::path& out_dir, const FixtureOptions& opts = {});

}  // namespace ki67
