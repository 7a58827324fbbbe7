#include <random>

#include <benchmark/benchmark.h>

#include "ki67/augment.hpp"
#include "ki67/eval.hpp"
#include "ki67/geometry.hpp"
#include "ki67/raster.hpp"

using namespace ki67;

namespace {

std::vector<Detection> crowd(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> pos(0, 620), side(6, 20), conf(0, 1);
  std::vector<Detection> out(n);
  for (auto& d : out) {
    const double x = pos(gen), y = pos(gen);
    d = {{x, y, x + side(gen), y + side(gen)}, gen() % 2 ? CellClass::Ki67Negative : CellClass::Ki67Positive, conf(gen)};
  }
  return out;
}

void BM_Iou(benchmark::State& state) {
  const auto d = crowd(1024, 1);
  std::size_t i = 0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(iou(d[i & 1023].box, d[(i + 1) & 1023].box));
    ++i;
  }
}
BENCHMARK(BM_Iou);

// A 640x640 hotspot typically holds a few hundred cells.
void BM_Nms(benchmark::State& state) {
  const auto d = crowd(static_cast<std::size_t>(state.range(0)), 2);
  for (auto _ : state) benchmark::DoNotOptimize(nms(d, kDefaultNmsThreshold));
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_Nms)->RangeMultiplier(2)->Range(64, 2048)->Complexity();

void BM_MatchImage(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto dets = crowd(n, 3);
  std::vector<GroundTruth> truths;
  for (const auto& d : crowd(n, 4)) truths.push_back({d.box, d.cls});
  for (auto _ : state) benchmark::DoNotOptimize(match_image(dets, truths));
}
BENCHMARK(BM_MatchImage)->RangeMultiplier(4)->Range(64, 1024);

void BM_EvaluateRun(benchmark::State& state) {
  DatasetManifest m;
  std::map<std::string, std::vector<Detection>> preds;
  std::vector<std::string> ids;
  for (int i = 0; i < 50; ++i) {
    const auto id = "img" + std::to_string(i);
    ids.push_back(id);
    m.records.push_back({id, "c", 640, 640, id + ".png", std::nullopt});
    for (const auto& d : crowd(200, 10 + i)) m.annotations[id].truths.push_back({d.box, d.cls});
    preds[id] = crowd(220, 100 + i);
  }
  for (auto _ : state) benchmark::DoNotOptimize(evaluate_run("bench", preds, m, ids));
}
BENCHMARK(BM_EvaluateRun)->Unit(benchmark::kMillisecond);

void BM_Rot90(benchmark::State& state) {
  const RasterImage img(640, 640, {120, 80, 200});
  const std::vector<GroundTruth> truths;
  for (auto _ : state) benchmark::DoNotOptimize(apply_transform(img, truths, Rot90CW{}));
}
BENCHMARK(BM_Rot90)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
