#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ki67/reporting.hpp"
#include "oracles.hpp"

using namespace ki67;

namespace {

constexpr auto P = CellClass::Ki67Positive;
constexpr auto N = CellClass::Ki67Negative;

std::size_t diff_pixels(const RasterImage& a, const RasterImage& b) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.pixels().size(); ++i) n += a.pixels()[i] != b.pixels()[i];
  return n;
}

CaseScore sample_score() {
  ScoringConfig cfg;
  cfg.min_conf = 0.25;
  const std::vector<HotspotScore> h{{"case01_h1", 80, 20, 80.0}, {"case01_h2", 40, 60, 40.0}};
  auto s = score_case("case01", h, cfg);
  s.excluded_images = {"case01_h3"};
  return s;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("pixel_rect") {
  const auto r = pixel_rect({1.5, 2, 4.2, 6}, 10, 10);
  REQUIRE(r);
  CHECK(r->x0 == 1);
  CHECK(r->x1 == 4);
  CHECK(r->y0 == 2);
  CHECK(r->y1 == 5);
  CHECK(!pixel_rect({20, 20, 30, 30}, 10, 10));
  CHECK(pixel_rect({5, 5, 30, 30}, 10, 10)->x1 == 9);
}

TEST_CASE("overlay with no detections is a no-op") {
  std::mt19937_64 gen(1);
  const auto img = oracle::random_image(30, 20, gen);
  CHECK(render_overlay(img, std::vector<Detection>{}) == img);
}

TEST_CASE("one positive box changes exactly its stroke ring") {
  const RasterImage img(40, 40, {10, 20, 30});
  for (int stroke : {1, 2, 3}) {
    for (auto [w, h] : {std::pair{10, 10}, std::pair{7, 12}, std::pair{3, 3}, std::pair{1, 5}}) {
      OverlayStyle style;
      style.stroke = stroke;
      const std::vector<Detection> d{{{5, 6, 5.0 + w, 6.0 + h}, P, 0.9}};
      const auto out = render_overlay(img, d, style);
      const std::size_t ring = static_cast<std::size_t>(w * h - std::max(0, w - 2 * stroke) * std::max(0, h - 2 * stroke));
      REQUIRE(diff_pixels(img, out) == ring);
      for (int y = 0; y < 40; ++y) {
        for (int x = 0; x < 40; ++x) {
          const bool inside = x >= 5 && x < 5 + w && y >= 6 && y < 6 + h;
          const bool on_ring = inside && (x < 5 + stroke || x >= 5 + w - stroke || y < 6 + stroke || y >= 6 + h - stroke);
          REQUIRE(out.at(x, y) == (on_ring ? Rgb{255, 0, 0} : img.at(x, y)));
        }
      }
    }
  }
}

TEST_CASE("later boxes paint over earlier ones") {
  const RasterImage img(30, 30);
  const Detection pos{{2, 2, 12, 12}, P, 0.9}, neg{{2, 2, 12, 12}, N, 0.8};
  const std::vector<Detection> pos_then_neg{pos, neg}, neg_then_pos{neg, pos};
  CHECK(render_overlay(img, pos_then_neg).at(2, 2) == Rgb{0, 255, 0});
  CHECK(render_overlay(img, neg_then_pos).at(2, 2) == Rgb{255, 0, 0});
}

TEST_CASE("overlay determinism, idempotence, clipping, labels") {
  std::mt19937_64 gen(2);
  const auto img = oracle::random_image(64, 64, gen);
  std::vector<Detection> disjoint;
  for (int i = 0; i < 9; ++i) {
    const double x = (i % 3) * 20.0 + 2, y = (i / 3) * 20.0 + 2;
    disjoint.push_back({{x, y, x + 12, y + 10}, i % 2 ? N : P, 0.5});
  }
  const auto once = render_overlay(img, disjoint);
  CHECK(render_overlay(img, disjoint) == once);
  CHECK(render_overlay(once, disjoint) == once);

  std::vector<std::string> warnings;
  const std::vector<Detection> outside{{{50, 50, 70, 70}, P, 0.5}};
  const auto clipped = render_overlay(img, outside, {}, &warnings);
  CHECK(warnings.size() == 1);
  // The box is clamped to the frame, so its stroke runs along the frame edge.
  CHECK(clipped.at(63, 57) == Rgb{255, 0, 0});
  CHECK(clipped.at(56, 56) == img.at(56, 56));
  CHECK(diff_pixels(img, clipped) == 14 * 14 - 10 * 10);

  OverlayStyle labelled;
  labelled.show_confidence = true;
  const std::vector<Detection> single{{{20, 20, 40, 40}, P, 0.87}};
  CHECK(diff_pixels(img, render_overlay(img, single, labelled)) > diff_pixels(img, render_overlay(img, single)));
}

TEST_CASE("case score json round trip") {
  const auto s = sample_score();
  CHECK(case_score_from_json(case_score_to_json(s)) == s);
  CHECK(case_score_from_json(nlohmann::json::parse(case_score_document(s))) == s);

  std::mt19937_64 gen(6);
  for (int i = 0; i < 100; ++i) {
    std::vector<HotspotScore> h;
    for (int k = 0; k < 1 + static_cast<int>(gen() % 6); ++k) {
      const long long p = gen() % 300, q = 1 + gen() % 300;
      h.push_back({"h" + std::to_string(k), p, q, ki67_index(p, q)});
    }
    ScoringConfig cfg{(gen() % 100) / 99.0, 0.3, gen() % 2 ? Aggregation::Pooled : Aggregation::MeanOfHotspots};
    const auto c = score_case("c" + std::to_string(i), h, cfg);
    REQUIRE(case_score_from_json(nlohmann::json::parse(case_score_document(c))) == c);
  }
}

TEST_CASE("case report golden file and text") {
  const auto s = sample_score();
  const auto report = emit_case_report(s);
  const auto golden = std::filesystem::path(KI67_GOLDEN_DIR) / "case_score.json";
  if (std::getenv("KI67_UPDATE_GOLDEN")) std::ofstream(golden, std::ios::binary) << report.json;
  CHECK(report.json == read_file(golden));
  CHECK(report.json == case_score_document(s));

  const auto doc = nlohmann::json::parse(report.json);
  CHECK(!doc.contains("evaluation"));
  CHECK(doc["config"]["min_conf"] == 0.25);
  CHECK(report.text.find("Band: High\n") != std::string::npos);
  CHECK(report.text.find("Adequate: false") != std::string::npos);
  CHECK(report.text.find("Evaluation") == std::string::npos);

  EvaluationReport ev;
  ev.run_label = "perfect";
  ev.map50 = 1.0;
  const auto with_eval = emit_case_report(s, ev);
  CHECK(nlohmann::json::parse(with_eval.json)["evaluation"]["run"] == "perfect");
  CHECK(with_eval.text.find("perfect") != std::string::npos);
}
