#include <doctest.h>

#include <random>

#include "ki67/error.hpp"
#include "ki67/geometry.hpp"
#include "oracles.hpp"

using namespace ki67;

namespace {

Detection det(double x0, double y0, double x1, double y1, double conf, CellClass c = CellClass::Ki67Positive) {
  return {BoundingBox::make(x0, y0, x1, y1), c, conf};
}

std::vector<Detection> random_detections(std::mt19937_64& gen, std::size_t max_n) {
  std::uniform_int_distribution<std::size_t> count(0, max_n);
  std::uniform_int_distribution<int> cls(0, 1), conf(0, 20);
  std::vector<Detection> out(count(gen));
  for (auto& d : out) {
    // Small frame so overlaps are common; coarse confidences so ties happen.
    d = {oracle::random_box(gen, 40, 40, 20), *class_from_code(cls(gen)), conf(gen) / 20.0};
  }
  return out;
}

}  // namespace

TEST_CASE("bounding box invariants are enforced") {
  CHECK_THROWS_AS(BoundingBox::make(5, 5, 5, 10), Error);
  CHECK_THROWS_AS(BoundingBox::make(-1, 0, 5, 5), Error);
  CHECK_THROWS_AS(BoundingBox::make(0, 0, std::nan(""), 5), Error);
  try {
    BoundingBox::make(3, 0, 1, 5);
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::DegenerateBox);
  }
  const auto b = BoundingBox::from_corners(30, 40, 10, 20);
  CHECK(b == BoundingBox{10, 20, 30, 40});
}

TEST_CASE("class codes are stable") {
  CHECK(class_code(CellClass::Ki67Positive) == 0);
  CHECK(class_code(CellClass::Ki67Negative) == 1);
  CHECK(class_from_code(2) == std::nullopt);
  CHECK(class_from_name(class_name(CellClass::Ki67Negative)) == CellClass::Ki67Negative);
}

TEST_CASE("iou examples") {
  const BoundingBox b{3, 4, 17, 9};
  CHECK(iou(b, b) == 1.0);
  CHECK(iou({0, 0, 10, 10}, {20, 20, 30, 30}) == 0.0);
  // Edge-sharing boxes have zero intersection area.
  CHECK(iou({0, 0, 10, 10}, {10, 0, 20, 10}) == 0.0);

  const BoundingBox a{0, 0, 2, 2}, c{1, 1, 3, 3};
  const double by_grid = oracle::grid_iou(a, c, 64);
  CHECK(by_grid == doctest::Approx(1.0 / 7.0).epsilon(1e-12));
  CHECK(iou(a, c) == doctest::Approx(by_grid).epsilon(1e-12));
  CHECK(iou(a, c) == doctest::Approx(0.142857).epsilon(1e-6));
}

TEST_CASE("iou properties over random boxes") {
  std::mt19937_64 gen(11);
  for (int i = 0; i < 2000; ++i) {
    const auto a = oracle::random_box(gen, 64, 64), b = oracle::random_box(gen, 64, 64);
    const double v = iou(a, b);
    REQUIRE(v == iou(b, a));
    REQUIRE(v >= 0.0);
    REQUIRE(v <= 1.0);
    REQUIRE(iou(a, a) == 1.0);
  }
  // Grid oracle on boxes aligned to the 1/8 grid is exact at 8 steps per pixel.
  for (int i = 0; i < 50; ++i) {
    const auto a = oracle::random_box(gen, 16, 16), b = oracle::random_box(gen, 16, 16);
    CHECK(iou(a, b) == doctest::Approx(oracle::grid_iou(a, b, 8)).epsilon(1e-12));
  }
}

TEST_CASE("filter_confidence") {
  const auto hi = det(0, 0, 1, 1, 0.9), lo = det(0, 0, 1, 1, 0.2);
  std::vector<Detection> in{hi, lo};
  CHECK(filter_confidence(in, 0.5) == std::vector<Detection>{hi});
  CHECK(filter_confidence(in, 0.0) == in);
  const std::vector<Detection> boundary{det(0, 0, 1, 1, 0.5)};
  CHECK(filter_confidence(boundary, 0.5) == boundary);
  CHECK(filter_confidence(std::vector<Detection>{lo, hi, lo}, 0.1) == std::vector<Detection>{lo, hi, lo});
}

TEST_CASE("nms examples") {
  CHECK(nms(std::vector<Detection>{}, 0.3).empty());
  const auto single = det(1, 1, 5, 5, 0.4);
  CHECK(nms(std::vector<Detection>{single}, 0.3) == std::vector<Detection>{single});

  const auto a = det(10, 10, 20, 20, 0.8), b = det(10, 10, 20, 20, 0.9);
  const std::vector<Detection> dup{a, b};
  CHECK(nms(dup, 0.3) == std::vector<Detection>{b});
  CHECK(oracle::brute_force_nms(dup, 0.3, true) == std::vector<Detection>{b});

  const auto p = det(0, 0, 2, 2, 0.9), q = det(1, 1, 3, 3, 0.8);
  CHECK(nms(std::vector<Detection>{q, p}, 0.3) == std::vector<Detection>{p, q});

  // Cross-class overlap survives class-aware NMS only.
  const auto neg = det(10, 10, 20, 20, 0.7, CellClass::Ki67Negative);
  CHECK(nms(std::vector<Detection>{b, neg}, 0.3, true).size() == 2);
  CHECK(nms(std::vector<Detection>{b, neg}, 0.3, false) == std::vector<Detection>{b});
}

TEST_CASE("nms ties are broken by x_min, y_min, class") {
  const auto right = det(5, 0, 9, 4, 0.5), left = det(4, 0, 8, 4, 0.5);
  CHECK(nms(std::vector<Detection>{right, left}, 0.3) == std::vector<Detection>{left});
  const auto low = det(4, 1, 8, 5, 0.5);
  CHECK(nms(std::vector<Detection>{low, left}, 0.3) == std::vector<Detection>{left});
  const auto pos = det(4, 0, 8, 4, 0.5, CellClass::Ki67Positive), neg = det(4, 0, 8, 4, 0.5, CellClass::Ki67Negative);
  CHECK(nms(std::vector<Detection>{neg, pos}, 0.3, false) == std::vector<Detection>{pos});
}

TEST_CASE("nms properties") {
  std::mt19937_64 gen(2024);
  for (int i = 0; i < 400; ++i) {
    const auto in = random_detections(gen, 8);
    for (double t : {0.0, 0.3, 0.5}) {
      const auto kept = nms(in, t);
      for (const auto& k : kept) REQUIRE(std::find(in.begin(), in.end(), k) != in.end());
      for (std::size_t x = 0; x < kept.size(); ++x) {
        for (std::size_t y = x + 1; y < kept.size(); ++y) {
          if (kept[x].cls == kept[y].cls) REQUIRE(iou(kept[x].box, kept[y].box) <= t);
        }
        if (x + 1 < kept.size()) REQUIRE(!nms_precedes(kept[x + 1], kept[x]));
      }
      REQUIRE(nms(kept, t) == kept);
      REQUIRE(kept == oracle::brute_force_nms(in, t, true));
      REQUIRE(nms(in, t, false) == oracle::brute_force_nms(in, t, false));
    }
  }
}
