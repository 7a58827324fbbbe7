#include <doctest.h>

#include <numeric>
#include <random>
#include <set>

#include <nlohmann/json.hpp>

#include "ki67/error.hpp"
#include "ki67/eval.hpp"
#include "oracles.hpp"

using namespace ki67;

namespace {

constexpr auto P = CellClass::Ki67Positive;
constexpr auto N = CellClass::Ki67Negative;

Detection det(BoundingBox b, double conf, CellClass c = P) { return {b, c, conf}; }

// Truths on a 6x6 lattice of 10 px cells spaced 20 px apart: distinct truths
// never touch, so no box can reach IoU 0.5 with two of them.
std::vector<GroundTruth> lattice_truths(std::mt19937_64& gen, int n) {
  std::vector<int> slots(36);
  std::iota(slots.begin(), slots.end(), 0);
  std::shuffle(slots.begin(), slots.end(), gen);
  std::vector<GroundTruth> out;
  for (int i = 0; i < n; ++i) {
    const double x = (slots[i] % 6) * 20.0, y = (slots[i] / 6) * 20.0;
    out.push_back({{x, y, x + 10, y + 10}, gen() % 2 ? N : P});
  }
  return out;
}

std::vector<Detection> jittered(std::mt19937_64& gen, const std::vector<GroundTruth>& truths, int n) {
  std::uniform_int_distribution<int> pick(0, std::max<int>(0, truths.size() - 1)), j(-4, 4), conf(1, 10);
  std::vector<Detection> out;
  for (int i = 0; i < n; ++i) {
    BoundingBox b = truths.empty() ? BoundingBox{0, 0, 10, 10} : truths[pick(gen)].box;
    b.x_min += j(gen), b.x_max += j(gen), b.y_min += j(gen), b.y_max += j(gen);
    if (b.x_max <= b.x_min) b.x_max = b.x_min + 1;
    if (b.y_max <= b.y_min) b.y_max = b.y_min + 1;
    out.push_back({b, gen() % 2 ? N : P, conf(gen) / 10.0});
  }
  return out;
}

std::vector<std::pair<double, bool>> hits_of(std::span<const MatchOutcome> outs, CellClass c) {
  std::vector<std::pair<double, bool>> h;
  for (const auto& o : outs) {
    for (const auto& d : o.of(c).detections) h.emplace_back(d.det.confidence, d.truth_index.has_value());
  }
  return h;
}

DatasetManifest manifest_with(const std::map<std::string, std::vector<GroundTruth>>& truths) {
  DatasetManifest m;
  for (const auto& [id, t] : truths) {
    m.records.push_back({id, "c", 200, 200, id + ".png", std::nullopt});
    m.annotations[id] = {id, t};
  }
  return m;
}

}  // namespace

TEST_CASE("match_image examples") {
  const std::vector<GroundTruth> one{{{10, 10, 20, 20}, P}};
  auto o = match_image(std::vector<Detection>{det({10, 10, 20, 20}, 0.7)}, one);
  CHECK(o.of(P).tp == 1);
  CHECK(o.of(P).fp == 0);
  CHECK(o.of(P).fn == 0);

  const std::vector<Detection> two{det({11, 10, 21, 20}, 0.8), det({10, 10, 20, 20}, 0.9)};
  o = match_image(two, one);
  CHECK(o.of(P).tp == 1);
  CHECK(o.of(P).fp == 1);
  CHECK(o.of(P).fn == 0);
  CHECK(o.of(P).detections[0].det.confidence == 0.9);
  CHECK(o.of(P).detections[0].truth_index == 0u);
  CHECK(oracle::max_matching_tp(two, one, 0.5) == 1);

  o = match_image(std::vector<Detection>{det({10, 10, 20, 20}, 0.9, P)}, std::vector<GroundTruth>{{{10, 10, 20, 20}, N}});
  CHECK(o.of(P).fp == 1);
  CHECK(o.of(N).fn == 1);
  CHECK(o.of(P).tp + o.of(N).tp == 0);

  // Below threshold is a miss; exactly at threshold is a hit.
  const std::vector<GroundTruth> g{{{0, 0, 10, 10}, P}};
  CHECK(match_image(std::vector<Detection>{det({0, 0, 20, 10}, 0.5)}, g).of(P).tp == 1);
  CHECK(match_image(std::vector<Detection>{det({0, 0, 20.5, 10}, 0.5)}, g).of(P).tp == 0);
}

TEST_CASE("match_image picks the highest-IoU truth, lowest index on ties") {
  const std::vector<GroundTruth> truths{{{0, 0, 10, 10}, P}, {{2, 0, 12, 10}, P}, {{1, 0, 11, 10}, P}};
  auto o = match_image(std::vector<Detection>{det({2, 0, 12, 10}, 0.9)}, truths);
  CHECK(o.of(P).detections[0].truth_index == 1u);
  const std::vector<GroundTruth> twins{{{0, 0, 10, 10}, N}, {{0, 0, 10, 10}, N}};
  o = match_image(std::vector<Detection>{det({0, 0, 10, 10}, 0.9, N)}, twins);
  CHECK(o.of(N).detections[0].truth_index == 0u);
}

TEST_CASE("greedy matching is TP-optimal when truths are separated") {
  std::mt19937_64 gen(606);
  for (int i = 0; i < 1500; ++i) {
    const auto truths = lattice_truths(gen, static_cast<int>(gen() % 7));
    const auto dets = jittered(gen, truths, static_cast<int>(gen() % 7));
    const auto o = match_image(dets, truths);
    const std::size_t tp = o.of(P).tp + o.of(N).tp;
    REQUIRE(tp == oracle::max_matching_tp(dets, truths, 0.5));
  }
}

TEST_CASE("greedy matching is not TP-optimal for overlapping truths") {
  // The first detection takes A (IoU 0.9 beats 0.6 with B); the second can only reach A.
  const std::vector<GroundTruth> truths{{{0, 10, 10, 20}, P}, {{0, 10, 10, 25}, P}};
  const BoundingBox d1{0, 10, 10, 21};
  REQUIRE(iou(d1, truths[0].box) > iou(d1, truths[1].box));
  REQUIRE(iou(d1, truths[1].box) >= 0.5);
  const BoundingBox d2{0, 6, 10, 18};
  REQUIRE(iou(d2, truths[0].box) >= 0.5);
  REQUIRE(iou(d2, truths[1].box) < 0.5);
  const std::vector<Detection> dets{det(d1, 0.9), det(d2, 0.8)};
  CHECK(match_image(dets, truths).of(P).tp == 1);
  CHECK(oracle::max_matching_tp(dets, truths, 0.5) == 2);
}

TEST_CASE("conservation") {
  std::mt19937_64 gen(1);
  for (int i = 0; i < 1000; ++i) {
    std::vector<GroundTruth> truths;
    std::vector<Detection> dets;
    const int nt = gen() % 9, nd = gen() % 12;
    for (int k = 0; k < nt; ++k) truths.push_back({oracle::random_box(gen, 50, 50, 20), gen() % 2 ? N : P});
    for (int k = 0; k < nd; ++k) dets.push_back({oracle::random_box(gen, 50, 50, 20), gen() % 2 ? N : P, (gen() % 5) / 4.0});
    const auto o = match_image(dets, truths, 0.3);
    for (auto c : kAllClasses) {
      const auto& cm = o.of(c);
      const auto n_t = std::count_if(truths.begin(), truths.end(), [&](auto& t) { return t.cls == c; });
      const auto n_d = std::count_if(dets.begin(), dets.end(), [&](auto& d) { return d.cls == c; });
      REQUIRE(cm.tp + cm.fn == static_cast<std::size_t>(n_t));
      REQUIRE(cm.tp + cm.fp == static_cast<std::size_t>(n_d));
      REQUIRE(cm.truths == static_cast<std::size_t>(n_t));
      std::set<std::size_t> used;
      for (const auto& md : cm.detections) {
        if (!md.truth_index) continue;
        REQUIRE(used.insert(*md.truth_index).second);
        REQUIRE(truths[*md.truth_index].cls == c);
        REQUIRE(iou(md.det.box, truths[*md.truth_index].box) >= 0.3);
      }
    }
  }
}

TEST_CASE("pr curve and AP examples") {
  // TP, FP, TP by descending confidence over two truths.
  const std::vector<GroundTruth> truths{{{0, 0, 10, 10}, P}, {{50, 50, 60, 60}, P}};
  const std::vector<Detection> dets{det({0, 0, 10, 10}, 0.9), det({100, 100, 110, 110}, 0.8), det({50, 50, 60, 60}, 0.7)};
  const std::vector<MatchOutcome> outs{match_image(dets, truths)};
  const auto curve = pr_curve(outs, P);
  REQUIRE(curve.size() == 3);
  CHECK(curve[0].precision == 1.0);
  CHECK(curve[0].recall == 0.5);
  CHECK(curve[1].precision == 0.5);
  CHECK(curve[1].recall == 0.5);
  CHECK(curve[2].precision == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(curve[2].recall == 1.0);
  CHECK(average_precision(curve) == doctest::Approx(5.0 / 6.0).epsilon(1e-12));
  CHECK(std::abs(oracle::naive_ap(hits_of(outs, P), 2) - 5.0 / 6.0) < 1e-12);

  CHECK(average_precision(std::vector<PRPoint>{}) == 0.0);
  CHECK_THROWS_AS(pr_curve(outs, N), Error);

  const std::vector<MatchOutcome> silent{match_image(std::vector<Detection>{}, truths)};
  CHECK(pr_curve(silent, P).empty());

  const std::vector<MatchOutcome> perfect{match_image(std::vector<Detection>{det({0, 0, 10, 10}, 0.6), det({50, 50, 60, 60}, 0.3)}, truths)};
  const auto pc = pr_curve(perfect, P);
  for (const auto& p : pc) CHECK(p.precision == 1.0);
  CHECK(pc.back().recall == 1.0);
  CHECK(average_precision(pc) == 1.0);
}

TEST_CASE("confidence ties are one curve point") {
  const std::vector<GroundTruth> truths{{{0, 0, 10, 10}, P}, {{50, 50, 60, 60}, P}};
  const std::vector<Detection> dets{det({0, 0, 10, 10}, 0.5), det({100, 100, 110, 110}, 0.5)};
  const std::vector<MatchOutcome> outs{match_image(dets, truths)};
  const auto curve = pr_curve(outs, P);
  REQUIRE(curve.size() == 1);
  CHECK(curve[0] == PRPoint{0.5, 0.5, 0.5});
  CHECK(average_precision(curve) == 0.25);
}

TEST_CASE("AP agrees with the naive oracle on random instances") {
  std::mt19937_64 gen(500);
  for (int i = 0; i < 500; ++i) {
    std::vector<MatchOutcome> outs;
    for (int img = 0; img < 3; ++img) {
      const auto truths = lattice_truths(gen, 1 + static_cast<int>(gen() % 6));
      outs.push_back(match_image(jittered(gen, truths, static_cast<int>(gen() % 9)), truths));
    }
    for (auto c : kAllClasses) {
      std::size_t total = 0;
      for (const auto& o : outs) total += o.of(c).truths;
      if (total == 0) continue;
      const auto curve = pr_curve(outs, c);
      const double ap = average_precision(curve);
      REQUIRE(std::abs(ap - oracle::naive_ap(hits_of(outs, c), total)) < 1e-9);
      REQUIRE(ap >= 0.0);
      REQUIRE(ap <= 1.0);
      for (std::size_t k = 1; k < curve.size(); ++k) {
        REQUIRE(curve[k].recall >= curve[k - 1].recall);
        REQUIRE(curve[k].threshold < curve[k - 1].threshold);
      }
    }
  }
}

TEST_CASE("duplicating detections never increases AP; order does not matter") {
  std::mt19937_64 gen(321);
  for (int i = 0; i < 300; ++i) {
    const auto truths = lattice_truths(gen, 1 + static_cast<int>(gen() % 6));
    auto dets = jittered(gen, truths, static_cast<int>(gen() % 7));
    for (std::size_t k = 0; k < dets.size(); ++k) dets[k].confidence = (k + 1) / 10.0;  // distinct
    auto dup = dets;
    dup.insert(dup.end(), dets.begin(), dets.end());
    for (auto c : kAllClasses) {
      const std::vector<MatchOutcome> base{match_image(dets, truths)};
      if (base[0].of(c).truths == 0) continue;
      const std::vector<MatchOutcome> twice{match_image(dup, truths)};
      const double ap = average_precision(pr_curve(base, c));
      REQUIRE(average_precision(pr_curve(twice, c)) <= ap + 1e-12);
      auto shuffled = dets;
      std::shuffle(shuffled.begin(), shuffled.end(), gen);
      const std::vector<MatchOutcome> perm{match_image(shuffled, truths)};
      REQUIRE(average_precision(pr_curve(perm, c)) == ap);
    }
  }
}

TEST_CASE("evaluate_run") {
  const std::map<std::string, std::vector<GroundTruth>> truths{
      {"a", {{{0, 0, 10, 10}, P}, {{20, 20, 30, 30}, N}}},
      {"b", {{{40, 40, 50, 50}, P}}},
      {"c", {{{60, 60, 70, 70}, N}, {{80, 80, 90, 90}, N}}},
  };
  const auto m = manifest_with(truths);
  const std::vector<std::string> ids{"a", "b", "c"};

  std::map<std::string, std::vector<Detection>> perfect;
  for (const auto& [id, ts] : truths) {
    for (const auto& t : ts) perfect[id].push_back({t.box, t.cls, 0.9});
  }
  const auto r = evaluate_run("perfect", perfect, m, ids);
  CHECK(r.map50 == 1.0);
  CHECK(r.images == 3);
  CHECK(r.of(P).instances == 2);
  CHECK(r.of(N).instances == 3);
  CHECK(r.of(N).recall == 1.0);

  // Silent on negatives: mean of positive AP and 0.
  std::map<std::string, std::vector<Detection>> pos_only;
  for (const auto& [id, ds] : perfect) {
    for (const auto& d : ds) {
      if (d.cls == P) pos_only[id].push_back(d);
    }
  }
  const auto half = evaluate_run("pos", pos_only, m, ids);
  CHECK(half.of(N).ap50 == 0.0);
  CHECK(half.map50 == 0.5);

  // Only classes with truths contribute to the mean.
  const std::vector<std::string> just_b{"b"};
  const auto rb = evaluate_run("b", perfect, m, just_b);
  CHECK(!rb.of(N).ap50.has_value());
  CHECK(rb.map50 == 1.0);

  // Hand-checked mixed run against the naive oracle.
  std::map<std::string, std::vector<Detection>> mixed{
      {"a", {det({0, 0, 10, 10}, 0.8), det({1, 1, 11, 11}, 0.7), det({20, 20, 30, 30}, 0.6, N)}},
      {"c", {det({60, 60, 70, 70}, 0.95, N), det({150, 150, 160, 160}, 0.9, N)}},
  };
  const auto rm = evaluate_run("mixed", mixed, m, ids);
  CHECK(rm.of(P).tp == 1);
  CHECK(rm.of(P).fp == 1);
  CHECK(rm.of(P).fn == 1);
  CHECK(*rm.of(P).ap50 == doctest::Approx(oracle::naive_ap({{0.8, true}, {0.7, false}}, 2)));
  CHECK(*rm.of(N).ap50 == doctest::Approx(oracle::naive_ap({{0.95, true}, {0.9, false}, {0.6, true}}, 3)));
  CHECK(rm.map50 == doctest::Approx((*rm.of(P).ap50 + *rm.of(N).ap50) / 2));

  CHECK_THROWS_AS(evaluate_run("x", perfect, m, std::vector<std::string>{}), Error);
  CHECK_THROWS_AS(evaluate_run("x", perfect, m, std::vector<std::string>{"zzz"}), Error);

  const auto back = report_from_json(nlohmann::json::parse(report_to_json(rm).dump()));
  CHECK(report_to_json(back) == report_to_json(rm));
  CHECK(pr_curve_csv(rm.of(P).curve).rfind("threshold,precision,recall\n0.800000,1.000000,0.500000\n", 0) == 0);
}

TEST_CASE("compare_runs ordering") {
  auto report = [](std::string label, double map, std::optional<double> ap_pos) {
    EvaluationReport r;
    r.run_label = std::move(label);
    r.map50 = map;
    r.classes[0].ap50 = ap_pos;
    return r;
  };
  std::vector<EvaluationReport> one{report("solo", 0.5, 0.5)};
  CHECK(compare_runs(one).rows.at(0).run_label == "solo");
  CHECK(compare_runs(one).rows.at(0).rank == 1);

  std::vector<EvaluationReport> two{report("neg", 0.73, 0.7), report("pos", 0.85, 0.9)};
  auto t = compare_runs(two);
  CHECK(t.rows[0].run_label == "pos");
  CHECK(t.rows[1].run_label == "neg");

  std::vector<EvaluationReport> tied{report("b", 0.8, 0.8), report("a", 0.8, 0.8), report("c", 0.8, 0.9)};
  t = compare_runs(tied);
  CHECK(t.rows[0].run_label == "c");
  CHECK(t.rows[1].run_label == "a");
  CHECK(t.rows[2].run_label == "b");
  CHECK(comparison_to_json(t)["rows"].size() == 3);
  CHECK(comparison_to_text(t).find("mAP50") != std::string::npos);
}
