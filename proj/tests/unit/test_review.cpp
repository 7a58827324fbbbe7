#include <doctest.h>

#include <atomic>
#include <barrier>
#include <fstream>
#include <random>
#include <sstream>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "ki67/error.hpp"
#include "ki67/raster.hpp"
#include "ki67/reporting.hpp"
#include "ki67/review.hpp"
#include "ki67/review_http.hpp"
#include "oracles.hpp"

using namespace ki67;
using nlohmann::json;

namespace {

constexpr auto P = CellClass::Ki67Positive;
constexpr auto N = CellClass::Ki67Negative;

std::string fixed_clock() { return "2026-01-01T00:00:00Z"; }

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected ki67::Error");
  return ErrorCode::InvalidArgument;
}

// Case "c1": h1 has 10 positive and 10 negative cells, h2 has one positive cell.
// Case "c2": h3 has 3 positive, 1 negative, plus a low-confidence positive.
struct World {
  std::filesystem::path root;
  DatasetManifest manifest;
  PredictionSet predictions;

  explicit World(const std::string& name) : root(oracle::temp_dir(name)) {
    manifest.base_dir = root;
    auto add_image = [&](const std::string& id, const std::string& case_id) {
      manifest.records.push_back({id, case_id, 128, 128, id + ".png", std::nullopt});
      write_png(root / (id + ".png"), RasterImage(128, 128, {200, 200, 200}));
    };
    add_image("h1", "c1");
    add_image("h2", "c1");
    add_image("h3", "c2");
    auto cell = [&](const std::string& id, int i, CellClass c, double conf) {
      const double x = (i % 10) * 12.0, y = (i / 10) * 12.0;
      predictions.by_image[id].push_back({id, {x, y, x + 10, y + 10}, c, conf});
    };
    for (int i = 0; i < 20; ++i) cell("h1", i, i < 10 ? P : N, 0.9 - i * 0.01);
    cell("h2", 0, P, 0.8);
    for (int i = 0; i < 4; ++i) cell("h3", i, i < 3 ? P : N, 0.9);
    cell("h3", 5, P, 0.2);
    predictions.run_label = "model";
  }
  ~World() { std::filesystem::remove_all(root); }

  ScoringConfig config() const {
    ScoringConfig c;
    c.min_conf = 0.5;
    return c;
  }
  ReviewStore store(std::shared_ptr<EventLog> log) const { return ReviewStore(manifest, predictions, config(), log, fixed_clock); }
};

}  // namespace

TEST_CASE("apply_correction") {
  ImageReviewState s{"img", {{{{0, 0, 10, 10}, P, 0.9}, Provenance::Model}}, 3};
  CorrectionEvent ev{1, "img", ToggleClass{0}, "dr", "t", 3};
  const auto toggled = apply_correction(s, ev, 100, 100);
  CHECK(toggled.detections[0].det.cls == N);
  CHECK(toggled.detections[0].det.box == s.detections[0].det.box);
  CHECK(toggled.version == 4);

  ev.action = AddDetection{{5, 5, 15, 15}, N};
  const auto added = apply_correction(s, ev, 100, 100);
  REQUIRE(added.detections.size() == 2);
  CHECK(added.detections[1].det.confidence == 1.0);
  CHECK(added.detections[1].provenance == Provenance::Human);

  ev.action = DeleteDetection{0};
  CHECK(apply_correction(s, ev, 100, 100).detections.empty());

  ev.base_version = 2;
  CHECK(code_of([&] { apply_correction(s, ev, 100, 100); }) == ErrorCode::VersionConflict);
  ev.base_version = 3;
  ev.action = ToggleClass{1};
  CHECK(code_of([&] { apply_correction(s, ev, 100, 100); }) == ErrorCode::IndexOutOfRange);
  ev.action = AddDetection{{90, 90, 110, 110}, P};
  CHECK(code_of([&] { apply_correction(s, ev, 100, 100); }) == ErrorCode::InvalidBox);
  ev.action = AddDetection{{10, 10, 10, 20}, P};
  CHECK(code_of([&] { apply_correction(s, ev, 100, 100); }) == ErrorCode::InvalidBox);
}

TEST_CASE("event json round trip") {
  for (const CorrectionAction& a : {CorrectionAction{ToggleClass{2}}, CorrectionAction{DeleteDetection{0}},
                                    CorrectionAction{AddDetection{{1.5, 2, 3, 4.25}, N}}}) {
    const CorrectionEvent ev{42, "img", a, "actor", "2026-01-01T00:00:00Z", 7};
    CHECK(event_from_json(json::parse(event_to_json(ev).dump())) == ev);
  }
  CHECK_THROWS_AS(action_from_json(json{{"type", "merge"}}), Error);
}

TEST_CASE("store matches batch scoring before any correction") {
  World w("review_batch");
  auto store = w.store(std::make_shared<MemoryEventLog>());
  const auto batch = hotspot_detections(w.manifest, w.predictions, w.config());
  for (const auto& c : {"c1", "c2"}) CHECK(store.recompute_scores(c) == score_manifest_case(w.manifest, batch, c, w.config()));
  CHECK(store.recompute_scores("c2").pooled_pos == 3);
  CHECK(code_of([&] { store.recompute_scores("nope"); }) == ErrorCode::UnknownCase);
  CHECK(code_of([&] { store.state("nope"); }) == ErrorCode::UnknownImage);
}

TEST_CASE("toggle in a 10/10 image moves the hotspot from 50 to 45") {
  World w("review_toggle");
  auto store = w.store(std::make_shared<MemoryEventLog>());
  auto hotspot = [&](const CaseScore& c) {
    for (const auto& h : c.hotspots) {
      if (h.image_id == "h1") return h.index_percent;
    }
    return -1.0;
  };
  CHECK(hotspot(store.recompute_scores("c1")) == 50.0);
  const auto s = store.state("h1");
  std::size_t pos_index = 0;
  while (s.detections[pos_index].det.cls != P) ++pos_index;
  const auto r = store.submit("h1", ToggleClass{pos_index}, "dr", s.version);
  CHECK(r.state.version == s.version + 1);
  CHECK(r.event.event_id >= 1);
  CHECK(r.event.timestamp == fixed_clock());
  CHECK(hotspot(store.recompute_scores("c1")) == 45.0);
  CHECK(store.original("h1") == s);
}

TEST_CASE("deleting the only detection excludes the image") {
  World w("review_delete");
  auto store = w.store(std::make_shared<MemoryEventLog>());
  store.submit("h2", DeleteDetection{0}, "dr", 0);
  const auto c = store.recompute_scores("c1");
  CHECK(c.excluded_images == std::vector<std::string>{"h2"});
  CHECK(c.hotspots.size() == 1);
  CHECK(c.total_cells == 20);
}

TEST_CASE("restart replays the JSONL log into the same state") {
  World w("review_replay");
  const auto dir = w.root / "log";
  std::map<std::string, ImageReviewState> before;
  {
    auto store = w.store(std::make_shared<JsonlEventLog>(dir));
    std::mt19937_64 gen(3);
    for (int i = 0; i < 40; ++i) {
      const std::string id = i % 3 == 0 ? "h3" : "h1";
      const auto s = store.state(id);
      CorrectionAction a;
      if (s.detections.empty() || gen() % 3 == 0) {
        a = AddDetection{oracle::random_box(gen, 128, 128, 20), gen() % 2 ? N : P};
      } else if (gen() % 2) {
        a = ToggleClass{gen() % s.detections.size()};
      } else {
        a = DeleteDetection{gen() % s.detections.size()};
      }
      store.submit(id, a, "dr", s.version);
    }
    CHECK(code_of([&] { store.submit("h1", ToggleClass{0}, "dr", 0); }) == ErrorCode::VersionConflict);
    for (const auto& id : {"h1", "h2", "h3"}) before[id] = store.state(id);
  }
  auto restarted = w.store(std::make_shared<JsonlEventLog>(dir));
  for (const auto& [id, s] : before) CHECK(restarted.state(id) == s);
  const auto r = restarted.submit("h2", ToggleClass{0}, "dr", 0);
  CHECK(r.event.event_id == 41);

  // Hand-fold the log over the originals as an independent check.
  const JsonlEventLog log(dir);
  std::map<std::string, ImageReviewState> folded;
  for (const auto& id : {"h1", "h2", "h3"}) folded[id] = restarted.original(id);
  for (const auto& c : {"c1", "c2"}) {
    for (const auto& ev : log.load(c)) folded[ev.image_id] = apply_correction(folded[ev.image_id], ev, 128, 128);
  }
  for (const auto& [id, s] : folded) CHECK(restarted.state(id) == s);
}

TEST_CASE("a corrupted log refuses to load") {
  World w("review_corrupt");
  const auto dir = w.root / "log";
  {
    auto store = w.store(std::make_shared<JsonlEventLog>(dir));
    store.submit("h1", ToggleClass{0}, "dr", 0);
  }
  const auto path = JsonlEventLog(dir).path_for("c1");
  std::string line;
  {
    std::ifstream in(path);
    std::getline(in, line);
  }
  std::ofstream(path, std::ios::app) << line << "\n";
  CHECK_THROWS_AS(w.store(std::make_shared<JsonlEventLog>(dir)), Error);
}

TEST_CASE("racing submits with one base version: exactly one wins") {
  World w("review_race");
  auto store = w.store(std::make_shared<MemoryEventLog>());
  for (int round = 0; round < 50; ++round) {
    const auto v = store.state("h1").version;
    std::atomic<int> ok{0}, conflict{0};
    std::barrier sync(2);
    auto client = [&] {
      sync.arrive_and_wait();
      try {
        store.submit("h1", ToggleClass{0}, "dr", v);
        ++ok;
      } catch (const Error& e) {
        if (e.code() == ErrorCode::VersionConflict) ++conflict;
      }
    };
    std::thread a(client), b(client);
    a.join();
    b.join();
    REQUIRE(ok == 1);
    REQUIRE(conflict == 1);
    REQUIRE(store.state("h1").version == v + 1);
  }
}

TEST_CASE("what-if scores are not persisted") {
  World w("review_whatif");
  auto log = std::make_shared<MemoryEventLog>();
  auto store = w.store(log);
  const auto base = store.recompute_scores("c2");
  CHECK(base.pooled_pos == 3);
  WhatIf lower;
  lower.min_conf = 0.1;
  CHECK(store.what_if("c2", lower).pooled_pos == 4);
  CHECK(store.what_if("c2", lower).config.min_conf == 0.1);
  WhatIf higher;
  higher.min_conf = 0.95;
  CHECK_THROWS_AS(store.what_if("c2", higher), Error);
  CHECK(store.recompute_scores("c2") == base);
  CHECK(log->load("c2").empty());

  // A human-added cell survives any what-if threshold.
  store.submit("h3", AddDetection{{100, 100, 110, 110}, N}, "dr", 0);
  WhatIf strict;
  strict.min_conf = 0.95;
  const auto s = store.what_if("c2", strict);
  CHECK(s.pooled_pos == 0);
  CHECK(s.pooled_neg == 1);
  CHECK(store.what_if("c2", {}) == store.recompute_scores("c2"));
}

TEST_CASE("http api") {
  World w("review_http");
  auto store = w.store(std::make_shared<JsonlEventLog>(w.root / "log"));
  ReviewServer server(store);
  const int port = server.bind_any_port("127.0.0.1");
  REQUIRE(port > 0);
  std::thread t([&] { server.listen_after_bind(); });
  server.wait_until_ready();
  httplib::Client cli("127.0.0.1", port);

  auto cases = cli.Get("/api/cases");
  REQUIRE(cases);
  CHECK(cases->status == 200);
  CHECK(json::parse(cases->body).size() == 2);

  auto detail = cli.Get("/api/cases/c1");
  REQUIRE(detail);
  CHECK(json::parse(detail->body)["images"].size() == 2);
  CHECK(cli.Get("/api/cases/zz")->status == 404);

  auto score = cli.Get("/api/cases/c2/score");
  CHECK(score->body == case_score_document(store.recompute_scores("c2")));
  WhatIf lower;
  lower.min_conf = 0.1;
  CHECK(cli.Get("/api/cases/c2/score?min_conf=0.1")->body == case_score_document(store.what_if("c2", lower)));
  CHECK(cli.Get("/api/cases/c2/score?mode=bogus")->status == 400);

  auto image = cli.Get("/api/images/h1");
  CHECK(json::parse(image->body)["state"]["detections"].size() == 20);
  CHECK(json::parse(cli.Get("/api/images/h3")->body)["state"]["detections"].size() == 5);
  CHECK(cli.Get("/api/images/none")->status == 404);
  auto raster = cli.Get("/api/images/h1/raster");
  CHECK(raster->status == 200);
  CHECK(decode_png(raster->body) == read_png(w.root / "h1.png"));
  auto overlay = cli.Get("/api/images/h3/overlay");
  CHECK(store.counted("h3").size() == 4);
  CHECK(decode_png(overlay->body) == render_overlay(read_png(w.root / "h3.png"), store.counted("h3")));

  const std::string body = R"({"action":{"type":"toggle","index":0},"actor":"dr","base_version":0})";
  auto first = cli.Post("/api/images/h2/corrections", body, "application/json");
  CHECK(first->status == 200);
  const auto doc = json::parse(first->body);
  CHECK(doc["state"]["version"] == 1);
  CHECK(doc["event"]["actor"] == "dr");
  auto second = cli.Post("/api/images/h2/corrections", body, "application/json");
  CHECK(second->status == 409);
  CHECK(json::parse(second->body)["current_version"] == 1);
  CHECK(cli.Post("/api/images/h2/corrections", "{oops", "application/json")->status == 400);
  CHECK(cli.Post("/api/images/h2/corrections", R"({"action":{"type":"delete","index":9},"base_version":1})",
                 "application/json")->status == 400);

  auto del = cli.Post("/api/images/h2/corrections", R"({"action":{"type":"delete","index":0},"base_version":1})",
                      "application/json");
  const auto deleted = json::parse(del->body);
  CHECK(deleted["excluded"] == true);
  CHECK(!deleted["warnings"].empty());

  CHECK(cli.Get("/")->status == 200);
  server.stop();
  t.join();
}
