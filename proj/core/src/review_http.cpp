#include "ki67/review_http.hpp"

#include <fstream>
#include <iterator>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "ki67/error.hpp"

namespace ki67 {

using nlohmann::json;

namespace {

int status_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::UnknownCase:
    case ErrorCode::UnknownImage: return 404;
    case ErrorCode::VersionConflict: return 409;
    case ErrorCode::NoCells:
    case ErrorCode::EmptyCase: return 422;
    case ErrorCode::Io: return 500;
    default: return 400;
  }
}

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, const Error& e, json extra = json::object()) {
  extra["error"] = to_string(e.code());
  extra["message"] = e.what();
  send_json(res, status_for(e.code()), extra);
}

std::optional<double> query_number(const httplib::Request& req, const char* key) {
  if (!req.has_param(key)) return std::nullopt;
  const std::string v = req.get_param_value(key);
  if (v.empty()) return std::nullopt;
  std::size_t used = 0;
  double d = 0;
  try {
    d = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size()) throw Error(ErrorCode::InvalidArgument, std::string("query parameter ") + key + " is not a number");
  return d;
}

json record_json(const ImageRecord& r) {
  json j = {{"image_id", r.image_id}, {"case_id", r.case_id}, {"width", r.width}, {"height", r.height}};
  return j;
}

}  // namespace

struct ReviewServer::Impl {
  ReviewStore& store;
  OverlayStyle style;
  httplib::Server server;

  Impl(ReviewStore& s, OverlayStyle st) : store(s), style(st) {}

  // Scores that cannot be computed (every image emptied) come back as null plus a reason.
  json score_or_null(const std::string& case_id, json& warnings) {
    try {
      CaseScore s = store.recompute_scores(case_id);
      for (const auto& id : s.excluded_images) warnings.push_back(id + " excluded from pooling: no detections");
      return case_score_to_json(s);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::NoCells) throw;
      warnings.push_back(std::string("case cannot be scored: ") + e.what());
      return nullptr;
    }
  }

  void routes() {
    server.Get("/api/cases", [this](const httplib::Request&, httplib::Response& res) {
      json out = json::array();
      for (const auto& id : store.case_ids()) {
        json row = {{"case_id", id}, {"images", store.manifest().hotspot_ids(id).size()}};
        json warnings = json::array();
        json score = score_or_null(id, warnings);
        if (!score.is_null()) {
          row["index_percent"] = score["index_percent"];
          row["band"] = score["band"];
          row["adequate"] = score["adequate"];
          row["total_cells"] = score["total_cells"];
        }
        row["warnings"] = std::move(warnings);
        out.push_back(std::move(row));
      }
      send_json(res, 200, out);
    });

    server.Get(R"(/api/cases/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      const std::string case_id = req.matches[1];
      try {
        const auto ids = store.manifest().hotspot_ids(case_id);
        if (ids.empty()) throw Error(ErrorCode::UnknownCase, "unknown case " + case_id);
        json images = json::array();
        for (const auto& id : ids) {
          const auto s = store.state(id);
          images.push_back({{"image_id", id}, {"version", s.version}, {"detections", s.detections.size()}});
        }
        json warnings = json::array();
        json score = score_or_null(case_id, warnings);
        send_json(res, 200,
                  {{"case_id", case_id}, {"images", std::move(images)}, {"score", std::move(score)},
                   {"warnings", std::move(warnings)}});
      } catch (const Error& e) {
        send_error(res, e);
      }
    });

    server.Get(R"(/api/cases/([^/]+)/score)", [this](const httplib::Request& req, httplib::Response& res) {
      const std::string case_id = req.matches[1];
      try {
        WhatIf params;
        params.min_conf = query_number(req, "min_conf");
        params.nms_threshold = query_number(req, "nms");
        if (req.has_param("mode") && !req.get_param_value("mode").empty()) {
          params.aggregation = aggregation_from_name(req.get_param_value("mode"));
          if (!params.aggregation) throw Error(ErrorCode::InvalidArgument, "mode must be pooled or mean");
        }
        res.status = 200;
        res.set_content(case_score_document(store.what_if(case_id, params)), "application/json");
      } catch (const Error& e) {
        send_error(res, e);
      }
    });

    server.Get(R"(/api/images/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      try {
        const std::string id = req.matches[1];
        const ImageReviewState s = store.state(id);
        send_json(res, 200,
                  {{"image", record_json(*store.manifest().find(id))},
                   {"state", state_to_json(s)},
                   {"min_conf", store.config().min_conf}});
      } catch (const Error& e) {
        send_error(res, e);
      }
    });

    server.Get(R"(/api/images/([^/]+)/raster)", [this](const httplib::Request& req, httplib::Response& res) {
      try {
        const std::string id = req.matches[1];
        if (!store.has_image(id)) throw Error(ErrorCode::UnknownImage, "unknown image " + id);
        const auto path = store.manifest().resolve_source(*store.manifest().find(id));
        std::ifstream in(path, std::ios::binary);
        if (!in) throw Error(ErrorCode::Io, "cannot read " + path.string());
        std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
        res.status = 200;
        res.set_content(std::move(bytes), "image/png");
      } catch (const Error& e) {
        send_error(res, e);
      }
    });

    server.Get(R"(/api/images/([^/]+)/overlay)", [this](const httplib::Request& req, httplib::Response& res) {
      try {
        const std::string id = req.matches[1];
        const auto dets = store.counted(id);
        const RasterImage img = read_png(store.manifest().resolve_source(*store.manifest().find(id)));
        res.status = 200;
        res.set_content(encode_png(render_overlay(img, dets, style)), "image/png");
      } catch (const Error& e) {
        send_error(res, e);
      }
    });

    server.Post(R"(/api/images/([^/]+)/corrections)", [this](const httplib::Request& req, httplib::Response& res) {
      const std::string id = req.matches[1];
      try {
        json body;
        try {
          body = json::parse(req.body);
        } catch (const json::exception& e) {
          throw Error(ErrorCode::MalformedDocument, std::string("request body: ") + e.what());
        }
        if (!body.is_object() || !body.contains("action") || !body.contains("base_version")) {
          throw Error(ErrorCode::MalformedDocument, "body needs action and base_version");
        }
        const CorrectionAction action = action_from_json(body["action"]);
        const std::string actor = body.value("actor", std::string("anonymous"));
        std::uint64_t base_version = 0;
        try {
          base_version = body["base_version"].get<std::uint64_t>();
        } catch (const json::exception&) {
          throw Error(ErrorCode::MalformedDocument, "base_version must be a non-negative integer");
        }
        CorrectionResult r = store.submit(id, action, actor, base_version);

        const bool excluded = store.counted(id).empty();
        json warnings = json::array();
        if (excluded) warnings.push_back(id + " has no counted detections and is excluded from pooling");
        const std::string case_id = store.manifest().find(id)->case_id;
        json score = score_or_null(case_id, warnings);
        json hotspot = nullptr;
        if (score.is_object()) {
          for (const auto& h : score["hotspots"]) {
            if (h["image_id"] == id) hotspot = h;
          }
        }
        send_json(res, 200,
                  {{"state", state_to_json(r.state)},
                   {"event", event_to_json(r.event)},
                   {"hotspot", std::move(hotspot)},
                   {"excluded", excluded},
                   {"case_score", std::move(score)},
                   {"warnings", std::move(warnings)}});
      } catch (const Error& e) {
        json extra = json::object();
        if (e.code() == ErrorCode::VersionConflict && store.has_image(id)) {
          extra["current_version"] = store.state(id).version;
        }
        send_error(res, e, std::move(extra));
      }
    });
  }
};

ReviewServer::ReviewServer(ReviewStore& store, OverlayStyle style, std::optional<std::filesystem::path> ui_dir)
    : impl_(std::make_unique<Impl>(store, style)) {
  impl_->routes();
  if (ui_dir) {
    if (!impl_->server.set_mount_point("/", ui_dir->string())) {
      throw Error(ErrorCode::Io, "UI directory " + ui_dir->string() + " does not exist");
    }
  } else {
    impl_->server.Get("/", [](const httplib::Request&, httplib::Response& res) {
      res.set_content("<!doctype html><title>Ki-67 review</title><p>No UI bundle mounted; see /api/cases.</p>",
                      "text/html");
    });
  }
}

ReviewServer::~ReviewServer() { stop(); }

bool ReviewServer::listen(const std::string& host, int port) { return impl_->server.listen(host, port); }

int ReviewServer::bind_any_port(const std::string& host) { return impl_->server.bind_to_any_port(host); }

bool ReviewServer::listen_after_bind() { return impl_->server.listen_after_bind(); }

void ReviewServer::stop() {
  if (impl_) impl_->server.stop();
}

void ReviewServer::wait_until_ready() const { impl_->server.wait_until_ready(); }

}  // namespace ki67
