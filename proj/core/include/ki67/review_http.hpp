#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include "ki67/reporting.hpp"
#include "ki67/review.hpp"

namespace ki67 {

/// JSON-over-HTTP front end of a ReviewStore.
///
///   GET  /api/cases
///   GET  /api/cases/{case_id}
///   GET  /api/cases/{case_id}/score?min_conf=&nms=&mode=
///   GET  /api/images/{image_id}
///   GET  /api/images/{image_id}/raster
///   GET  /api/images/{image_id}/overlay
///   POST /api/images/{image_id}/corrections   -> 200 | 409 on a stale base_version
///
/// Everything else under / is served from `ui_dir` when one is given.
class ReviewServer {
public:
  ReviewServer(ReviewStore& store, OverlayStyle style = {}, std::optional<std::filesystem::path> ui_dir = {});
  ~ReviewServer();
  ReviewServer(const ReviewServer&) = delete;
  ReviewServer& operator=(const ReviewServer&) = delete;

  /// Binds and blocks until stop(). Returns false if the port cannot be bound.
  bool listen(const std::string& host, int port);
  /// Binds to a free port and returns it (or -1); follow with listen_after_bind().
  int bind_any_port(const std::string& host);
  bool listen_after_bind();
  void stop();
  void wait_until_ready() const;

private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace ki67
