#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "miner/annotation_queue.hpp"

namespace miner {

/// HTTP bridge between an AnnotationQueue and the annotation UI.
///   GET  /api/queue   pending requests
///   GET  /api/stats   engine progress
///   POST /api/labels  {request_id, label, corrected_box?}
/// Label responses: 200 accepted or duplicate, 404 unknown request,
/// 409 expired or conflicting, 422 malformed body.
class AnnotationServer {
 public:
  /// Labels outside [-1, num_categories) are rejected as malformed.
  AnnotationServer(AnnotationQueue& queue, int num_categories);
  ~AnnotationServer();
  AnnotationServer(const AnnotationServer&) = delete;
  AnnotationServer& operator=(const AnnotationServer&) = delete;

  /// Binds and serves on a background thread. Port 0 picks a free port.
  /// Returns the bound port.
  int start(const std::string& host, int port);
  void stop();
  int port() const noexcept { return port_; }

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  int port_ = 0;
};

nlohmann::json queue_item_json(const AnnotationRequest& request);
nlohmann::json stats_json(const QueueStats& stats);

/// Summary of a finished run, computed from its runlog alone: per-round
/// mAP with annotated% and pseudo% (both relative to the ground-truth boxes
/// of the labeled split) and the precision of pseudo-labels against hidden ground
/// truth. Throws IncompleteRun when the log has no termination event.
nlohmann::json build_report(const std::vector<std::string>& runlog_lines);
std::string render_report(const nlohmann::json& report);

/// Reads <rundir>/runlog.jsonl and writes report.json and report.txt.
nlohmann::json write_report(const std::filesystem::path& run_dir);

}  // namespace miner
