#pragma once

#include <chrono>
#include <condition_variable>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "miner/al.hpp"

namespace miner {

enum class SubmitStatus { Accepted, Duplicate, UnknownRequest, Expired, Conflict };

const char* to_string(SubmitStatus status) noexcept;

/// Progress figures the engine publishes for the annotation UI.
struct QueueStats {
  int rounds = 0;
  std::size_t annotated_count = 0;
  std::size_t pseudo_count = 0;
  std::optional<double> current_map;
};

/// Requests awaiting a human label. Readers may poll concurrently; writers are
/// serialized. Every change is appended to an optional JSON Lines journal, and
/// an existing journal is replayed on construction so a session can resume.
class AnnotationQueue {
 public:
  explicit AnnotationQueue(std::filesystem::path journal = {});

  /// Expires pending requests not in `requests`, then enqueues `requests`. Requests
  /// already resolved under the same id (from a replayed journal) keep their result.
  /// Returns the ids that expired.
  std::vector<std::string> publish(const std::vector<AnnotationRequest>& requests);

  std::vector<AnnotationRequest> pending() const;

  SubmitStatus submit(const AnnotationResult& result);

  /// Blocks until every request of the last publish is resolved or expired,
  /// or the queue is closed. Returns results in request order.
  std::vector<AnnotationResult> wait_for_results();

  /// Like wait_for_results but gives up after `timeout`, returning nullopt.
  std::optional<std::vector<AnnotationResult>> wait_for_results(std::chrono::milliseconds timeout);

  std::vector<std::string> expire_pending();

  /// Wakes all waiters; later waits return immediately.
  void close();
  bool closed() const;

  void set_stats(const QueueStats& stats);
  QueueStats stats() const;

 private:
  enum class State { Pending, Resolved, Expired };
  struct Entry {
    AnnotationRequest request;
    State state = State::Pending;
    std::optional<AnnotationResult> result;
  };

  bool batch_done_locked() const;
  std::vector<AnnotationResult> batch_results_locked() const;
  std::vector<std::string> expire_locked();
  void journal_locked(const nlohmann::json& line);
  void replay();

  mutable std::mutex mutex_;
  std::condition_variable changed_;
  std::filesystem::path journal_;
  std::map<std::string, Entry> entries_;
  std::vector<std::string> batch_;
  QueueStats stats_;
  bool closed_ = false;
};

/// Annotator backed by an AnnotationQueue; blocks the engine until the batch resolves.
class QueueAnnotator final : public Annotator {
 public:
  explicit QueueAnnotator(AnnotationQueue& queue) : queue_(queue) {}
  AnnotatorKind kind() const override { return AnnotatorKind::Human; }
  std::vector<AnnotationResult> annotate(const std::vector<AnnotationRequest>& requests) override;

 private:
  AnnotationQueue& queue_;
};

}  // namespace miner
