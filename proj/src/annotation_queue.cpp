#include "miner/annotation_queue.hpp"

#include <fstream>

#include "miner/error.hpp"

namespace miner {

const char* to_string(SubmitStatus status) noexcept {
  switch (status) {
    case SubmitStatus::Accepted: return "accepted";
    case SubmitStatus::Duplicate: return "duplicate";
    case SubmitStatus::UnknownRequest: return "unknown-request";
    case SubmitStatus::Expired: return "expired";
    case SubmitStatus::Conflict: return "conflict";
  }
  return "unknown";
}

AnnotationQueue::AnnotationQueue(std::filesystem::path journal) : journal_(std::move(journal)) {
  if (!journal_.empty() && std::filesystem::exists(journal_)) replay();
}

void AnnotationQueue::replay() {
  std::ifstream in(journal_, std::ios::binary);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.contains("kind"))
      throw Error(ErrorCode::MalformedRecord, journal_.string() + " line " + std::to_string(line_no));
    const auto kind = j["kind"].get<std::string>();
    if (kind == "request") {
      auto req = annotation_request_from_json(j["request"]);
      const auto id = req.request_id;
      entries_[id] = Entry{std::move(req), State::Pending, std::nullopt};
    } else if (kind == "result") {
      auto res = annotation_result_from_json(j["result"]);
      if (auto it = entries_.find(res.request_id); it != entries_.end()) {
        it->second.state = State::Resolved;
        it->second.result = std::move(res);
      }
    } else if (kind == "expired") {
      if (auto it = entries_.find(j["request_id"].get<std::string>()); it != entries_.end())
        it->second.state = State::Expired;
    }
  }
}

void AnnotationQueue::journal_locked(const nlohmann::json& line) {
  if (journal_.empty()) return;
  std::ofstream out(journal_, std::ios::binary | std::ios::app);
  if (!out) throw Error(ErrorCode::Io, "cannot append to " + journal_.string());
  out << line.dump() << '\n';
}

std::vector<std::string> AnnotationQueue::expire_locked() {
  std::vector<std::string> expired;
  for (auto& [id, entry] : entries_)
    if (entry.state == State::Pending) {
      entry.state = State::Expired;
      expired.push_back(id);
      journal_locked({{"kind", "expired"}, {"request_id", id}});
    }
  return expired;
}

std::vector<std::string> AnnotationQueue::publish(const std::vector<AnnotationRequest>& requests) {
  std::vector<std::string> expired;
  {
    std::lock_guard lock(mutex_);
    std::map<std::string, bool> keep;
    for (const auto& r : requests) keep[r.request_id] = true;
    for (auto& [id, entry] : entries_)
      if (entry.state == State::Pending && !keep.count(id)) {
        entry.state = State::Expired;
        expired.push_back(id);
        journal_locked({{"kind", "expired"}, {"request_id", id}});
      }
    batch_.clear();
    for (const auto& r : requests) {
      batch_.push_back(r.request_id);
      auto it = entries_.find(r.request_id);
      if (it != entries_.end() && it->second.state == State::Resolved) continue;
      if (it != entries_.end() && it->second.state == State::Pending) continue;
      entries_[r.request_id] = Entry{r, State::Pending, std::nullopt};
      journal_locked({{"kind", "request"}, {"request", to_json(r)}});
    }
  }
  changed_.notify_all();
  return expired;
}

std::vector<AnnotationRequest> AnnotationQueue::pending() const {
  std::lock_guard lock(mutex_);
  std::vector<AnnotationRequest> out;
  for (const auto& id : batch_) {
    const auto& e = entries_.at(id);
    if (e.state == State::Pending) out.push_back(e.request);
  }
  return out;
}

SubmitStatus AnnotationQueue::submit(const AnnotationResult& result) {
  SubmitStatus status;
  {
    std::lock_guard lock(mutex_);
    auto it = entries_.find(result.request_id);
    if (it == entries_.end()) return SubmitStatus::UnknownRequest;
    auto& e = it->second;
    switch (e.state) {
      case State::Expired: return SubmitStatus::Expired;
      case State::Resolved:
        return (e.result->label == result.label && e.result->corrected_box == result.corrected_box)
                   ? SubmitStatus::Duplicate
                   : SubmitStatus::Conflict;
      case State::Pending: break;
    }
    e.state = State::Resolved;
    e.result = result;
    journal_locked({{"kind", "result"}, {"result", to_json(result)}});
    status = SubmitStatus::Accepted;
  }
  changed_.notify_all();
  return status;
}

bool AnnotationQueue::batch_done_locked() const {
  for (const auto& id : batch_)
    if (entries_.at(id).state == State::Pending) return false;
  return true;
}

std::vector<AnnotationResult> AnnotationQueue::batch_results_locked() const {
  std::vector<AnnotationResult> out;
  for (const auto& id : batch_) {
    const auto& e = entries_.at(id);
    if (e.state == State::Resolved) out.push_back(*e.result);
  }
  return out;
}

std::vector<AnnotationResult> AnnotationQueue::wait_for_results() {
  std::unique_lock lock(mutex_);
  changed_.wait(lock, [&] { return closed_ || batch_done_locked(); });
  return batch_results_locked();
}

std::optional<std::vector<AnnotationResult>> AnnotationQueue::wait_for_results(std::chrono::milliseconds timeout) {
  std::unique_lock lock(mutex_);
  if (!changed_.wait_for(lock, timeout, [&] { return closed_ || batch_done_locked(); })) return std::nullopt;
  return batch_results_locked();
}

std::vector<std::string> AnnotationQueue::expire_pending() {
  std::vector<std::string> expired;
  {
    std::lock_guard lock(mutex_);
    expired = expire_locked();
  }
  changed_.notify_all();
  return expired;
}

void AnnotationQueue::close() {
  {
    std::lock_guard lock(mutex_);
    closed_ = true;
  }
  changed_.notify_all();
}

bool AnnotationQueue::closed() const {
  std::lock_guard lock(mutex_);
  return closed_;
}

void AnnotationQueue::set_stats(const QueueStats& stats) {
  std::lock_guard lock(mutex_);
  stats_ = stats;
}

QueueStats AnnotationQueue::stats() const {
  std::lock_guard lock(mutex_);
  return stats_;
}

std::vector<AnnotationResult> QueueAnnotator::annotate(const std::vector<AnnotationRequest>& requests) {
  queue_.publish(requests);
  auto results = queue_.wait_for_results();
  if (queue_.closed() && results.size() < requests.size())
    throw Error(ErrorCode::IncompleteRun, "annotation queue closed before the batch was labeled");
  return results;
}

}  // namespace miner
