#pragma once

#include <fstream>
#include <mutex>
#include <string>
#include <vector>

#include "dfut/common.hpp"

namespace dfut {

enum class EventKind {
  task_submitted,
  task_started,
  task_finished,
  task_cancelled,
  task_retried,
  object_sealed,
  object_spilled,
  object_restored,
  object_evicted,
  node_failed,
};

inline const char* event_kind_name(EventKind k) {
  switch (k) {
    case EventKind::task_submitted: return "task_submitted";
    case EventKind::task_started: return "task_started";
    case EventKind::task_finished: return "task_finished";
    case EventKind::task_cancelled: return "task_cancelled";
    case EventKind::task_retried: return "task_retried";
    case EventKind::object_sealed: return "object_sealed";
    case EventKind::object_spilled: return "object_spilled";
    case EventKind::object_restored: return "object_restored";
    case EventKind::object_evicted: return "object_evicted";
    case EventKind::node_failed: return "node_failed";
  }
  return "unknown";
}

struct TraceEvent {
  int64_t ts_us = 0;
  EventKind kind{};
  std::string subject;  // task or object id
  NodeId node = kNoNode;
  std::string tag;  // free-form label, e.g. "map:r2" or "reason:reconstruction"
};

// Append-only event log shared by the scheduler, stores, and failure
// injector. Tests assert ordering and overlap properties on snapshots.
class SchedulerTrace {
 public:
  explicit SchedulerTrace(TimePoint origin = Clock::now()) : origin_(origin) {}

  void record(EventKind kind, const std::string& subject, NodeId node,
              const std::string& tag = {}) {
    std::lock_guard<std::mutex> lk(mu_);
    events_.push_back(TraceEvent{us_between(origin_, Clock::now()), kind, subject, node, tag});
  }

  std::vector<TraceEvent> snapshot() const {
    std::lock_guard<std::mutex> lk(mu_);
    return events_;
  }

  size_t count(EventKind kind) const {
    std::lock_guard<std::mutex> lk(mu_);
    size_t n = 0;
    for (const auto& e : events_) n += (e.kind == kind);
    return n;
  }

  size_t count_tagged(EventKind kind, const std::string& tag_prefix) const {
    std::lock_guard<std::mutex> lk(mu_);
    size_t n = 0;
    for (const auto& e : events_)
      n += (e.kind == kind && e.tag.rfind(tag_prefix, 0) == 0);
    return n;
  }

  // One JSON object per line.
  void write_jsonl(const std::string& path) const {
    std::ofstream out(path, std::ios::trunc);
    std::lock_guard<std::mutex> lk(mu_);
    for (const auto& e : events_) {
      out << "{\"ts_us\":" << e.ts_us << ",\"event\":\"" << event_kind_name(e.kind)
          << "\",\"subject\":\"" << e.subject << "\",\"node\":" << e.node;
      if (!e.tag.empty()) out << ",\"tag\":\"" << e.tag << "\"";
      out << "}\n";
    }
  }

  TimePoint origin() const { return origin_; }

 private:
  mutable std::mutex mu_;
  TimePoint origin_;
  std::vector<TraceEvent> events_;
};

}  // namespace dfut
