#pragma once

#include <atomic>
#include <cstdint>

namespace dfut {

// Monotone per-node I/O counters. Snapshots aggregate across nodes.
struct IoMetrics {
  std::atomic<uint64_t> bytes_spilled{0};
  std::atomic<uint64_t> bytes_restored{0};
  std::atomic<uint64_t> spill_files_created{0};
  std::atomic<uint64_t> network_bytes{0};
  std::atomic<uint64_t> allocation_queue_peak{0};
  std::atomic<uint64_t> objects_created{0};
  std::atomic<uint64_t> blocks_created{0};

  void note_queue_depth(uint64_t depth) {
    uint64_t cur = allocation_queue_peak.load(std::memory_order_relaxed);
    while (depth > cur &&
           !allocation_queue_peak.compare_exchange_weak(cur, depth, std::memory_order_relaxed)) {
    }
  }
};

struct MetricsSnapshot {
  uint64_t bytes_spilled = 0;
  uint64_t bytes_restored = 0;
  uint64_t spill_files_created = 0;
  uint64_t network_bytes = 0;
  uint64_t allocation_queue_peak = 0;
  uint64_t objects_created = 0;
  uint64_t blocks_created = 0;
  // Runtime-level counters, zero in per-node snapshots.
  uint64_t task_retries = 0;
  uint64_t reconstructions = 0;

  MetricsSnapshot& operator+=(const MetricsSnapshot& o) {
    bytes_spilled += o.bytes_spilled;
    bytes_restored += o.bytes_restored;
    spill_files_created += o.spill_files_created;
    network_bytes += o.network_bytes;
    allocation_queue_peak = allocation_queue_peak > o.allocation_queue_peak
                                ? allocation_queue_peak
                                : o.allocation_queue_peak;
    objects_created += o.objects_created;
    blocks_created += o.blocks_created;
    task_retries += o.task_retries;
    reconstructions += o.reconstructions;
    return *this;
  }

  friend bool operator==(const MetricsSnapshot& a, const MetricsSnapshot& b) {
    return a.bytes_spilled == b.bytes_spilled && a.bytes_restored == b.bytes_restored &&
           a.spill_files_created == b.spill_files_created && a.network_bytes == b.network_bytes &&
           a.objects_created == b.objects_created && a.blocks_created == b.blocks_created &&
           a.task_retries == b.task_retries && a.reconstructions == b.reconstructions;
  }
};

inline MetricsSnapshot snapshot_of(const IoMetrics& m) {
  MetricsSnapshot s;
  s.bytes_spilled = m.bytes_spilled.load();
  s.bytes_restored = m.bytes_restored.load();
  s.spill_files_created = m.spill_files_created.load();
  s.network_bytes = m.network_bytes.load();
  s.allocation_queue_peak = m.allocation_queue_peak.load();
  s.objects_created = m.objects_created.load();
  s.blocks_created = m.blocks_created.load();
  return s;
}

}  // namespace dfut
