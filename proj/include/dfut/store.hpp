#pragma once

#include <condition_variable>
#include <deque>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <thread>
#include <unordered_map>

#include "dfut/common.hpp"
#include "dfut/error.hpp"
#include "dfut/metrics.hpp"
#include "dfut/trace.hpp"

namespace dfut {

struct StoreConfig {
  uint64_t memory_limit = 64ull << 20;  // bytes per node
  uint64_t fuse_threshold = 1ull << 20;  // desk-scale default 1 MiB; 0 disables fusing
  std::string spill_dir;                 // empty: runtime picks a temp dir
  std::chrono::microseconds fetch_latency{0};  // injected per pull/restore
  bool prefetch_enabled = true;
};

struct SpillAddress {
  uint64_t file_id = 0;
  uint64_t offset = 0;
  uint64_t length = 0;
};

// What the cluster directory knows about other copies of an object. A memory
// copy here is "clean" (free to evict) when any other copy survives.
struct CopyStatus {
  bool spilled_here = false;
  bool copy_elsewhere = false;
};

struct StoreCallbacks {
  std::function<CopyStatus(ObjectId)> copy_status;
  std::function<void(ObjectId, const SpillAddress&)> on_spilled;
  std::function<void(ObjectId)> on_mem_evicted;
  std::function<void(ObjectId)> on_restored;
};

// Per-node immutable object storage with bounded memory. Allocations queue
// FIFO when memory is tight; the allocating thread evicts clean copies first,
// then fuses dirty objects into spill files of at least fuse_threshold bytes.
// Prefetch allocations never block and never trigger spilling.
class NodeStore {
 public:
  NodeStore(NodeId node, StoreConfig cfg, IoMetrics* metrics, SchedulerTrace* trace,
            StoreCallbacks cbs)
      : node_(node), cfg_(cfg), metrics_(metrics), trace_(trace), cbs_(std::move(cbs)) {
    dir_ = std::filesystem::path(cfg_.spill_dir) / ("node_" + std::to_string(node_));
    std::filesystem::create_directories(dir_);
  }

  NodeId node() const { return node_; }
  const StoreConfig& config() const { return cfg_; }

  uint64_t usage() const { return usage_.load(std::memory_order_relaxed); }
  uint64_t memory_limit() const { return cfg_.memory_limit; }

  // ------------------------------------------------------------------
  // Sealing task outputs.

  enum class SealPlace { memory, disk };

  // Blocks until memory admits the value, spilling as needed. When memory can
  // never admit it (everything else pinned), falls back to sealing the value
  // directly on the filesystem to keep the job live.
  SealPlace seal(ObjectId id, const Value& value) {
    if (value->size() > cfg_.memory_limit)
      raise(Errc::object_too_large, "object exceeds per-node memory limit");
    std::unique_lock<std::mutex> lk(mu_);
    if (dead_) raise(Errc::node_dead, "seal on dead node");
    if (resident_.count(id)) return SealPlace::memory;  // earlier attempt's bytes
    if (spilled_.count(id)) return SealPlace::disk;
    if (!admit_locked(lk, value->size(), /*can_wait=*/true)) {
      if (dead_) raise(Errc::node_dead, "seal on dead node");
      write_direct_locked(id, value);
      return SealPlace::disk;
    }
    insert_locked(id, value);
    return SealPlace::memory;
  }

  // Non-blocking admission for prefetched arguments. Never blocks and never
  // writes: clean unpinned copies may be dropped to make room, nothing more.
  bool try_insert_prefetched(ObjectId id, const Value& value) {
    std::lock_guard<std::mutex> lk(mu_);
    if (dead_) return false;
    if (resident_.count(id)) return true;
    if (usage_.load() + value->size() > cfg_.memory_limit)
      evict_clean_locked(usage_.load() + value->size() - cfg_.memory_limit);
    if (usage_.load() + value->size() > cfg_.memory_limit) return false;
    insert_locked(id, value);
    return true;
  }

  // True if `size` more bytes could be prefetched without any spill write.
  bool prefetch_room(uint64_t size) {
    std::lock_guard<std::mutex> lk(mu_);
    if (dead_) return false;
    uint64_t reclaimable = 0;
    for (const auto& [id, ent] : resident_) {
      if (ent.pin_count > 0) continue;
      CopyStatus st = cbs_.copy_status ? cbs_.copy_status(id) : CopyStatus{};
      if (spilled_.count(id) || st.spilled_here || st.copy_elsewhere)
        reclaimable += ent.value->size();
    }
    return usage_.load() + size <= cfg_.memory_limit + reclaimable;
  }

  // Admission for fetched task arguments. All-or-nothing for the batch; may
  // exceed the limit by one batch when the arguments cannot otherwise fit
  // (the "one in-flight allocation" allowance).
  void insert_fetched(ObjectId id, const Value& value) {
    std::unique_lock<std::mutex> lk(mu_);
    if (dead_) raise(Errc::node_dead, "fetch into dead node");
    if (resident_.count(id)) return;
    if (!admit_locked(lk, value->size(), /*can_wait=*/false)) {
      // Overshoot: serialized so at most one oversized admission is in flight.
      overshoot_cv_.wait(lk, [&] { return !overshoot_active_; });
      overshoot_active_ = true;
      insert_locked(id, value);
      overshoot_active_ = false;
      overshoot_cv_.notify_one();
      return;
    }
    insert_locked(id, value);
  }

  // ------------------------------------------------------------------
  // Reads.

  std::optional<Value> read_resident(ObjectId id) {
    std::lock_guard<std::mutex> lk(mu_);
    if (dead_) return std::nullopt;
    auto it = resident_.find(id);
    if (it == resident_.end()) return std::nullopt;
    it->second.access_seq = ++access_counter_;
    return it->second.value;
  }

  // Reads a spilled object's payload from this node's disk without restoring
  // it to memory (used when streaming to another node or to the driver).
  Value read_spilled(ObjectId id) {
    SpillAddress addr;
    {
      std::lock_guard<std::mutex> lk(mu_);
      if (dead_) raise(Errc::source_lost, "spill copy on dead node");
      auto it = spilled_.find(id);
      if (it == spilled_.end()) raise(Errc::spill_file_missing, "object has no spill copy here");
      addr = it->second;
    }
    return read_chunk(id, addr);
  }

  // Machine loss: memory and spilled contents both become unreachable.
  void mark_dead() {
    std::lock_guard<std::mutex> lk(mu_);
    dead_ = true;
    admit_cv_.notify_all();
    overshoot_cv_.notify_all();
  }

  bool has_spilled(ObjectId id) const {
    std::lock_guard<std::mutex> lk(mu_);
    return spilled_.count(id) > 0;
  }

  // Copies a spilled object back to memory. The spilled copy is retained for
  // redundancy until the object's refcount drops to zero.
  Value restore(ObjectId id) {
    Value v = read_spilled(id);
    if (cfg_.fetch_latency.count() > 0) std::this_thread::sleep_for(cfg_.fetch_latency);
    {
      std::unique_lock<std::mutex> lk(mu_);
      if (!resident_.count(id)) {
        if (admit_locked(lk, v->size(), /*can_wait=*/true)) {
          insert_locked(id, v);
        }
        // If memory never admits it, hand the value back without caching.
      }
    }
    metrics_->bytes_restored.fetch_add(v->size());
    trace_->record(EventKind::object_restored, id.str(), node_);
    if (cbs_.on_restored) cbs_.on_restored(id);
    return v;
  }

  // Best-effort background restore used by the prefetcher; never blocks on
  // memory and never spills (clean unpinned copies may be dropped).
  bool try_prefetch_restore(ObjectId id) {
    Value v;
    try {
      v = read_spilled(id);
    } catch (const Error&) {
      return false;
    }
    if (!prefetch_room(v->size())) return false;
    if (cfg_.fetch_latency.count() > 0) std::this_thread::sleep_for(cfg_.fetch_latency);
    {
      std::lock_guard<std::mutex> lk(mu_);
      if (!resident_.count(id)) {
        if (usage_.load() + v->size() > cfg_.memory_limit)
          evict_clean_locked(usage_.load() + v->size() - cfg_.memory_limit);
        if (usage_.load() + v->size() > cfg_.memory_limit) return false;
        insert_locked(id, v);
      }
    }
    metrics_->bytes_restored.fetch_add(v->size());
    trace_->record(EventKind::object_restored, id.str(), node_);
    if (cbs_.on_restored) cbs_.on_restored(id);
    return true;
  }

  // ------------------------------------------------------------------
  // Pinning. Pinned objects are immune to eviction while a task reads them.

  bool pin(ObjectId id) {
    std::lock_guard<std::mutex> lk(mu_);
    auto it = resident_.find(id);
    if (it == resident_.end()) return false;
    it->second.pin_count++;
    it->second.access_seq = ++access_counter_;
    return true;
  }

  void unpin(ObjectId id) {
    std::lock_guard<std::mutex> lk(mu_);
    auto it = resident_.find(id);
    if (it != resident_.end() && it->second.pin_count > 0) it->second.pin_count--;
    admit_cv_.notify_all();
  }

  // ------------------------------------------------------------------
  // Explicit spill, exposed for tests and policy triggers. Returns bytes
  // freed from memory; raises NothingToSpill when every resident byte is
  // pinned by executing tasks.
  uint64_t spill(uint64_t needed) {
    std::unique_lock<std::mutex> lk(mu_);
    uint64_t before = usage_.load();
    free_memory_locked(needed, /*force_tail=*/true);
    uint64_t freed = before - usage_.load();
    if (freed == 0) {
      bool any_unpinned = false;
      for (const auto& [id, ent] : resident_)
        if (ent.pin_count == 0) any_unpinned = true;
      if (!any_unpinned)
        raise(Errc::nothing_to_spill, "all resident objects pinned by executing tasks");
    }
    return freed;
  }

  // Drops every copy this node holds; called when the object is collected.
  void purge(ObjectId id) {
    std::unique_lock<std::mutex> lk(mu_);
    evict_locked(id, /*notify_runtime=*/false);
    auto it = spilled_.find(id);
    if (it != spilled_.end()) {
      release_chunk_locked(it->second);
      spilled_.erase(it);
    }
    admit_cv_.notify_all();
  }

  // Simulates losing the file behind a spilled object (test hook).
  void corrupt_spill_copy(ObjectId id) {
    std::lock_guard<std::mutex> lk(mu_);
    auto it = spilled_.find(id);
    if (it != spilled_.end()) {
      auto f = files_.find(it->second.file_id);
      if (f != files_.end()) std::filesystem::remove(f->second.path);
    }
  }

  std::vector<std::pair<std::string, uint64_t>> spill_file_inventory() const {
    std::lock_guard<std::mutex> lk(mu_);
    std::vector<std::pair<std::string, uint64_t>> out;
    for (const auto& [fid, f] : files_) out.emplace_back(f.path.string(), f.total_bytes);
    return out;
  }

 private:
  struct Resident {
    Value value;
    uint64_t access_seq = 0;
    int pin_count = 0;
  };

  struct SpillFile {
    std::filesystem::path path;
    uint64_t total_bytes = 0;
    int live_objects = 0;
  };

  // --- memory admission -------------------------------------------------

  // Waits until `size` fits under the limit, evicting and spilling as
  // needed. Returns false when the caller should take the fallback path.
  // The lock is held from a successful admit through the matching insert,
  // so no other allocation can slip in between.
  bool admit_locked(std::unique_lock<std::mutex>& lk, uint64_t size, bool can_wait) {
    if (usage_.load() + size <= cfg_.memory_limit) return true;
    waiting_++;
    metrics_->note_queue_depth(waiting_);
    auto deadline = Clock::now() + std::chrono::milliseconds(100);
    bool ok = false;
    for (;;) {
      free_memory_locked(usage_.load() + size - cfg_.memory_limit, /*force_tail=*/false);
      if (usage_.load() + size <= cfg_.memory_limit) {
        ok = true;
        break;
      }
      // Forced tail write: fusing held back a sub-threshold remainder but the
      // allocation still cannot proceed.
      free_memory_locked(usage_.load() + size - cfg_.memory_limit, /*force_tail=*/true);
      if (usage_.load() + size <= cfg_.memory_limit) {
        ok = true;
        break;
      }
      if (!can_wait || dead_) break;
      // Everything left is pinned; wait briefly for running tasks to unpin,
      // then take the filesystem fallback to keep the job live.
      if (Clock::now() >= deadline) break;
      admit_cv_.wait_for(lk, std::chrono::milliseconds(2));
    }
    waiting_--;
    return ok;
  }

  void insert_locked(ObjectId id, const Value& value) {
    usage_.fetch_add(value->size());
    Resident r;
    r.value = value;
    r.access_seq = ++access_counter_;
    resident_[id] = std::move(r);
  }

  // --- eviction and spilling --------------------------------------------

  // Drops clean unpinned memory copies in LRU order until `needed` bytes are
  // freed; writes nothing.
  void evict_clean_locked(uint64_t needed) {
    std::vector<std::pair<uint64_t, ObjectId>> order;
    for (const auto& [id, ent] : resident_)
      if (ent.pin_count == 0) order.emplace_back(ent.access_seq, id);
    std::sort(order.begin(), order.end());
    uint64_t freed = 0;
    for (const auto& [seq, id] : order) {
      if (freed >= needed) break;
      CopyStatus st = cbs_.copy_status ? cbs_.copy_status(id) : CopyStatus{};
      if (spilled_.count(id)) st.spilled_here = true;
      if (!st.spilled_here && !st.copy_elsewhere) continue;
      freed += resident_[id].value->size();
      evict_locked(id);
    }
  }

  void evict_locked(ObjectId id, bool notify_runtime = true) {
    auto it = resident_.find(id);
    if (it == resident_.end()) return;
    usage_.fetch_sub(it->second.value->size());
    resident_.erase(it);
    trace_->record(EventKind::object_evicted, id.str(), node_);
    if (notify_runtime && cbs_.on_mem_evicted) cbs_.on_mem_evicted(id);
    admit_cv_.notify_all();
  }

  // Frees at least `needed` bytes if possible. Victims are sealed unpinned
  // objects in LRU order by last access: copies that survive elsewhere are
  // dropped for free, the rest are written out fused into files of at least
  // fuse_threshold bytes. Writing stops once the need is met (rounded up to
  // a full fused file so small allocations amortize); a sub-threshold
  // remainder is kept in memory unless force_tail is set.
  void free_memory_locked(uint64_t needed, bool force_tail) {
    std::vector<std::pair<uint64_t, ObjectId>> order;
    for (const auto& [id, ent] : resident_)
      if (ent.pin_count == 0) order.emplace_back(ent.access_seq, id);
    std::sort(order.begin(), order.end());

    uint64_t freed = 0;
    std::vector<ObjectId> group;
    uint64_t group_bytes = 0;
    for (const auto& [seq, id] : order) {
      if (freed >= needed) break;
      CopyStatus st = cbs_.copy_status ? cbs_.copy_status(id) : CopyStatus{};
      if (spilled_.count(id)) st.spilled_here = true;
      uint64_t size = resident_[id].value->size();
      if (st.spilled_here || st.copy_elsewhere) {
        freed += size;
        evict_locked(id);
        continue;
      }
      group.push_back(id);
      group_bytes += size;
      if (cfg_.fuse_threshold == 0 || group_bytes >= cfg_.fuse_threshold) {
        freed += group_bytes;
        write_fused_locked(group);
        group.clear();
        group_bytes = 0;
      }
    }
    if (!group.empty() && (force_tail || freed < needed)) {
      // The remainder must go out anyway to make progress.
      write_fused_locked(group);
    }
  }

  void write_fused_locked(const std::vector<ObjectId>& group) {
    if (group.empty()) return;
    uint64_t fid = next_file_id_++;
    SpillFile f;
    f.path = dir_ / ("spill_" + std::to_string(fid) + ".bin");
    std::ofstream bin(f.path, std::ios::binary | std::ios::trunc);
    std::ofstream idx(f.path.string() + ".idx", std::ios::trunc);
    uint64_t offset = 0;
    for (ObjectId id : group) {
      const Value& v = resident_[id].value;
      bin.write(reinterpret_cast<const char*>(v->data()), static_cast<std::streamsize>(v->size()));
      idx << "{\"object_id\":\"" << id.str() << "\",\"offset\":" << offset
          << ",\"length\":" << v->size() << ",\"checksum\":" << fnv1a64(*v) << "}\n";
      SpillAddress addr{fid, offset, v->size()};
      spilled_[id] = addr;
      offset += v->size();
      f.live_objects++;
      metrics_->bytes_spilled.fetch_add(v->size());
      trace_->record(EventKind::object_spilled, id.str(), node_);
      if (cbs_.on_spilled) cbs_.on_spilled(id, addr);
    }
    bin.flush();
    f.total_bytes = offset;
    files_[fid] = std::move(f);
    metrics_->spill_files_created.fetch_add(1);
    for (ObjectId id : group) evict_locked(id);
  }

  // Fallback: seal a task output straight to its own file when memory cannot
  // admit it.
  void write_direct_locked(ObjectId id, const Value& value) {
    uint64_t fid = next_file_id_++;
    SpillFile f;
    f.path = dir_ / ("spill_" + std::to_string(fid) + ".bin");
    std::ofstream bin(f.path, std::ios::binary | std::ios::trunc);
    std::ofstream idx(f.path.string() + ".idx", std::ios::trunc);
    bin.write(reinterpret_cast<const char*>(value->data()),
              static_cast<std::streamsize>(value->size()));
    idx << "{\"object_id\":\"" << id.str() << "\",\"offset\":0,\"length\":" << value->size()
        << ",\"checksum\":" << fnv1a64(*value) << "}\n";
    bin.flush();
    f.total_bytes = value->size();
    f.live_objects = 1;
    SpillAddress addr{fid, 0, value->size()};
    spilled_[id] = addr;
    files_[fid] = std::move(f);
    metrics_->bytes_spilled.fetch_add(value->size());
    metrics_->spill_files_created.fetch_add(1);
    trace_->record(EventKind::object_spilled, id.str(), node_);
    if (cbs_.on_spilled) cbs_.on_spilled(id, addr);
  }

  Value read_chunk(ObjectId id, const SpillAddress& addr) {
    std::filesystem::path path;
    {
      std::lock_guard<std::mutex> lk(mu_);
      auto it = files_.find(addr.file_id);
      if (it == files_.end()) raise(Errc::spill_file_missing, "spill file deleted");
      path = it->second.path;
    }
    std::ifstream in(path, std::ios::binary);
    if (!in) raise(Errc::spill_file_missing, "cannot open " + path.string());
    Bytes buf(addr.length);
    in.seekg(static_cast<std::streamoff>(addr.offset));
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(addr.length));
    if (in.gcount() != static_cast<std::streamsize>(addr.length))
      raise(Errc::spill_file_missing, "truncated spill chunk for " + id.str());
    return make_value(std::move(buf));
  }

  void release_chunk_locked(const SpillAddress& addr) {
    auto it = files_.find(addr.file_id);
    if (it == files_.end()) return;
    if (--it->second.live_objects <= 0) {
      std::error_code ec;
      std::filesystem::remove(it->second.path, ec);
      std::filesystem::remove(it->second.path.string() + ".idx", ec);
      files_.erase(it);
    }
  }

  NodeId node_;
  StoreConfig cfg_;
  IoMetrics* metrics_;
  SchedulerTrace* trace_;
  StoreCallbacks cbs_;
  std::filesystem::path dir_;

  mutable std::mutex mu_;
  std::condition_variable admit_cv_;
  std::condition_variable overshoot_cv_;
  bool overshoot_active_ = false;
  bool dead_ = false;
  uint64_t waiting_ = 0;
  std::atomic<uint64_t> usage_{0};
  uint64_t access_counter_ = 0;
  std::unordered_map<ObjectId, Resident, ObjectIdHash> resident_;
  std::unordered_map<ObjectId, SpillAddress, ObjectIdHash> spilled_;
  std::map<uint64_t, SpillFile> files_;
  uint64_t next_file_id_ = 1;
};

}  // namespace dfut
