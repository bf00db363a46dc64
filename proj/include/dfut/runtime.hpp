#pragma once

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <deque>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <thread>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "dfut/common.hpp"
#include "dfut/error.hpp"
#include "dfut/metrics.hpp"
#include "dfut/store.hpp"
#include "dfut/task.hpp"
#include "dfut/trace.hpp"

namespace dfut {

// ---------------------------------------------------------------------------
// Failure injection

struct FailureAction {
  enum class Kind { kill_node, kill_executor, restart_node };
  Kind kind = Kind::kill_node;
  NodeId node = 0;
  int slot = 0;
};

struct FailureTrigger {
  // Exactly one of these is set.
  std::optional<std::chrono::milliseconds> at_time;
  std::optional<uint64_t> after_tasks;  // counts globally finished tasks
  FailureAction action;
};

using FailurePlan = std::vector<FailureTrigger>;

// ---------------------------------------------------------------------------

struct RuntimeConfig {
  int nodes = 1;
  int slots_per_node = 1;
  StoreConfig store;
  int max_retries = 3;  // per lineage record
  uint64_t seed = 0x5eedULL;
};

struct WaitResult {
  std::vector<ObjectRef> ready;
  std::vector<ObjectRef> pending;
  bool timed_out = false;
};

// The distributed-futures engine: task submission, dependency resolution,
// scheduling onto simulated nodes, reference counting, and lineage-based
// reconstruction. Nodes are in-process constructs: a fixed executor pool plus
// a bounded object store each. The public facade is thread-safe.
class Runtime {
 public:
  Runtime(RuntimeConfig cfg, FunctionRegistry registry)
      : cfg_(cfg), registry_(std::move(registry)), trace_(Clock::now()) {
    if (cfg_.nodes < 1 || cfg_.slots_per_node < 1)
      raise(Errc::bad_config, "need at least one node and one slot");
    if (cfg_.store.spill_dir.empty()) {
      auto dir = std::filesystem::temp_directory_path() /
                 ("dfut_spill_" + std::to_string(splitmix64(
                      static_cast<uint64_t>(Clock::now().time_since_epoch().count()))));
      cfg_.store.spill_dir = dir.string();
      owns_spill_dir_ = true;
    }
    nodes_.reserve(cfg_.nodes);
    for (NodeId n = 0; n < cfg_.nodes; ++n) nodes_.push_back(std::make_unique<Node>());
    for (NodeId n = 0; n < cfg_.nodes; ++n) init_node(n);
    for (NodeId n = 0; n < cfg_.nodes; ++n) start_node_threads(n);
  }

  ~Runtime() {
    {
      std::lock_guard<std::mutex> lk(mu_);
      shutdown_ = true;
    }
    runnable_cv_.notify_all();
    sealed_cv_.notify_all();
    fetch_cv_.notify_all();
    for (auto& node : nodes_) {
      for (auto& t : node->executors)
        if (t.joinable()) t.join();
      if (node->prefetcher.joinable()) node->prefetcher.join();
    }
    if (failure_thread_.joinable()) failure_thread_.join();
    if (owns_spill_dir_) {
      std::error_code ec;
      std::filesystem::remove_all(cfg_.store.spill_dir, ec);
    }
  }

  Runtime(const Runtime&) = delete;
  Runtime& operator=(const Runtime&) = delete;

  // ------------------------------------------------------------------
  // Distributed futures API

  // Non-blocking: hands back num_returns refs immediately. The task becomes
  // runnable once every argument object is sealed and available.
  std::vector<ObjectRef> submit(TaskSpec spec) {
    if (!registry_.contains(spec.function_id)) raise(Errc::unknown_function, spec.function_id);
    if (spec.num_returns < 1) raise(Errc::bad_config, "num_returns must be positive");

    std::unique_lock<std::mutex> lk(mu_);
    spec.task_id = TaskId{next_task_id_++};
    spec.attempt = 0;
    // Attempt-independent seed so deterministic replays are byte-identical.
    if (spec.rng_seed == 0) spec.rng_seed = prng_word(cfg_.seed, 0x7a51, spec.task_id.v);

    // Arguments are fixed at submission; every ref argument must be live.
    for (const auto& a : spec.args) {
      if (!a.is_ref()) continue;
      ObjectInfo* info = find_info(a.ref().id);
      if (!info || (info->user_refs <= 0 && info->task_refs <= 0))
        raise(Errc::dead_reference, "argument " + a.ref().id.str() + " has no live references");
      if (info->cancelled) raise(Errc::cancelled, "argument was cancelled");
    }

    auto rec = std::make_shared<TaskRecord>();
    rec->spec = std::move(spec);
    rec->retries_left = cfg_.max_retries;
    rec->cancel_flag = std::make_shared<std::atomic<bool>>(false);

    std::vector<ObjectRef> refs;
    for (int i = 0; i < rec->spec.num_returns; ++i) {
      ObjectId oid{prng_word(cfg_.seed, 0x0b1d, rec->spec.task_id.v * 64 + i) | 1ull,
                   rec->spec.task_id.v * 64 + static_cast<uint64_t>(i)};
      auto info = std::make_unique<ObjectInfo>();
      info->id = oid;
      info->creator = rec->spec.task_id;
      info->user_refs = 1;  // the handle returned to the caller
      info->tag = rec->spec.tag;
      objects_[oid] = std::move(info);
      rec->returns.push_back(oid);
      refs.push_back(ObjectRef{oid, rec->spec.task_id, 0});
    }
    for (const auto& a : rec->spec.args)
      if (a.is_ref()) objects_[a.ref().id]->task_refs++;

    tasks_[rec->spec.task_id] = rec;
    trace_.record(EventKind::task_submitted, rec->spec.task_id.str(), kNoNode, rec->spec.tag);
    schedule_locked(rec);
    lk.unlock();
    runnable_cv_.notify_all();
    return refs;
  }

  // Blocks until the value is sealed and readable, restoring, pulling, or
  // reconstructing as needed, then returns the immutable bytes.
  Value get(const ObjectRef& ref, Duration timeout = kForever) {
    auto deadline = (timeout == kForever) ? TimePoint::max() : Clock::now() + timeout;
    std::unique_lock<std::mutex> lk(mu_);
    for (;;) {
      ObjectInfo* info = require_info(ref.id);
      if (info->user_refs <= 0) raise(Errc::dead_reference, ref.id.str());
      if (info->cancelled) raise(Errc::cancelled, "object's task was cancelled");
      check_creator_failure_locked(*info);

      if (info->sealed) {
        NodeId mem = pick_alive_locked(info->mem_nodes);
        if (mem != kNoNode) {
          auto store = nodes_[mem]->store;
          lk.unlock();
          auto v = store->read_resident(ref.id);
          if (v) return *v;
          lk.lock();
          continue;  // evicted between the lookup and the read
        }
        NodeId spl = pick_alive_locked(keys_of(info->spill_nodes));
        if (spl != kNoNode) {
          auto store = nodes_[spl]->store;
          lk.unlock();
          try {
            Value v = store->read_spilled(ref.id);
            if (cfg_.store.fetch_latency.count() > 0)
              std::this_thread::sleep_for(cfg_.store.fetch_latency);
            return v;
          } catch (const Error& e) {
            if (e.code() != Errc::spill_file_missing) throw;
            lk.lock();
            info = require_info(ref.id);
            info->spill_nodes.erase(spl);
            continue;  // copy is gone; fall through to reconstruction
          }
        }
        // Sealed but no reachable copy: lost. Replay its lineage.
        reconstruct_locked(ref.id);
      }
      if (sealed_cv_.wait_until(lk, deadline) == std::cv_status::timeout)
        raise(Errc::timeout, "get " + ref.id.str());
    }
  }

  // Blocks until num_ready of the refs are complete, without fetching values.
  WaitResult wait(const std::vector<ObjectRef>& refs, size_t num_ready,
                  Duration timeout = kForever) {
    if (refs.empty()) raise(Errc::bad_config, "wait on empty ref list");
    if (num_ready < 1 || num_ready > refs.size())
      raise(Errc::bad_config, "num_ready out of range");
    auto deadline = (timeout == kForever) ? TimePoint::max() : Clock::now() + timeout;

    std::unique_lock<std::mutex> lk(mu_);
    for (;;) {
      WaitResult res;
      for (const auto& r : refs) {
        ObjectInfo* info = require_info(r.id);
        bool terminal = info->sealed || info->cancelled || creator_failed_locked(*info);
        (terminal ? res.ready : res.pending).push_back(r);
      }
      if (res.ready.size() >= num_ready) return res;
      if (sealed_cv_.wait_until(lk, deadline) == std::cv_status::timeout) {
        res.timed_out = true;
        return res;
      }
    }
  }

  // Stops the producing task if it has not finished. A cancelled object is
  // never sealed. Returns false if the task already finished.
  bool cancel(const ObjectRef& ref) {
    bool cancelled = true;
    {
      std::lock_guard<std::mutex> lk(mu_);
      ObjectInfo* info = require_info(ref.id);
      if (!info->creator.valid()) return false;  // put roots cannot be cancelled
      auto rec = tasks_.at(info->creator);
      switch (rec->status) {
        case TaskStatus::finished:
        case TaskStatus::failed:
          return false;
        case TaskStatus::cancelled:
          return true;
        case TaskStatus::running:
          rec->cancel_flag->store(true);
          mark_cancelled_locked(rec);
          break;
        case TaskStatus::pending:
        case TaskStatus::waiting:
        case TaskStatus::queued:
          unqueue_locked(rec);
          mark_cancelled_locked(rec);
          release_arg_holds_locked(rec);
          break;
      }
    }
    sealed_cv_.notify_all();
    drain_purges();
    return cancelled;
  }

  // Decrements the user count. At zero (and with no pending consumers) the
  // object's memory and spill copies become collectible; lineage is retained.
  void drop_ref(const ObjectRef& ref) {
    {
      std::lock_guard<std::mutex> lk(mu_);
      ObjectInfo* info = require_info(ref.id);
      if (info->user_refs <= 0) raise(Errc::double_drop, ref.id.str());
      info->user_refs--;
      collect_if_dead_locked(*info);
    }
    drain_purges();
  }

  // Registers a caller-provided value as a root object. Roots created this
  // way have no producing task and cannot be reconstructed after node loss.
  ObjectRef put_root(Bytes bytes, NodeId node = 0) {
    if (bytes.empty()) raise(Errc::bad_config, "put of empty value");
    ObjectId oid{prng_word(cfg_.seed, 0xf00d, next_root_id_.fetch_add(1)) | 1ull, 0x8000000000000000ull | next_root_id_.load()};
    Value v = make_value(std::move(bytes));
    std::shared_ptr<NodeStore> store;
    {
      std::lock_guard<std::mutex> lk(mu_);
      if (node < 0 || node >= cfg_.nodes || !nodes_[node]->alive)
        raise(Errc::node_dead, "put_root target node");
      auto info = std::make_unique<ObjectInfo>();
      info->id = oid;
      info->user_refs = 1;
      info->reconstructible = false;
      info->size = v->size();
      objects_[oid] = std::move(info);
      store = nodes_[node]->store;
    }
    auto place = store->seal(oid, v);
    {
      std::lock_guard<std::mutex> lk(mu_);
      ObjectInfo* info = require_info(oid);
      info->sealed = true;
      if (place == NodeStore::SealPlace::memory) info->mem_nodes.insert(node);
      nodes_[node]->metrics.objects_created.fetch_add(1);
      trace_.record(EventKind::object_sealed, oid.str(), node, "root");
    }
    sealed_cv_.notify_all();
    return ObjectRef{oid, TaskId{}, v->size()};
  }

  // ------------------------------------------------------------------
  // Cluster control

  // Kills the executor slot's in-flight task (retried, attempt+1). The
  // node's store is untouched: no objects are lost or reconstructed.
  void kill_executor(NodeId node, int slot) {
    std::lock_guard<std::mutex> lk(mu_);
    if (node < 0 || node >= cfg_.nodes) return;
    auto& sl = nodes_[node]->slots.at(slot);
    if (!sl.current.valid()) return;  // idle executor: nothing to retry
    auto it = tasks_.find(sl.current);
    if (it != tasks_.end() && it->second->status == TaskStatus::running &&
        it->second->attempt_token == sl.token) {
      it->second->poisoned = true;
      it->second->cancel_flag->store(true);  // interrupt long-running functions
    }
  }

  // Kills the node: executors fail and the store's contents (memory and
  // spill files both) become unreachable, modeling machine loss.
  void kill_node(NodeId node) {
    std::shared_ptr<NodeStore> doomed;
    {
      std::lock_guard<std::mutex> lk(mu_);
      if (node < 0 || node >= cfg_.nodes || !nodes_[node]->alive) return;
      Node& n = *nodes_[node];
      n.alive = false;
      n.dead_flag->store(true);
      doomed = n.store;
      trace_.record(EventKind::node_failed, "node" + std::to_string(node), node);

      for (auto& sl : n.slots) {
        if (!sl.current.valid()) continue;
        auto it = tasks_.find(sl.current);
        if (it != tasks_.end() && it->second->status == TaskStatus::running &&
            it->second->attempt_token == sl.token) {
          it->second->poisoned = true;
          it->second->cancel_flag->store(true);
        }
      }
      // Re-home queued tasks; affinity to a dead node is soft.
      std::deque<TaskId> orphans;
      orphans.swap(n.runnable);
      for (TaskId t : orphans) {
        auto rec = tasks_.at(t);
        rec->assigned = pick_node_locked(rec->spec);
        nodes_[rec->assigned]->runnable.push_back(t);
      }
      // Objects with their only copies on this node are lost.
      for (auto& [oid, info] : objects_) {
        info->mem_nodes.erase(node);
        info->spill_nodes.erase(node);
      }
    }
    if (doomed) doomed->mark_dead();
    runnable_cv_.notify_all();
    fetch_cv_.notify_all();
  }

  // A restarted node rejoins with a fresh, empty store under the old id.
  void restart_node(NodeId node) {
    {
      std::lock_guard<std::mutex> lk(mu_);
      if (node < 0 || node >= cfg_.nodes || nodes_[node]->alive) return;
      Node& n = *nodes_[node];
      n.generation++;
      n.dead_flag = std::make_shared<std::atomic<bool>>(false);
      n.store = make_store(node, n.generation);
      n.alive = true;
    }
    runnable_cv_.notify_all();
  }

  void set_failure_plan(FailurePlan plan) {
    std::lock_guard<std::mutex> lk(mu_);
    plan_ = std::move(plan);
    plan_fired_.assign(plan_.size(), false);
    bool need_timer = false;
    for (const auto& t : plan_)
      if (t.at_time) need_timer = true;
    if (need_timer && !failure_thread_.joinable())
      failure_thread_ = std::thread([this] { timer_loop(); });
  }

  // ------------------------------------------------------------------
  // Introspection

  SchedulerTrace& trace() { return trace_; }
  const RuntimeConfig& config() const { return cfg_; }
  int num_nodes() const { return cfg_.nodes; }

  bool node_alive(NodeId n) const {
    std::lock_guard<std::mutex> lk(mu_);
    return n >= 0 && n < cfg_.nodes && nodes_[n]->alive;
  }

  MetricsSnapshot node_metrics(NodeId n) const {
    std::lock_guard<std::mutex> lk(mu_);
    return snapshot_of(nodes_[n]->metrics);
  }

  MetricsSnapshot aggregate_metrics() const {
    std::lock_guard<std::mutex> lk(mu_);
    MetricsSnapshot s;
    for (const auto& n : nodes_) s += snapshot_of(n->metrics);
    s.task_retries = task_retries_.load();
    s.reconstructions = reconstructions_.load();
    return s;
  }

  uint64_t object_size(const ObjectRef& ref) const {
    std::lock_guard<std::mutex> lk(mu_);
    auto it = objects_.find(ref.id);
    return it == objects_.end() ? 0 : it->second->size;
  }

  bool object_sealed(const ObjectRef& ref) const {
    std::lock_guard<std::mutex> lk(mu_);
    auto it = objects_.find(ref.id);
    return it != objects_.end() && it->second->sealed && !it->second->cancelled;
  }

  // A live node currently holding the object in memory or on disk.
  NodeId object_home(const ObjectRef& ref) const {
    std::lock_guard<std::mutex> lk(mu_);
    auto it = objects_.find(ref.id);
    if (it == objects_.end()) return kNoNode;
    NodeId n = pick_alive_locked(it->second->mem_nodes);
    if (n != kNoNode) return n;
    return pick_alive_locked(keys_of(it->second->spill_nodes));
  }

  uint64_t store_usage(NodeId n) const {
    std::lock_guard<std::mutex> lk(mu_);
    return nodes_[n]->store->usage();
  }

  std::shared_ptr<NodeStore> store_handle(NodeId n) {
    std::lock_guard<std::mutex> lk(mu_);
    return nodes_[n]->store;
  }

  uint64_t task_retries() const { return task_retries_.load(); }
  uint64_t reconstructions() const { return reconstructions_.load(); }

 private:
  enum class TaskStatus { pending, waiting, queued, running, finished, failed, cancelled };

  struct TaskRecord {
    TaskSpec spec;
    TaskStatus status = TaskStatus::pending;
    std::vector<ObjectId> returns;
    NodeId assigned = kNoNode;
    int unresolved = 0;
    int retries_left = 0;
    uint64_t attempt_token = 0;
    bool poisoned = false;
    std::shared_ptr<std::atomic<bool>> cancel_flag;
    std::string error;
    bool arg_holds_released = false;
  };

  struct ObjectInfo {
    ObjectId id;
    TaskId creator;  // invalid for put roots
    uint64_t size = 0;
    bool sealed = false;
    bool cancelled = false;
    bool reconstructible = true;
    int user_refs = 0;
    int task_refs = 0;
    std::set<NodeId> mem_nodes;
    std::map<NodeId, SpillAddress> spill_nodes;
    std::vector<TaskId> waiting_tasks;
    std::string tag;
  };

  struct Slot {
    TaskId current;
    uint64_t token = 0;
  };

  struct Node {
    std::atomic<bool> alive{true};
    std::shared_ptr<std::atomic<bool>> dead_flag = std::make_shared<std::atomic<bool>>(false);
    std::shared_ptr<NodeStore> store;
    std::deque<TaskId> runnable;
    std::vector<std::thread> executors;
    std::thread prefetcher;
    std::vector<Slot> slots;
    std::unordered_set<ObjectId, ObjectIdHash> fetch_inflight;
    IoMetrics metrics;
    int generation = 0;
  };

  // --- construction -------------------------------------------------

  std::shared_ptr<NodeStore> make_store(NodeId n, int generation) {
    StoreConfig sc = cfg_.store;
    sc.spill_dir = (std::filesystem::path(cfg_.store.spill_dir) /
                    ("gen" + std::to_string(generation)))
                       .string();
    StoreCallbacks cbs;
    cbs.copy_status = [this, n](ObjectId id) { return copy_status_for(id, n); };
    cbs.on_spilled = [this, n](ObjectId id, const SpillAddress& a) {
      std::lock_guard<std::mutex> lk(mu_);
      auto it = objects_.find(id);
      if (it != objects_.end()) it->second->spill_nodes[n] = a;
    };
    cbs.on_mem_evicted = [this, n](ObjectId id) {
      std::lock_guard<std::mutex> lk(mu_);
      auto it = objects_.find(id);
      if (it != objects_.end()) it->second->mem_nodes.erase(n);
    };
    cbs.on_restored = [this, n](ObjectId id) {
      std::lock_guard<std::mutex> lk(mu_);
      auto it = objects_.find(id);
      if (it != objects_.end() && nodes_[n]->alive) it->second->mem_nodes.insert(n);
    };
    return std::make_shared<NodeStore>(n, sc, &nodes_[n]->metrics, &trace_, std::move(cbs));
  }

  void init_node(NodeId n) {
    Node& node = *nodes_[n];
    node.slots.resize(cfg_.slots_per_node);
    node.store = make_store(n, 0);
  }

  void start_node_threads(NodeId n) {
    Node& node = *nodes_[n];
    for (int s = 0; s < cfg_.slots_per_node; ++s)
      node.executors.emplace_back([this, n, s] { executor_loop(n, s); });
    if (cfg_.store.prefetch_enabled)
      node.prefetcher = std::thread([this, n] { prefetch_loop(n); });
  }

  // --- helpers -------------------------------------------------------

  ObjectInfo* find_info(ObjectId id) {
    auto it = objects_.find(id);
    return it == objects_.end() ? nullptr : it->second.get();
  }

  ObjectInfo* require_info(ObjectId id) {
    ObjectInfo* p = find_info(id);
    if (!p) raise(Errc::dead_reference, "unknown object " + id.str());
    return p;
  }

  static std::set<NodeId> keys_of(const std::map<NodeId, SpillAddress>& m) {
    std::set<NodeId> out;
    for (const auto& [k, v] : m) out.insert(k);
    return out;
  }

  NodeId pick_alive_locked(const std::set<NodeId>& nodes) const {
    for (NodeId n : nodes)
      if (nodes_[n]->alive) return n;
    return kNoNode;
  }

  CopyStatus copy_status_for(ObjectId id, NodeId self) {
    std::lock_guard<std::mutex> lk(mu_);
    CopyStatus st;
    auto it = objects_.find(id);
    if (it == objects_.end()) return st;
    const ObjectInfo& info = *it->second;
    st.spilled_here = info.spill_nodes.count(self) && nodes_[self]->alive;
    for (NodeId n : info.mem_nodes)
      if (n != self && nodes_[n]->alive) st.copy_elsewhere = true;
    for (const auto& [n, a] : info.spill_nodes)
      if (n != self && nodes_[n]->alive) st.copy_elsewhere = true;
    return st;
  }

  bool creator_failed_locked(const ObjectInfo& info) const {
    if (!info.creator.valid()) return false;
    auto it = tasks_.find(info.creator);
    return it != tasks_.end() && it->second->status == TaskStatus::failed;
  }

  void check_creator_failure_locked(const ObjectInfo& info) {
    if (!creator_failed_locked(info)) return;
    const auto& rec = tasks_.at(info.creator);
    if (rec->retries_left < 0)
      raise(Errc::reconstruction_failed, "task " + info.creator.str() + ": " + rec->error);
    raise(Errc::task_failed, "task " + info.creator.str() + ": " + rec->error);
  }

  // --- scheduling -----------------------------------------------------

  NodeId pick_node_locked(const TaskSpec& spec) {
    if (spec.placement != kNoNode && spec.placement >= 0 && spec.placement < cfg_.nodes &&
        nodes_[spec.placement]->alive)
      return spec.placement;
    if (spec.placement != kNoNode) {
      // Affinity is soft: the hinted node is dead, take the least-loaded
      // live node (ties to the lowest id).
      NodeId best = kNoNode;
      size_t best_load = SIZE_MAX;
      for (NodeId n = 0; n < cfg_.nodes; ++n) {
        if (!nodes_[n]->alive) continue;
        size_t load = nodes_[n]->runnable.size();
        for (const auto& sl : nodes_[n]->slots) load += sl.current.valid();
        if (load < best_load) {
          best_load = load;
          best = n;
        }
      }
      if (best == kNoNode) raise(Errc::node_dead, "no live nodes");
      return best;
    }
    // Unhinted tasks rotate round-robin over live nodes, deterministic in
    // submission order.
    for (int i = 0; i < cfg_.nodes; ++i) {
      NodeId n = static_cast<NodeId>(rr_counter_++ % cfg_.nodes);
      if (nodes_[n]->alive) return n;
    }
    raise(Errc::node_dead, "no live nodes");
  }

  // Counts unresolved dependencies and either queues the task or parks it.
  // Placement is decided here, in submission order, so unhinted round-robin
  // assignment does not depend on the order dependencies happen to seal.
  void schedule_locked(const std::shared_ptr<TaskRecord>& rec) {
    if (rec->assigned == kNoNode || !nodes_[rec->assigned]->alive)
      rec->assigned = pick_node_locked(rec->spec);
    rec->unresolved = 0;
    for (const auto& a : rec->spec.args) {
      if (!a.is_ref()) continue;
      ObjectInfo* info = require_info(a.ref().id);
      if (info->cancelled || creator_failed_locked(*info)) {
        fail_task_locked(rec, "dependency " + info->id.str() + " is unrecoverable");
        return;
      }
      bool satisfied = info->sealed && object_available_locked(*info);
      if (!satisfied) {
        info->waiting_tasks.push_back(rec->spec.task_id);
        rec->unresolved++;
        if (info->sealed && !object_available_locked(*info)) {
          try {
            reconstruct_locked(info->id);
          } catch (const Error& e) {
            fail_task_locked(rec, e.what());  // permanently lost dependency
            return;
          }
        }
      }
    }
    if (rec->unresolved == 0)
      enqueue_locked(rec);
    else
      rec->status = TaskStatus::waiting;
  }

  bool object_available_locked(const ObjectInfo& info) const {
    return pick_alive_locked(info.mem_nodes) != kNoNode ||
           pick_alive_locked(keys_of(info.spill_nodes)) != kNoNode;
  }

  void enqueue_locked(const std::shared_ptr<TaskRecord>& rec) {
    rec->status = TaskStatus::queued;
    if (rec->assigned == kNoNode || !nodes_[rec->assigned]->alive)
      rec->assigned = pick_node_locked(rec->spec);
    nodes_[rec->assigned]->runnable.push_back(rec->spec.task_id);
  }

  void unqueue_locked(const std::shared_ptr<TaskRecord>& rec) {
    if (rec->status != TaskStatus::queued) return;
    auto& q = nodes_[rec->assigned]->runnable;
    q.erase(std::remove(q.begin(), q.end(), rec->spec.task_id), q.end());
  }

  void mark_cancelled_locked(const std::shared_ptr<TaskRecord>& rec) {
    rec->status = TaskStatus::cancelled;
    trace_.record(EventKind::task_cancelled, rec->spec.task_id.str(), rec->assigned,
                  rec->spec.tag);
    for (ObjectId oid : rec->returns) {
      ObjectInfo* info = require_info(oid);
      info->cancelled = true;
      fail_waiters_locked(*info, "dependency cancelled");
    }
  }

  void release_arg_holds_locked(const std::shared_ptr<TaskRecord>& rec) {
    if (rec->arg_holds_released) return;
    rec->arg_holds_released = true;
    for (const auto& a : rec->spec.args) {
      if (!a.is_ref()) continue;
      auto it = objects_.find(a.ref().id);
      if (it != objects_.end() && it->second->task_refs > 0) {
        it->second->task_refs--;
        collect_if_dead_locked(*it->second);
      }
    }
  }

  void fail_task_locked(const std::shared_ptr<TaskRecord>& rec, const std::string& why) {
    unqueue_locked(rec);
    rec->status = TaskStatus::failed;
    rec->error = why;
    release_arg_holds_locked(rec);
    for (ObjectId oid : rec->returns)
      fail_waiters_locked(*require_info(oid), "upstream task failed: " + why);
    sealed_cv_.notify_all();
  }

  void notify_object_available_locked(ObjectInfo& info) {
    auto waiters = std::move(info.waiting_tasks);
    info.waiting_tasks.clear();
    for (TaskId t : waiters) {
      auto it = tasks_.find(t);
      if (it == tasks_.end()) continue;
      auto& rec = it->second;
      if (rec->status != TaskStatus::waiting) continue;  // stale park entry
      if (rec->unresolved > 0) rec->unresolved--;
      if (rec->unresolved == 0) enqueue_locked(rec);
    }
  }

  // Consumers of a cancelled or permanently failed object fail in turn.
  void fail_waiters_locked(ObjectInfo& info, const std::string& why) {
    auto waiters = std::move(info.waiting_tasks);
    info.waiting_tasks.clear();
    for (TaskId t : waiters) {
      auto rec = tasks_.at(t);
      if (rec->status == TaskStatus::waiting || rec->status == TaskStatus::queued ||
          rec->status == TaskStatus::pending) {
        unqueue_locked(rec);
        rec->status = TaskStatus::failed;
        rec->error = why;
        release_arg_holds_locked(rec);
        for (ObjectId oid : rec->returns) fail_waiters_locked(*require_info(oid), why);
      }
    }
  }

  // --- lineage reconstruction ------------------------------------------

  // Re-executes the producing task of a lost object. Transitively lost
  // inputs are discovered at fetch time and replayed the same way, so the
  // DAG re-executes in topological order.
  void reconstruct_locked(ObjectId id) {
    ObjectInfo* info = require_info(id);
    if (info->sealed && object_available_locked(*info)) return;  // live copy exists
    if (info->cancelled) raise(Errc::cancelled, "cannot reconstruct a cancelled object");
    if (!info->creator.valid() || !info->reconstructible)
      raise(Errc::non_reconstructible_root,
            "object " + id.str() + " was a root lost with its node");
    auto rec = tasks_.at(info->creator);
    switch (rec->status) {
      case TaskStatus::pending:
      case TaskStatus::waiting:
      case TaskStatus::queued:
      case TaskStatus::running:
        return;  // an attempt is already in flight
      case TaskStatus::cancelled:
        raise(Errc::cancelled, "producing task was cancelled");
      case TaskStatus::failed:
      case TaskStatus::finished:
        break;
    }
    if (rec->retries_left <= 0) {
      fail_task_locked(rec, "reconstruction retry budget exhausted");
      rec->retries_left = -1;
      raise(Errc::reconstruction_failed, "task " + rec->spec.task_id.str());
    }
    rec->retries_left--;
    rec->spec.attempt++;
    rec->attempt_token++;
    rec->poisoned = false;
    rec->cancel_flag = std::make_shared<std::atomic<bool>>(false);
    // Replay needs the arguments again.
    if (rec->arg_holds_released) {
      rec->arg_holds_released = false;
      for (const auto& a : rec->spec.args)
        if (a.is_ref()) require_info(a.ref().id)->task_refs++;
    }
    for (ObjectId oid : rec->returns) require_info(oid)->sealed = false;
    reconstructions_.fetch_add(1);
    task_retries_.fetch_add(1);
    trace_.record(EventKind::task_retried, rec->spec.task_id.str(), kNoNode,
                  "reason:reconstruction");
    schedule_locked(rec);
    runnable_cv_.notify_all();
  }

  // --- object collection ------------------------------------------------

  // Collection is deferred through a backlog so it can run without mu_.
  void collect_if_dead_locked(ObjectInfo& info) {
    if (info.user_refs > 0 || info.task_refs > 0) return;
    if (!info.sealed && !info.cancelled) return;
    for (NodeId n : info.mem_nodes) purge_backlog_.emplace_back(nodes_[n]->store, info.id);
    for (const auto& [n, a] : info.spill_nodes)
      if (!info.mem_nodes.count(n)) purge_backlog_.emplace_back(nodes_[n]->store, info.id);
    info.mem_nodes.clear();
    info.spill_nodes.clear();
  }

  // Must be called without mu_ held.
  void drain_purges() {
    std::vector<std::pair<std::shared_ptr<NodeStore>, ObjectId>> todo;
    {
      std::lock_guard<std::mutex> lk(mu_);
      todo.swap(purge_backlog_);
    }
    for (auto& [s, id] : todo) s->purge(id);
  }

  // --- failure plan ------------------------------------------------------

  void timer_loop() {
    for (;;) {
      std::vector<FailureAction> due;
      {
        std::lock_guard<std::mutex> lk(mu_);
        if (shutdown_) return;
        auto now = Clock::now();
        for (size_t i = 0; i < plan_.size(); ++i) {
          if (plan_fired_[i] || !plan_[i].at_time) continue;
          if (now - trace_.origin() >= *plan_[i].at_time) {
            plan_fired_[i] = true;
            due.push_back(plan_[i].action);
          }
        }
      }
      for (const auto& a : due) apply_action(a);
      std::this_thread::sleep_for(std::chrono::milliseconds(2));
    }
  }

  void apply_action(const FailureAction& a) {
    switch (a.kind) {
      case FailureAction::Kind::kill_node: kill_node(a.node); break;
      case FailureAction::Kind::kill_executor: kill_executor(a.node, a.slot); break;
      case FailureAction::Kind::restart_node: restart_node(a.node); break;
    }
  }

  std::vector<FailureAction> collect_task_count_triggers_locked() {
    std::vector<FailureAction> due;
    for (size_t i = 0; i < plan_.size(); ++i) {
      if (plan_fired_[i] || !plan_[i].after_tasks) continue;
      if (finished_tasks_ >= *plan_[i].after_tasks) {
        plan_fired_[i] = true;
        due.push_back(plan_[i].action);
      }
    }
    return due;
  }

  // --- executor ---------------------------------------------------------

  void executor_loop(NodeId my_node, int my_slot);
  void prefetch_loop(NodeId my_node);
  void run_attempt(NodeId my_node, const std::shared_ptr<TaskRecord>& rec, uint64_t my_token,
                   const std::shared_ptr<NodeStore>& store,
                   const std::shared_ptr<std::atomic<bool>>& dead_flag);
  void finish_attempt(NodeId my_node, const std::shared_ptr<TaskRecord>& rec, uint64_t my_token,
                      const std::shared_ptr<NodeStore>& store,
                      const std::shared_ptr<std::atomic<bool>>& dead_flag,
                      std::vector<Value> rets, const std::string& error, bool aborted_early);

  struct FetchPlanItem {
    ObjectId id;
    enum class Source { local_mem, local_spill, remote, lost } source = Source::local_mem;
    NodeId from = kNoNode;
  };

  RuntimeConfig cfg_;
  FunctionRegistry registry_;
  SchedulerTrace trace_;
  bool owns_spill_dir_ = false;

  mutable std::mutex mu_;
  std::condition_variable runnable_cv_;
  std::condition_variable sealed_cv_;
  std::condition_variable fetch_cv_;
  bool shutdown_ = false;

  std::vector<std::unique_ptr<Node>> nodes_;
  std::unordered_map<ObjectId, std::unique_ptr<ObjectInfo>, ObjectIdHash> objects_;
  std::unordered_map<TaskId, std::shared_ptr<TaskRecord>, TaskIdHash> tasks_;

  uint64_t next_task_id_ = 1;
  std::atomic<uint64_t> next_root_id_{1};
  uint64_t rr_counter_ = 0;
  uint64_t finished_tasks_ = 0;
  std::atomic<uint64_t> task_retries_{0};
  std::atomic<uint64_t> reconstructions_{0};

  FailurePlan plan_;
  std::vector<bool> plan_fired_;
  std::thread failure_thread_;
  std::vector<std::pair<std::shared_ptr<NodeStore>, ObjectId>> purge_backlog_;
};

}  // namespace dfut

#include "dfut/runtime_exec.hpp"
