#pragma once

// Executor and prefetcher loops for Runtime. Included at the end of
// runtime.hpp; not a standalone header.

#include "dfut/runtime.hpp"

namespace dfut {

inline void Runtime::executor_loop(NodeId my_node, int my_slot) {
  for (;;) {
    std::shared_ptr<TaskRecord> rec;
    std::shared_ptr<NodeStore> store;
    std::shared_ptr<std::atomic<bool>> dead_flag;
    uint64_t my_token = 0;
    {
      std::unique_lock<std::mutex> lk(mu_);
      runnable_cv_.wait(lk, [&] {
        return shutdown_ || (nodes_[my_node]->alive && !nodes_[my_node]->runnable.empty());
      });
      if (shutdown_) return;
      Node& node = *nodes_[my_node];
      TaskId tid = node.runnable.front();
      node.runnable.pop_front();
      rec = tasks_.at(tid);
      rec->status = TaskStatus::running;
      my_token = rec->attempt_token;
      node.slots[my_slot].current = tid;
      node.slots[my_slot].token = my_token;
      store = node.store;
      dead_flag = node.dead_flag;
    }

    run_attempt(my_node, rec, my_token, store, dead_flag);

    {
      std::lock_guard<std::mutex> lk(mu_);
      nodes_[my_node]->slots[my_slot].current = TaskId{};
      nodes_[my_node]->slots[my_slot].token = 0;
    }
    drain_purges();
  }
}

inline void Runtime::run_attempt(NodeId my_node, const std::shared_ptr<TaskRecord>& rec,
                                 uint64_t my_token,
                                 const std::shared_ptr<NodeStore>& store,
                                 const std::shared_ptr<std::atomic<bool>>& dead_flag) {
  // The attempt starts at dispatch: fetching arguments onto this node is part
  // of the task's execution interval.
  trace_.record(EventKind::task_started, rec->spec.task_id.str(), my_node, rec->spec.tag);
  std::vector<Value> args(rec->spec.args.size());
  std::vector<ObjectId> pinned;
  auto unpin_all = [&] {
    for (ObjectId id : pinned) store->unpin(id);
    pinned.clear();
  };

  // ---- resolve arguments -------------------------------------------------
  for (size_t i = 0; i < rec->spec.args.size(); ++i)
    if (!rec->spec.args[i].is_ref())
      args[i] = std::make_shared<const Bytes>(rec->spec.args[i].inline_bytes());

  for (;;) {
    // Plan the next missing argument under the lock, fetch it outside.
    FetchPlanItem item;
    bool have_plan = false;
    bool wait_inflight = false;
    size_t arg_index = 0;
    {
      std::unique_lock<std::mutex> lk(mu_);
      if (rec->status == TaskStatus::cancelled || dead_flag->load() ||
          (rec->poisoned && rec->attempt_token == my_token)) {
        lk.unlock();
        unpin_all();
        finish_attempt(my_node, rec, my_token, store, dead_flag, {}, "", true);
        return;
      }
      for (size_t i = 0; i < rec->spec.args.size() && !have_plan && !wait_inflight; ++i) {
        if (args[i] || !rec->spec.args[i].is_ref()) continue;
        ObjectId id = rec->spec.args[i].ref().id;
        ObjectInfo* info = require_info(id);
        if (info->cancelled || creator_failed_locked(*info)) {
          fail_task_locked(rec, "argument " + id.str() + " is unrecoverable");
          lk.unlock();
          unpin_all();
          return;
        }
        if (!info->sealed || !object_available_locked(*info)) {
          // Lost or superseded: park this task and replay the producer.
          info->waiting_tasks.push_back(rec->spec.task_id);
          rec->unresolved++;
          rec->status = TaskStatus::waiting;
          if (info->sealed) {
            try {
              reconstruct_locked(id);
            } catch (const Error& e) {
              fail_task_locked(rec, e.what());
            }
          }
          lk.unlock();
          unpin_all();
          return;
        }
        if (nodes_[my_node]->fetch_inflight.count(id)) {
          wait_inflight = true;
          arg_index = i;
          item.id = id;
          break;
        }
        arg_index = i;
        item.id = id;
        have_plan = true;
        if (info->mem_nodes.count(my_node)) {
          item.source = FetchPlanItem::Source::local_mem;
        } else if (info->spill_nodes.count(my_node) && nodes_[my_node]->alive) {
          item.source = FetchPlanItem::Source::local_spill;
          nodes_[my_node]->fetch_inflight.insert(id);
        } else {
          NodeId from = pick_alive_locked(info->mem_nodes);
          if (from == kNoNode) from = pick_alive_locked(keys_of(info->spill_nodes));
          item.source = FetchPlanItem::Source::remote;
          item.from = from;
          nodes_[my_node]->fetch_inflight.insert(id);
        }
      }
      if (!have_plan && !wait_inflight) break;  // every argument resolved
      if (wait_inflight) {
        fetch_cv_.wait_for(lk, std::chrono::milliseconds(1));
        continue;
      }
    }

    auto clear_inflight = [&] {
      std::lock_guard<std::mutex> lk(mu_);
      nodes_[my_node]->fetch_inflight.erase(item.id);
      fetch_cv_.notify_all();
    };

    try {
      switch (item.source) {
        case FetchPlanItem::Source::local_mem: {
          auto v = store->read_resident(item.id);
          if (!v) {
            std::lock_guard<std::mutex> lk(mu_);
            require_info(item.id)->mem_nodes.erase(my_node);
            continue;  // evicted under us; replan
          }
          args[arg_index] = *v;
          if (store->pin(item.id)) pinned.push_back(item.id);
          break;
        }
        case FetchPlanItem::Source::local_spill: {
          Value v = store->restore(item.id);
          args[arg_index] = v;
          if (store->pin(item.id)) pinned.push_back(item.id);
          clear_inflight();
          break;
        }
        case FetchPlanItem::Source::remote: {
          std::shared_ptr<NodeStore> src;
          {
            std::lock_guard<std::mutex> lk(mu_);
            if (item.from != kNoNode && nodes_[item.from]->alive)
              src = nodes_[item.from]->store;
          }
          if (!src) {
            clear_inflight();
            continue;  // source died; replan
          }
          Value v;
          if (auto r = src->read_resident(item.id)) {
            v = *r;
          } else {
            v = src->read_spilled(item.id);  // streamed from disk, no restore
          }
          if (cfg_.store.fetch_latency.count() > 0)
            std::this_thread::sleep_for(cfg_.store.fetch_latency);
          store->insert_fetched(item.id, v);
          nodes_[my_node]->metrics.network_bytes.fetch_add(v->size());
          {
            std::lock_guard<std::mutex> lk(mu_);
            if (nodes_[my_node]->alive) require_info(item.id)->mem_nodes.insert(my_node);
          }
          args[arg_index] = v;
          if (store->pin(item.id)) pinned.push_back(item.id);
          clear_inflight();
          break;
        }
        case FetchPlanItem::Source::lost:
          break;
      }
    } catch (const Error& e) {
      clear_inflight();
      if (e.code() == Errc::spill_file_missing || e.code() == Errc::source_lost ||
          e.code() == Errc::node_dead) {
        std::lock_guard<std::mutex> lk(mu_);
        ObjectInfo* info = require_info(item.id);
        if (item.source == FetchPlanItem::Source::local_spill) info->spill_nodes.erase(my_node);
        if (item.source == FetchPlanItem::Source::remote) {
          info->mem_nodes.erase(item.from);
          info->spill_nodes.erase(item.from);
        }
        continue;  // replan; reconstruction kicks in if nothing is left
      }
      unpin_all();
      std::lock_guard<std::mutex> lk(mu_);
      fail_task_locked(rec, e.what());
      return;
    }
  }

  // ---- execute -------------------------------------------------------------
  TaskContext ctx;
  ctx.rng_seed = rec->spec.rng_seed;
  ctx.node = my_node;
  ctx.attempt = rec->spec.attempt;
  ctx.cancel = rec->cancel_flag.get();
  ctx.node_dead = dead_flag.get();

  std::vector<Value> rets;
  std::string error;
  try {
    rets = registry_.lookup(rec->spec.function_id)(args, ctx);
    if (static_cast<int>(rets.size()) != rec->spec.num_returns)
      error = "function returned " + std::to_string(rets.size()) + " values, expected " +
              std::to_string(rec->spec.num_returns);
  } catch (const std::exception& e) {
    error = e.what();
  }
  unpin_all();
  finish_attempt(my_node, rec, my_token, store, dead_flag, std::move(rets), error, false);
}

inline void Runtime::finish_attempt(NodeId my_node, const std::shared_ptr<TaskRecord>& rec,
                                    uint64_t my_token,
                                    const std::shared_ptr<NodeStore>& store,
                                    const std::shared_ptr<std::atomic<bool>>& dead_flag,
                                    std::vector<Value> rets, const std::string& error,
                                    bool aborted_early) {
  enum class Fate { commit, retry, fail, discard };
  Fate fate;
  std::string retry_reason;
  {
    std::lock_guard<std::mutex> lk(mu_);
    if (rec->status == TaskStatus::cancelled) {
      fate = Fate::discard;
      release_arg_holds_locked(rec);
    } else if (rec->attempt_token != my_token) {
      fate = Fate::discard;  // superseded attempt
    } else if (rec->poisoned) {
      fate = Fate::retry;
      retry_reason = "reason:executor_failure";
    } else if (dead_flag->load()) {
      fate = Fate::retry;
      retry_reason = "reason:node_failure";
    } else if (aborted_early) {
      fate = Fate::discard;
    } else if (!error.empty()) {
      fate = Fate::fail;
    } else {
      fate = Fate::commit;
    }

    if (fate == Fate::retry) {
      if (rec->retries_left <= 0) {
        fail_task_locked(rec, "retry budget exhausted");
        sealed_cv_.notify_all();
        return;
      }
      rec->retries_left--;
      rec->spec.attempt++;
      rec->attempt_token++;
      rec->poisoned = false;
      rec->cancel_flag = std::make_shared<std::atomic<bool>>(false);
      task_retries_.fetch_add(1);
      trace_.record(EventKind::task_retried, rec->spec.task_id.str(), my_node, retry_reason);
      schedule_locked(rec);
    } else if (fate == Fate::fail) {
      fail_task_locked(rec, error);
      sealed_cv_.notify_all();
      return;
    }
  }
  if (fate == Fate::retry) {
    runnable_cv_.notify_all();
    return;
  }
  if (fate == Fate::discard) {
    sealed_cv_.notify_all();
    return;
  }

  // ---- commit: seal outputs, then publish ---------------------------------
  struct SealedOut {
    ObjectId id;
    uint64_t size;
    bool in_memory;
  };
  std::vector<SealedOut> sealed;
  sealed.reserve(rets.size());
  for (size_t i = 0; i < rets.size(); ++i) {
    ObjectId oid = rec->returns[i];
    try {
      auto place = store->seal(oid, rets[i]);
      sealed.push_back({oid, rets[i]->size(), place == NodeStore::SealPlace::memory});
    } catch (const Error& e) {
      if (e.code() == Errc::node_dead) {
        finish_attempt(my_node, rec, my_token, store, dead_flag, {}, "", true);
      } else {
        finish_attempt(my_node, rec, my_token, store, dead_flag, {}, e.what(), false);
      }
      return;
    }
  }

  std::vector<FailureAction> due;
  {
    std::lock_guard<std::mutex> lk(mu_);
    if (rec->status == TaskStatus::cancelled || rec->attempt_token != my_token ||
        rec->poisoned || dead_flag->load()) {
      // Lost a race with a kill or cancel at the finish line: this attempt's
      // outputs are not published. Sealed bytes on a dead node are
      // unreachable anyway; on a live node the next attempt reuses them.
      aborted_early = true;
    } else {
      bool is_block =
          rec->spec.tag.rfind("map", 0) == 0 || rec->spec.tag.rfind("merge", 0) == 0;
      for (const auto& out : sealed) {
        ObjectInfo* info = require_info(out.id);
        if (info->sealed) continue;  // an earlier attempt already published it
        info->sealed = true;
        info->size = out.size;
        if (out.in_memory && nodes_[my_node]->alive) info->mem_nodes.insert(my_node);
        nodes_[my_node]->metrics.objects_created.fetch_add(1);
        if (is_block) nodes_[my_node]->metrics.blocks_created.fetch_add(1);
        trace_.record(EventKind::object_sealed, out.id.str(), my_node, rec->spec.tag);
        notify_object_available_locked(*info);
      }
      rec->status = TaskStatus::finished;
      // A successful attempt makes the record healthy again: the retry
      // budget bounds consecutive failures, not lifetime replays.
      rec->retries_left = cfg_.max_retries;
      trace_.record(EventKind::task_finished, rec->spec.task_id.str(), my_node, rec->spec.tag);
      release_arg_holds_locked(rec);
      finished_tasks_++;
      due = collect_task_count_triggers_locked();
    }
  }
  if (aborted_early) {
    finish_attempt(my_node, rec, my_token, store, dead_flag, {}, "", true);
    return;
  }
  drain_purges();
  sealed_cv_.notify_all();
  runnable_cv_.notify_all();
  for (const auto& a : due) apply_action(a);
}

inline void Runtime::prefetch_loop(NodeId my_node) {
  for (;;) {
    bool have = false;
    FetchPlanItem item;
    std::shared_ptr<NodeStore> store;
    {
      std::unique_lock<std::mutex> lk(mu_);
      if (shutdown_) return;
      Node& node = *nodes_[my_node];
      store = node.store;
      if (node.alive) {
        for (TaskId tid : node.runnable) {
          auto it = tasks_.find(tid);
          if (it == tasks_.end()) continue;
          for (const auto& a : it->second->spec.args) {
            if (!a.is_ref()) continue;
            ObjectId id = a.ref().id;
            ObjectInfo* info = find_info(id);
            if (!info || !info->sealed) continue;  // never touch unsealed data
            if (info->mem_nodes.count(my_node)) continue;
            if (node.fetch_inflight.count(id)) continue;
            // Room is re-checked at insert; a failed attempt just falls back
            // to the executor's on-demand fetch.
            item.id = id;
            if (info->spill_nodes.count(my_node)) {
              item.source = FetchPlanItem::Source::local_spill;
            } else {
              NodeId from = pick_alive_locked(info->mem_nodes);
              if (from == kNoNode) from = pick_alive_locked(keys_of(info->spill_nodes));
              if (from == kNoNode) continue;
              item.source = FetchPlanItem::Source::remote;
              item.from = from;
            }
            have = true;
            break;
          }
          if (have) break;
        }
      }
      if (!have) {
        runnable_cv_.wait_for(lk, std::chrono::milliseconds(1));
        continue;
      }
      node.fetch_inflight.insert(item.id);
    }

    if (item.source == FetchPlanItem::Source::local_spill) {
      store->try_prefetch_restore(item.id);
    } else {
      std::shared_ptr<NodeStore> src;
      {
        std::lock_guard<std::mutex> lk(mu_);
        if (item.from != kNoNode && nodes_[item.from]->alive) src = nodes_[item.from]->store;
      }
      if (src) {
        try {
          Value v;
          if (auto r = src->read_resident(item.id)) {
            v = *r;
          } else {
            v = src->read_spilled(item.id);
          }
          if (cfg_.store.fetch_latency.count() > 0)
            std::this_thread::sleep_for(cfg_.store.fetch_latency);
          if (store->try_insert_prefetched(item.id, v)) {
            nodes_[my_node]->metrics.network_bytes.fetch_add(v->size());
            std::lock_guard<std::mutex> lk(mu_);
            auto it = objects_.find(item.id);
            if (it != objects_.end() && nodes_[my_node]->alive)
              it->second->mem_nodes.insert(my_node);
          }
        } catch (const Error&) {
          // Best effort: the executor's on-demand path picks up the pieces.
        }
      }
    }
    {
      std::lock_guard<std::mutex> lk(mu_);
      nodes_[my_node]->fetch_inflight.erase(item.id);
    }
    fetch_cv_.notify_all();
  }
}

}  // namespace dfut
