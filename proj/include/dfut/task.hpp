#pragma once

#include <atomic>
#include <functional>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "dfut/common.hpp"
#include "dfut/error.hpp"

namespace dfut {

// First-class handle to an eventual, immutable, cluster-resident value.
struct ObjectRef {
  ObjectId id;
  TaskId creator_task;     // invalid for put roots
  uint64_t size_hint = 0;  // unknown (0) until sealed

  bool valid() const { return id.valid(); }
};

// Argument values at or below this size may ride inline in the TaskSpec
// instead of going through the object store.
constexpr size_t kInlineArgLimit = 1024;

struct TaskArg {
  std::variant<ObjectRef, Bytes> v;

  bool is_ref() const { return std::holds_alternative<ObjectRef>(v); }
  const ObjectRef& ref() const { return std::get<ObjectRef>(v); }
  const Bytes& inline_bytes() const { return std::get<Bytes>(v); }

  static TaskArg of(const ObjectRef& r) { return TaskArg{r}; }
  static TaskArg inline_value(Bytes b) {
    if (b.size() > kInlineArgLimit)
      raise(Errc::inline_too_large, "inline argument exceeds " + std::to_string(kInlineArgLimit) +
                                        " bytes; pass it through the store");
    return TaskArg{std::move(b)};
  }
};

struct TaskSpec {
  TaskId task_id;  // assigned at submission
  std::string function_id;
  std::vector<TaskArg> args;
  int num_returns = 1;
  NodeId placement = kNoNode;  // soft affinity hint
  bool deterministic = true;
  int attempt = 0;
  uint64_t rng_seed = 0;  // attempt-independent; 0 means derive at submit
  std::string tag;        // stage label for trace/metrics, e.g. "map:r0"
};

// Handed to user functions. Functions must be pure with respect to everything
// except their arguments and this context's seed.
struct TaskContext {
  uint64_t rng_seed = 0;
  NodeId node = kNoNode;
  int attempt = 0;
  const std::atomic<bool>* cancel = nullptr;
  const std::atomic<bool>* node_dead = nullptr;

  bool cancelled() const {
    return (cancel && cancel->load(std::memory_order_relaxed)) ||
           (node_dead && node_dead->load(std::memory_order_relaxed));
  }
  uint64_t rng(uint64_t counter) const { return prng_word(rng_seed, 0, counter); }
};

using TaskFn = std::function<std::vector<Value>(const std::vector<Value>&, TaskContext&)>;

// Tasks are registered by string name at startup; no dynamic code loading.
class FunctionRegistry {
 public:
  void add(const std::string& name, TaskFn fn) { fns_[name] = std::move(fn); }

  bool contains(const std::string& name) const { return fns_.count(name) > 0; }

  const TaskFn& lookup(const std::string& name) const {
    auto it = fns_.find(name);
    if (it == fns_.end()) raise(Errc::unknown_function, name);
    return it->second;
  }

 private:
  std::map<std::string, TaskFn> fns_;
};

// Chunked inline parameter blobs: serialized parameters are split into
// inline-sized pieces so large boundary lists still honor the inline cap.
inline std::vector<TaskArg> chunk_inline(const Bytes& blob) {
  std::vector<TaskArg> out;
  size_t off = 0;
  do {
    size_t n = std::min(kInlineArgLimit, blob.size() - off);
    out.push_back(TaskArg::inline_value(Bytes(blob.begin() + off, blob.begin() + off + n)));
    off += n;
  } while (off < blob.size());
  return out;
}

inline Bytes join_chunks(const std::vector<Value>& args, size_t first, size_t count) {
  Bytes out;
  for (size_t i = 0; i < count; ++i) out.insert(out.end(), args[first + i]->begin(), args[first + i]->end());
  return out;
}

}  // namespace dfut
