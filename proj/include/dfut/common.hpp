#pragma once

#include <array>
#include <chrono>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace dfut {

using Bytes = std::vector<uint8_t>;

// Sealed object values are immutable and shared zero-copy between executors
// on a node.
using Value = std::shared_ptr<const Bytes>;

inline Value make_value(Bytes&& b) {
  return std::make_shared<const Bytes>(std::move(b));
}

// ---------------------------------------------------------------------------
// Identifiers

using NodeId = int32_t;
constexpr NodeId kNoNode = -1;

struct ObjectId {
  uint64_t hi = 0;
  uint64_t lo = 0;

  bool valid() const { return hi != 0 || lo != 0; }
  friend bool operator==(const ObjectId& a, const ObjectId& b) {
    return a.hi == b.hi && a.lo == b.lo;
  }
  friend bool operator!=(const ObjectId& a, const ObjectId& b) { return !(a == b); }
  friend bool operator<(const ObjectId& a, const ObjectId& b) {
    return a.hi != b.hi ? a.hi < b.hi : a.lo < b.lo;
  }

  std::string str() const {
    char buf[33];
    std::snprintf(buf, sizeof(buf), "%016llx%016llx",
                  static_cast<unsigned long long>(hi),
                  static_cast<unsigned long long>(lo));
    return std::string(buf);
  }
};

struct TaskId {
  uint64_t v = 0;

  bool valid() const { return v != 0; }
  friend bool operator==(const TaskId& a, const TaskId& b) { return a.v == b.v; }
  friend bool operator!=(const TaskId& a, const TaskId& b) { return a.v != b.v; }
  friend bool operator<(const TaskId& a, const TaskId& b) { return a.v < b.v; }

  std::string str() const {
    char buf[24];
    std::snprintf(buf, sizeof(buf), "t%llu", static_cast<unsigned long long>(v));
    return std::string(buf);
  }
};

struct ObjectIdHash {
  size_t operator()(const ObjectId& id) const {
    return static_cast<size_t>(id.hi ^ (id.lo * 0x9e3779b97f4a7c15ull));
  }
};

struct TaskIdHash {
  size_t operator()(const TaskId& id) const { return static_cast<size_t>(id.v); }
};

// ---------------------------------------------------------------------------
// Hashing and deterministic PRNG streams

constexpr uint64_t kFnvOffset = 1469598103934665603ull;
constexpr uint64_t kFnvPrime = 1099511628211ull;

inline uint64_t fnv1a64(const uint8_t* data, size_t n, uint64_t h = kFnvOffset) {
  for (size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= kFnvPrime;
  }
  return h;
}

inline uint64_t fnv1a64(const Bytes& b) { return fnv1a64(b.data(), b.size()); }

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Counter-based stream: stateless, any word addressable independently.
inline uint64_t prng_word(uint64_t seed, uint64_t stream, uint64_t counter) {
  return splitmix64(seed ^ splitmix64(stream ^ splitmix64(counter)));
}

// Order-independent digest of a multiset of byte strings. Records hashed
// individually and combined with a commutative sum, so any permutation of the
// same records yields the same digest.
struct MultisetChecksum {
  uint64_t sum = 0;
  uint64_t count = 0;

  void add(const uint8_t* rec, size_t n) {
    sum += fnv1a64(rec, n) | 1ull;
    ++count;
  }
  void merge(const MultisetChecksum& o) {
    sum += o.sum;
    count += o.count;
  }
  friend bool operator==(const MultisetChecksum& a, const MultisetChecksum& b) {
    return a.sum == b.sum && a.count == b.count;
  }
};

// ---------------------------------------------------------------------------
// Tiny fixed-layout serialization for task parameter blobs.

struct ByteWriter {
  Bytes buf;
  template <typename T>
  void put(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    size_t off = buf.size();
    buf.resize(off + sizeof(T));
    std::memcpy(buf.data() + off, &v, sizeof(T));
  }
  void put_bytes(const uint8_t* p, size_t n) { buf.insert(buf.end(), p, p + n); }
};

struct ByteReader {
  const uint8_t* p;
  const uint8_t* end;
  explicit ByteReader(const Bytes& b) : p(b.data()), end(b.data() + b.size()) {}
  template <typename T>
  T get() {
    static_assert(std::is_trivially_copyable_v<T>);
    T v{};
    std::memcpy(&v, p, sizeof(T));
    p += sizeof(T);
    return v;
  }
  void get_bytes(uint8_t* out, size_t n) {
    std::memcpy(out, p, n);
    p += n;
  }
};

// ---------------------------------------------------------------------------
// Clock

using Clock = std::chrono::steady_clock;
using Duration = Clock::duration;
using TimePoint = Clock::time_point;

inline int64_t us_between(TimePoint a, TimePoint b) {
  return std::chrono::duration_cast<std::chrono::microseconds>(b - a).count();
}

constexpr Duration kForever = Duration::max();

}  // namespace dfut
