#pragma once

#include <algorithm>
#include <cstring>
#include <numeric>
#include <vector>

#include "dfut/common.hpp"
#include "dfut/error.hpp"

namespace dfut {

// Sort-benchmark wire format: fixed 100-byte records, the key is the first
// 10 bytes, compared as unsigned bytes (big-endian lexicographic).
constexpr size_t kRecordSize = 100;
constexpr size_t kKeySize = 10;

using Key = std::array<uint8_t, kKeySize>;

inline int key_compare(const uint8_t* a, const uint8_t* b) {
  return std::memcmp(a, b, kKeySize);
}

inline bool key_less(const uint8_t* a, const uint8_t* b) { return key_compare(a, b) < 0; }

inline Key key_of(const uint8_t* rec) {
  Key k;
  std::memcpy(k.data(), rec, kKeySize);
  return k;
}

// ---------------------------------------------------------------------------
// Deterministic record generation.
//
// Every record is addressable by (seed, partition, index) through a
// counter-based PRNG, so a lost input partition can be regenerated without
// reading any other state.

inline void gen_record(uint64_t seed, uint32_t partition, uint64_t index, uint8_t* out) {
  const uint64_t stream = (static_cast<uint64_t>(partition) << 40) | 0x52u;
  for (size_t w = 0; w < 2; ++w) {
    uint64_t x = prng_word(seed, stream, index * 2 + w);
    for (size_t b = 0; b < 8; ++b) out[w * 8 + b] = static_cast<uint8_t>(x >> (56 - 8 * b));
  }
  // Payload: provenance tag plus filler.
  std::memset(out + 16, 0, kRecordSize - 16);
  std::memcpy(out + 16, &partition, sizeof(partition));
  std::memcpy(out + 20, &index, sizeof(index));
  for (size_t w = 0; w < 9; ++w) {
    uint64_t x = prng_word(seed, stream ^ 0x9d, index * 9 + w);
    std::memcpy(out + 28 + w * 8, &x, 8);
  }
}

inline Bytes gen_records(uint64_t seed, uint32_t partition, uint64_t count) {
  Bytes out(count * kRecordSize);
  for (uint64_t i = 0; i < count; ++i) gen_record(seed, partition, i, out.data() + i * kRecordSize);
  return out;
}

// ---------------------------------------------------------------------------
// Blocks
//
// A block is one map task's output destined for one reduce partition,
// internally sorted. Serialized as a 12-byte header followed by the records,
// so even an empty block is a non-empty object.

struct Block {
  uint32_t partition_id = 0;
  Bytes payload;  // record_count * kRecordSize bytes

  uint64_t record_count() const { return payload.size() / kRecordSize; }

  Bytes serialize() const {
    Bytes out(12 + payload.size());
    std::memcpy(out.data(), &partition_id, 4);
    uint64_t n = record_count();
    std::memcpy(out.data() + 4, &n, 8);
    std::memcpy(out.data() + 12, payload.data(), payload.size());
    return out;
  }

  static Block parse(const Bytes& raw) {
    if (raw.size() < 12) raise(Errc::malformed_record, "block shorter than header");
    Block b;
    std::memcpy(&b.partition_id, raw.data(), 4);
    uint64_t n = 0;
    std::memcpy(&n, raw.data() + 4, 8);
    if (raw.size() != 12 + n * kRecordSize)
      raise(Errc::malformed_record, "block length does not match record count");
    b.payload.assign(raw.begin() + 12, raw.end());
    return b;
  }
};

// ---------------------------------------------------------------------------
// Partitioners

enum class PartitionerKind { range, hash };

inline uint32_t hash_partition(const uint8_t* key, uint32_t num_partitions) {
  return static_cast<uint32_t>(fnv1a64(key, kKeySize) % num_partitions);
}

// boundaries must hold exactly R-1 strictly increasing cut keys; record with
// key k goes to the first partition whose upper boundary exceeds k.
inline uint32_t range_partition(const uint8_t* key, const std::vector<Key>& boundaries) {
  uint32_t lo = 0, hi = static_cast<uint32_t>(boundaries.size());
  while (lo < hi) {
    uint32_t mid = (lo + hi) / 2;
    if (key_compare(key, boundaries[mid].data()) < 0)
      hi = mid;
    else
      lo = mid + 1;
  }
  return lo;
}

inline void check_boundaries(const std::vector<Key>& boundaries) {
  for (size_t i = 1; i < boundaries.size(); ++i)
    if (key_compare(boundaries[i - 1].data(), boundaries[i].data()) >= 0)
      raise(Errc::bad_config, "range boundaries must be strictly increasing");
}

// ---------------------------------------------------------------------------
// Map-side sort and reduce-side merge

// Sorts the partition and cuts it into R blocks by key range (or hash class).
// The concatenation of the returned blocks is a permutation of the input.
inline std::vector<Block> sort_and_partition(const Bytes& partition, uint32_t num_reducers,
                                             const std::vector<Key>* boundaries) {
  if (partition.size() % kRecordSize != 0)
    raise(Errc::malformed_record, "partition length not divisible by record width");
  if (boundaries) {
    if (boundaries->size() + 1 != num_reducers)
      raise(Errc::bad_config, "need exactly R-1 boundary keys");
    check_boundaries(*boundaries);
  }
  const size_t n = partition.size() / kRecordSize;
  std::vector<uint32_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  const uint8_t* base = partition.data();
  std::sort(order.begin(), order.end(), [&](uint32_t a, uint32_t b) {
    int c = key_compare(base + a * kRecordSize, base + b * kRecordSize);
    return c != 0 ? c < 0 : a < b;
  });

  std::vector<Block> blocks(num_reducers);
  for (uint32_t r = 0; r < num_reducers; ++r) blocks[r].partition_id = r;
  for (uint32_t idx : order) {
    const uint8_t* rec = base + idx * kRecordSize;
    uint32_t p = boundaries ? range_partition(rec, *boundaries) : hash_partition(rec, num_reducers);
    blocks[p].payload.insert(blocks[p].payload.end(), rec, rec + kRecordSize);
  }
  return blocks;
}

// k-way merge of sorted blocks of one partition. Ties break by input block
// order so replays are byte-identical.
inline Block merge_sorted(const std::vector<Block>& blocks) {
  if (blocks.empty()) raise(Errc::partition_mismatch, "merge of zero blocks");
  const uint32_t pid = blocks[0].partition_id;
  size_t total = 0;
  for (const auto& b : blocks) {
    if (b.partition_id != pid)
      raise(Errc::partition_mismatch, "blocks from different partitions");
    if (b.payload.size() % kRecordSize != 0)
      raise(Errc::malformed_record, "block payload not record aligned");
    total += b.payload.size();
  }

  Block out;
  out.partition_id = pid;
  out.payload.reserve(total);

  struct Cursor {
    const uint8_t* pos;
    const uint8_t* end;
    uint32_t src;
  };
  std::vector<Cursor> heap;
  heap.reserve(blocks.size());
  auto greater = [](const Cursor& a, const Cursor& b) {
    int c = key_compare(a.pos, b.pos);
    return c != 0 ? c > 0 : a.src > b.src;
  };
  for (uint32_t i = 0; i < blocks.size(); ++i) {
    const auto& b = blocks[i];
    if (!b.payload.empty())
      heap.push_back(Cursor{b.payload.data(), b.payload.data() + b.payload.size(), i});
  }
  std::make_heap(heap.begin(), heap.end(), greater);
  while (!heap.empty()) {
    std::pop_heap(heap.begin(), heap.end(), greater);
    Cursor c = heap.back();
    heap.pop_back();
    out.payload.insert(out.payload.end(), c.pos, c.pos + kRecordSize);
    c.pos += kRecordSize;
    if (c.pos != c.end) {
      heap.push_back(c);
      std::push_heap(heap.begin(), heap.end(), greater);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Validation helpers

inline bool records_sorted(const Bytes& records, size_t* first_bad_offset = nullptr) {
  for (size_t off = kRecordSize; off + kRecordSize <= records.size(); off += kRecordSize) {
    if (key_compare(records.data() + off - kRecordSize, records.data() + off) > 0) {
      if (first_bad_offset) *first_bad_offset = off;
      return false;
    }
  }
  return true;
}

inline MultisetChecksum records_checksum(const Bytes& records) {
  MultisetChecksum cs;
  for (size_t off = 0; off + kRecordSize <= records.size(); off += kRecordSize)
    cs.add(records.data() + off, kRecordSize);
  return cs;
}

// Evenly spaced quantiles of a deterministic sample of the generated input;
// the paper leaves boundary selection open.
inline std::vector<Key> sample_boundaries(uint64_t seed, uint32_t num_partitions,
                                          uint64_t records_per_partition, uint32_t num_reducers,
                                          double sample_rate = 0.01) {
  std::vector<Key> sample;
  uint64_t stride = std::max<uint64_t>(1, static_cast<uint64_t>(1.0 / sample_rate));
  uint8_t rec[kRecordSize];
  for (uint32_t p = 0; p < num_partitions; ++p) {
    for (uint64_t i = 0; i < records_per_partition; i += stride) {
      gen_record(seed, p, i, rec);
      sample.push_back(key_of(rec));
    }
  }
  std::sort(sample.begin(), sample.end(), [](const Key& a, const Key& b) {
    return key_compare(a.data(), b.data()) < 0;
  });
  std::vector<Key> cuts;
  cuts.reserve(num_reducers - 1);
  for (uint32_t r = 1; r < num_reducers; ++r) {
    Key k = sample[sample.size() * r / num_reducers];
    // Nudge duplicates so cuts stay strictly increasing.
    while (!cuts.empty() && key_compare(cuts.back().data(), k.data()) >= 0) {
      for (int b = kKeySize - 1; b >= 0; --b)
        if (++k[b] != 0) break;
    }
    cuts.push_back(k);
  }
  return cuts;
}

}  // namespace dfut
