#pragma once

#include <fstream>
#include <iostream>
#include <string>

#include <json.hpp>

#include "dfut/shuffle.hpp"

namespace dfut {
namespace sortbench {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Run configuration. The JSON config file mirrors these field names exactly.

enum class Variant { simple, riffle, magnet, push, push_star, streaming, best_effort };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::simple: return "simple";
    case Variant::riffle: return "riffle";
    case Variant::magnet: return "magnet";
    case Variant::push: return "push";
    case Variant::push_star: return "push_star";
    case Variant::streaming: return "streaming";
    case Variant::best_effort: return "best_effort";
  }
  return "simple";
}

inline Variant variant_from_name(const std::string& s) {
  for (Variant v : {Variant::simple, Variant::riffle, Variant::magnet, Variant::push,
                    Variant::push_star, Variant::streaming, Variant::best_effort})
    if (s == variant_name(v)) return v;
  raise(Errc::bad_config, "unknown variant '" + s + "'");
}

struct FailureSpec {
  std::string action;  // kill_node | kill_executor | restart_node
  NodeId node = 0;
  int slot = 0;
  double after_fraction = -1;  // of the job's expected task count
  int64_t at_ms = -1;
};

struct RunConfig {
  uint64_t data_size = 64ull << 20;
  uint64_t partition_size = 4ull << 20;  // M = R = data_size / partition_size by default
  std::string variant = "simple";
  // Shuffle overrides; 0 means "derive from sizes".
  uint32_t num_maps = 0;
  uint32_t num_reducers = 0;
  uint32_t merge_factor = 4;
  uint32_t round_parallelism = 4;
  bool keep_map_outputs = true;
  std::string partitioner = "range";
  int64_t merge_timeout_ms = -1;
  int64_t speculation_delay_ms = -1;
  int speculation_max_dups = 1;
  // Cluster.
  int nodes = 4;
  int slots = 2;
  uint64_t memory_limit = 64ull << 20;
  uint64_t fuse_threshold = 1ull << 20;
  std::string spill_dir;
  int64_t fetch_latency_us = 0;
  bool prefetch_enabled = true;
  int max_retries = 3;
  std::vector<FailureSpec> failures;
  uint64_t seed = 42;
  double disk_bandwidth_model = 1e9;  // bytes/sec, for the baseline line
  std::string report;  // output path for the JSON report
  std::string trace;   // output path for JSONL trace events

  uint64_t records() const { return data_size / kRecordSize; }
  uint32_t derived_maps() const {
    return num_maps ? num_maps
                    : static_cast<uint32_t>((data_size + partition_size - 1) / partition_size);
  }
  uint32_t derived_reducers() const { return num_reducers ? num_reducers : derived_maps(); }

  void check() const {
    if (data_size == 0 || data_size % kRecordSize != 0)
      raise(Errc::bad_config, "data_size must be a positive multiple of the record width");
    if (partition_size == 0) raise(Errc::bad_config, "partition_size must be positive");
    if (records() % derived_maps() != 0)
      raise(Errc::bad_config, "record count must divide evenly into map partitions");
  }
};

inline RunConfig config_from_json(const json& j) {
  RunConfig c;
  auto opt = [&](const char* k, auto& field) {
    if (j.contains(k)) field = j.at(k).get<std::decay_t<decltype(field)>>();
  };
  opt("data_size", c.data_size);
  opt("partition_size", c.partition_size);
  opt("variant", c.variant);
  opt("num_maps", c.num_maps);
  opt("num_reducers", c.num_reducers);
  opt("merge_factor", c.merge_factor);
  opt("round_parallelism", c.round_parallelism);
  opt("keep_map_outputs", c.keep_map_outputs);
  opt("partitioner", c.partitioner);
  opt("merge_timeout_ms", c.merge_timeout_ms);
  opt("speculation_delay_ms", c.speculation_delay_ms);
  opt("speculation_max_dups", c.speculation_max_dups);
  opt("nodes", c.nodes);
  opt("slots", c.slots);
  opt("memory_limit", c.memory_limit);
  opt("fuse_threshold", c.fuse_threshold);
  opt("spill_dir", c.spill_dir);
  opt("fetch_latency_us", c.fetch_latency_us);
  opt("prefetch_enabled", c.prefetch_enabled);
  opt("max_retries", c.max_retries);
  opt("seed", c.seed);
  opt("disk_bandwidth_model", c.disk_bandwidth_model);
  opt("report", c.report);
  opt("trace", c.trace);
  if (j.contains("failures")) {
    for (const auto& f : j.at("failures")) {
      FailureSpec fs;
      fs.action = f.value("action", "kill_node");
      fs.node = f.value("node", 0);
      fs.slot = f.value("slot", 0);
      fs.after_fraction = f.value("after_fraction", -1.0);
      fs.at_ms = f.value("at_ms", static_cast<int64_t>(-1));
      c.failures.push_back(fs);
    }
  }
  return c;
}

// ---------------------------------------------------------------------------
// Validation: global sortedness on keys, record-count preservation, and
// order-independent checksum equality with the input.

struct Validation {
  bool sorted = false;
  bool record_count_ok = false;
  bool checksum_ok = false;
  uint64_t checksum = 0;
  uint64_t record_count = 0;
  uint64_t first_bad_offset = 0;  // byte offset of the first sortedness violation

  bool passed() const { return sorted && record_count_ok && checksum_ok; }
};

// Order-independent digest of the full generated input, computed by
// regeneration (no refs needed).
inline MultisetChecksum input_checksum(uint64_t seed, uint32_t num_partitions,
                                       uint64_t records_per_partition) {
  MultisetChecksum cs;
  uint8_t rec[kRecordSize];
  for (uint32_t p = 0; p < num_partitions; ++p)
    for (uint64_t i = 0; i < records_per_partition; ++i) {
      gen_record(seed, p, i, rec);
      cs.add(rec, kRecordSize);
    }
  return cs;
}

// Checks the concatenation of the output blocks in partition order. Blocks
// are fetched one at a time so the driver never materializes the dataset.
inline Validation validate(Runtime& rt, const std::vector<ObjectRef>& output_refs,
                           const MultisetChecksum& expected) {
  Validation v;
  MultisetChecksum got;
  bool sorted = true;
  uint64_t offset = 0;
  Key prev{};
  bool have_prev = false;
  for (const auto& ref : output_refs) {
    Block b = Block::parse(*rt.get(ref));
    const Bytes& recs = b.payload;
    for (size_t off = 0; off + kRecordSize <= recs.size(); off += kRecordSize) {
      const uint8_t* rec = recs.data() + off;
      if (have_prev && sorted && key_compare(prev.data(), rec) > 0) {
        sorted = false;
        v.first_bad_offset = offset + off;
      }
      prev = key_of(rec);
      have_prev = true;
      got.add(rec, kRecordSize);
    }
    offset += recs.size();
  }
  v.sorted = sorted;
  v.record_count = got.count;
  v.record_count_ok = got.count == expected.count;
  v.checksum = got.sum;
  v.checksum_ok = got.sum == expected.sum;
  return v;
}

// ---------------------------------------------------------------------------
// Input generation: M deterministic generator tasks. The generator task is
// itself the lineage root, so inputs lost with a node are regenerated from
// the seed instead of being irrecoverable.

inline std::vector<ObjectRef> gen_input(Runtime& rt, uint64_t data_size, uint32_t num_partitions,
                                        uint64_t seed) {
  uint64_t per_part = data_size / kRecordSize / num_partitions;
  std::vector<ObjectRef> roots;
  roots.reserve(num_partitions);
  for (uint32_t p = 0; p < num_partitions; ++p) {
    ByteWriter w;
    w.put<uint64_t>(seed);
    w.put<uint32_t>(p);
    w.put<uint64_t>(per_part);
    TaskSpec s;
    s.function_id = "shuffle.gen";
    s.args = make_param_args(w.buf);
    s.num_returns = 1;
    s.tag = "gen:p" + std::to_string(p);
    roots.push_back(rt.submit(std::move(s))[0]);
  }
  return roots;
}

// ---------------------------------------------------------------------------
// Report

struct BenchReport {
  std::string variant;
  uint64_t data_size = 0;
  uint32_t num_maps = 0;
  uint32_t num_reducers = 0;
  double jct_seconds = 0;
  double gen_seconds = 0;
  double shuffle_seconds = 0;
  double validate_seconds = 0;
  double theoretical_baseline_seconds = 0;  // 4 * D / B
  MetricsSnapshot metrics;
  uint64_t reducer_visible_blocks = 0;
  uint64_t rounds = 0;
  uint64_t partial_results = 0;  // streaming variant
  Validation validation;

  json to_json() const {
    json j;
    j["variant"] = variant;
    j["data_size"] = data_size;
    j["num_maps"] = num_maps;
    j["num_reducers"] = num_reducers;
    j["jct_seconds"] = jct_seconds;
    j["gen_seconds"] = gen_seconds;
    j["shuffle_seconds"] = shuffle_seconds;
    j["validate_seconds"] = validate_seconds;
    j["theoretical_baseline_seconds"] = theoretical_baseline_seconds;
    j["blocks_created"] = metrics.blocks_created;
    j["objects_created"] = metrics.objects_created;
    j["bytes_spilled"] = metrics.bytes_spilled;
    j["bytes_restored"] = metrics.bytes_restored;
    j["spill_files_created"] = metrics.spill_files_created;
    j["network_bytes"] = metrics.network_bytes;
    j["allocation_queue_peak"] = metrics.allocation_queue_peak;
    j["task_retries"] = metrics.task_retries;
    j["reconstructions"] = metrics.reconstructions;
    j["reducer_visible_blocks"] = reducer_visible_blocks;
    j["rounds"] = rounds;
    j["partial_results"] = partial_results;
    j["validation"] = {{"sorted", validation.sorted},
                       {"record_count_ok", validation.record_count_ok},
                       {"checksum_ok", validation.checksum_ok},
                       {"checksum", validation.checksum},
                       {"record_count", validation.record_count},
                       {"first_bad_offset", validation.first_bad_offset}};
    return j;
  }
};

inline double theoretical_baseline_seconds(uint64_t data_size, double disk_bandwidth) {
  // Each datum is read twice and written twice: T = 4D / B.
  return 4.0 * static_cast<double>(data_size) / disk_bandwidth;
}

// Expected total task count for a variant, used to convert failure-point
// fractions into after-k-tasks triggers. Benchmark maps load their own
// partitions, so there are no separate generator tasks.
inline uint64_t expected_tasks(const RunConfig& c, uint32_t M, uint32_t R) {
  uint64_t maps = M, reduces = R, merges = 0, aggregates = 0;
  Variant v = variant_from_name(c.variant);
  uint32_t rounds = (M + c.round_parallelism - 1) / c.round_parallelism;
  switch (v) {
    case Variant::simple: break;
    case Variant::riffle: merges = (M + c.merge_factor - 1) / c.merge_factor; break;
    case Variant::magnet:
    case Variant::best_effort: merges = R; break;
    case Variant::push:
    case Variant::push_star: merges = rounds * std::min<uint64_t>(c.nodes, R); break;
    case Variant::streaming:
      reduces = static_cast<uint64_t>(rounds) * R;
      aggregates = rounds;
      break;
  }
  return maps + merges + reduces + aggregates;
}

// ---------------------------------------------------------------------------
// End-to-end run

inline BenchReport run(const RunConfig& cfg) {
  cfg.check();
  const uint32_t M = cfg.derived_maps();
  const uint32_t R = cfg.derived_reducers();
  const uint64_t records_per_part = cfg.records() / M;

  FunctionRegistry reg;
  register_shuffle_functions(reg);

  RuntimeConfig rc;
  rc.nodes = cfg.nodes;
  rc.slots_per_node = cfg.slots;
  rc.max_retries = cfg.max_retries;
  rc.seed = cfg.seed;
  rc.store.memory_limit = cfg.memory_limit;
  rc.store.fuse_threshold = cfg.fuse_threshold;
  rc.store.spill_dir = cfg.spill_dir;
  rc.store.fetch_latency = std::chrono::microseconds(cfg.fetch_latency_us);
  rc.store.prefetch_enabled = cfg.prefetch_enabled;
  Runtime rt(rc, reg);

  FailurePlan plan;
  for (const auto& f : cfg.failures) {
    FailureTrigger t;
    if (f.at_ms >= 0) t.at_time = std::chrono::milliseconds(f.at_ms);
    if (f.after_fraction >= 0)
      t.after_tasks = static_cast<uint64_t>(f.after_fraction *
                                            static_cast<double>(expected_tasks(cfg, M, R)));
    if (f.action == "kill_node") t.action = {FailureAction::Kind::kill_node, f.node, 0};
    else if (f.action == "kill_executor") t.action = {FailureAction::Kind::kill_executor, f.node, f.slot};
    else if (f.action == "restart_node") t.action = {FailureAction::Kind::restart_node, f.node, 0};
    else raise(Errc::bad_config, "unknown failure action " + f.action);
    plan.push_back(t);
  }
  if (!plan.empty()) rt.set_failure_plan(plan);

  ShuffleConfig sc;
  sc.num_maps = M;
  sc.num_reducers = R;
  sc.merge_factor = cfg.merge_factor;
  sc.round_parallelism = cfg.round_parallelism;
  sc.num_nodes = cfg.nodes;
  sc.keep_map_outputs = cfg.keep_map_outputs;
  if (cfg.merge_timeout_ms >= 0) sc.merge_timeout = std::chrono::milliseconds(cfg.merge_timeout_ms);
  if (cfg.partitioner == "hash") {
    sc.partitioner = PartitionerKind::hash;
  } else {
    sc.partitioner = PartitionerKind::range;
    sc.boundaries = sample_boundaries(cfg.seed, M, records_per_part, R);
  }
  // Maps read their partitions straight from the generator stream, like a
  // mapper loading its split from the data source.
  sc.source = InputSource{cfg.seed, records_per_part};

  BenchReport rep;
  rep.variant = cfg.variant;
  rep.data_size = cfg.data_size;
  rep.num_maps = M;
  rep.num_reducers = R;
  rep.theoretical_baseline_seconds =
      theoretical_baseline_seconds(cfg.data_size, cfg.disk_bandwidth_model);

  auto t0 = Clock::now();
  std::vector<ObjectRef> inputs;  // unused: maps load from the source
  auto t1 = Clock::now();

  ShuffleResult sr;
  Variant v = variant_from_name(cfg.variant);
  switch (v) {
    case Variant::simple: sr = simple_shuffle(rt, sc, inputs); break;
    case Variant::riffle: sr = riffle_shuffle(rt, sc, inputs); break;
    case Variant::magnet: sr = magnet_shuffle(rt, sc, inputs); break;
    case Variant::push:
      sc.keep_map_outputs = true;
      sr = push_shuffle_pipelined(rt, sc, inputs);
      break;
    case Variant::push_star:
      sc.keep_map_outputs = false;
      sr = push_shuffle_pipelined(rt, sc, inputs);
      break;
    case Variant::best_effort: sr = best_effort_merge(rt, sc, inputs); break;
    case Variant::streaming: {
      auto stream = streaming_shuffle(rt, sc, "shuffle.stream_sort_state",
                                      "shuffle.stream_count_aggregate", inputs);
      sr.outputs = stream.final_states;
      sr.stats = stream.stats;
      rep.partial_results = stream.partials.size();
      break;
    }
  }
  rt.wait(sr.outputs, sr.outputs.size());
  auto t2 = Clock::now();

  auto expected = input_checksum(cfg.seed, M, records_per_part);
  rep.validation = validate(rt, sr.outputs, expected);
  auto t3 = Clock::now();

  rep.gen_seconds = us_between(t0, t1) / 1e6;
  rep.shuffle_seconds = us_between(t1, t2) / 1e6;
  rep.jct_seconds = us_between(t0, t2) / 1e6;
  rep.validate_seconds = us_between(t2, t3) / 1e6;
  rep.metrics = rt.aggregate_metrics();
  rep.reducer_visible_blocks = sr.stats.reducer_visible_blocks;
  rep.rounds = sr.stats.rounds;

  if (!cfg.report.empty()) {
    std::ofstream out(cfg.report, std::ios::trunc);
    out << rep.to_json().dump(2) << "\n";
  }
  if (!cfg.trace.empty()) rt.trace().write_jsonl(cfg.trace);
  return rep;
}

}  // namespace sortbench
}  // namespace dfut
