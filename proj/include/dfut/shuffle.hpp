#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <vector>

#include "dfut/records.hpp"
#include "dfut/runtime.hpp"

namespace dfut {

// ---------------------------------------------------------------------------
// Configuration

struct SpeculationConfig {
  std::chrono::milliseconds delay{500};  // straggler suspicion threshold
  int max_duplicates = 1;
};

// When set, map task m loads (generates) partition m itself instead of
// consuming a root object, the way a mapper reads its split from the data
// source. Replays regenerate the same bytes from the seed.
struct InputSource {
  uint64_t seed = 0;
  uint64_t records_per_partition = 0;
};

struct ShuffleConfig {
  uint32_t num_maps = 1;          // M
  uint32_t num_reducers = 1;      // R
  uint32_t merge_factor = 4;      // F: pre-shuffle merge group size
  uint32_t round_parallelism = 4; // P: map tasks per pipelined round
  int num_nodes = 1;
  PartitionerKind partitioner = PartitionerKind::range;
  std::vector<Key> boundaries;  // R-1 cut keys for the range partitioner
  bool keep_map_outputs = true; // push keeps them; push* drops per round
  std::optional<std::chrono::milliseconds> merge_timeout;  // best-effort merge
  std::optional<SpeculationConfig> speculation;
  std::optional<uint64_t> skew_memory_threshold;
  std::optional<InputSource> source;  // maps load their own partitions

  void validate() const {
    if (num_maps < 1 || num_reducers < 1) raise(Errc::bad_config, "M and R must be >= 1");
    if (merge_factor < 1 || round_parallelism < 1) raise(Errc::bad_config, "F and P must be >= 1");
    if (partitioner == PartitionerKind::range) {
      if (boundaries.size() + 1 != num_reducers)
        raise(Errc::bad_config, "range partitioner needs exactly R-1 boundaries");
      check_boundaries(boundaries);
    }
  }
};

struct ShuffleStats {
  uint64_t reducer_visible_blocks = 0;  // block objects passed to reduce tasks
  uint64_t merge_tasks = 0;
  uint64_t rounds = 1;
  std::vector<uint32_t> reduce_input_blocks;  // per reducer
};

struct ShuffleResult {
  std::vector<ObjectRef> outputs;  // one sorted Block per reduce partition
  ShuffleStats stats;
};

inline std::vector<std::vector<ObjectRef>> speculative_run(Runtime& rt,
                                                           std::vector<TaskSpec> specs,
                                                           const SpeculationConfig& sp);

// ---------------------------------------------------------------------------
// Registered task functions
//
// Parameter blobs ride as inline arguments ahead of the data refs. The first
// u32 of the blob is the number of inline chunks it was split into.

inline std::vector<TaskArg> make_param_args(const Bytes& payload) {
  uint32_t nchunks = static_cast<uint32_t>((payload.size() + 4 + kInlineArgLimit - 1) / kInlineArgLimit);
  ByteWriter w;
  w.put<uint32_t>(nchunks);
  w.put_bytes(payload.data(), payload.size());
  return chunk_inline(w.buf);
}

inline std::pair<Bytes, size_t> parse_params(const std::vector<Value>& args) {
  uint32_t nchunks = 0;
  std::memcpy(&nchunks, args.at(0)->data(), 4);
  Bytes joined = join_chunks(args, 0, nchunks);
  return {Bytes(joined.begin() + 4, joined.end()), nchunks};
}

namespace fns {

// gen(seed, partition, count) -> raw records
inline std::vector<Value> gen(const std::vector<Value>& args, TaskContext&) {
  auto [params, first] = parse_params(args);
  ByteReader r(params);
  auto seed = r.get<uint64_t>();
  auto partition = r.get<uint32_t>();
  auto count = r.get<uint64_t>();
  (void)first;
  return {make_value(gen_records(seed, partition, count))};
}

// map(partition bytes | source descriptor) -> R sorted blocks
inline std::vector<Value> map(const std::vector<Value>& args, TaskContext&) {
  auto [params, first] = parse_params(args);
  ByteReader r(params);
  auto R = r.get<uint32_t>();
  auto kind = static_cast<PartitionerKind>(r.get<uint8_t>());
  auto ncuts = r.get<uint32_t>();
  std::vector<Key> cuts(ncuts);
  for (auto& k : cuts) r.get_bytes(k.data(), kKeySize);
  auto has_source = r.get<uint8_t>();

  std::vector<Block> blocks;
  if (has_source) {
    auto seed = r.get<uint64_t>();
    auto partition = r.get<uint32_t>();
    auto count = r.get<uint64_t>();
    blocks = sort_and_partition(gen_records(seed, partition, count), R,
                                kind == PartitionerKind::range ? &cuts : nullptr);
  } else {
    blocks = sort_and_partition(*args.at(first), R,
                                kind == PartitionerKind::range ? &cuts : nullptr);
  }
  std::vector<Value> out;
  out.reserve(R);
  for (auto& b : blocks) out.push_back(make_value(b.serialize()));
  return out;
}

// merge_multi(S sources x K partitions, source-major) -> K merged blocks
inline std::vector<Value> merge_multi(const std::vector<Value>& args, TaskContext&) {
  auto [params, first] = parse_params(args);
  ByteReader r(params);
  auto S = r.get<uint32_t>();
  auto K = r.get<uint32_t>();
  std::vector<Value> out;
  out.reserve(K);
  for (uint32_t k = 0; k < K; ++k) {
    std::vector<Block> group;
    group.reserve(S);
    for (uint32_t s = 0; s < S; ++s) group.push_back(Block::parse(*args.at(first + s * K + k)));
    out.push_back(make_value(merge_sorted(group).serialize()));
  }
  return out;
}

// reduce(blocks of one partition) -> final sorted block
inline std::vector<Value> reduce(const std::vector<Value>& args, TaskContext&) {
  auto [params, first] = parse_params(args);
  (void)params;
  std::vector<Block> blocks;
  blocks.reserve(args.size() - first);
  for (size_t i = first; i < args.size(); ++i) blocks.push_back(Block::parse(*args.at(i)));
  return {make_value(merge_sorted(blocks).serialize())};
}

// stream_sort_state(prev state block, round blocks) -> updated state block
inline std::vector<Value> stream_sort_state(const std::vector<Value>& args, TaskContext&) {
  auto [params, first] = parse_params(args);
  (void)params;
  std::vector<Block> blocks;
  for (size_t i = first; i < args.size(); ++i) blocks.push_back(Block::parse(*args.at(i)));
  return {make_value(merge_sorted(blocks).serialize())};
}

// stream_count_aggregate(states...) -> u64 per-state record counts
inline std::vector<Value> stream_count_aggregate(const std::vector<Value>& args, TaskContext&) {
  auto [params, first] = parse_params(args);
  (void)params;
  ByteWriter w;
  for (size_t i = first; i < args.size(); ++i) w.put<uint64_t>(Block::parse(*args.at(i)).record_count());
  return {make_value(std::move(w.buf))};
}

}  // namespace fns

inline void register_shuffle_functions(FunctionRegistry& reg) {
  reg.add("shuffle.gen", fns::gen);
  reg.add("shuffle.map", fns::map);
  reg.add("shuffle.merge", fns::merge_multi);
  reg.add("shuffle.reduce", fns::reduce);
  reg.add("shuffle.stream_sort_state", fns::stream_sort_state);
  reg.add("shuffle.stream_count_aggregate", fns::stream_count_aggregate);
}

// ---------------------------------------------------------------------------
// Shared driver-side pieces

namespace detail {

inline Bytes map_params(const ShuffleConfig& cfg, uint32_t map_index) {
  ByteWriter w;
  w.put<uint32_t>(cfg.num_reducers);
  w.put<uint8_t>(static_cast<uint8_t>(cfg.partitioner));
  w.put<uint32_t>(static_cast<uint32_t>(cfg.boundaries.size()));
  for (const auto& k : cfg.boundaries) w.put_bytes(k.data(), kKeySize);
  w.put<uint8_t>(cfg.source ? 1 : 0);
  if (cfg.source) {
    w.put<uint64_t>(cfg.source->seed);
    w.put<uint32_t>(map_index);
    w.put<uint64_t>(cfg.source->records_per_partition);
  }
  return w.buf;
}

inline TaskSpec map_spec(const ShuffleConfig& cfg, const std::vector<ObjectRef>& inputs,
                         uint32_t m, const std::string& tag_suffix) {
  TaskSpec s;
  s.function_id = "shuffle.map";
  s.args = make_param_args(map_params(cfg, m));
  if (!cfg.source) s.args.push_back(TaskArg::of(inputs.at(m)));
  s.num_returns = static_cast<int>(cfg.num_reducers);
  s.tag = "map:m" + std::to_string(m) + tag_suffix;
  return s;
}

inline Bytes merge_params(uint32_t sources, uint32_t partitions) {
  ByteWriter w;
  w.put<uint32_t>(sources);
  w.put<uint32_t>(partitions);
  return w.buf;
}

// Submits map tasks for inputs [first, first+count); map m returns R blocks.
// Returns map_blocks[m - first][r].
inline std::vector<std::vector<ObjectRef>> submit_maps(Runtime& rt, const ShuffleConfig& cfg,
                                                       const std::vector<ObjectRef>& inputs,
                                                       uint32_t first, uint32_t count,
                                                       const std::string& tag_suffix = {}) {
  std::vector<std::vector<ObjectRef>> out;
  out.reserve(count);
  for (uint32_t m = first; m < first + count; ++m)
    out.push_back(rt.submit(map_spec(cfg, inputs, m, tag_suffix)));
  return out;
}

inline ObjectRef submit_reduce(Runtime& rt, const ShuffleConfig& cfg, uint32_t r,
                               std::vector<ObjectRef> blocks, NodeId placement,
                               ShuffleStats& stats) {
  TaskSpec s;
  s.function_id = "shuffle.reduce";
  s.args = make_param_args({});
  for (const auto& b : blocks) s.args.push_back(TaskArg::of(b));
  s.num_returns = 1;
  s.placement = placement;
  s.tag = "reduce:r" + std::to_string(r);
  stats.reducer_visible_blocks += blocks.size();
  if (stats.reduce_input_blocks.size() < cfg.num_reducers)
    stats.reduce_input_blocks.resize(cfg.num_reducers, 0);
  stats.reduce_input_blocks[r] = static_cast<uint32_t>(blocks.size());
  return rt.submit(std::move(s))[0];
}

inline NodeId reducer_node(uint32_t r, const ShuffleConfig& cfg) {
  return static_cast<NodeId>(r % static_cast<uint32_t>(cfg.num_nodes));
}

inline void drop_all(Runtime& rt, const std::vector<ObjectRef>& refs) {
  for (const auto& r : refs) rt.drop_ref(r);
}

inline std::vector<ObjectRef> flatten(const std::vector<std::vector<ObjectRef>>& nested) {
  std::vector<ObjectRef> out;
  for (const auto& v : nested) out.insert(out.end(), v.begin(), v.end());
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Planning helper: block counts for a simple shuffle at a given scale. Not
// executed; exposes the quadratic growth of intermediate blocks.
struct ShufflePlanEstimate {
  uint64_t num_maps = 0;
  uint64_t num_reducers = 0;
  uint64_t intermediate_blocks = 0;  // M x R
  uint64_t block_bytes = 0;
};

inline ShufflePlanEstimate estimate_simple_shuffle(uint64_t data_size, uint64_t partition_size) {
  if (partition_size == 0 || data_size == 0) raise(Errc::bad_config, "sizes must be positive");
  ShufflePlanEstimate e;
  e.num_maps = (data_size + partition_size - 1) / partition_size;
  e.num_reducers = e.num_maps;
  e.intermediate_blocks = e.num_maps * e.num_reducers;
  e.block_bytes = e.intermediate_blocks ? data_size / e.intermediate_blocks : 0;
  return e;
}

// ---------------------------------------------------------------------------
// Simple shuffle: M map tasks each producing R blocks, R reduce tasks each
// consuming one block from every map. Creates exactly M x R intermediate
// blocks; submission is entirely non-blocking.
inline ShuffleResult simple_shuffle(Runtime& rt, const ShuffleConfig& cfg,
                                    const std::vector<ObjectRef>& inputs) {
  cfg.validate();
  ShuffleResult res;
  std::vector<std::vector<ObjectRef>> map_blocks;
  if (cfg.speculation) {
    // Straggling maps are duplicated; the first finisher of each wins.
    std::vector<TaskSpec> specs;
    for (uint32_t m = 0; m < cfg.num_maps; ++m)
      specs.push_back(detail::map_spec(cfg, inputs, m, {}));
    map_blocks = speculative_run(rt, std::move(specs), *cfg.speculation);
  } else {
    map_blocks = detail::submit_maps(rt, cfg, inputs, 0, cfg.num_maps);
  }
  for (uint32_t r = 0; r < cfg.num_reducers; ++r) {
    std::vector<ObjectRef> blocks;
    blocks.reserve(cfg.num_maps);
    for (uint32_t m = 0; m < cfg.num_maps; ++m) blocks.push_back(map_blocks[m][r]);
    res.outputs.push_back(detail::submit_reduce(rt, cfg, r, std::move(blocks), kNoNode, res.stats));
  }
  detail::drop_all(rt, detail::flatten(map_blocks));
  return res;
}

// ---------------------------------------------------------------------------
// Pre-shuffle merge: groups of F co-located map tasks merge their F x R
// blocks into R larger ones before reducers pull, so each reducer reads
// ceil(M/F) blocks instead of M.
inline ShuffleResult riffle_shuffle(Runtime& rt, const ShuffleConfig& cfg,
                                    const std::vector<ObjectRef>& inputs) {
  cfg.validate();
  ShuffleResult res;
  const uint32_t groups = (cfg.num_maps + cfg.merge_factor - 1) / cfg.merge_factor;

  // merged[g][r]
  std::vector<std::vector<ObjectRef>> merged;
  merged.reserve(groups);
  for (uint32_t g = 0; g < groups; ++g) {
    uint32_t lo = g * cfg.merge_factor;
    uint32_t hi = std::min(cfg.num_maps, lo + cfg.merge_factor);
    NodeId home = static_cast<NodeId>(g % static_cast<uint32_t>(cfg.num_nodes));
    // The group's maps are co-scheduled on one node so the merge is local.
    std::vector<std::vector<ObjectRef>> group_blocks;
    for (uint32_t m = lo; m < hi; ++m) {
      TaskSpec s = detail::map_spec(cfg, inputs, m, {});
      s.placement = home;
      group_blocks.push_back(rt.submit(std::move(s)));
    }
    TaskSpec s;
    s.function_id = "shuffle.merge";
    s.args = make_param_args(detail::merge_params(hi - lo, cfg.num_reducers));
    for (const auto& mb : group_blocks)
      for (const auto& b : mb) s.args.push_back(TaskArg::of(b));
    s.num_returns = static_cast<int>(cfg.num_reducers);
    s.placement = home;
    s.tag = "merge:g" + std::to_string(g);
    merged.push_back(rt.submit(std::move(s)));
    res.stats.merge_tasks++;
    detail::drop_all(rt, detail::flatten(group_blocks));
  }

  for (uint32_t r = 0; r < cfg.num_reducers; ++r) {
    std::vector<ObjectRef> blocks;
    blocks.reserve(groups);
    for (uint32_t g = 0; g < groups; ++g) blocks.push_back(merged[g][r]);
    res.outputs.push_back(detail::submit_reduce(rt, cfg, r, std::move(blocks), kNoNode, res.stats));
  }
  detail::drop_all(rt, detail::flatten(merged));
  return res;
}

// ---------------------------------------------------------------------------
// Push-based shuffle: reduce partitions are pre-assigned to nodes and map
// outputs are pushed to a merge task pinned on the reducer's node, so the
// final reduce reads only node-local merged data.
inline ShuffleResult magnet_shuffle(Runtime& rt, const ShuffleConfig& cfg,
                                    const std::vector<ObjectRef>& inputs) {
  cfg.validate();
  ShuffleResult res;
  auto map_blocks = detail::submit_maps(rt, cfg, inputs, 0, cfg.num_maps);

  std::vector<ObjectRef> merged;
  merged.reserve(cfg.num_reducers);
  for (uint32_t r = 0; r < cfg.num_reducers; ++r) {
    TaskSpec s;
    s.function_id = "shuffle.merge";
    s.args = make_param_args(detail::merge_params(cfg.num_maps, 1));
    for (uint32_t m = 0; m < cfg.num_maps; ++m) s.args.push_back(TaskArg::of(map_blocks[m][r]));
    s.num_returns = 1;
    s.placement = detail::reducer_node(r, cfg);
    s.tag = "merge:r" + std::to_string(r);
    merged.push_back(rt.submit(std::move(s))[0]);
    res.stats.merge_tasks++;
  }
  detail::drop_all(rt, detail::flatten(map_blocks));

  for (uint32_t r = 0; r < cfg.num_reducers; ++r)
    res.outputs.push_back(detail::submit_reduce(rt, cfg, r, {merged[r]},
                                                detail::reducer_node(r, cfg), res.stats));
  detail::drop_all(rt, merged);
  return res;
}

// ---------------------------------------------------------------------------
// Pipelined push-based shuffle: map and merge tasks run in rounds of P gated
// by wait, so at most one round of merge tasks is in flight and it overlaps
// the next round's maps. With keep_map_outputs=false the driver drops each
// round's map refs right after submitting their merges, trading redundancy
// for a ~2x (instead of ~3x) write amplification.
inline ShuffleResult push_shuffle_pipelined(Runtime& rt, const ShuffleConfig& cfg,
                                            const std::vector<ObjectRef>& inputs) {
  cfg.validate();
  ShuffleResult res;
  const uint32_t N = static_cast<uint32_t>(cfg.num_nodes);
  const uint32_t rounds = (cfg.num_maps + cfg.round_parallelism - 1) / cfg.round_parallelism;
  res.stats.rounds = rounds;

  // Reducers on node n, in partition order.
  std::vector<std::vector<uint32_t>> node_parts(N);
  for (uint32_t r = 0; r < cfg.num_reducers; ++r) node_parts[r % N].push_back(r);

  // merged_for[r] collects one block per round.
  std::vector<std::vector<ObjectRef>> merged_for(cfg.num_reducers);
  std::vector<ObjectRef> prev_round_merges;
  std::vector<ObjectRef> all_merges;
  std::vector<ObjectRef> kept_map_blocks;

  for (uint32_t i = 0; i < rounds; ++i) {
    uint32_t lo = i * cfg.round_parallelism;
    uint32_t hi = std::min(cfg.num_maps, lo + cfg.round_parallelism);
    auto round_blocks = detail::submit_maps(rt, cfg, inputs, lo, hi - lo,
                                            ":rnd" + std::to_string(i));

    // At most one round of merge tasks in flight.
    if (!prev_round_merges.empty())
      rt.wait(prev_round_merges, prev_round_merges.size());
    prev_round_merges.clear();

    for (uint32_t n = 0; n < N; ++n) {
      if (node_parts[n].empty()) continue;
      TaskSpec s;
      s.function_id = "shuffle.merge";
      s.args = make_param_args(detail::merge_params(hi - lo, static_cast<uint32_t>(node_parts[n].size())));
      for (uint32_t m = 0; m < hi - lo; ++m)
        for (uint32_t r : node_parts[n]) s.args.push_back(TaskArg::of(round_blocks[m][r]));
      s.num_returns = static_cast<int>(node_parts[n].size());
      s.placement = static_cast<NodeId>(n);
      s.tag = "merge:rnd" + std::to_string(i) + ":n" + std::to_string(n);
      auto outs = rt.submit(std::move(s));
      res.stats.merge_tasks++;
      for (size_t k = 0; k < node_parts[n].size(); ++k) {
        merged_for[node_parts[n][k]].push_back(outs[k]);
        prev_round_merges.push_back(outs[k]);
        all_merges.push_back(outs[k]);
      }
    }

    // Delete this round's map outputs, or keep them for redundancy.
    auto flat = detail::flatten(round_blocks);
    if (cfg.keep_map_outputs)
      kept_map_blocks.insert(kept_map_blocks.end(), flat.begin(), flat.end());
    else
      detail::drop_all(rt, flat);
  }

  // All merges must land before the final reduce stage.
  rt.wait(all_merges, all_merges.size());
  if (cfg.keep_map_outputs) detail::drop_all(rt, kept_map_blocks);

  for (uint32_t r = 0; r < cfg.num_reducers; ++r)
    res.outputs.push_back(detail::submit_reduce(rt, cfg, r, merged_for[r],
                                                detail::reducer_node(r, cfg), res.stats));
  detail::drop_all(rt, all_merges);
  return res;
}

// ---------------------------------------------------------------------------
// Best-effort merge: push-based topology with a timeout on the merge phase.
// Merges still running at the deadline are cancelled and their reducers fall
// back to consuming the original map output blocks, which must therefore be
// kept.
inline ShuffleResult best_effort_merge(Runtime& rt, ShuffleConfig cfg,
                                       const std::vector<ObjectRef>& inputs) {
  cfg.keep_map_outputs = true;  // the fallback needs the raw map blocks
  cfg.validate();
  ShuffleResult res;
  auto map_blocks = detail::submit_maps(rt, cfg, inputs, 0, cfg.num_maps);

  std::vector<ObjectRef> merged;
  for (uint32_t r = 0; r < cfg.num_reducers; ++r) {
    TaskSpec s;
    s.function_id = "shuffle.merge";
    s.args = make_param_args(detail::merge_params(cfg.num_maps, 1));
    for (uint32_t m = 0; m < cfg.num_maps; ++m) s.args.push_back(TaskArg::of(map_blocks[m][r]));
    s.num_returns = 1;
    s.placement = detail::reducer_node(r, cfg);
    s.tag = "merge:r" + std::to_string(r);
    merged.push_back(rt.submit(std::move(s))[0]);
    res.stats.merge_tasks++;
  }

  std::vector<bool> use_fallback(cfg.num_reducers, false);
  if (cfg.merge_timeout) {
    auto w = rt.wait(merged, merged.size(), *cfg.merge_timeout);
    for (const auto& p : w.pending) {
      rt.cancel(p);
      for (uint32_t r = 0; r < cfg.num_reducers; ++r)
        if (merged[r].id == p.id) use_fallback[r] = true;
    }
  } else {
    rt.wait(merged, merged.size());
  }

  for (uint32_t r = 0; r < cfg.num_reducers; ++r) {
    std::vector<ObjectRef> in;
    if (use_fallback[r]) {
      for (uint32_t m = 0; m < cfg.num_maps; ++m) in.push_back(map_blocks[m][r]);
    } else {
      in.push_back(merged[r]);
    }
    res.outputs.push_back(
        detail::submit_reduce(rt, cfg, r, std::move(in), detail::reducer_node(r, cfg), res.stats));
  }
  detail::drop_all(rt, detail::flatten(map_blocks));
  detail::drop_all(rt, merged);
  return res;
}

// ---------------------------------------------------------------------------
// Streaming shuffle for online aggregation: shuffle runs in rounds; each
// round folds its map outputs into per-reducer states and the aggregate
// function is invoked on all states, yielding one refining partial result
// per round. The final round's aggregate equals the batch answer.

struct PartialAggregate {
  uint32_t round = 0;
  Value aggregate;  // reducer-state statistic snapshot, immutable
  TimePoint emitted_at{};
};

struct StreamingResult {
  std::vector<ObjectRef> final_states;  // per reducer
  std::vector<PartialAggregate> partials;
  ShuffleStats stats;
};

inline StreamingResult streaming_shuffle(Runtime& rt, const ShuffleConfig& cfg,
                                         const std::string& reduce_state_fn,
                                         const std::string& aggregate_fn,
                                         const std::vector<ObjectRef>& inputs) {
  cfg.validate();
  StreamingResult res;
  const uint32_t rounds = (cfg.num_maps + cfg.round_parallelism - 1) / cfg.round_parallelism;
  res.stats.rounds = rounds;

  // Round 0 states fold from an empty block.
  std::vector<std::optional<ObjectRef>> state(cfg.num_reducers);

  for (uint32_t i = 0; i < rounds; ++i) {
    uint32_t lo = i * cfg.round_parallelism;
    uint32_t hi = std::min(cfg.num_maps, lo + cfg.round_parallelism);
    auto round_blocks = detail::submit_maps(rt, cfg, inputs, lo, hi - lo,
                                            ":rnd" + std::to_string(i));
    for (uint32_t r = 0; r < cfg.num_reducers; ++r) {
      TaskSpec s;
      s.function_id = reduce_state_fn;
      ByteWriter pw;
      pw.put<uint32_t>(r);
      s.args = make_param_args(pw.buf);
      if (state[r]) s.args.push_back(TaskArg::of(*state[r]));
      else s.args.push_back(TaskArg::inline_value(Block{r, {}}.serialize()));
      for (uint32_t m = 0; m < hi - lo; ++m) s.args.push_back(TaskArg::of(round_blocks[m][r]));
      s.num_returns = 1;
      s.placement = detail::reducer_node(r, cfg);
      s.tag = "reduce:state:rnd" + std::to_string(i) + ":r" + std::to_string(r);
      auto next = rt.submit(std::move(s))[0];
      res.stats.reducer_visible_blocks += hi - lo;
      if (state[r]) rt.drop_ref(*state[r]);
      state[r] = next;
    }
    detail::drop_all(rt, detail::flatten(round_blocks));

    // Aggregate this round's states; the get paces the rounds and hands the
    // caller a refining partial result.
    TaskSpec agg;
    agg.function_id = aggregate_fn;
    agg.args = make_param_args({});
    for (uint32_t r = 0; r < cfg.num_reducers; ++r) agg.args.push_back(TaskArg::of(*state[r]));
    agg.num_returns = 1;
    agg.tag = "aggregate:rnd" + std::to_string(i);
    auto agg_ref = rt.submit(std::move(agg))[0];
    PartialAggregate pa;
    pa.round = i;
    pa.aggregate = rt.get(agg_ref);
    pa.emitted_at = Clock::now();
    res.partials.push_back(std::move(pa));
    rt.drop_ref(agg_ref);
  }

  for (uint32_t r = 0; r < cfg.num_reducers; ++r) res.final_states.push_back(*state[r]);
  return res;
}

// ---------------------------------------------------------------------------
// KL divergence between two distributions on the same support:
// sum p * log(p / p_hat). Zero iff p == p_hat.
inline double kl_divergence(const std::vector<double>& p, const std::vector<double>& p_hat) {
  if (p.size() != p_hat.size()) raise(Errc::support_mismatch, "distributions differ in size");
  double sp = 0, sq = 0;
  for (size_t i = 0; i < p.size(); ++i) {
    if (p[i] < 0 || p_hat[i] < 0) raise(Errc::unnormalized, "negative probability");
    if (p[i] > 0 && p_hat[i] == 0)
      raise(Errc::support_mismatch, "p positive where p_hat is zero");
    sp += p[i];
    sq += p_hat[i];
  }
  if (std::abs(sp - 1.0) > 1e-9 || std::abs(sq - 1.0) > 1e-9)
    raise(Errc::unnormalized, "distributions must sum to 1");
  double acc = 0, comp = 0;  // Kahan summation
  for (size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 0) continue;
    double term = p[i] * std::log(p[i] / p_hat[i]);
    double y = term - comp;
    double t = acc + y;
    comp = (t - acc) - y;
    acc = t;
  }
  return acc < 0 ? 0.0 : acc;
}

// ---------------------------------------------------------------------------
// Pipelined consumer: invokes consumer_fn on each ref in completion order via
// a wait loop, so downstream work starts before the whole shuffle finishes.
template <typename Fn>
void pipelined_consume(Runtime& rt, const std::vector<ObjectRef>& refs, Fn&& consumer_fn) {
  std::vector<ObjectRef> pending = refs;
  while (!pending.empty()) {
    auto w = rt.wait(pending, 1);
    for (const auto& r : w.ready) {
      size_t index = 0;
      for (size_t i = 0; i < refs.size(); ++i)
        if (refs[i].id == r.id) index = i;
      consumer_fn(index, rt.get(r));
    }
    pending = std::move(w.pending);
  }
}

// ---------------------------------------------------------------------------
// Speculative execution: if the task has not finished within delay_threshold,
// duplicates are submitted (at most max_dups); the first completion wins and
// the losers are cancelled. The spec must be deterministic so either copy
// yields identical bytes.
inline ObjectRef speculative_submit(Runtime& rt, TaskSpec spec,
                                    std::chrono::milliseconds delay_threshold, int max_dups) {
  if (!spec.deterministic) raise(Errc::bad_config, "speculation requires a deterministic task");
  spec.num_returns = 1;
  // Pin the seed before submitting so duplicates see identical
  // function-visible randomness and produce identical bytes.
  if (spec.rng_seed == 0) {
    uint64_t h = fnv1a64(reinterpret_cast<const uint8_t*>(spec.function_id.data()),
                         spec.function_id.size(), rt.config().seed ^ kFnvOffset);
    for (const auto& a : spec.args)
      if (a.is_ref()) h = splitmix64(h ^ a.ref().id.lo);
    spec.rng_seed = h | 1;
  }
  TaskSpec dup_template = spec;
  auto primary = rt.submit(std::move(spec))[0];
  std::vector<ObjectRef> attempts{primary};

  int dups = 0;
  for (;;) {
    auto w = rt.wait(attempts, 1, delay_threshold);
    if (!w.ready.empty()) {
      ObjectRef winner = w.ready.front();
      for (const auto& a : attempts) {
        if (a.id == winner.id) continue;
        rt.cancel(a);
        rt.drop_ref(a);
      }
      return winner;
    }
    if (dups >= max_dups) {
      auto fin = rt.wait(attempts, 1);
      ObjectRef winner = fin.ready.front();
      for (const auto& a : attempts) {
        if (a.id == winner.id) continue;
        rt.cancel(a);
        rt.drop_ref(a);
      }
      return winner;
    }
    TaskSpec dup = dup_template;
    dup.tag += ":spec" + std::to_string(dups + 1);
    attempts.push_back(rt.submit(std::move(dup))[0]);
    dups++;
  }
}

// Batch form: monitors many tasks concurrently from the driver; each task
// that blows its deadline gets duplicates, first completion wins per task.
inline std::vector<std::vector<ObjectRef>> speculative_run(Runtime& rt,
                                                           std::vector<TaskSpec> specs,
                                                           const SpeculationConfig& sp) {
  struct Entry {
    TaskSpec tmpl;
    std::vector<std::vector<ObjectRef>> attempts;
    TimePoint deadline;
    int winner = -1;
  };
  std::vector<Entry> entries;
  entries.reserve(specs.size());
  for (auto& spec : specs) {
    if (spec.rng_seed == 0) {
      uint64_t h = fnv1a64(reinterpret_cast<const uint8_t*>(spec.function_id.data()),
                           spec.function_id.size(), rt.config().seed ^ kFnvOffset);
      for (const auto& a : spec.args)
        if (a.is_ref()) h = splitmix64(h ^ a.ref().id.lo);
      spec.rng_seed = h | 1;
    }
    Entry e;
    e.tmpl = spec;
    e.attempts.push_back(rt.submit(std::move(spec)));
    e.deadline = Clock::now() + sp.delay;
    entries.push_back(std::move(e));
  }

  for (;;) {
    std::vector<ObjectRef> watch;
    bool all_done = true;
    for (auto& e : entries) {
      if (e.winner >= 0) continue;
      all_done = false;
      for (size_t a = 0; a < e.attempts.size(); ++a) {
        if (rt.object_sealed(e.attempts[a][0])) {
          e.winner = static_cast<int>(a);
          for (size_t l = 0; l < e.attempts.size(); ++l) {
            if (static_cast<int>(l) == e.winner) continue;
            rt.cancel(e.attempts[l][0]);
            for (const auto& r : e.attempts[l]) rt.drop_ref(r);
          }
          break;
        }
      }
      if (e.winner >= 0) continue;
      if (Clock::now() >= e.deadline &&
          e.attempts.size() <= static_cast<size_t>(sp.max_duplicates)) {
        TaskSpec dup = e.tmpl;
        dup.tag += ":spec" + std::to_string(e.attempts.size());
        e.attempts.push_back(rt.submit(std::move(dup)));
      }
      for (const auto& att : e.attempts) watch.push_back(att[0]);
    }
    if (all_done) break;
    if (!watch.empty()) rt.wait(watch, 1, std::chrono::milliseconds(20));
  }

  std::vector<std::vector<ObjectRef>> winners;
  winners.reserve(entries.size());
  for (auto& e : entries) winners.push_back(e.attempts[static_cast<size_t>(e.winner)]);
  return winners;
}

// ---------------------------------------------------------------------------
// Dynamic repartitioning for skew: a reducer whose input exceeds the memory
// threshold is recursively split (by block-list bisection) into sub-reduces
// whose inputs fit, each producing one sorted run. A single indivisible block
// over the threshold is reported and processed anyway.

struct RepartitionResult {
  std::vector<ObjectRef> outputs;  // sorted runs, in bisection order
  uint32_t oversized_blocks = 0;   // SingleBlockOverThreshold occurrences
  uint32_t max_depth = 0;
  uint32_t max_task_input = 0;  // largest per-task input actually submitted
};

inline void repartition_rec(Runtime& rt, uint32_t r, const std::vector<ObjectRef>& blocks,
                            uint64_t threshold, uint32_t depth, RepartitionResult& res) {
  uint64_t total = 0;
  for (const auto& b : blocks) total += rt.object_size(b);
  res.max_depth = std::max(res.max_depth, depth);
  if (blocks.size() > 1 && total > threshold) {
    size_t mid = blocks.size() / 2;
    repartition_rec(rt, r, {blocks.begin(), blocks.begin() + mid}, threshold, depth + 1, res);
    repartition_rec(rt, r, {blocks.begin() + mid, blocks.end()}, threshold, depth + 1, res);
    return;
  }
  if (blocks.size() == 1 && total > threshold) res.oversized_blocks++;
  TaskSpec s;
  s.function_id = "shuffle.reduce";
  s.args = make_param_args({});
  for (const auto& b : blocks) s.args.push_back(TaskArg::of(b));
  s.num_returns = 1;
  s.tag = "reduce:split:r" + std::to_string(r) + ":d" + std::to_string(depth);
  res.max_task_input = std::max<uint32_t>(res.max_task_input, static_cast<uint32_t>(total));
  res.outputs.push_back(rt.submit(std::move(s))[0]);
}

inline RepartitionResult dynamic_repartition(Runtime& rt, uint32_t r,
                                             const std::vector<ObjectRef>& reduce_input_refs,
                                             uint64_t memory_threshold) {
  if (memory_threshold == 0) raise(Errc::bad_config, "threshold must be positive");
  // Sizes are needed for the split decisions.
  rt.wait(reduce_input_refs, reduce_input_refs.size());
  RepartitionResult res;
  repartition_rec(rt, r, reduce_input_refs, memory_threshold, 0, res);
  return res;
}

}  // namespace dfut
