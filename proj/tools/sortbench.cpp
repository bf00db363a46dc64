// sortbench: run TeraSort-style shuffle benchmarks on the simulated cluster.
//
//   sortbench run --config bench.json [flag overrides]
//   sortbench plan --data-size 107374182400 --partition-size 2147483648

#include <CLI11.hpp>
#include <fstream>
#include <iostream>

#include "dfut/sortbench.hpp"

namespace sb = dfut::sortbench;

namespace {

void print_human(const sb::BenchReport& r) {
  std::cout << "variant              " << r.variant << "\n"
            << "data size            " << r.data_size << " bytes\n"
            << "M x R                " << r.num_maps << " x " << r.num_reducers << "\n"
            << "job completion time  " << r.jct_seconds << " s (gen " << r.gen_seconds
            << " + shuffle " << r.shuffle_seconds << ")\n"
            << "theoretical baseline " << r.theoretical_baseline_seconds << " s (T = 4D/B)\n"
            << "blocks created       " << r.metrics.blocks_created << "\n"
            << "reducer-visible      " << r.reducer_visible_blocks << "\n"
            << "bytes spilled        " << r.metrics.bytes_spilled << "\n"
            << "bytes restored       " << r.metrics.bytes_restored << "\n"
            << "spill files          " << r.metrics.spill_files_created << "\n"
            << "network bytes        " << r.metrics.network_bytes << "\n"
            << "task retries         " << r.metrics.task_retries << "\n"
            << "reconstructions      " << r.metrics.reconstructions << "\n"
            << "validation           " << (r.validation.passed() ? "PASS" : "FAIL")
            << " (sorted=" << r.validation.sorted
            << " count_ok=" << r.validation.record_count_ok
            << " checksum_ok=" << r.validation.checksum_ok << ")\n";
}

int run_cmd(const std::string& config_path, const sb::json& overrides) {
  sb::json j = sb::json::object();
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    if (!in) {
      std::cerr << "cannot open config file: " << config_path << "\n";
      return 2;
    }
    in >> j;
  }
  for (auto it = overrides.begin(); it != overrides.end(); ++it) j[it.key()] = it.value();

  try {
    sb::RunConfig cfg = sb::config_from_json(j);
    sb::BenchReport rep = sb::run(cfg);
    print_human(rep);
    return rep.validation.passed() ? 0 : 1;
  } catch (const dfut::Error& e) {
    std::cerr << sb::json{{"error", e.what()}}.dump() << "\n";
    return 2;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"TeraSort-style benchmark over the distributed-futures runtime"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "execute a benchmark run");
  std::string config_path, variant, report_path, trace_path, kill_at;
  uint64_t data_size = 0, memory_limit = 0, fuse_threshold = 0, seed = 0;
  int partitions = 0, nodes = 0, slots = 0;
  run->add_option("--config", config_path, "JSON config file");
  run->add_option("--data-size", data_size, "total bytes to sort");
  run->add_option("--partitions", partitions, "map/reduce partition count (M = R)");
  run->add_option("--variant", variant, "simple|riffle|magnet|push|push_star|streaming|best_effort");
  run->add_option("--nodes", nodes, "simulated node count");
  run->add_option("--slots", slots, "executor slots per node");
  run->add_option("--memory-limit", memory_limit, "per-node store memory limit (bytes)");
  run->add_option("--fuse-threshold", fuse_threshold, "spill fusing threshold (bytes, 0=off)");
  run->add_option("--seed", seed, "input generator seed");
  run->add_option("--kill-node", kill_at, "<id>@<fraction>: kill node at task-completion fraction");
  run->add_option("--report", report_path, "write the JSON report here");
  run->add_option("--trace", trace_path, "write JSONL trace events here");

  auto* plan = app.add_subcommand("plan", "block-count planning for a simple shuffle (no execution)");
  uint64_t plan_data = 0, plan_part = 0;
  double plan_bw = 1e9;
  plan->add_option("--data-size", plan_data, "total bytes")->required();
  plan->add_option("--partition-size", plan_part, "bytes per partition")->required();
  plan->add_option("--disk-bandwidth", plan_bw, "aggregate disk bandwidth (bytes/sec)");

  CLI11_PARSE(app, argc, argv);

  if (plan->parsed()) {
    auto e = dfut::estimate_simple_shuffle(plan_data, plan_part);
    std::cout << "map tasks            " << e.num_maps << "\n"
              << "reduce tasks         " << e.num_reducers << "\n"
              << "intermediate blocks  " << e.intermediate_blocks << " (M x R)\n"
              << "block size           " << e.block_bytes << " bytes\n"
              << "theoretical baseline " << sb::theoretical_baseline_seconds(plan_data, plan_bw)
              << " s (T = 4D/B)\n";
    return 0;
  }

  sb::json overrides = sb::json::object();
  if (data_size) overrides["data_size"] = data_size;
  if (partitions) {
    overrides["num_maps"] = partitions;
    overrides["num_reducers"] = partitions;
  }
  if (!variant.empty()) overrides["variant"] = variant;
  if (nodes) overrides["nodes"] = nodes;
  if (slots) overrides["slots"] = slots;
  if (memory_limit) overrides["memory_limit"] = memory_limit;
  if (fuse_threshold) overrides["fuse_threshold"] = fuse_threshold;
  if (seed) overrides["seed"] = seed;
  if (!report_path.empty()) overrides["report"] = report_path;
  if (!trace_path.empty()) overrides["trace"] = trace_path;
  if (!kill_at.empty()) {
    auto at = kill_at.find('@');
    if (at == std::string::npos) {
      std::cerr << "--kill-node expects <id>@<fraction>\n";
      return 2;
    }
    overrides["failures"] = sb::json::array(
        {{{"action", "kill_node"},
          {"node", std::stoi(kill_at.substr(0, at))},
          {"after_fraction", std::stod(kill_at.substr(at + 1))}}});
  }
  return run_cmd(config_path, overrides);
}
