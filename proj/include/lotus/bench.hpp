#pragma once

#include <string>

#include "lotus/checker.hpp"
#include "lotus/cluster.hpp"
#include "lotus/workload.hpp"

namespace lotus {

enum class OutFormat : u8 { Table, Json, Csv };

struct NicOps {
  std::string node;
  u64 reads = 0, writes = 0, atomics = 0, rpcs = 0;
};

struct RunMetrics {
  double throughput_tps = 0;  // committed txns per simulated second
  double p50_us = 0, p99_us = 0;
  u64 attempted = 0, committed = 0;
  std::map<AbortReason, u64> aborted;
  std::vector<NicOps> nics;
  u64 mn_atomics = 0;
  u64 lock_cas_attempts = 0;
  u64 vt_hits = 0, vt_misses = 0;
  double vt_hit_rate = 0;
  u64 reshard_count = 0;
  SimTime max_reshard_interruption = 0;
  u64 stale_cache_hits = 0;
  u64 serving_violations = 0;
  u64 rw_single_shard = 0, rw_single_shard_local = 0;
  SimTime sim_duration = 0;
  u64 user_commits = 0, user_failures = 0, user_crash_retries = 0;
  u64 smallbank_total = 0;
};

struct BenchConfig {
  WorkloadSpec workload;
  ClusterConfig cluster;
  std::string history_path;  // empty: keep in memory only
  OutFormat out = OutFormat::Table;
};

struct BenchResult {
  RunMetrics metrics;
  CheckResult isolation_check;
  CheckResult balance_check;
  Bytes history_bytes;
  u64 state_checksum = 0;

  bool ok() const { return isolation_check.ok() && balance_check.ok(); }
};

// Builds the cluster, loads data, drives the configured concurrency, then
// runs the offline checker over the produced history.
BenchResult run_benchmark(const BenchConfig& cfg);

std::string format_metrics(const RunMetrics& m, OutFormat fmt);

// Latency percentile over committed user transactions (us).
double percentile_us(std::vector<u64> latencies_ns, double p);

}  // namespace lotus
