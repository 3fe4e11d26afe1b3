#include "lotus/bench.hpp"

#include <algorithm>
#include <iomanip>
#include <sstream>

namespace lotus {

double percentile_us(std::vector<u64> lat, double p) {
  if (lat.empty()) return 0;
  std::sort(lat.begin(), lat.end());
  size_t idx = static_cast<size_t>(p * static_cast<double>(lat.size() - 1));
  return static_cast<double>(lat[idx]) / 1000.0;
}

BenchResult run_benchmark(const BenchConfig& cfg) {
  ClusterConfig cc = cfg.cluster;
  cc.isolation = cfg.workload.isolation;
  cc.server_mode = true;
  Cluster cluster(cc);
  std::unique_ptr<Workload> wl = build_workload(cluster, cfg.workload);
  cluster.finish_setup();

  SimTime deadline = cfg.workload.duration ? cfg.workload.duration : 0;
  u64 budget = cfg.workload.txn_budget;
  u64 clients = static_cast<u64>(cc.num_cns) * cc.coordinators;
  for (u64 c = 0; c < clients; c++)
    spawn(cluster.client_proc(c, *wl, budget, deadline));
  cluster.run();

  BenchResult result;
  RunMetrics& m = result.metrics;
  const Counters& ctr = cluster.counters();
  m.sim_duration = cluster.sched().now();
  m.attempted = ctr.attempted;
  m.committed = ctr.committed;
  m.aborted = ctr.aborted;
  m.throughput_tps = m.sim_duration
                         ? static_cast<double>(cluster.client_commits()) * 1e9 /
                               static_cast<double>(m.sim_duration)
                         : 0;
  m.p50_us = percentile_us(ctr.latencies_ns, 0.50);
  m.p99_us = percentile_us(ctr.latencies_ns, 0.99);
  for (u16 i = 0; i < cc.num_cns; i++) {
    const NicAccount& n = cluster.fabric().nic(cn(i));
    m.nics.push_back({"cn" + std::to_string(i), n.reads, n.writes, n.atomics, n.rpcs});
  }
  for (u16 i = 0; i < cc.num_mns; i++) {
    const NicAccount& n = cluster.fabric().nic(mn(i));
    m.nics.push_back({"mn" + std::to_string(i), n.reads, n.writes, n.atomics, n.rpcs});
    m.mn_atomics += n.atomics;
  }
  m.lock_cas_attempts = ctr.lock_cas_attempts;
  for (u16 i = 0; i < cc.num_cns; i++) {
    m.vt_hits += cluster.node(i).vtcache->hits();
    m.vt_misses += cluster.node(i).vtcache->misses();
  }
  m.vt_hit_rate = (m.vt_hits + m.vt_misses)
                      ? static_cast<double>(m.vt_hits) /
                            static_cast<double>(m.vt_hits + m.vt_misses)
                      : 0;
  m.reshard_count = cluster.reshard_events().size();
  for (const ReshardEvent& ev : cluster.reshard_events())
    m.max_reshard_interruption =
        std::max(m.max_reshard_interruption, ev.resume_serving - ev.stop_serving);
  m.stale_cache_hits = ctr.stale_cache_hits;
  m.serving_violations = ctr.serving_violations;
  m.rw_single_shard = ctr.rw_single_shard;
  m.rw_single_shard_local = ctr.rw_single_shard_local;
  m.user_commits = cluster.client_commits();
  m.user_failures = cluster.client_failures();
  m.user_crash_retries = cluster.client_crash_retries();

  result.history_bytes = cluster.history().serialize();
  if (!cfg.history_path.empty()) cluster.history().write_file(cfg.history_path);
  result.isolation_check =
      check_history(cluster.history().records(), cfg.workload.isolation);

  if (cfg.workload.kind == WorkloadKind::SmallBank) {
    u64 total = 0;
    for (u64 a = 0; a < cfg.workload.scale; a++) {
      for (u16 t = 0; t < 2; t++) {
        auto payload = cluster.read_committed_payload(wl->tables[t], wl->key_of(a, t));
        if (payload) total += static_cast<u64>(balance_of(*payload));
      }
    }
    m.smallbank_total = total;
    result.balance_check = check_balance(wl->initial_total, total);
  }
  result.state_checksum = cluster.state_checksum();
  return result;
}

static std::string reason_counts(const std::map<AbortReason, u64>& aborted, bool json) {
  std::ostringstream os;
  bool first = true;
  for (const auto& [r, c] : aborted) {
    if (!first) os << (json ? "," : " ");
    first = false;
    if (json)
      os << "\"" << abort_reason_name(r) << "\":" << c;
    else
      os << abort_reason_name(r) << "=" << c;
  }
  return os.str();
}

std::string format_metrics(const RunMetrics& m, OutFormat fmt) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  switch (fmt) {
    case OutFormat::Json: {
      os << "{\"throughput_tps\":" << m.throughput_tps << ",\"p50_us\":" << m.p50_us
         << ",\"p99_us\":" << m.p99_us << ",\"attempted\":" << m.attempted
         << ",\"committed\":" << m.committed << ",\"aborted\":{"
         << reason_counts(m.aborted, true) << "}"
         << ",\"mn_atomics\":" << m.mn_atomics << ",\"vt_hit_rate\":" << m.vt_hit_rate
         << ",\"reshards\":" << m.reshard_count
         << ",\"sim_duration_ms\":" << static_cast<double>(m.sim_duration) / 1e6
         << ",\"user_commits\":" << m.user_commits << ",\"nics\":[";
      for (size_t i = 0; i < m.nics.size(); i++) {
        const NicOps& n = m.nics[i];
        os << (i ? "," : "") << "{\"node\":\"" << n.node << "\",\"reads\":" << n.reads
           << ",\"writes\":" << n.writes << ",\"atomics\":" << n.atomics
           << ",\"rpcs\":" << n.rpcs << "}";
      }
      os << "]}";
      return os.str();
    }
    case OutFormat::Csv: {
      os << "metric,value\n";
      os << "throughput_tps," << m.throughput_tps << "\n";
      os << "p50_us," << m.p50_us << "\n";
      os << "p99_us," << m.p99_us << "\n";
      os << "attempted," << m.attempted << "\n";
      os << "committed," << m.committed << "\n";
      os << "user_commits," << m.user_commits << "\n";
      os << "mn_atomics," << m.mn_atomics << "\n";
      os << "vt_hit_rate," << m.vt_hit_rate << "\n";
      os << "reshards," << m.reshard_count << "\n";
      os << "sim_duration_ms," << static_cast<double>(m.sim_duration) / 1e6 << "\n";
      for (const NicOps& n : m.nics)
        os << n.node << "_ops," << (n.reads + n.writes + n.atomics + n.rpcs) << "\n";
      return os.str();
    }
    case OutFormat::Table: {
      os << "== run metrics ==\n";
      os << "  sim duration      " << static_cast<double>(m.sim_duration) / 1e6 << " ms\n";
      os << "  throughput        " << m.throughput_tps << " txn/s\n";
      os << "  latency p50/p99   " << m.p50_us << " / " << m.p99_us << " us\n";
      os << "  attempts          " << m.attempted << " (committed " << m.committed << ")\n";
      os << "  user txns         " << m.user_commits << " committed, " << m.user_failures
         << " failed\n";
      if (!m.aborted.empty()) os << "  aborts            " << reason_counts(m.aborted, false) << "\n";
      os << "  vt cache hit rate " << m.vt_hit_rate << " (" << m.vt_hits << "/"
         << (m.vt_hits + m.vt_misses) << ")\n";
      os << "  mn atomics        " << m.mn_atomics << "\n";
      if (m.lock_cas_attempts)
        os << "  lock cas issued   " << m.lock_cas_attempts << "\n";
      if (m.reshard_count)
        os << "  reshards          " << m.reshard_count << " (max interruption "
           << static_cast<double>(m.max_reshard_interruption) / 1e6 << " ms)\n";
      if (m.smallbank_total) os << "  smallbank total   " << m.smallbank_total << "\n";
      os << "  per-nic ops       ";
      for (const NicOps& n : m.nics)
        os << n.node << ":r" << n.reads << "/w" << n.writes << "/a" << n.atomics << "/m"
           << n.rpcs << " ";
      os << "\n";
      return os.str();
    }
  }
  return os.str();
}

}  // namespace lotus
