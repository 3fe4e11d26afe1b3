#pragma once

#include <array>
#include <deque>
#include <functional>
#include <memory>
#include <set>

#include "lotus/fabric.hpp"
#include "lotus/history.hpp"
#include "lotus/locktable.hpp"
#include "lotus/memstore.hpp"
#include "lotus/recovery.hpp"
#include "lotus/sharding.hpp"
#include "lotus/txn.hpp"
#include "lotus/vtcache.hpp"

namespace lotus {

struct CrashEvent {
  u16 cn_id = 0;
  SimTime at = 0;
};

struct ClusterConfig {
  u16 num_cns = 3;
  u16 num_mns = 3;
  u16 coordinators = 8;  // per CN
  ExecMode mode = ExecMode::Lotus;
  IsolationLevel isolation = IsolationLevel::SR;
  u32 cvt_cells = 2;
  u64 vt_cache_entries = 64 * 1024;
  u64 lock_table_buckets = LockTable::kDefaultBuckets;
  u64 seed = 1;
  double drop_prob = 0.0;
  NicCostModel nic{};

  SimTime rpc_timeout = sim_us(100);
  int rpc_retries = 3;
  u64 gc_threshold_us = 500'000;  // 500ms
  SimTime metrics_interval = sim_ms(100);
  SimTime lease_interval = sim_ms(10);
  SimTime lease_renew = sim_ms(3);
  SimTime reshard_wait = sim_ms(10);  // drain budget before proactive aborts
  SimTime restart_delay = sim_ms(20);

  bool reshard_enabled = false;
  bool recovery_enabled = false;  // lease daemons + crash handling
  bool audit_cache = false;       // shadow-compare every vt cache hit
  bool audit_serving = false;     // single-server-per-shard tagging
  bool server_mode = false;       // spawn coordinator procs and accept submit()
  std::vector<CrashEvent> crashes;

  int max_attempts = 1000;
};

struct TxnOp {
  u16 table_id = 0;
  LotusKey key = 0;
  bool write = false;
  WriteIntent intent = WriteIntent::Update;
};

// What a workload submits: the declared footprint plus a pure staging
// function computing new payloads from the fetched records.
struct TxnRequest {
  u8 type = 0;  // workload-defined transaction type tag
  bool read_only = false;
  std::vector<TxnOp> ops;
  std::function<void(TxnContext&)> stage;  // fills new_payload on RW entries
  TxnHooks hooks;
};

struct TxnOutcome {
  bool committed = false;
  AbortReason reason = AbortReason::None;
  u64 txn_id = 0;
  int attempts = 0;
  SimTime submitted = 0;
  SimTime finished = 0;
};

struct ReshardEvent {
  u16 shard = 0;
  u16 from = 0;
  u16 to = 0;
  SimTime stop_serving = 0;
  SimTime resume_serving = 0;  // receiver ack observed by the sender
};

// Per-CN runtime state.
struct ComputeNode {
  u16 id = 0;
  std::unique_ptr<LockTable> locks;
  std::unique_ptr<VtCache> vtcache;
  AddrCache addrcache;
  ShardMap cached_map;

  bool serving = false;
  u64 epoch = 0;

  std::deque<std::pair<TxnRequest, OneShot<TxnOutcome>*>> inbox;
  std::unique_ptr<WaitQueue> inbox_cv;
  std::vector<OneShot<TxnOutcome>*> current_jobs;  // one per coordinator
  std::vector<TxnContext*> active;  // running transactions, for abort scans

  std::array<u32, kNumShards> shard_reqs{};       // current interval
  std::array<u32, kNumShards> shard_reqs_prev{};  // last interval
  u64 lat_sum = 0;
  u64 lat_cnt = 0;
  std::vector<std::vector<LoadSample>> load_history;

  MembershipView view;
  std::map<u16, u8> recovery_local_done;  // failed cn -> phase bits
  std::map<u16, u64> stripes_in;          // failed cn -> scanned-coordinator bitmap

  u64 coord_seq = 0;
};

struct TableRuntime {
  TableLayout layout;
  RecordHeap heap;
  u64 initial_version_seed = 0;
};

// Aggregated counters for one run.
struct Counters {
  u64 attempted = 0;
  u64 committed = 0;
  std::map<AbortReason, u64> aborted;
  u64 lock_cas_attempts = 0;  // mn-lock baseline accounting
  u64 rw_single_shard = 0;
  u64 rw_single_shard_local = 0;  // ... with zero lock RPC messages
  u64 stale_cache_hits = 0;       // audit_cache
  u64 serving_violations = 0;     // audit_serving
  u64 snapshot_gced = 0;
  std::vector<u64> latencies_ns;  // committed user transactions

  u64 aborted_total() const {
    u64 n = 0;
    for (auto& [r, c] : aborted) n += c;
    return n;
  }
};

class Cluster {
 public:
  explicit Cluster(ClusterConfig cfg);

  Scheduler& sched() { return sched_; }
  Fabric& fabric() { return fabric_; }
  Router& router() { return router_; }
  TimestampService& ts() { return ts_; }
  const ClusterConfig& config() const { return cfg_; }
  HistoryLog& history() { return history_; }
  Counters& counters() { return counters_; }
  ComputeNode& node(u16 id) { return *cns_[id]; }
  const std::vector<ReshardEvent>& reshard_events() const { return reshard_events_; }

  // --- init phase ---
  u16 create_table(TableSchema schema);
  TableRuntime& table(u16 id);
  // Loads a record with version 1 directly into all replicas (bulk load).
  void load_record(u16 table_id, LotusKey key, std::span<const u8> payload);
  void finish_setup();  // registers handlers, spawns daemons, schedules crashes

  // --- run phase ---
  // Routes and enqueues; fails fast when the target CN is down.
  bool submit(const TxnRequest& req, OneShot<TxnOutcome>& done);
  // Drives one request to completion on a given CN (tests and clients).
  Task<TxnOutcome> run_txn_on(u16 cn_id, TxnRequest req);
  void run() { sched_.run(); }
  void request_stop();
  bool stopping() const { return stopping_; }

  u64 client_commits() const { return client_commits_; }
  u64 client_failures() const { return client_failures_; }
  u64 client_crash_retries() const { return client_crash_retries_; }

  // --- the five-call user API (used by coordinators and tests) ---
  TxnContext begin(u16 cn_id, u16 coord_id);
  Task<bool> execute(TxnContext& ctx);
  Task<bool> commit(TxnContext& ctx);
  Task<bool> run_read_only(TxnContext& ctx);

  // --- topology helpers ---
  NodeId primary_mn(u16 table_id) const { return mn(table_id % cfg_.num_mns); }
  std::vector<NodeId> replicas(u16 table_id) const;
  NodeId log_mn(u16 cn_id, u16 coord) const { return mn((cn_id + coord) % cfg_.num_mns); }
  u64 log_slot_addr(u16 cn_id, u16 coord) const {
    return log_base_ + (static_cast<u64>(cn_id) * cfg_.coordinators + coord) * kLogSlotBytes;
  }

  // --- audits & oracles (cost-free state peeks; not on protocol paths) ---
  Cvt peek_cvt(u16 table_id, LotusKey key, u16 mn_index) const;
  std::optional<Bytes> read_committed_payload(u16 table_id, LotusKey key) const;
  u64 state_checksum() const;  // latest committed payloads across all tables
  bool replicas_identical(u16 table_id, LotusKey key) const;
  bool any_lock_state_references(u16 cn_id) const;
  u64 residual_invisible_cells(u16 table_id) const;

  // --- recovery & resharding internals (driven by daemons; also scriptable) ---
  void crash_cn(u16 cn_id);
  Task<void> restart_cn(u16 cn_id);
  Task<void> handle_cn_failure(u16 survivor, u16 failed);
  Task<void> transfer_shard(u16 sender, u16 shard, u16 receiver);

  Task<void> client_proc(u64 client_id, struct Workload& wl, u64 txn_budget,
                         SimTime deadline);

 private:
  Task<TxnOutcome> drive_txn(u16 cn_id, u16 coord_id, TxnRequest req);
  void set_cn_owned(u16 cn_id, u16 shard, bool owned);

  // protocol internals (txn.cpp)
  struct LockPlanItem {
    u64 lock_key;
    bool is_write;
    bool index_bucket;
    u16 table_id;  // for mn-lock word addressing
  };
  Task<bool> lock_step(TxnContext& ctx, std::vector<LockPlanItem> items);
  Task<bool> lock_step_mn(TxnContext& ctx, std::vector<LockPlanItem> items);
  Task<bool> read_cvt_step(TxnContext& ctx);
  Task<bool> read_data_step(TxnContext& ctx);
  Task<void> release_acquired(TxnContext& ctx, bool await_remote);
  Task<bool> fetch_cvt(TxnContext& ctx, TxnEntry& e);
  Task<bool> abort_txn(TxnContext& ctx, AbortReason reason);
  Task<bool> hook_point(TxnContext& ctx, CrashPoint p);  // pause / crash

  // cn-side procs (cluster.cpp / recovery.cpp)
  Task<void> coordinator_proc(u16 cn_id, u16 coord_id, u64 epoch);
  Task<void> recovery_daemon(u16 cn_id, u64 epoch);
  Task<void> balancer_daemon(u16 cn_id, u64 epoch);
  Task<void> crash_proc(CrashEvent ev);
  void spawn_cn_procs(u16 cn_id);
  void register_cn_handler(u16 cn_id);
  Bytes cn_rpc_dispatch(u16 cn_id, const Bytes& msg, const RpcMeta& meta);
  void fail_inflight_jobs(u16 cn_id);

  Task<void> recover_coordinator_log(u16 survivor, u16 failed, u16 coord);
  Task<void> finish_commit_from_log(u16 survivor, const CommitLogRecord& rec, u64 t_commit);
  Task<void> abort_commit_from_log(u16 survivor, const CommitLogRecord& rec);
  u16 stripe_base_owner(u16 failed, u16 coord) const;
  Task<void> broadcast_stripes(u16 self, u16 failed, u64 bitmap);

  void note_request(u16 cn_id, u16 shard) { cns_[cn_id]->shard_reqs[shard]++; }
  void audit_acquire(u16 cn_id, u16 shard);

  u64 next_txn_id(u16 cn_id, u16 coord_id);
  void record_history(const TxnContext& ctx, u8 type, SimTime finished);

  ClusterConfig cfg_;
  Scheduler sched_;
  Fabric fabric_;
  Router router_;
  TimestampService ts_;
  HistoryLog history_;
  Counters counters_;

  std::vector<std::unique_ptr<ComputeNode>> cns_;
  std::vector<TableRuntime> tables_;
  u64 log_base_ = 0;
  u64 lease_base_ = 0;
  u64 metrics_base_ = 0;
  bool setup_done_ = false;
  bool stopping_ = false;
  u64 global_epoch_ = 0;

  u16 token_holder_cn_ = 0;  // global transfer token lives on CN0
  bool token_taken_ = false;

  std::vector<ReshardEvent> reshard_events_;
  std::array<u16, kNumShards> serving_count_{};  // audit_serving shadow
  std::array<int, kNumShards> shadow_owner_{};

  u64 issued_ = 0;
  u64 active_clients_ = 0;
  u64 client_commits_ = 0;
  u64 client_failures_ = 0;
  u64 client_rejects_ = 0;
  u64 client_crash_retries_ = 0;

  std::mt19937_64 client_rng_;
};

}  // namespace lotus
