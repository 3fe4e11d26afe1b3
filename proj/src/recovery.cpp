#include "lotus/recovery.hpp"

#include <algorithm>

#include "lotus/cluster.hpp"

namespace lotus {

namespace msg {
constexpr u8 kStripeDone = 2;
constexpr u8 kStatusPoll = 3;
constexpr u8 kReady = 4;
constexpr u8 kTransfer = 5;
constexpr u8 kAbortTxn = 6;
constexpr u8 kToken = 7;
}  // namespace msg

std::vector<u16> detect_failures(MembershipView& view, SimTime now) {
  std::vector<u16> newly;
  for (u16 i = 0; i < view.lease_expiry.size(); i++) {
    bool expired = view.lease_expiry[i] < now;
    bool suspected = view.suspected.count(i) > 0;
    if (expired && !suspected) {
      view.suspected.insert(i);
      view.epoch++;
      newly.push_back(i);
    } else if (!expired && suspected) {
      view.suspected.erase(i);
      view.epoch++;
    }
  }
  return newly;
}

// ---------------------------------------------------------------------------
// Failure detection and crash handling.
// ---------------------------------------------------------------------------

Task<void> Cluster::crash_proc(CrashEvent ev) {
  co_await resume_at(sched_, ev.at);
  crash_cn(ev.cn_id);
}

void Cluster::crash_cn(u16 cn_id) {
  ComputeNode& cn = *cns_[cn_id];
  fabric_.fail_node(lotus::cn(cn_id));
  fabric_.clear_rpc_handler(lotus::cn(cn_id));
  cn.serving = false;
  fail_inflight_jobs(cn_id);
  if (cfg_.recovery_enabled) spawn(restart_cn(cn_id));
}

Task<void> Cluster::recovery_daemon(u16 cn_id, u64 epoch) {
  ComputeNode& cn = *cns_[cn_id];
  try {
    while (!stopping_) {
      co_await delay(sched_, cfg_.lease_renew);
      if (cn.epoch != epoch || !cn.serving) co_return;
      Bytes lease(kLeaseSlotBytes, 0);
      put_u64(lease.data(), sched_.now() + cfg_.lease_interval);
      put_u64(lease.data() + 8, cn.epoch);
      co_await fabric_.rdma_write(lotus::cn(cn_id), mn(0),
                                  lease_base_ + cn_id * kLeaseSlotBytes, lease);
      Bytes all = co_await fabric_.rdma_read(lotus::cn(cn_id), mn(0), lease_base_,
                                             cfg_.num_cns * kLeaseSlotBytes);
      cn.view.lease_expiry.resize(cfg_.num_cns);
      for (u16 i = 0; i < cfg_.num_cns; i++)
        cn.view.lease_expiry[i] = get_u64(all.data() + i * kLeaseSlotBytes);
      for (u16 failed : detect_failures(cn.view, sched_.now())) {
        if (failed == cn_id) continue;
        spawn(handle_cn_failure(cn_id, failed));
      }
    }
  } catch (const NodeFailed&) {
  }
}

u16 Cluster::stripe_base_owner(u16 failed, u16 coord) const {
  // Static assignment over the CN ids excluding the failed one.
  std::vector<u16> ids;
  for (u16 i = 0; i < cfg_.num_cns; i++)
    if (i != failed) ids.push_back(i);
  if (ids.empty()) return failed;
  return ids[coord % ids.size()];
}

Task<void> Cluster::broadcast_stripes(u16 self, u16 failed, u64 bitmap) {
  Bytes m;
  m.push_back(msg::kStripeDone);
  m.resize(11);
  put_u16(m.data() + 1, failed);
  put_u64(m.data() + 3, bitmap);
  for (u16 peer = 0; peer < cfg_.num_cns; peer++) {
    if (peer == self || peer == failed) continue;
    if (cns_[self]->view.suspected.count(peer)) continue;
    co_await fabric_.rpc_call(lotus::cn(self), lotus::cn(peer), m);
  }
}

// Lock-rebuild-free recovery, survivor side: scan the failed CN's commit
// logs, resolve in-flight transactions, then release every lock the failed
// CN held here. The failed CN's own table is ephemeral and never rebuilt.
Task<void> Cluster::handle_cn_failure(u16 survivor, u16 failed) {
  ComputeNode& me = *cns_[survivor];
  me.stripes_in[failed] = 0;
  me.recovery_local_done[failed] = 0;

  // Stop local transactions whose locks live on the failed CN; those
  // already in the commit phase run to completion.
  for (TxnContext* ctx : me.active) {
    if (ctx->status != TxnStatus::Running) continue;
    for (const LockedItem& li : ctx->locks)
      if (li.owner_cn == failed) ctx->force_abort = true;
  }

  try {
    u64 all_mask = cfg_.coordinators >= 64 ? ~0ull : (1ull << cfg_.coordinators) - 1;
    for (;;) {
      if (!cns_[survivor]->serving) co_return;
      u64 have = me.stripes_in[failed];
      u64 mine = 0;
      for (u16 c = 0; c < cfg_.coordinators; c++) {
        if (have & (1ull << c)) continue;
        u16 owner = stripe_base_owner(failed, c);
        // Take over stripes of scanners that have since failed themselves.
        if (owner != survivor && !me.view.suspected.count(owner)) continue;
        co_await recover_coordinator_log(survivor, failed, c);
        mine |= 1ull << c;
      }
      if (mine) {
        me.stripes_in[failed] |= mine;
        co_await broadcast_stripes(survivor, failed, me.stripes_in[failed]);
      }

      bool drained = true;
      for (TxnContext* ctx : me.active)
        for (const LockedItem& li : ctx->locks)
          if (li.owner_cn == failed) drained = false;

      if (me.stripes_in[failed] == all_mask && drained) break;
      co_await delay(sched_, sim_us(200));
    }

    me.recovery_local_done[failed] |= kRecoveryStripesScanned | kRecoveryDrained;
    me.locks->release_all_of_cn(failed);
    me.recovery_local_done[failed] |= kRecoveryLocksReleased;
  } catch (const NodeFailed&) {
  }
}

Task<void> Cluster::recover_coordinator_log(u16 survivor, u16 failed, u16 coord) {
  u64 addr = log_slot_addr(failed, coord);
  NodeId node = log_mn(failed, coord);
  Bytes slot = co_await fabric_.rdma_read(lotus::cn(survivor), node, addr, kLogSlotBytes);
  auto rec = decode_commit_log(slot);
  if (!rec) co_return;

  // A transaction continues iff its log is fully written and some replica
  // already carries a commit timestamp; everything else is aborted.
  u64 t_commit = 0;
  for (const CommitLogEntry& e : rec->writes) {
    const TableRuntime& tr = tables_[e.table_id];
    CvtCell logged = decode_cvt_cell(e.cell_image);
    for (NodeId rep : replicas(e.table_id)) {
      Bytes cb = co_await fabric_.rdma_read(lotus::cn(survivor), rep,
                                            tr.layout.cell_addr(e.cvt_addr, e.cell_index),
                                            kCvtCellBytes);
      CvtCell cur = decode_cvt_cell(cb);
      if (cur.address == e.new_addr && cur.head_cv == logged.head_cv &&
          cur.readable_version())
        t_commit = cur.version;
    }
  }
  if (t_commit)
    co_await finish_commit_from_log(survivor, *rec, t_commit);
  else
    co_await abort_commit_from_log(survivor, *rec);

  Bytes zero(8, 0);
  co_await fabric_.rdma_write(lotus::cn(survivor), node, addr, zero);
}

Task<void> Cluster::finish_commit_from_log(u16 survivor, const CommitLogRecord& rec,
                                           u64 t_commit) {
  std::vector<Task<void>> io;
  for (const CommitLogEntry& e : rec.writes) {
    const TableRuntime& tr = tables_[e.table_id];
    Bytes ver(8);
    put_u64(ver.data(), t_commit);
    for (NodeId rep : replicas(e.table_id))
      io.push_back(fabric_.rdma_write(lotus::cn(survivor), rep,
                                      tr.layout.cell_version_addr(e.cvt_addr, e.cell_index),
                                      ver));
  }
  for (auto& t : io) co_await t;

  HistoryRecord hr;  // reads are unrecoverable; writes re-enter the history
  hr.txn_id = rec.txn_id;
  hr.type = 255;
  hr.outcome = 0;
  hr.t_start = t_commit - 1;
  hr.t_commit = t_commit;
  hr.finished = sched_.now();
  for (const CommitLogEntry& e : rec.writes) {
    HistOp op;
    op.table_id = e.table_id;
    op.key = e.key;
    op.kind = HistOpKind::Write;
    op.version = t_commit;
    op.op_time = sched_.now();
    hr.ops.push_back(op);
  }
  history_.append(std::move(hr));
}

Task<void> Cluster::abort_commit_from_log(u16 survivor, const CommitLogRecord& rec) {
  for (const CommitLogEntry& e : rec.writes) {
    const TableRuntime& tr = tables_[e.table_id];
    CvtCell logged = decode_cvt_cell(e.cell_image);
    for (NodeId rep : replicas(e.table_id)) {
      u64 cell_addr = tr.layout.cell_addr(e.cvt_addr, e.cell_index);
      Bytes cb = co_await fabric_.rdma_read(lotus::cn(survivor), rep, cell_addr,
                                            kCvtCellBytes);
      CvtCell cur = decode_cvt_cell(cb);
      if (cur.address == e.new_addr && cur.head_cv == logged.head_cv &&
          cur.version == INVISIBLE) {
        Bytes zero(kCvtCellBytes, 0);
        co_await fabric_.rdma_write(lotus::cn(survivor), rep, cell_addr, zero);
      }
    }
    // The record slot itself is leaked until the next writer of this key
    // reclaims the cell; bounded by in-flight commits at the crash.
  }
}

// The restarted CN: empty lock table, empty caches, and it serves only
// after confirming every survivor finished recovery on its behalf.
Task<void> Cluster::restart_cn(u16 cn_id) {
  co_await delay(sched_, cfg_.restart_delay);
  ComputeNode& cn = *cns_[cn_id];
  fabric_.restart_node(lotus::cn(cn_id));
  cn.epoch++;
  global_epoch_++;
  cn.locks->clear();
  cn.vtcache->clear();
  cn.addrcache.clear();
  cn.cached_map = router_.snapshot();
  for (u16 s = 0; s < kNumShards; s++) {
    bool should = cn.cached_map.owner(s) == cn_id;
    if (cn.locks->owns(s) != should) set_cn_owned(cn_id, s, should);
  }
  cn.view = MembershipView{};
  cn.stripes_in.clear();
  cn.recovery_local_done.clear();
  // A fresh node holds no state for anyone else's recovery.
  for (u16 i = 0; i < cfg_.num_cns; i++)
    if (i != cn_id) cn.recovery_local_done[i] = kRecoveryAllDone;
  cn.active.clear();
  cn.inbox.clear();
  cn.current_jobs.assign(cfg_.coordinators, nullptr);
  cn.lat_sum = cn.lat_cnt = 0;
  cn.shard_reqs.fill(0);
  cn.shard_reqs_prev.fill(0);
  cn.load_history.clear();

  Bytes poll;
  poll.push_back(msg::kStatusPoll);
  poll.resize(3);
  put_u16(poll.data() + 1, cn_id);
  try {
    for (;;) {
      if (stopping_) break;
      bool all_done = true;
      for (u16 peer = 0; peer < cfg_.num_cns; peer++) {
        if (peer == cn_id || fabric_.is_failed(lotus::cn(peer))) continue;
        RpcResult r = co_await fabric_.rpc_call(lotus::cn(cn_id), lotus::cn(peer), poll);
        if (!r.ok || r.response.empty() || r.response[0] != 1) {
          all_done = false;
          break;
        }
      }
      if (all_done) break;
      co_await delay(sched_, sim_us(500));
    }

    Bytes ready;
    ready.push_back(msg::kReady);
    ready.resize(3);
    put_u16(ready.data() + 1, cn_id);
    for (u16 peer = 0; peer < cfg_.num_cns; peer++) {
      if (peer == cn_id || fabric_.is_failed(lotus::cn(peer))) continue;
      co_await fabric_.rpc_call(lotus::cn(cn_id), lotus::cn(peer), ready);
    }

    // Renew the lease before serving so peers unsuspect us.
    Bytes lease(kLeaseSlotBytes, 0);
    put_u64(lease.data(), sched_.now() + cfg_.lease_interval);
    put_u64(lease.data() + 8, cn.epoch);
    co_await fabric_.rdma_write(lotus::cn(cn_id), mn(0),
                                lease_base_ + cn_id * kLeaseSlotBytes, lease);

    cn.serving = true;
    register_cn_handler(cn_id);
    if (cfg_.server_mode) spawn_cn_procs(cn_id);
  } catch (const NodeFailed&) {
    // crashed again while restarting; the next restart proc takes over
  }
}

// ---------------------------------------------------------------------------
// Two-level load balancing: metrics publication, overload detection,
// pass-by-range resharding.
// ---------------------------------------------------------------------------

Task<void> Cluster::balancer_daemon(u16 cn_id, u64 epoch) {
  ComputeNode& cn = *cns_[cn_id];
  u64 interval_seq = 0;
  try {
    while (!stopping_) {
      co_await delay(sched_, cfg_.metrics_interval);
      if (cn.epoch != epoch || !cn.serving) co_return;
      interval_seq++;

      LoadSample mine{interval_seq, cn.lat_cnt ? cn.lat_sum / cn.lat_cnt : 0, cn.lat_cnt};
      cn.lat_sum = 0;
      cn.lat_cnt = 0;
      cn.shard_reqs_prev = cn.shard_reqs;
      cn.shard_reqs.fill(0);

      Bytes sb(kLoadSampleBytes, 0);
      encode_load_sample(sb.data(), mine);
      co_await fabric_.rdma_write(lotus::cn(cn_id), mn(0),
                                  metrics_base_ + cn_id * kLoadSampleBytes, sb);
      Bytes all = co_await fabric_.rdma_read(lotus::cn(cn_id), mn(0), metrics_base_,
                                             cfg_.num_cns * kLoadSampleBytes);
      std::vector<LoadSample> interval;
      for (u16 i = 0; i < cfg_.num_cns; i++)
        interval.push_back(decode_load_sample(all.data() + i * kLoadSampleBytes));
      cn.load_history.push_back(interval);
      if (cn.load_history.size() > 8) cn.load_history.erase(cn.load_history.begin());

      auto over = detect_overload(cn.load_history);
      if (!over || *over != cn_id) continue;

      // Hottest owned shard by last-interval request rate.
      u16 hottest = 0;
      u32 best = 0;
      for (u32 s = 0; s < kNumShards; s++) {
        if (!cn.locks->owns(static_cast<u16>(s))) continue;
        if (cn.shard_reqs_prev[s] > best) {
          best = cn.shard_reqs_prev[s];
          hottest = static_cast<u16>(s);
        }
      }
      if (best == 0) continue;

      // Receiver: the live CN with the lowest latency last interval.
      u16 receiver = cn_id;
      u64 best_lat = ~0ull;
      for (u16 i = 0; i < cfg_.num_cns; i++) {
        if (i == cn_id || fabric_.is_failed(lotus::cn(i))) continue;
        if (cn.view.suspected.count(i)) continue;
        if (interval[i].avg_latency_ns < best_lat) {
          best_lat = interval[i].avg_latency_ns;
          receiver = i;
        }
      }
      if (receiver == cn_id) continue;
      co_await transfer_shard(cn_id, hottest, receiver);
    }
  } catch (const NodeFailed&) {
  }
}

Task<void> Cluster::transfer_shard(u16 sender, u16 shard, u16 receiver) {
  ComputeNode& cn = *cns_[sender];
  // Cluster-wide single-transfer token, held at CN0.
  bool have_token = false;
  if (sender == token_holder_cn_) {
    if (!token_taken_) {
      token_taken_ = true;
      have_token = true;
    }
  } else {
    Bytes m{msg::kToken, 0};
    RpcResult r = co_await fabric_.rpc_call(lotus::cn(sender), lotus::cn(token_holder_cn_), m);
    have_token = r.ok && !r.response.empty() && r.response[0] == 1;
  }
  if (!have_token) co_return;

  auto release_token = [&]() -> Task<void> {
    if (sender == token_holder_cn_) {
      token_taken_ = false;
    } else {
      Bytes m{msg::kToken, 1};
      co_await fabric_.rpc_call(lotus::cn(sender), lotus::cn(token_holder_cn_), m);
    }
  };

  ReshardEvent ev{shard, sender, receiver, sched_.now(), 0};
  set_cn_owned(sender, shard, false);  // acquires now answer ShardNotOwned

  SimTime deadline = sched_.now() + cfg_.reshard_wait;
  while (cn.locks->shard_has_holds(shard) && sched_.now() < deadline)
    co_await delay(sched_, sim_us(200));

  if (cn.locks->shard_has_holds(shard)) {
    // Proactively abort the holders recorded in the lock state.
    for (const LockHolder& h : cn.locks->shard_holders(shard)) {
      if (h.cn_id == sender) {
        for (TxnContext* ctx : cn.active)
          if (ctx->txn_id == h.txn_id && ctx->status == TxnStatus::Running)
            ctx->force_abort = true;
      } else {
        Bytes m;
        m.push_back(msg::kAbortTxn);
        m.resize(9);
        put_u64(m.data() + 1, h.txn_id);
        co_await fabric_.rpc_call(lotus::cn(sender), lotus::cn(h.cn_id), m);
      }
    }
    SimTime abort_deadline = sched_.now() + cfg_.reshard_wait;
    while (cn.locks->shard_has_holds(shard) && sched_.now() < abort_deadline)
      co_await delay(sched_, sim_us(200));
    if (cn.locks->shard_has_holds(shard)) cn.locks->force_release_shard(shard);
  }

  cn.vtcache->clear_shard(shard);

  Bytes tm;
  tm.push_back(msg::kTransfer);
  tm.resize(3);
  put_u16(tm.data() + 1, shard);
  RpcResult ack = co_await fabric_.rpc_call(lotus::cn(sender), lotus::cn(receiver), tm);
  if (!ack.ok) {  // TransferTimeout: roll back, resume serving
    set_cn_owned(sender, shard, true);
    co_await release_token();
    co_return;
  }
  ev.resume_serving = sched_.now();
  router_.map().set_owner(shard, receiver);
  cn.cached_map = router_.snapshot();
  reshard_events_.push_back(ev);
  co_await release_token();
}

}  // namespace lotus
