#include "lotus/txn.hpp"

#include <algorithm>

#include "lotus/cluster.hpp"

namespace lotus {

const char* abort_reason_name(AbortReason r) {
  switch (r) {
    case AbortReason::None: return "none";
    case AbortReason::LockConflict: return "lock_conflict";
    case AbortReason::FutureVersion: return "future_version";
    case AbortReason::KeyNotFound: return "key_not_found";
    case AbortReason::KeyExists: return "key_exists";
    case AbortReason::BucketFull: return "bucket_full";
    case AbortReason::StaleShardExhausted: return "stale_shard_exhausted";
    case AbortReason::InconsistentRead: return "inconsistent_read";
    case AbortReason::SnapshotGced: return "snapshot_gced";
    case AbortReason::RemoteUnavailable: return "remote_unavailable";
    case AbortReason::ForcedAbort: return "forced_abort";
    case AbortReason::NodeCrash: return "node_crash";
    case AbortReason::TooManyRetries: return "too_many_retries";
  }
  return "unknown";
}

Bytes encode_commit_log(const CommitLogRecord& rec) {
  if (rec.writes.size() > kLogMaxWrites) throw std::logic_error("commit log overflow");
  Bytes slot(kLogSlotBytes, 0);
  put_u64(slot.data(), rec.txn_id);
  put_u16(slot.data() + 8, static_cast<u16>(rec.writes.size()));
  u64 off = 10;
  for (const CommitLogEntry& e : rec.writes) {
    put_u16(slot.data() + off, e.table_id);
    put_u64(slot.data() + off + 2, e.key);
    put_u32(slot.data() + off + 10, e.cell_index);
    put_u64(slot.data() + off + 14, e.cvt_addr);
    put_u64(slot.data() + off + 22, e.new_addr);
    if (e.cell_image.size() != kCvtCellBytes) throw std::logic_error("bad cell image");
    std::copy(e.cell_image.begin(), e.cell_image.end(), slot.begin() + off + 30);
    off += 30 + kCvtCellBytes;
  }
  put_u64(slot.data() + kLogMarkerOffset, rec.txn_id ^ kLogMarkerMagic);
  return slot;
}

std::optional<CommitLogRecord> decode_commit_log(std::span<const u8> slot) {
  if (slot.size() < kLogSlotBytes) return std::nullopt;
  u64 txn = get_u64(slot.data());
  if (txn == 0) return std::nullopt;
  if (get_u64(slot.data() + kLogMarkerOffset) != (txn ^ kLogMarkerMagic)) return std::nullopt;
  CommitLogRecord rec;
  rec.txn_id = txn;
  u16 n = get_u16(slot.data() + 8);
  if (n > kLogMaxWrites) return std::nullopt;
  u64 off = 10;
  for (u16 i = 0; i < n; i++) {
    CommitLogEntry e;
    e.table_id = get_u16(slot.data() + off);
    e.key = get_u64(slot.data() + off + 2);
    e.cell_index = get_u32(slot.data() + off + 10);
    e.cvt_addr = get_u64(slot.data() + off + 14);
    e.new_addr = get_u64(slot.data() + off + 22);
    e.cell_image.assign(slot.begin() + off + 30, slot.begin() + off + 30 + kCvtCellBytes);
    rec.writes.push_back(std::move(e));
    off += 30 + kCvtCellBytes;
  }
  return rec;
}

// ---------------------------------------------------------------------------
// The lock-first transaction protocol (execution + commit phases).
// ---------------------------------------------------------------------------

TxnContext Cluster::begin(u16 cn_id, u16 coord_id) {
  TxnContext ctx;
  ctx.txn_id = next_txn_id(cn_id, coord_id);
  ctx.cn_id = cn_id;
  ctx.coord_id = coord_id;
  ctx.isolation = cfg_.isolation;
  ctx.t_start = ts_.next();
  ctx.begin_time = sched_.now();
  return ctx;
}

u64 Cluster::next_txn_id(u16 cn_id, u16 coord_id) {
  ComputeNode& cn = *cns_[cn_id];
  return (static_cast<u64>(cn_id + 1) << 48) | (static_cast<u64>(coord_id) << 40) |
         ++cn.coord_seq;
}

Task<bool> Cluster::hook_point(TxnContext& ctx, CrashPoint p) {
  if (ctx.hooks.pause_at == p && ctx.hooks.pause_for > 0)
    co_await delay(sched_, ctx.hooks.pause_for);
  if (ctx.hooks.crash_at == p) {
    crash_cn(ctx.cn_id);
    throw NodeFailed{};
  }
  co_return true;
}

Task<bool> Cluster::abort_txn(TxnContext& ctx, AbortReason reason) {
  co_await release_acquired(ctx, /*await_remote=*/true);
  ctx.status = TxnStatus::Aborted;
  ctx.abort_reason = reason;
  co_return false;
}

// Step 1 of the execution phase: write locks for the read-write set, read
// locks for the read-only set under SR. Local locks hit the local table;
// remote locks are batched per target CN into one RPC message each.
Task<bool> Cluster::execute(TxnContext& ctx) {
  if (ctx.status != TxnStatus::Running) throw std::logic_error("execute on terminated txn");
  ComputeNode& cn = *cns_[ctx.cn_id];
  fabric_.throw_if_failed(lotus::cn(ctx.cn_id));
  if (ctx.force_abort) co_return co_await abort_txn(ctx, AbortReason::ForcedAbort);

  // Plan locks for entries not yet fetched.
  std::vector<LockPlanItem> plan;
  std::set<u64> planned;
  for (auto& [k, e] : ctx.entries) {
    if (e.fetched) continue;
    bool need_lock = e.is_write || ctx.isolation == IsolationLevel::SR;
    if (!need_lock) continue;
    if (planned.insert(e.key).second)
      plan.push_back({e.key, e.is_write, false, e.table_id});
    if (e.is_write && e.intent == WriteIntent::Insert) {
      u64 baddr = tables_[e.table_id].layout.bucket_addr(e.key);
      if (planned.insert(baddr).second)
        plan.push_back({baddr, true, true, e.table_id});
    }
  }
  // Deterministic acquisition order: by (owner CN, key) to damp livelock
  // between symmetric conflicting transactions.
  std::sort(plan.begin(), plan.end(), [&](const LockPlanItem& a, const LockPlanItem& b) {
    u16 oa = cn.cached_map.owner(shard_of(a.lock_key));
    u16 ob = cn.cached_map.owner(shard_of(b.lock_key));
    return oa != ob ? oa < ob : a.lock_key < b.lock_key;
  });

  bool locked = cfg_.mode == ExecMode::Lotus
                    ? co_await lock_step(ctx, std::move(plan))
                    : co_await lock_step_mn(ctx, std::move(plan));
  if (!locked) co_return false;  // lock_step aborted ctx
  if (!co_await hook_point(ctx, CrashPoint::AfterLock)) co_return false;
  if (ctx.force_abort) co_return co_await abort_txn(ctx, AbortReason::ForcedAbort);

  if (!co_await read_cvt_step(ctx)) co_return false;
  if (!co_await hook_point(ctx, CrashPoint::AfterReadCvt)) co_return false;

  if (!co_await read_data_step(ctx)) co_return false;
  if (!co_await hook_point(ctx, CrashPoint::AfterReadData)) co_return false;
  co_return true;
}

Task<bool> Cluster::lock_step(TxnContext& ctx, std::vector<LockPlanItem> items) {
  ComputeNode& cn = *cns_[ctx.cn_id];
  for (int replan = 0; replan <= 3; ++replan) {
    if (items.empty()) co_return true;

    // Partition into local calls and per-CN remote batches.
    std::vector<LockPlanItem> local;
    std::map<u16, std::vector<LockPlanItem>> remote;
    for (const LockPlanItem& it : items) {
      u16 owner = cn.cached_map.owner(shard_of(it.lock_key));
      if (owner == ctx.cn_id)
        local.push_back(it);
      else
        remote[owner].push_back(it);
    }

    std::vector<LockPlanItem> stale;  // ShardNotOwned: refresh and re-route
    bool failed = false;
    AbortReason fail_reason = AbortReason::LockConflict;

    for (const LockPlanItem& it : local) {
      note_request(ctx.cn_id, shard_of(it.lock_key));
      LockResult r = cn.locks->acquire(it.lock_key, it.is_write, ctx.cn_id, ctx.txn_id);
      if (r == LockResult::Ok) {
        ctx.locks.push_back({it.lock_key, it.is_write, it.index_bucket, ctx.cn_id, 0});
        audit_acquire(ctx.cn_id, shard_of(it.lock_key));
      } else if (r == LockResult::ShardNotOwned) {
        stale.push_back(it);
      } else {
        failed = true;
        fail_reason = r == LockResult::BucketFull ? AbortReason::BucketFull
                                                  : AbortReason::LockConflict;
        break;
      }
    }

    if (!failed) {
      for (auto& [owner, batch] : remote) {
        std::vector<LockReq> reqs;
        for (const LockPlanItem& it : batch) {
          LockReq q;
          q.op = kLockOpAcquire;
          q.key = it.lock_key;
          q.flags = static_cast<u8>((it.is_write ? kLockFlagWrite : 0) |
                                    (it.index_bucket ? kLockFlagIndexBucket : 0));
          q.txn_id = ctx.txn_id;
          q.cn_id = ctx.cn_id;
          reqs.push_back(q);
        }
        Bytes msg;
        msg.push_back(1);  // kMsgLockBatch
        Bytes body = encode_lock_batch(reqs);
        msg.insert(msg.end(), body.begin(), body.end());
        ctx.lock_rpc_messages++;
        RpcResult rr = co_await fabric_.rpc_call(lotus::cn(ctx.cn_id), lotus::cn(owner),
                                                 std::move(msg), ctx.coord_id);
        if (!rr.ok) {
          failed = true;
          fail_reason = AbortReason::RemoteUnavailable;
          break;
        }
        std::vector<LockResult> res = decode_lock_results(rr.response);
        for (size_t i = 0; i < batch.size(); i++) {
          switch (res.at(i)) {
            case LockResult::Ok:
              ctx.locks.push_back(
                  {batch[i].lock_key, batch[i].is_write, batch[i].index_bucket, owner, 0});
              break;
            case LockResult::ShardNotOwned:
              stale.push_back(batch[i]);
              break;
            case LockResult::BucketFull:
              failed = true;
              fail_reason = AbortReason::BucketFull;
              break;
            default:
              failed = true;
              fail_reason = AbortReason::LockConflict;
              break;
          }
          if (failed) break;
        }
        if (failed) break;
      }
    }

    if (failed) co_return co_await abort_txn(ctx, fail_reason);
    if (stale.empty()) co_return true;
    // Refresh the cached routing snapshot and retry only the stale items.
    cn.cached_map = router_.snapshot();
    items = std::move(stale);
  }
  co_return co_await abort_txn(ctx, AbortReason::StaleShardExhausted);
}

// Baseline mode: each lock is an 8B word co-located with the key's CVT at
// the MN, acquired and released with fabric CAS (one atomic per attempt).
Task<bool> Cluster::lock_step_mn(TxnContext& ctx, std::vector<LockPlanItem> items) {
  std::sort(items.begin(), items.end(),
            [](const LockPlanItem& a, const LockPlanItem& b) { return a.lock_key < b.lock_key; });
  for (const LockPlanItem& it : items) {
    if (it.index_bucket)
      throw std::logic_error("mn-lock baseline does not support inserts");
    TxnEntry* e = ctx.find(it.table_id, it.lock_key);
    if (!e) continue;
    // Need the CVT address before we can reach the lock word.
    if (e->cvt_addr == 0) {
      if (!co_await fetch_cvt(ctx, *e)) co_return false;  // aborted inside
      if (!e->cvt_exists) co_return co_await abort_txn(ctx, AbortReason::KeyNotFound);
    }
    u64 lock_addr = e->cvt_addr + kCvtHeaderLockOffset;
    u64 tag = ctx.txn_id | 1;
    counters_.lock_cas_attempts++;
    u64 prior = co_await fabric_.rdma_cas(lotus::cn(ctx.cn_id), primary_mn(it.table_id),
                                          lock_addr, 0, tag);
    if (prior != 0) co_return co_await abort_txn(ctx, AbortReason::LockConflict);
    ctx.locks.push_back({it.lock_key, it.is_write, false, u16(0xffff), lock_addr});
    // The pre-lock CVT snapshot may be stale; refetch now that the key is
    // locked (the CAS+READ pattern of one-sided locking).
    u32 n_cells = tables_[it.table_id].layout.schema.n_cells;
    Bytes b = co_await fabric_.rdma_read(lotus::cn(ctx.cn_id), primary_mn(it.table_id),
                                         e->cvt_addr, cvt_bytes(n_cells));
    e->cvt = decode_cvt(b, n_cells);
  }
  co_return true;
}

// Step 2: read CVTs. Locally locked keys consult the version table cache;
// others go through the address cache, falling back to a full bucket read.
Task<bool> Cluster::read_cvt_step(TxnContext& ctx) {
  for (auto& [k, e] : ctx.entries) {
    if (e.fetched || e.cvt_addr != 0) continue;
    if (!co_await fetch_cvt(ctx, e)) co_return false;
    if (!e.cvt_exists && e.intent != WriteIntent::Insert)
      co_return co_await abort_txn(ctx, AbortReason::KeyNotFound);
    if (e.cvt_exists && e.is_write && e.intent == WriteIntent::Insert) {
      // Inserting over a live record fails; a tombstoned or empty CVT may
      // be resurrected in place.
      auto live = choose_read_cell(e.cvt, INVISIBLE);
      if (live && !e.cvt.cells[*live].tombstone())
        co_return co_await abort_txn(ctx, AbortReason::KeyExists);
    }
  }
  co_return true;
}

Task<bool> Cluster::fetch_cvt(TxnContext& ctx, TxnEntry& e) {
  ComputeNode& cn = *cns_[ctx.cn_id];
  const TableRuntime& tr = tables_[e.table_id];
  u32 n_cells = tr.layout.schema.n_cells;

  bool locally_locked = false;
  if (cfg_.mode == ExecMode::Lotus && cn.locks->owns(shard_of(e.key)))
    for (const LockHolder& h : cn.locks->holders_of_key(e.key))
      if (h.txn_id == ctx.txn_id && h.cn_id == ctx.cn_id) locally_locked = true;
  if (locally_locked) {
    if (auto hit = cn.vtcache->lookup(e.key)) {
      if (cfg_.audit_cache) {
        Bytes live = fabric_.peek(primary_mn(e.table_id), hit->addr, cvt_bytes(n_cells));
        if (encode_cvt(hit->cvt) != live) counters_.stale_cache_hits++;
      }
      e.cvt = hit->cvt;
      e.cvt_addr = hit->addr;
      e.cvt_exists = true;
      co_return true;
    }
  }

  if (auto addr = cn.addrcache.lookup(e.key)) {
    Bytes b = co_await fabric_.rdma_read(lotus::cn(ctx.cn_id), primary_mn(e.table_id),
                                         *addr, cvt_bytes(n_cells));
    Cvt cvt = decode_cvt(b, n_cells);
    if (AddrCache::validate(cvt.header, e.key)) {
      e.cvt = std::move(cvt);
      e.cvt_addr = *addr;
      e.cvt_exists = true;
      if (locally_locked) cn.vtcache->update_local(e.key, {e.cvt, e.cvt_addr});
      co_return true;
    }
    cn.addrcache.erase(e.key);  // stale: repaired below via the bucket read
  }

  u64 baddr = tr.layout.bucket_addr(e.key);
  Bytes bucket = co_await fabric_.rdma_read(lotus::cn(ctx.cn_id), primary_mn(e.table_id),
                                            baddr, tr.layout.bucket_stride());
  std::optional<u32> free_slot;
  for (u32 s = 0; s < kCvtsPerBucket; s++) {
    std::span<const u8> view(bucket.data() + s * tr.layout.cvt_stride(),
                             cvt_bytes(n_cells));
    Cvt cvt = decode_cvt(view, n_cells);
    if (cvt.header.key == e.key) {
      e.cvt = std::move(cvt);
      e.cvt_addr = tr.layout.cvt_addr(baddr, s);
      e.cvt_exists = true;
      cn.addrcache.insert(e.key, e.cvt_addr);
      if (locally_locked) cn.vtcache->update_local(e.key, {e.cvt, e.cvt_addr});
      co_return true;
    }
    if (!free_slot && cvt.header.key == 0) free_slot = s;
  }

  e.cvt_exists = false;
  if (e.intent == WriteIntent::Insert && e.is_write) {
    if (!free_slot) co_return co_await abort_txn(ctx, AbortReason::BucketFull);
    e.cvt_slot = *free_slot;
    e.cvt_addr = tr.layout.cvt_addr(baddr, *free_slot);
    e.cvt.header = CvtHeader{e.key, e.table_id, tr.layout.schema.record_len};
    e.cvt.cells.assign(n_cells, CvtCell{});
  }
  co_return true;
}

// Step 3: version selection and record reads.
Task<bool> Cluster::read_data_step(TxnContext& ctx) {
  for (auto& [k, e] : ctx.entries) {
    if (e.fetched) continue;
    if (!e.cvt_exists) {  // insert of a fresh key: nothing to read
      e.fetched = true;
      continue;
    }
    bool future_check = ctx.isolation == IsolationLevel::SR || e.is_write;
    if (future_check && has_future_version(e.cvt, ctx.t_start))
      co_return co_await abort_txn(ctx, AbortReason::FutureVersion);

    auto cell = choose_read_cell(e.cvt, ctx.t_start);
    if (!cell) {
      bool any_version = false;
      for (const CvtCell& c : e.cvt.cells) any_version |= c.readable_version();
      if (!any_version && e.intent == WriteIntent::Insert && e.is_write) {
        e.fetched = true;  // resurrecting an emptied CVT
        continue;
      }
      co_return co_await abort_txn(
          ctx, any_version ? AbortReason::SnapshotGced : AbortReason::KeyNotFound);
    }
    const CvtCell& c = e.cvt.cells[*cell];
    if (c.tombstone()) {
      if (e.intent == WriteIntent::Insert && e.is_write) {
        e.fetched = true;
        continue;
      }
      co_return co_await abort_txn(ctx, AbortReason::KeyNotFound);
    }

    u64 stored_len = record_stored_bytes(e.cvt.header.length);
    Bytes stored = co_await fabric_.rdma_read(lotus::cn(ctx.cn_id), primary_mn(e.table_id),
                                              c.address, stored_len);
    if (!cv_check(stored, c))
      co_return co_await abort_txn(ctx, AbortReason::InconsistentRead);
    e.record = record_payload(stored);
    e.read_version = c.version;
    e.read_at = sched_.now();
    e.fetched = true;
  }
  co_return true;
}

Task<void> Cluster::release_acquired(TxnContext& ctx, bool await_remote) {
  ComputeNode& cn = *cns_[ctx.cn_id];
  std::map<u16, std::vector<LockReq>> remote;
  std::vector<Task<u64>> cas_releases;
  for (const LockedItem& li : ctx.locks) {
    if (li.mn_lock_addr != 0) {
      counters_.lock_cas_attempts++;
      u16 table = 0;  // the MN is addressed directly; resolve from entries
      for (auto& [k, e] : ctx.entries)
        if (e.key == li.lock_key) table = e.table_id;
      cas_releases.push_back(fabric_.rdma_cas(lotus::cn(ctx.cn_id), primary_mn(table),
                                              li.mn_lock_addr, ctx.txn_id | 1, 0));
      continue;
    }
    if (li.owner_cn == ctx.cn_id) {
      cn.locks->release(li.lock_key, li.is_write, ctx.cn_id, ctx.txn_id);
      continue;
    }
    LockReq q;
    q.op = kLockOpRelease;
    q.key = li.lock_key;
    q.flags = static_cast<u8>((li.is_write ? kLockFlagWrite : 0) |
                              (li.index_bucket ? kLockFlagIndexBucket : 0));
    q.txn_id = ctx.txn_id;
    q.cn_id = ctx.cn_id;
    remote[li.owner_cn].push_back(q);
  }
  ctx.locks.clear();

  for (auto& [owner, reqs] : remote) {
    Bytes msg;
    msg.push_back(1);  // kMsgLockBatch
    Bytes body = encode_lock_batch(reqs);
    msg.insert(msg.end(), body.begin(), body.end());
    ctx.lock_rpc_messages++;
    bool skip_dead = cn.view.suspected.count(owner) > 0;
    if (await_remote && !skip_dead) {
      co_await fabric_.rpc_call(lotus::cn(ctx.cn_id), lotus::cn(owner), std::move(msg),
                                ctx.coord_id);
    } else if (!skip_dead) {
      // Unlock responses are not awaited; the commit result returns first.
      fabric_.rpc_post(lotus::cn(ctx.cn_id), lotus::cn(owner), std::move(msg), ctx.coord_id);
    }
  }
  for (auto& t : cas_releases) co_await t;
  co_return;
}

// Phase 2: write the new versions INVISIBLE with the commit log, fetch the
// commit timestamp, flip visibility, clear the log slot, unlock.
Task<bool> Cluster::commit(TxnContext& ctx) {
  if (ctx.status != TxnStatus::Running) throw std::logic_error("commit on terminated txn");
  fabric_.throw_if_failed(lotus::cn(ctx.cn_id));
  ComputeNode& cn = *cns_[ctx.cn_id];

  std::vector<TxnEntry*> writes;
  for (auto& [k, e] : ctx.entries)
    if (e.is_write) writes.push_back(&e);

  if (writes.empty()) {
    co_await release_acquired(ctx, /*await_remote=*/false);
    ctx.status = TxnStatus::Committed;
    co_return true;
  }
  if (ctx.force_abort) co_return co_await abort_txn(ctx, AbortReason::ForcedAbort);

  // Commit phase entered: from the first log/data byte on, the transaction
  // runs to completion (recovery continues or aborts it after a crash).
  ctx.status = TxnStatus::Committing;

  CommitLogRecord log;
  log.txn_id = ctx.txn_id;
  std::vector<Task<void>> io;

  for (TxnEntry* e : writes) {
    const TableRuntime& tr = tables_[e->table_id];
    TableRuntime& heap_tr = tables_[e->table_id];
    if (e->intent != WriteIntent::Delete &&
        e->new_payload.size() != tr.layout.schema.record_len)
      throw std::logic_error("commit: staged payload size mismatch");
    CellChoice choice = e->cvt_exists
                            ? select_cell_for_write(e->cvt, sched_.now() / 1000,
                                                    cfg_.gc_threshold_us)
                            : CellChoice{0, CellUse::Free};
    CvtCell old = e->cvt.cells[choice.index];
    e->write_cell = choice.index;
    e->new_cv = static_cast<u8>(old.head_cv + 1);

    if (choice.use == CellUse::Reclaimed && old.address != 0)
      heap_tr.heap.free(old.address);

    if (e->intent == WriteIntent::Delete) {
      if (choice.use == CellUse::Overwrite && old.address != 0)
        heap_tr.heap.free(old.address);
      e->new_addr = 0;
    } else if (choice.use == CellUse::Overwrite) {
      e->new_addr = old.address != 0 ? old.address : heap_tr.heap.alloc();
    } else {
      e->new_addr = heap_tr.heap.alloc();
    }

    CvtCell fresh;
    fresh.head_cv = fresh.tail_cv = e->new_cv;
    fresh.valid = true;
    fresh.address = e->new_addr;
    fresh.version = INVISIBLE;
    e->cvt.cells[e->write_cell] = fresh;
    Bytes cell_img = encode_cvt_cell(fresh);

    Bytes header_img;
    if (!e->cvt_exists) header_img = encode_cvt_header(e->cvt.header);
    Bytes record_img;
    if (e->intent != WriteIntent::Delete)
      record_img = record_encode(e->new_payload, e->new_cv);

    for (NodeId rep : replicas(e->table_id)) {
      if (!header_img.empty())
        io.push_back(fabric_.rdma_write(lotus::cn(ctx.cn_id), rep, e->cvt_addr, header_img));
      if (!record_img.empty())
        io.push_back(fabric_.rdma_write(lotus::cn(ctx.cn_id), rep, e->new_addr, record_img));
      io.push_back(fabric_.rdma_write(lotus::cn(ctx.cn_id), rep,
                                      tr.layout.cell_addr(e->cvt_addr, e->write_cell),
                                      cell_img));
    }
    log.writes.push_back({e->table_id, e->key, e->write_cell, e->cvt_addr, e->new_addr, cell_img});
  }

  u64 log_addr = log_slot_addr(ctx.cn_id, ctx.coord_id);
  NodeId log_node = log_mn(ctx.cn_id, ctx.coord_id);
  if (ctx.hooks.sequence_commit) {
    for (auto& t : io) co_await t;
    io.clear();
    if (!co_await hook_point(ctx, CrashPoint::MidCommitDataNoLog)) co_return false;
    co_await fabric_.rdma_write(lotus::cn(ctx.cn_id), log_node, log_addr,
                                encode_commit_log(log));
  } else {
    io.push_back(fabric_.rdma_write(lotus::cn(ctx.cn_id), log_node, log_addr,
                                    encode_commit_log(log)));
    for (auto& t : io) co_await t;
    io.clear();
  }
  if (!co_await hook_point(ctx, CrashPoint::AfterLog)) co_return false;

  ctx.t_commit = ts_.next();
  if (!co_await hook_point(ctx, CrashPoint::AfterGetTs)) co_return false;

  for (TxnEntry* e : writes) {
    const TableRuntime& tr = tables_[e->table_id];
    Bytes ver(8);
    put_u64(ver.data(), ctx.t_commit);
    for (NodeId rep : replicas(e->table_id))
      io.push_back(fabric_.rdma_write(lotus::cn(ctx.cn_id), rep,
                                      tr.layout.cell_version_addr(e->cvt_addr, e->write_cell),
                                      ver));
    e->cvt.cells[e->write_cell].version = ctx.t_commit;
  }
  for (auto& t : io) co_await t;
  io.clear();
  ctx.visible_at = sched_.now();

  // Local keys: synchronously refresh the version table cache.
  if (cfg_.mode == ExecMode::Lotus) {
    for (TxnEntry* e : writes)
      if (cn.locks->owns(shard_of(e->key)))
        cn.vtcache->update_local(e->key, {e->cvt, e->cvt_addr});
  }
  if (!co_await hook_point(ctx, CrashPoint::AfterVisible)) co_return false;

  Bytes zero(8, 0);
  co_await fabric_.rdma_write(lotus::cn(ctx.cn_id), log_node, log_addr, zero);
  if (!co_await hook_point(ctx, CrashPoint::AfterLogClear)) co_return false;

  co_await release_acquired(ctx, /*await_remote=*/false);
  ctx.status = TxnStatus::Committed;
  if (!co_await hook_point(ctx, CrashPoint::AfterUnlock)) co_return false;
  co_return true;
}

// Read-only transactions: lock-free snapshot reads guarded by cacheline
// versions.
Task<bool> Cluster::run_read_only(TxnContext& ctx) {
  if (ctx.status != TxnStatus::Running) throw std::logic_error("run on terminated txn");
  fabric_.throw_if_failed(lotus::cn(ctx.cn_id));
  for (auto& [k, e] : ctx.entries) {
    if (e.is_write) throw std::logic_error("read-only path with a write entry");
    if (!co_await fetch_cvt(ctx, e)) co_return false;
    if (!e.cvt_exists) co_return co_await abort_txn(ctx, AbortReason::KeyNotFound);

    auto cell = choose_read_cell(e.cvt, ctx.t_start);
    if (!cell) {
      bool any_version = false;
      for (const CvtCell& c : e.cvt.cells) any_version |= c.readable_version();
      co_return co_await abort_txn(
          ctx, any_version ? AbortReason::SnapshotGced : AbortReason::KeyNotFound);
    }
    CvtCell c = e.cvt.cells[*cell];
    if (c.tombstone()) co_return co_await abort_txn(ctx, AbortReason::KeyNotFound);

    u64 stored_len = record_stored_bytes(e.cvt.header.length);
    Bytes stored = co_await fabric_.rdma_read(lotus::cn(ctx.cn_id), primary_mn(e.table_id),
                                              c.address, stored_len);
    if (!cv_check(stored, c))
      co_return co_await abort_txn(ctx, AbortReason::InconsistentRead);
    e.record = record_payload(stored);
    e.read_version = c.version;
    e.read_at = sched_.now();
    e.fetched = true;
  }
  ctx.status = TxnStatus::Committed;
  co_return true;
}

}  // namespace lotus
