#include "lotus/cluster.hpp"

#include <algorithm>
#include <cassert>

#include "lotus/workload.hpp"

namespace lotus {

// CN-to-CN message kinds (first byte of every RPC payload).
namespace msg {
constexpr u8 kLockBatch = 1;
constexpr u8 kStripeDone = 2;
constexpr u8 kStatusPoll = 3;
constexpr u8 kReady = 4;
constexpr u8 kTransfer = 5;
constexpr u8 kAbortTxn = 6;
constexpr u8 kToken = 7;
}  // namespace msg

Cluster::Cluster(ClusterConfig cfg)
    : cfg_(cfg),
      fabric_(sched_, cfg.num_cns, cfg.num_mns, cfg.nic, cfg.seed),
      router_(cfg.num_cns, kNumShards, cfg.seed),
      ts_(sched_),
      client_rng_(mix64(cfg.seed ^ 0xc11e47ull)) {
  fabric_.set_drop_probability(cfg_.drop_prob);
  fabric_.set_rpc_timeout(cfg_.rpc_timeout, cfg_.rpc_retries);
  shadow_owner_.fill(-1);
  for (u16 i = 0; i < cfg_.num_cns; i++) {
    auto node = std::make_unique<ComputeNode>();
    node->id = i;
    node->locks = std::make_unique<LockTable>(i, cfg_.lock_table_buckets);
    node->vtcache = std::make_unique<VtCache>(cfg_.coordinators, cfg_.vt_cache_entries);
    node->inbox_cv = std::make_unique<WaitQueue>(sched_);
    node->current_jobs.assign(cfg_.coordinators, nullptr);
    node->cached_map = router_.snapshot();
    cns_.push_back(std::move(node));
  }
}

std::vector<NodeId> Cluster::replicas(u16 table_id) const {
  std::vector<NodeId> out;
  u16 copies = std::min<u16>(3, cfg_.num_mns);
  for (u16 i = 0; i < copies; i++) out.push_back(mn((table_id + i) % cfg_.num_mns));
  return out;
}

u16 Cluster::create_table(TableSchema schema) {
  if (setup_done_) throw std::logic_error("create_table after finish_setup");
  TableRuntime tr;
  tr.layout.schema = schema;
  tr.layout.n_buckets = std::max<u64>(1, (schema.capacity + 1) / 2);
  u64 bucket_len = tr.layout.n_buckets * tr.layout.bucket_stride();
  u64 heap_slots = schema.capacity * (schema.n_cells + 2) + 64;
  u64 heap_len = heap_slots * tr.layout.record_stride();

  u64 bucket_base = 0, heap_base = 0;
  for (u16 m = 0; m < cfg_.num_mns; m++) {
    u64 b = fabric_.register_region(mn(m), bucket_len,
                                    "t" + std::to_string(schema.table_id) + ".buckets");
    u64 h = fabric_.register_region(mn(m), heap_len,
                                    "t" + std::to_string(schema.table_id) + ".heap");
    if (m == 0) {
      bucket_base = b;
      heap_base = h;
    } else {
      assert(b == bucket_base && h == heap_base);  // identical layout per MN
    }
  }
  tr.layout.bucket_base = bucket_base;
  tr.layout.heap_base = heap_base;
  tr.layout.heap_slots = heap_slots;
  tr.heap.init(heap_base, heap_slots, tr.layout.record_stride());
  tables_.push_back(std::move(tr));
  if (tables_.back().layout.schema.table_id != tables_.size() - 1)
    throw std::logic_error("table ids must be dense and in creation order");
  return static_cast<u16>(tables_.size() - 1);
}

TableRuntime& Cluster::table(u16 id) { return tables_.at(id); }

void Cluster::load_record(u16 table_id, LotusKey key, std::span<const u8> payload) {
  TableRuntime& tr = tables_.at(table_id);
  if (payload.size() != tr.layout.schema.record_len)
    throw std::logic_error("load_record: payload size mismatch");
  u64 baddr = tr.layout.bucket_addr(key);
  // Find the key's CVT or claim a free slot, directly in MN memory.
  u64 cvt_addr = 0;
  for (u32 s = 0; s < kCvtsPerBucket; s++) {
    u64 a = tr.layout.cvt_addr(baddr, s);
    Bytes hdr = fabric_.peek(mn(primary_mn(table_id).index), a, kCvtHeaderBytes);
    u64 existing = get_u64(hdr.data());
    if (existing == key || existing == 0) {
      cvt_addr = a;
      break;
    }
  }
  if (cvt_addr == 0) throw std::runtime_error("load_record: index bucket full");

  u64 rec_addr = tr.heap.alloc();
  Cvt cvt;
  cvt.header = {key, table_id, tr.layout.schema.record_len};
  cvt.cells.assign(tr.layout.schema.n_cells, CvtCell{});
  cvt.cells[0] = CvtCell{1, true, rec_addr, 1 /*preload version*/, 1};
  Bytes cvt_img = encode_cvt(cvt);
  Bytes rec_img = record_encode(payload, 1);
  for (NodeId rep : replicas(table_id)) {
    fabric_.poke(rep, cvt_addr, cvt_img);
    fabric_.poke(rep, rec_addr, rec_img);
  }
}

void Cluster::finish_setup() {
  if (setup_done_) return;
  // Aux regions, registered after all tables so bases line up per MN.
  u64 log_len = static_cast<u64>(cfg_.num_cns) * cfg_.coordinators * kLogSlotBytes;
  u64 lease_len = static_cast<u64>(cfg_.num_cns) * 16;
  u64 metrics_len = static_cast<u64>(cfg_.num_cns) * kLoadSampleBytes;
  for (u16 m = 0; m < cfg_.num_mns; m++) {
    u64 lg = fabric_.register_region(mn(m), log_len, "logs");
    u64 ls = fabric_.register_region(mn(m), lease_len, "leases");
    u64 mt = fabric_.register_region(mn(m), metrics_len, "metrics");
    if (m == 0) {
      log_base_ = lg;
      lease_base_ = ls;
      metrics_base_ = mt;
    }
  }
  // Fresh leases so startup does not look like a mass failure.
  for (u16 i = 0; i < cfg_.num_cns; i++) {
    Bytes lease(16, 0);
    put_u64(lease.data(), cfg_.lease_interval);
    fabric_.poke(mn(0), lease_base_ + i * 16, lease);
  }

  for (u16 i = 0; i < cfg_.num_cns; i++) {
    ComputeNode& cn = *cns_[i];
    for (u16 s : router_.snapshot().shards_of(i)) set_cn_owned(i, s, true);
    VtCache* cache = cn.vtcache.get();
    cn.locks->on_remote_write_acquire([cache](u64 key) { cache->invalidate(key); });
    cn.serving = true;
    register_cn_handler(i);
  }
  setup_done_ = true;

  if (cfg_.server_mode)
    for (u16 i = 0; i < cfg_.num_cns; i++) spawn_cn_procs(i);
  for (const CrashEvent& ev : cfg_.crashes) spawn(crash_proc(ev));
}

void Cluster::set_cn_owned(u16 cn_id, u16 shard, bool owned) {
  ComputeNode& cn = *cns_[cn_id];
  bool had = cn.locks->owns(shard);
  cn.locks->set_owned(shard, owned);
  if (!cfg_.audit_serving || had == owned) return;
  if (owned) {
    if (shadow_owner_[shard] >= 0 && shadow_owner_[shard] != cn_id)
      counters_.serving_violations++;
    shadow_owner_[shard] = cn_id;
    serving_count_[shard]++;
    if (serving_count_[shard] > 1) counters_.serving_violations++;
  } else {
    if (shadow_owner_[shard] == cn_id) shadow_owner_[shard] = -1;
    if (serving_count_[shard] > 0) serving_count_[shard]--;
  }
}

void Cluster::audit_acquire(u16 cn_id, u16 shard) {
  if (!cfg_.audit_serving) return;
  if (shadow_owner_[shard] != cn_id) counters_.serving_violations++;
}

void Cluster::register_cn_handler(u16 cn_id) {
  fabric_.set_rpc_handler(cn(cn_id), [this, cn_id](const Bytes& m, const RpcMeta& meta) {
    return cn_rpc_dispatch(cn_id, m, meta);
  });
}

Bytes Cluster::cn_rpc_dispatch(u16 cn_id, const Bytes& m, const RpcMeta&) {
  ComputeNode& cn = *cns_[cn_id];
  if (m.empty()) return {};
  std::span<const u8> body(m.data() + 1, m.size() - 1);
  switch (m[0]) {
    case msg::kLockBatch: {
      std::vector<LockReq> reqs = decode_lock_batch(body);
      for (const LockReq& q : reqs) note_request(cn_id, shard_of(q.key));
      std::vector<LockResult> res = cn.locks->handle_batch(reqs);
      for (size_t i = 0; i < reqs.size(); i++)
        if (reqs[i].op == kLockOpAcquire && res[i] == LockResult::Ok)
          audit_acquire(cn_id, shard_of(reqs[i].key));
      return encode_lock_results(res);
    }
    case msg::kStripeDone: {
      u16 failed = get_u16(body.data());
      u64 bitmap = get_u64(body.data() + 2);
      cn.stripes_in[failed] |= bitmap;
      return {};
    }
    case msg::kStatusPoll: {
      u16 failed = get_u16(body.data());
      auto it = cn.recovery_local_done.find(failed);
      u8 done = (it != cn.recovery_local_done.end() && it->second == 7) ? 1 : 0;
      return Bytes{done};
    }
    case msg::kReady: {
      u16 who = get_u16(body.data());
      cn.view.suspected.erase(who);
      return {};
    }
    case msg::kTransfer: {
      u16 shard = get_u16(body.data());
      set_cn_owned(cn_id, shard, true);
      cn.cached_map = router_.snapshot();
      return Bytes{1};
    }
    case msg::kAbortTxn: {
      u64 txn = get_u64(body.data());
      for (TxnContext* ctx : cn.active)
        if (ctx->txn_id == txn && ctx->status == TxnStatus::Running) ctx->force_abort = true;
      return Bytes{1};
    }
    case msg::kToken: {
      if (body[0] == 0) {  // acquire
        if (token_taken_) return Bytes{0};
        token_taken_ = true;
        return Bytes{1};
      }
      token_taken_ = false;
      return Bytes{1};
    }
    default:
      return {};
  }
}

// ---------------------------------------------------------------------------
// Run phase: submission, coordinators, clients.
// ---------------------------------------------------------------------------

bool Cluster::submit(const TxnRequest& req, OneShot<TxnOutcome>& done) {
  if (!cfg_.server_mode) throw std::logic_error("submit requires server_mode");
  std::vector<bool> live(cfg_.num_cns);
  for (u16 i = 0; i < cfg_.num_cns; i++)
    live[i] = cns_[i]->serving && !fabric_.is_failed(cn(i));
  LotusKey first = req.ops.empty() ? 0 : req.ops.front().key;
  u16 target = router_.route(req.read_only, first, live);
  if (!live[target]) return false;
  cns_[target]->inbox.emplace_back(req, &done);
  cns_[target]->inbox_cv->notify_one();
  return true;
}

void Cluster::fail_inflight_jobs(u16 cn_id) {
  ComputeNode& cn = *cns_[cn_id];
  TxnOutcome crashed;
  crashed.committed = false;
  crashed.reason = AbortReason::NodeCrash;
  crashed.finished = sched_.now();
  for (auto& [req, done] : cn.inbox) done->set(crashed);
  cn.inbox.clear();
  for (auto& slot : cn.current_jobs) {
    if (slot) slot->set(crashed);
    slot = nullptr;
  }
}

Task<void> Cluster::coordinator_proc(u16 cn_id, u16 coord_id, u64 epoch) {
  ComputeNode& cn = *cns_[cn_id];
  while (!stopping_) {
    if (cn.epoch != epoch || !cn.serving) co_return;
    if (cn.inbox.empty()) {
      co_await cn.inbox_cv->wait();
      continue;
    }
    auto [req, done] = cn.inbox.front();
    cn.inbox.pop_front();
    cn.current_jobs[coord_id] = done;
    try {
      TxnOutcome out = co_await drive_txn(cn_id, coord_id, req);
      if (cn.current_jobs[coord_id] == done) {
        done->set(out);
        cn.current_jobs[coord_id] = nullptr;
      }
    } catch (const NodeFailed&) {
      co_return;  // fail-stop: the crash sweep notified the client
    }
  }
}

namespace {
bool retryable(AbortReason r) {
  switch (r) {
    case AbortReason::LockConflict:
    case AbortReason::FutureVersion:
    case AbortReason::InconsistentRead:
    case AbortReason::SnapshotGced:
    case AbortReason::RemoteUnavailable:
    case AbortReason::ForcedAbort:
    case AbortReason::StaleShardExhausted:
      return true;
    default:
      return false;
  }
}

struct ActiveGuard {
  std::vector<TxnContext*>& list;
  TxnContext* ctx;
  ActiveGuard(std::vector<TxnContext*>& l, TxnContext* c) : list(l), ctx(c) {
    list.push_back(c);
  }
  ~ActiveGuard() { std::erase(list, ctx); }
};
}  // namespace

Task<TxnOutcome> Cluster::drive_txn(u16 cn_id, u16 coord_id, TxnRequest req) {
  TxnOutcome out;
  out.submitted = sched_.now();
  ComputeNode& cn = *cns_[cn_id];

  for (int attempt = 1; attempt <= cfg_.max_attempts; ++attempt) {
    counters_.attempted++;
    TxnContext ctx = begin(cn_id, coord_id);
    ctx.hooks = req.hooks;
    for (const TxnOp& op : req.ops) {
      if (op.write)
        ctx.add_rw(op.table_id, op.key, op.intent);
      else
        ctx.add_ro(op.table_id, op.key);
    }

    bool ok;
    {
      ActiveGuard guard(cn.active, &ctx);
      if (req.read_only) {
        ok = co_await run_read_only(ctx);
      } else {
        ok = co_await execute(ctx);
        if (ok) {
          if (req.stage) req.stage(ctx);
          ok = co_await commit(ctx);
        }
      }
    }

    record_history(ctx, req.type, sched_.now());
    out.txn_id = ctx.txn_id;
    out.attempts = attempt;
    if (ok) {
      counters_.committed++;
      if (!req.read_only) {
        std::set<u16> shards;
        for (const auto& [k, e] : ctx.entries) shards.insert(shard_of(e.key));
        if (shards.size() == 1) {
          counters_.rw_single_shard++;
          if (ctx.lock_rpc_messages == 0) counters_.rw_single_shard_local++;
        }
      }
      out.committed = true;
      out.finished = sched_.now();
      cn.lat_sum += out.finished - out.submitted;
      cn.lat_cnt++;
      counters_.latencies_ns.push_back(out.finished - out.submitted);
      co_return out;
    }

    counters_.aborted[ctx.abort_reason]++;
    if (ctx.abort_reason == AbortReason::SnapshotGced) counters_.snapshot_gced++;
    if (!retryable(ctx.abort_reason)) {
      out.reason = ctx.abort_reason;
      out.finished = sched_.now();
      cn.lat_sum += out.finished - out.submitted;
      cn.lat_cnt++;
      co_return out;
    }
    if (attempt > 3) {
      int shift = std::min(attempt - 4, 7);
      co_await delay(sched_, sim_us(100) << shift);
    }
    fabric_.throw_if_failed(lotus::cn(cn_id));
  }
  out.reason = AbortReason::TooManyRetries;
  out.finished = sched_.now();
  co_return out;
}

Task<TxnOutcome> Cluster::run_txn_on(u16 cn_id, TxnRequest req) {
  return drive_txn(cn_id, 0, std::move(req));
}

void Cluster::record_history(const TxnContext& ctx, u8 type, SimTime finished) {
  HistoryRecord rec;
  rec.txn_id = ctx.txn_id;
  rec.type = type;
  rec.outcome = ctx.status == TxnStatus::Committed ? 0 : static_cast<u8>(ctx.abort_reason);
  rec.cn_id = ctx.cn_id;
  rec.coord_id = ctx.coord_id;
  rec.t_start = ctx.t_start;
  rec.t_commit = ctx.t_commit;
  rec.finished = finished;
  for (const auto& [k, e] : ctx.entries) {
    if (e.fetched && e.cvt_exists && e.read_version != 0) {
      HistOp op;
      op.table_id = e.table_id;
      op.key = e.key;
      op.kind = HistOpKind::Read;
      op.version = e.read_version;
      op.op_time = e.read_at;
      rec.ops.push_back(op);
    }
    if (e.is_write && ctx.status == TxnStatus::Committed) {
      HistOp op;
      op.table_id = e.table_id;
      op.key = e.key;
      op.kind = e.intent == WriteIntent::Insert   ? HistOpKind::Insert
                : e.intent == WriteIntent::Delete ? HistOpKind::Delete
                                                  : HistOpKind::Write;
      op.version = ctx.t_commit;
      op.op_time = ctx.visible_at;
      rec.ops.push_back(op);
    }
  }
  history_.append(std::move(rec));
}

Task<void> Cluster::client_proc(u64 client_id, Workload& wl, u64 txn_budget, SimTime deadline) {
  std::mt19937_64 rng(mix64(cfg_.seed ^ (0xc11e000ull + client_id)));
  active_clients_++;
  while (!stopping_) {
    if (deadline && sched_.now() >= deadline) break;
    if (txn_budget) {
      if (issued_ >= txn_budget) break;
      issued_++;
    }
    TxnRequest req = wl.make_request(rng);
    for (;;) {
      OneShot<TxnOutcome> done(sched_);
      if (!submit(req, done)) {
        client_rejects_++;
        co_await delay(sched_, sim_us(500));
        if (stopping_) break;
        continue;
      }
      TxnOutcome out = co_await done.take();
      if (out.committed) {
        client_commits_++;
        break;
      }
      if (out.reason == AbortReason::NodeCrash) {
        client_crash_retries_++;
        co_await delay(sched_, sim_ms(1));
        continue;  // ambiguous outcome: the app retries
      }
      client_failures_++;
      break;
    }
  }
  if (--active_clients_ == 0) request_stop();
}

void Cluster::request_stop() {
  stopping_ = true;
  for (auto& cn : cns_) cn->inbox_cv->notify_all();
}

void Cluster::spawn_cn_procs(u16 cn_id) {
  ComputeNode& cn = *cns_[cn_id];
  u64 epoch = cn.epoch;
  for (u16 c = 0; c < cfg_.coordinators; c++) spawn(coordinator_proc(cn_id, c, epoch));
  if (cfg_.recovery_enabled) spawn(recovery_daemon(cn_id, epoch));
  if (cfg_.reshard_enabled) spawn(balancer_daemon(cn_id, epoch));
}

// ---------------------------------------------------------------------------
// Cost-free audits and oracles.
// ---------------------------------------------------------------------------

Cvt Cluster::peek_cvt(u16 table_id, LotusKey key, u16 mn_index) const {
  const TableRuntime& tr = tables_.at(table_id);
  u64 baddr = tr.layout.bucket_addr(key);
  for (u32 s = 0; s < kCvtsPerBucket; s++) {
    u64 a = tr.layout.cvt_addr(baddr, s);
    Bytes b = fabric_.peek(mn(mn_index), a, cvt_bytes(tr.layout.schema.n_cells));
    Cvt cvt = decode_cvt(b, tr.layout.schema.n_cells);
    if (cvt.header.key == key) return cvt;
  }
  return Cvt{};
}

std::optional<Bytes> Cluster::read_committed_payload(u16 table_id, LotusKey key) const {
  Cvt cvt = peek_cvt(table_id, key, primary_mn(table_id).index);
  if (cvt.header.key != key) return std::nullopt;
  auto cell = choose_read_cell(cvt, INVISIBLE);
  if (!cell || cvt.cells[*cell].tombstone()) return std::nullopt;
  Bytes stored = fabric_.peek(primary_mn(table_id), cvt.cells[*cell].address,
                              record_stored_bytes(cvt.header.length));
  return record_payload(stored);
}

static u64 fnv1a(std::span<const u8> b) {
  u64 h = 0xcbf29ce484222325ull;
  for (u8 c : b) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

u64 Cluster::state_checksum() const {
  u64 acc = 0;
  for (u16 t = 0; t < tables_.size(); t++) {
    const TableRuntime& tr = tables_[t];
    for (u64 b = 0; b < tr.layout.n_buckets; b++) {
      for (u32 s = 0; s < kCvtsPerBucket; s++) {
        u64 addr = tr.layout.cvt_addr(tr.layout.bucket_base + b * tr.layout.bucket_stride(), s);
        Bytes hb = fabric_.peek(primary_mn(t), addr, kCvtHeaderBytes);
        u64 key = get_u64(hb.data());
        if (key == 0) continue;
        auto payload = read_committed_payload(t, key);
        u64 ph = payload ? fnv1a(*payload) : 0xdead;
        acc ^= mix64(mix64(t + 1) ^ mix64(key) ^ ph);
      }
    }
  }
  return acc;
}

bool Cluster::replicas_identical(u16 table_id, LotusKey key) const {
  const TableRuntime& tr = tables_.at(table_id);
  std::vector<NodeId> reps = replicas(table_id);
  u64 baddr = tr.layout.bucket_addr(key);
  for (u32 s = 0; s < kCvtsPerBucket; s++) {
    u64 a = tr.layout.cvt_addr(baddr, s);
    Bytes first = fabric_.peek(reps[0], a, cvt_bytes(tr.layout.schema.n_cells));
    Cvt cvt = decode_cvt(first, tr.layout.schema.n_cells);
    if (cvt.header.key != key) continue;
    for (NodeId rep : reps)
      if (fabric_.peek(rep, a, first.size()) != first) return false;
    for (const CvtCell& c : cvt.cells) {
      if (!c.valid || c.address == 0) continue;
      u64 len = record_stored_bytes(cvt.header.length);
      Bytes r0 = fabric_.peek(reps[0], c.address, len);
      for (NodeId rep : reps)
        if (fabric_.peek(rep, c.address, len) != r0) return false;
    }
    return true;
  }
  return false;
}

bool Cluster::any_lock_state_references(u16 cn_id) const {
  for (const auto& cn : cns_)
    if (!cn->locks->holders_of_cn(cn_id).empty()) return true;
  return false;
}

u64 Cluster::residual_invisible_cells(u16 table_id) const {
  const TableRuntime& tr = tables_.at(table_id);
  u64 n = 0;
  for (u64 b = 0; b < tr.layout.n_buckets; b++) {
    for (u32 s = 0; s < kCvtsPerBucket; s++) {
      u64 addr = tr.layout.cvt_addr(tr.layout.bucket_base + b * tr.layout.bucket_stride(), s);
      Bytes cb = fabric_.peek(primary_mn(table_id), addr, cvt_bytes(tr.layout.schema.n_cells));
      Cvt cvt = decode_cvt(cb, tr.layout.schema.n_cells);
      if (cvt.header.key == 0) continue;
      for (const CvtCell& c : cvt.cells)
        if (c.valid && c.version == INVISIBLE) n++;
    }
  }
  return n;
}

}  // namespace lotus
