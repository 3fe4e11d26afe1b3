#include "lotus/locktable.hpp"

#include <algorithm>

namespace lotus {

Bytes encode_lock_batch(const std::vector<LockReq>& reqs) {
  Bytes out;
  ByteWriter w(out);
  w.u8v(kLockWireVersion);
  w.u32v(static_cast<u32>(reqs.size()));
  for (const LockReq& r : reqs) {
    w.u8v(r.op);
    w.u64v(r.key);
    w.u8v(r.flags);
    w.u64v(r.txn_id);
    w.u16v(r.cn_id);
  }
  return out;
}

std::vector<LockReq> decode_lock_batch(std::span<const u8> b) {
  ByteReader r(b);
  if (r.u8v() != kLockWireVersion) throw std::runtime_error("lock batch: bad version");
  u32 n = r.u32v();
  std::vector<LockReq> reqs;
  reqs.reserve(n);
  for (u32 i = 0; i < n; i++) {
    LockReq q;
    q.op = r.u8v();
    q.key = r.u64v();
    q.flags = r.u8v();
    q.txn_id = r.u64v();
    q.cn_id = r.u16v();
    reqs.push_back(q);
  }
  if (!r.ok()) throw std::runtime_error("lock batch: truncated");
  return reqs;
}

Bytes encode_lock_results(const std::vector<LockResult>& res) {
  Bytes out;
  ByteWriter w(out);
  w.u8v(kLockWireVersion);
  w.u32v(static_cast<u32>(res.size()));
  for (LockResult c : res) w.u8v(static_cast<u8>(c));
  return out;
}

std::vector<LockResult> decode_lock_results(std::span<const u8> b) {
  ByteReader r(b);
  if (r.u8v() != kLockWireVersion) throw std::runtime_error("lock results: bad version");
  u32 n = r.u32v();
  std::vector<LockResult> res;
  res.reserve(n);
  for (u32 i = 0; i < n; i++) res.push_back(static_cast<LockResult>(r.u8v()));
  if (!r.ok()) throw std::runtime_error("lock results: truncated");
  return res;
}

LockTable::LockTable(u16 my_cn, u64 n_buckets, HashFn hash)
    : my_cn_(my_cn),
      n_buckets_(n_buckets),
      hash_(hash ? std::move(hash) : [](u64 k) { return mix64(k); }),
      slots_(n_buckets * kSlotsPerBucket, 0),
      owned_(kNumShards, false) {}

void LockTable::set_owned_all(const std::vector<u16>& shards) {
  std::fill(owned_.begin(), owned_.end(), false);
  for (u16 s : shards) owned_[s] = true;
}

const LockHolder* LockTable::find_holder(const StateEntry& e, u64 txn_id, u16 cn_id) const {
  for (const LockHolder& h : e.holders)
    if (h.txn_id == txn_id && h.cn_id == cn_id) return &h;
  return nullptr;
}

LockResult LockTable::acquire(u64 key, bool is_write, u16 cn_id, u64 txn_id) {
  if (!owned_[shard_of(key)]) return LockResult::ShardNotOwned;

  // CheckLockState: redundant requests from the holder succeed untouched.
  auto st = state_.find(key);
  if (st != state_.end()) {
    const LockHolder* h = find_holder(st->second, txn_id, cn_id);
    if (h && (h->mode == LockMode::Write || !is_write)) return LockResult::Ok;
  }

  u64 h = hash(key);
  u64 fp = fingerprint(h);
  u64 base = slot_index(h);
  u64* match = nullptr;
  u64* free_slot = nullptr;
  for (u32 i = 0; i < kSlotsPerBucket; i++) {
    u64& w = slots_[base + i];
    if (word_counter(w) == 0) {
      if (!free_slot) free_slot = &w;
    } else if (word_fp(w) == fp) {
      match = &w;
      break;
    }
  }

  u64* slot = match ? match : free_slot;
  if (!slot) return LockResult::BucketFull;

  u64 compare, swap;
  if (is_write) {
    if (word_counter(*slot) != 0) return LockResult::Conflict;
    compare = 0;
    swap = make_word(fp, 1);
    if (cn_id != my_cn_ && invalidate_cb_) invalidate_cb_(key);
  } else {
    u8 c = word_counter(*slot);
    if (c == 1) return LockResult::Conflict;
    if (c >= kMaxCounter) return LockResult::Overflow;
    compare = *slot;
    swap = make_word(fp, static_cast<u8>(c + 2));
  }

  // The slot CAS and the state update form one atomic step under the
  // per-bucket guard (the simulator never interleaves inside this call).
  if (*slot != compare) return LockResult::Conflict;
  *slot = swap;
  state_[key].holders.push_back({txn_id, cn_id, is_write ? LockMode::Write : LockMode::Read});
  return LockResult::Ok;
}

bool LockTable::release(u64 key, bool is_write, u16 cn_id, u64 txn_id) {
  auto st = state_.find(key);
  if (st == state_.end()) {
    noop_releases_++;  // duplicate delivery or stale release: idempotent
    return true;
  }
  auto& holders = st->second.holders;
  LockMode mode = is_write ? LockMode::Write : LockMode::Read;
  auto it = std::find_if(holders.begin(), holders.end(), [&](const LockHolder& h) {
    return h.txn_id == txn_id && h.cn_id == cn_id && h.mode == mode;
  });
  if (it == holders.end()) {
    noop_releases_++;
    return true;
  }
  holders.erase(it);

  u64 h = hash(key);
  u64 fp = fingerprint(h);
  u64 base = slot_index(h);
  for (u32 i = 0; i < kSlotsPerBucket; i++) {
    u64& w = slots_[base + i];
    if (word_counter(w) != 0 && word_fp(w) == fp) {
      u8 c = word_counter(w);
      u8 nc = is_write ? 0 : static_cast<u8>(c - 2);
      w = nc == 0 ? 0 : make_word(fp, nc);
      break;
    }
  }
  if (holders.empty()) state_.erase(st);
  return true;
}

std::vector<LockResult> LockTable::handle_batch(const std::vector<LockReq>& reqs) {
  std::vector<LockResult> out;
  out.reserve(reqs.size());
  for (const LockReq& q : reqs) {
    if (q.op == kLockOpAcquire) {
      out.push_back(acquire(q.key, q.is_write(), q.cn_id, q.txn_id));
    } else {
      release(q.key, q.is_write(), q.cn_id, q.txn_id);
      out.push_back(LockResult::Ok);
    }
  }
  return out;
}

std::vector<LockTable::Hold> LockTable::holders_of_cn(u16 cn_id) const {
  std::vector<Hold> out;
  for (const auto& [key, entry] : state_)
    for (const LockHolder& h : entry.holders)
      if (h.cn_id == cn_id) out.push_back({key, h.txn_id, h.mode});
  return out;
}

void LockTable::release_all_of_cn(u16 cn_id) {
  for (Hold h : holders_of_cn(cn_id))
    release(h.key, h.mode == LockMode::Write, cn_id, h.txn_id);
}

std::vector<LockHolder> LockTable::holders_of_key(u64 key) const {
  auto st = state_.find(key);
  return st == state_.end() ? std::vector<LockHolder>{} : st->second.holders;
}

bool LockTable::shard_has_holds(u16 shard) const {
  for (const auto& [key, entry] : state_)
    if (shard_of(key) == shard && !entry.holders.empty()) return true;
  return false;
}

std::vector<LockHolder> LockTable::shard_holders(u16 shard) const {
  std::vector<LockHolder> out;
  for (const auto& [key, entry] : state_)
    if (shard_of(key) == shard)
      out.insert(out.end(), entry.holders.begin(), entry.holders.end());
  return out;
}

void LockTable::force_release_shard(u16 shard) {
  for (auto it = state_.begin(); it != state_.end();) {
    if (shard_of(it->first) != shard) {
      ++it;
      continue;
    }
    u64 h = hash(it->first);
    u64 fp = fingerprint(h);
    u64 base = slot_index(h);
    for (u32 i = 0; i < kSlotsPerBucket; i++) {
      u64& w = slots_[base + i];
      if (word_counter(w) != 0 && word_fp(w) == fp) {
        // Subtract only this key's contribution; a colliding key from
        // another shard keeps its share of the counter.
        u8 c = word_counter(w);
        for (const LockHolder& hd : it->second.holders)
          c = hd.mode == LockMode::Write ? 0 : static_cast<u8>(c - 2);
        w = c == 0 ? 0 : make_word(fp, c);
        break;
      }
    }
    it = state_.erase(it);
  }
}

void LockTable::clear() {
  std::fill(slots_.begin(), slots_.end(), 0);
  state_.clear();
  noop_releases_ = 0;
}

bool LockTable::audit_coherent() const {
  // Aggregate expected counters per slot from the holder state.
  std::map<u64, u32> expect;  // slot index -> counter
  for (const auto& [key, entry] : state_) {
    if (entry.holders.empty()) return false;
    u64 h = hash(key);
    u64 base = slot_index(h);
    u64 fp = fingerprint(h);
    u64 slot = ~0ull;
    for (u32 i = 0; i < kSlotsPerBucket; i++) {
      u64 w = slots_[base + i];
      if (word_counter(w) != 0 && word_fp(w) == fp) {
        slot = base + i;
        break;
      }
    }
    if (slot == ~0ull) return false;  // state entry without a slot
    bool write = entry.holders.front().mode == LockMode::Write;
    if (write && entry.holders.size() != 1) return false;
    expect[slot] += write ? 1 : 2 * static_cast<u32>(entry.holders.size());
  }
  u64 nonzero = 0;
  for (u64 i = 0; i < slots_.size(); i++) {
    if (word_counter(slots_[i]) == 0) continue;
    nonzero++;
    auto it = expect.find(i);
    if (it == expect.end() || it->second != word_counter(slots_[i])) return false;
  }
  return nonzero == expect.size();
}

}  // namespace lotus
