#pragma once

#include <functional>
#include <map>
#include <vector>

#include "lotus/bytes.hpp"
#include "lotus/sharding.hpp"

namespace lotus {

enum class LockMode : u8 { Read, Write };

// Per-request result codes, also the wire codes of the lock RPC response.
enum class LockResult : u8 {
  Ok = 0,
  Conflict = 1,
  BucketFull = 2,
  Overflow = 3,
  ShardNotOwned = 4,
};

struct LockHolder {
  u64 txn_id = 0;
  u16 cn_id = 0;
  LockMode mode = LockMode::Read;

  bool operator==(const LockHolder&) const = default;
};

// Lock RPC wire format (version 1):
//   request:  ver u8 | count u32 | count x {op u8, key u64, flags u8, txn u64, cn u16}
//   response: ver u8 | count u32 | count x result-code u8
// flags: bit0 = write lock, bit1 = index-bucket lock.
constexpr u8 kLockWireVersion = 1;
constexpr u8 kLockOpAcquire = 0;
constexpr u8 kLockOpRelease = 1;
constexpr u8 kLockFlagWrite = 1;
constexpr u8 kLockFlagIndexBucket = 2;

struct LockReq {
  u8 op = kLockOpAcquire;
  u64 key = 0;
  u8 flags = 0;
  u64 txn_id = 0;
  u16 cn_id = 0;

  bool is_write() const { return flags & kLockFlagWrite; }
};

Bytes encode_lock_batch(const std::vector<LockReq>& reqs);
std::vector<LockReq> decode_lock_batch(std::span<const u8> b);
Bytes encode_lock_results(const std::vector<LockResult>& res);
std::vector<LockResult> decode_lock_results(std::span<const u8> b);

// The CN-resident distributed lock table: a fixed array of 8B slots
// (7B key fingerprint + 1B counter), 8 slots per bucket, plus the
// lock-state map of holders used for idempotency, recovery and transfer.
//
// Counter encoding: 0 free, 1 write-locked, nonzero even = 2 x readers.
// Keys whose fingerprints collide within a bucket are conservatively
// serialized as one lock.
class LockTable {
 public:
  using HashFn = std::function<u64(u64)>;

  explicit LockTable(u16 my_cn, u64 n_buckets = kDefaultBuckets, HashFn hash = nullptr);

  // 32MB of slots at 8B per slot.
  static constexpr u64 kDefaultBuckets = (32ull << 20) / 8 / 8;
  static constexpr u32 kSlotsPerBucket = 8;
  static constexpr u8 kMaxCounter = 254;

  void set_owned(u16 shard, bool owned) { owned_.at(shard) = owned; }
  bool owns(u16 shard) const { return owned_.at(shard); }
  void set_owned_all(const std::vector<u16>& shards);

  // Called with the key before a write lock requested by a remote CN is
  // granted; wired to the version table cache invalidation.
  void on_remote_write_acquire(std::function<void(u64)> cb) { invalidate_cb_ = std::move(cb); }

  LockResult acquire(u64 key, bool is_write, u16 cn_id, u64 txn_id);
  // Always succeeds; duplicate releases are no-ops (counted for diagnosis).
  bool release(u64 key, bool is_write, u16 cn_id, u64 txn_id);

  std::vector<LockResult> handle_batch(const std::vector<LockReq>& reqs);

  struct Hold {
    u64 key;
    u64 txn_id;
    LockMode mode;
  };
  std::vector<Hold> holders_of_cn(u16 cn_id) const;
  void release_all_of_cn(u16 cn_id);

  std::vector<LockHolder> holders_of_key(u64 key) const;
  bool shard_has_holds(u16 shard) const;
  std::vector<LockHolder> shard_holders(u16 shard) const;
  void force_release_shard(u16 shard);

  void clear();  // restart: the table is ephemeral

  u64 held_keys() const { return state_.size(); }
  u64 noop_releases() const { return noop_releases_; }

  // Invariant check: slot counters match the aggregated holder state.
  bool audit_coherent() const;

 private:
  struct StateEntry {
    std::vector<LockHolder> holders;
  };

  u64 hash(u64 key) const { return hash_(key); }
  u64 slot_index(u64 h) const { return (h % n_buckets_) * kSlotsPerBucket; }
  static u64 fingerprint(u64 h) { return h >> 8; }  // 56-bit
  static u64 make_word(u64 fp, u8 counter) { return (fp << 8) | counter; }
  static u8 word_counter(u64 w) { return static_cast<u8>(w & 0xff); }
  static u64 word_fp(u64 w) { return w >> 8; }

  const LockHolder* find_holder(const StateEntry& e, u64 txn_id, u16 cn_id) const;

  u16 my_cn_;
  u64 n_buckets_;
  HashFn hash_;
  std::vector<u64> slots_;
  std::map<u64, StateEntry> state_;
  std::vector<bool> owned_;
  std::function<void(u64)> invalidate_cb_;
  u64 noop_releases_ = 0;
};

}  // namespace lotus
