#pragma once

#include <map>
#include <vector>

#include "lotus/memstore.hpp"
#include "lotus/sim.hpp"

namespace lotus {

enum class IsolationLevel : u8 { SR, SI };
enum class ExecMode : u8 { Lotus, MnLock };

enum class TxnStatus : u8 { Running, Committing, Committed, Aborted };

enum class AbortReason : u8 {
  None = 0,
  LockConflict,
  FutureVersion,
  KeyNotFound,
  KeyExists,
  BucketFull,
  StaleShardExhausted,
  InconsistentRead,
  SnapshotGced,       // every retained version exceeds T_start
  RemoteUnavailable,  // lock RPC timed out: node-failure suspicion
  ForcedAbort,        // proactively aborted by recovery or resharding
  NodeCrash,          // the executing CN fail-stopped
  TooManyRetries,
};

const char* abort_reason_name(AbortReason r);

enum class WriteIntent : u8 { Update, Insert, Delete };

// Strictly monotonic 64-bit timestamps with an embedded physical-clock
// component (high 44 bits: simulated microseconds). Never INVISIBLE.
class TimestampService {
 public:
  explicit TimestampService(Scheduler& s) : sched_(s) {}

  u64 next() {
    u64 candidate = (sched_.now() / 1000) << kTsSeqBits;
    last_ = candidate > last_ ? candidate : last_ + 1;
    return last_;
  }

 private:
  Scheduler& sched_;
  u64 last_ = 1;  // version 1 is reserved for preloaded records
};

// One staged read or write of a transaction.
struct TxnEntry {
  u16 table_id = 0;
  LotusKey key = 0;
  bool is_write = false;
  WriteIntent intent = WriteIntent::Update;

  bool fetched = false;
  bool cvt_exists = true;
  Cvt cvt;
  u64 cvt_addr = 0;
  u32 cvt_slot = 0;  // bucket slot claimed for a fresh CVT (insert)
  u64 read_version = 0;
  SimTime read_at = 0;
  Bytes record;  // payload as read

  Bytes new_payload;  // staged write image
  bool staged = false;

  // commit bookkeeping
  u32 write_cell = 0;
  u64 new_addr = 0;
  u8 new_cv = 0;
};

// One entry in the acquired-lock ledger. The lock key is the raw 64-bit
// lock identity: the LotusKey, or the index-bucket address for inserts.
struct LockedItem {
  u64 lock_key = 0;
  bool is_write = false;
  bool index_bucket = false;
  u16 owner_cn = 0;  // CN that granted the lock
  u64 mn_lock_addr = 0;  // lock word address (mn-lock baseline only)
};

// Protocol step boundaries; the crash sweep enumerates these.
enum class CrashPoint : u8 {
  None = 0,
  AfterLock,
  AfterReadCvt,
  AfterReadData,
  MidCommitDataNoLog,  // data and cells written INVISIBLE, no log yet
  AfterLog,
  AfterGetTs,
  AfterVisible,
  AfterLogClear,
  AfterUnlock,
};

struct TxnHooks {
  CrashPoint crash_at = CrashPoint::None;
  // Extra dwell time inserted at a step boundary (scripted interleavings).
  CrashPoint pause_at = CrashPoint::None;
  SimTime pause_for = 0;
  bool sequence_commit = false;  // force data-then-log write order
};

struct TxnContext {
  u64 txn_id = 0;
  u16 cn_id = 0;
  u16 coord_id = 0;
  u64 t_start = 0;
  u64 t_commit = 0;
  IsolationLevel isolation = IsolationLevel::SR;
  TxnStatus status = TxnStatus::Running;
  AbortReason abort_reason = AbortReason::None;

  std::map<std::pair<u16, LotusKey>, TxnEntry> entries;  // both sets
  std::vector<LockedItem> locks;

  bool force_abort = false;  // set by recovery / resharding
  int lock_rpc_messages = 0;
  SimTime begin_time = 0;
  SimTime visible_at = 0;  // completion of the visibility step

  TxnHooks hooks;

  bool read_only() const {
    for (const auto& [k, e] : entries)
      if (e.is_write) return false;
    return true;
  }

  TxnEntry* find(u16 table, LotusKey key) {
    auto it = entries.find({table, key});
    return it == entries.end() ? nullptr : &it->second;
  }

  void add_ro(u16 table, LotusKey key) {
    if (status != TxnStatus::Running) throw std::logic_error("add on terminated txn");
    auto [it, fresh] = entries.try_emplace({table, key});
    if (fresh) {
      it->second.table_id = table;
      it->second.key = key;
    }
    // duplicate add_ro after add_rw keeps the RW entry
  }

  void add_rw(u16 table, LotusKey key, WriteIntent intent = WriteIntent::Update) {
    if (status != TxnStatus::Running) throw std::logic_error("add on terminated txn");
    auto [it, fresh] = entries.try_emplace({table, key});
    if (fresh) {
      it->second.table_id = table;
      it->second.key = key;
    }
    if (!it->second.is_write) {
      it->second.is_write = true;  // RO -> RW upgrade
      it->second.intent = intent;
      it->second.fetched = false;  // refetch under the write lock
    }
  }
};

// --- commit log records ------------------------------------------------------
//
// Each coordinator owns one fixed log slot in the memory pool; only its
// current in-flight commit can be incomplete, so one slot suffices. The
// slot is cleared after the visibility step, before unlock.

constexpr u64 kLogSlotBytes = 576;
constexpr u64 kLogMarkerOffset = kLogSlotBytes - 8;
constexpr u64 kLogMarkerMagic = 0xc0117ec7ull;
constexpr u32 kLogMaxWrites = 8;

struct CommitLogEntry {
  u16 table_id = 0;
  LotusKey key = 0;
  u32 cell_index = 0;
  u64 cvt_addr = 0;
  u64 new_addr = 0;
  Bytes cell_image;  // 32B encoded CvtCell (version INVISIBLE)
};

struct CommitLogRecord {
  u64 txn_id = 0;
  std::vector<CommitLogEntry> writes;
};

Bytes encode_commit_log(const CommitLogRecord& rec);
// Returns nullopt when the slot is empty or its completeness marker is
// missing (a torn or never-finished log write).
std::optional<CommitLogRecord> decode_commit_log(std::span<const u8> slot);

}  // namespace lotus
