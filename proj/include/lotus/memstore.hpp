#pragma once

#include <optional>
#include <stdexcept>
#include <vector>

#include "lotus/bytes.hpp"
#include "lotus/sharding.hpp"

namespace lotus {

// Version placeholder marking a mid-commit cell; never issued by the
// timestamp service. Readers skip such cells.
constexpr u64 INVISIBLE = ~0ull;

// Timestamps embed a physical-clock component: high 44 bits are simulated
// microseconds, low 20 bits a sequence number.
constexpr u32 kTsSeqBits = 20;
inline u64 ts_physical_us(u64 ts) { return ts >> kTsSeqBits; }

constexpr u32 kCacheline = 64;

struct MalformedBytes : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct UnknownTable : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// --- Consecutive version table (CVT) on-pool layout -------------------------
//
//   header (24B): key u64 | table_id u16 | length u32 | pad u16 | lock u64
//   cell   (32B): head_cv u8 | valid u8 | pad[6] | address u64 | version u64
//                 | pad[7] | tail_cv u8
//
// The header lock word is used only by the lock-at-MN baseline mode. The
// cell's version field sits 8-byte aligned so commit's visibility write is
// a single atomic word store.

constexpr u64 kCvtHeaderBytes = 24;
constexpr u64 kCvtCellBytes = 32;
constexpr u64 kCvtHeaderLockOffset = 16;
constexpr u64 kCellVersionOffset = 16;

inline u64 cvt_bytes(u32 n_cells) { return kCvtHeaderBytes + n_cells * kCvtCellBytes; }

struct CvtHeader {
  LotusKey key = 0;
  u16 table_id = 0;
  u32 length = 0;

  bool operator==(const CvtHeader&) const = default;
};

struct CvtCell {
  u8 head_cv = 0;
  bool valid = false;
  u64 address = 0;   // 0 with valid=true is a delete tombstone
  u64 version = 0;
  u8 tail_cv = 0;

  bool operator==(const CvtCell&) const = default;
  bool torn() const { return head_cv != tail_cv; }
  bool tombstone() const { return valid && address == 0; }
  bool readable_version() const { return valid && version != INVISIBLE; }
};

struct Cvt {
  CvtHeader header;
  std::vector<CvtCell> cells;

  bool operator==(const Cvt&) const = default;
};

// Bit-exact codecs. decode throws MalformedBytes on impossible flag
// combinations; torn cells (head_cv != tail_cv) decode fine and are flagged
// via CvtCell::torn().
Bytes encode_cvt_header(const CvtHeader& h);
CvtHeader decode_cvt_header(std::span<const u8> b);
Bytes encode_cvt_cell(const CvtCell& c);
CvtCell decode_cvt_cell(std::span<const u8> b);
Bytes encode_cvt(const Cvt& cvt);
Cvt decode_cvt(std::span<const u8> b, u32 n_cells);

// --- Data records with cacheline versions -----------------------------------
//
// Stored records carry a 1B CV at the head of every 64B cacheline; each
// cacheline holds 63 payload bytes after its CV.

inline u64 record_stored_bytes(u64 payload_len) {
  u64 lines = (payload_len + kCacheline - 2) / (kCacheline - 1);
  if (lines == 0) lines = 1;
  return payload_len + lines;
}

inline u64 record_slot_stride(u64 payload_len) {
  return (record_stored_bytes(payload_len) + 7) & ~7ull;
}

// Builds the stored form of `payload` with every CV byte set to cv.
Bytes record_encode(std::span<const u8> payload, u8 cv);
// Extracts the payload regardless of CV consistency.
Bytes record_payload(std::span<const u8> stored);
// True iff every embedded CV equals the cell's CVs and the cell is untorn.
bool cv_check(std::span<const u8> stored, const CvtCell& cell);
// Restamps all CV bytes in place.
void cv_stamp(Bytes& stored, u8 cv);

// --- Table layout in the memory pool ----------------------------------------

struct TableSchema {
  u16 table_id = 0;
  u32 record_len = 0;
  u32 n_cells = 2;       // versions retained per record
  u64 capacity = 0;      // max records; sizes the bucket array and heap
  TableKeySpec key_spec;
};

constexpr u32 kCvtsPerBucket = 4;

// Address layout of one table, identical on every replica MN so a single
// address is valid pool-wide. Bucket index is (key >> 12) mod n_buckets:
// deterministic, and collisions are constructible in tests.
struct TableLayout {
  TableSchema schema;
  u64 bucket_base = 0;
  u64 n_buckets = 0;
  u64 heap_base = 0;
  u64 heap_slots = 0;

  u64 cvt_stride() const { return cvt_bytes(schema.n_cells); }
  u64 bucket_stride() const { return cvt_stride() * kCvtsPerBucket; }
  u64 bucket_index(LotusKey key) const { return record_id_of(key) % n_buckets; }
  u64 bucket_addr(LotusKey key) const { return bucket_base + bucket_index(key) * bucket_stride(); }
  u64 cvt_addr(u64 bucket_addr_, u32 slot) const { return bucket_addr_ + slot * cvt_stride(); }
  u64 cell_addr(u64 cvt_addr_, u32 cell) const {
    return cvt_addr_ + kCvtHeaderBytes + cell * kCvtCellBytes;
  }
  u64 cell_version_addr(u64 cvt_addr_, u32 cell) const {
    return cell_addr(cvt_addr_, cell) + kCellVersionOffset;
  }
  u64 record_stride() const { return record_slot_stride(schema.record_len); }
};

// Record-slot allocator for one table: bump pointer plus a free list fed by
// garbage collection. Slot addresses are mirrored across replicas, so one
// allocation covers all three writes.
class RecordHeap {
 public:
  void init(u64 base, u64 slots, u64 stride) {
    base_ = base;
    slots_ = slots;
    stride_ = stride;
    next_ = 0;
    free_.clear();
    live_ = 0;
  }

  u64 alloc() {
    live_++;
    if (!free_.empty()) {
      u64 a = free_.back();
      free_.pop_back();
      return a;
    }
    if (next_ >= slots_) throw std::runtime_error("record heap exhausted");
    return base_ + (next_++) * stride_;
  }

  void free(u64 addr) {
    live_--;
    free_.push_back(addr);
  }

  u64 live() const { return live_; }
  u64 allocated_slots() const { return next_; }
  u64 free_list_size() const { return free_.size(); }

 private:
  u64 base_ = 0, slots_ = 0, stride_ = 0, next_ = 0;
  u64 live_ = 0;
  std::vector<u64> free_;
};

// --- Write-cell selection (garbage collection policy) -----------------------

enum class CellUse : u8 {
  Free,       // cell was invalid; allocate a fresh record slot
  Reclaimed,  // expired or dead-INVISIBLE cell cleared; its record slot freed
  Overwrite,  // oldest live version overwritten; reuse its record slot
};

struct CellChoice {
  u32 index = 0;
  CellUse use = CellUse::Free;
};

// Picks the cell a writer (holding the write lock) will use for the new
// version. Preference: an invalid cell; else a reclaimable cell (version
// older than local_clock_us - threshold, or INVISIBLE residue of a dead
// transaction); else the oldest live cell. The newest readable version is
// never cleared or overwritten so aborts can always fall back to it.
CellChoice select_cell_for_write(const Cvt& cvt, u64 local_clock_us, u64 gc_threshold_us);

// Index of the valid, visible cell with the largest version < t_start.
std::optional<u32> choose_read_cell(const Cvt& cvt, u64 t_start);
// True iff some committed version exceeds t_start (INVISIBLE ignored).
bool has_future_version(const Cvt& cvt, u64 t_start);

}  // namespace lotus
