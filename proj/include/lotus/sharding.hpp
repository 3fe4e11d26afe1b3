#pragma once

#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "lotus/bytes.hpp"

namespace lotus {

// 64-bit record identifier: low 12 bits are the shard number, high 52 bits
// uniquely identify the record within its table.
using LotusKey = u64;

constexpr u32 kShardBits = 12;
constexpr u32 kNumShards = 1u << kShardBits;  // 4096
constexpr u64 kShardMask = kNumShards - 1;

inline u16 shard_of(LotusKey k) { return static_cast<u16>(k & kShardMask); }
inline u64 record_id_of(LotusKey k) { return k >> kShardBits; }

struct FieldOutOfDomain : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Per-table key construction recipe. The critical field (the primary-key
// field with the highest access locality) supplies the shard number; the
// ordered bit-width packing of all primary-key fields fills the high 52
// bits and must be injective over the benchmark key domain.
struct TableKeySpec {
  u16 table_id = 0;
  std::vector<u32> field_bits;          // bit width per primary-key field, sums to <= 52
  std::optional<u32> critical_field;    // index into fields; none = random sharding
  u64 shard_seed = 0;                   // used when critical_field is none

  LotusKey make_key(const std::vector<u64>& fields) const;
};

// shard number -> owning CN, with a version bumped on every transfer.
class ShardMap {
 public:
  ShardMap() = default;
  ShardMap(u16 num_cns, u16 num_shards);

  u16 owner(u16 shard) const { return owners_.at(shard); }
  u64 version() const { return version_; }
  u16 num_shards() const { return static_cast<u16>(owners_.size()); }

  void set_owner(u16 shard, u16 new_cn) {
    owners_.at(shard) = new_cn;
    version_++;
  }

  std::vector<u16> shards_of(u16 cn_id) const;

 private:
  std::vector<u16> owners_;
  u64 version_ = 0;
};

// The external routing layer: a shared versioned map with lazy refresh by
// CN-side cached copies. Assumed scalable and fault-free.
class Router {
 public:
  Router(u16 num_cns, u16 num_shards, u64 seed)
      : map_(num_cns, num_shards), rng_(mix64(seed ^ 0x7073ull)) {}

  const ShardMap& snapshot() const { return map_; }
  ShardMap& map() { return map_; }

  // Hybrid routing: read-only transactions go to a uniformly random CN;
  // read-write transactions go to the owner of the first record's shard.
  u16 route(bool read_only, LotusKey first_key, const std::vector<bool>& cn_live);

 private:
  ShardMap map_;
  std::mt19937_64 rng_;
};

struct LoadSample {
  u64 interval_seq = 0;
  u64 avg_latency_ns = 0;  // average end-to-end transaction latency
  u64 txns = 0;
};

// Flags a CN iff its latency exceeded 1.5x the cluster average in each of
// the last `consecutive` intervals. `history[i]` is one interval, oldest
// first; each inner vector holds one sample per CN.
std::optional<u16> detect_overload(const std::vector<std::vector<LoadSample>>& history,
                                   int consecutive = 3, double factor = 1.5);

// Fixed binary record layouts for the metrics region and transfer message
// (documented in the README).
constexpr u64 kLoadSampleBytes = 24;  // {interval_seq u64, avg_latency_ns u64, txns u64}

inline void encode_load_sample(u8* p, const LoadSample& s) {
  put_u64(p, s.interval_seq);
  put_u64(p + 8, s.avg_latency_ns);
  put_u64(p + 16, s.txns);
}

inline LoadSample decode_load_sample(const u8* p) {
  return LoadSample{get_u64(p), get_u64(p + 8), get_u64(p + 16)};
}

}  // namespace lotus
