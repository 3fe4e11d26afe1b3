#include "lotus/sharding.hpp"

#include <numeric>

namespace lotus {

LotusKey TableKeySpec::make_key(const std::vector<u64>& fields) const {
  if (fields.size() != field_bits.size())
    throw FieldOutOfDomain("field count mismatch for table " + std::to_string(table_id));
  u32 total = std::accumulate(field_bits.begin(), field_bits.end(), 0u);
  if (total > 64 - kShardBits)
    throw FieldOutOfDomain("packing recipe exceeds 52 bits");
  u64 packed = 0;
  for (size_t i = 0; i < fields.size(); i++) {
    u32 bits = field_bits[i];
    if (bits < 64 && fields[i] >> bits)
      throw FieldOutOfDomain("field " + std::to_string(i) + " out of declared domain");
    packed = (packed << bits) | fields[i];
  }
  u64 shard;
  if (critical_field) {
    shard = fields.at(*critical_field) & kShardMask;
  } else {
    shard = mix64(packed ^ shard_seed) & kShardMask;
  }
  return (packed << kShardBits) | shard;
}

ShardMap::ShardMap(u16 num_cns, u16 num_shards) : owners_(num_shards) {
  // Initially the key range for lock management is evenly distributed.
  for (u16 s = 0; s < num_shards; s++) owners_[s] = static_cast<u16>(s % num_cns);
}

std::vector<u16> ShardMap::shards_of(u16 cn_id) const {
  std::vector<u16> out;
  for (u16 s = 0; s < owners_.size(); s++)
    if (owners_[s] == cn_id) out.push_back(s);
  return out;
}

u16 Router::route(bool read_only, LotusKey first_key, const std::vector<bool>& cn_live) {
  if (!read_only) return map_.owner(shard_of(first_key));
  u16 n = static_cast<u16>(cn_live.size());
  for (int tries = 0; tries < 64; tries++) {
    u16 pick = static_cast<u16>(rng_() % n);
    if (cn_live[pick]) return pick;
  }
  return 0;
}

std::optional<u16> detect_overload(const std::vector<std::vector<LoadSample>>& history,
                                   int consecutive, double factor) {
  if (static_cast<int>(history.size()) < consecutive) return std::nullopt;
  size_t num_cns = history.back().size();
  std::vector<int> streak(num_cns, 0);
  for (size_t i = history.size() - consecutive; i < history.size(); i++) {
    const auto& interval = history[i];
    double sum = 0;
    for (const LoadSample& s : interval) sum += static_cast<double>(s.avg_latency_ns);
    double avg = interval.empty() ? 0 : sum / static_cast<double>(interval.size());
    for (size_t c = 0; c < interval.size() && c < num_cns; c++) {
      if (avg > 0 && static_cast<double>(interval[c].avg_latency_ns) > factor * avg)
        streak[c]++;
    }
  }
  for (size_t c = 0; c < num_cns; c++)
    if (streak[c] >= consecutive) return static_cast<u16>(c);
  return std::nullopt;
}

}  // namespace lotus
