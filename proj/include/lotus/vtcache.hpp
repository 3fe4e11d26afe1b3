#pragma once

#include <list>
#include <optional>
#include <unordered_map>
#include <vector>

#include "lotus/memstore.hpp"

namespace lotus {

// A cached CVT together with its pool address, so a hit also skips the
// address lookup.
struct CachedVt {
  Cvt cvt;
  u64 addr = 0;
};

// Per-CN version table cache: hash-partitioned into independent LRU
// sub-caches. Consistency comes for free from the write-lock path: local
// commits update entries synchronously, remote write-lock grants invalidate
// them first, so a hit is always byte-fresh.
class VtCache {
 public:
  VtCache(u32 sub_caches, u64 total_capacity)
      : subs_(sub_caches), cap_per_sub_(total_capacity / (sub_caches ? sub_caches : 1)) {
    if (cap_per_sub_ == 0) cap_per_sub_ = 1;
  }

  u32 partition(LotusKey key) const {
    return static_cast<u32>(mix64(key) % subs_.size());
  }

  std::optional<CachedVt> lookup(LotusKey key) {
    Sub& s = subs_[partition(key)];
    auto it = s.index.find(key);
    if (it == s.index.end()) {
      misses_++;
      return std::nullopt;
    }
    s.lru.splice(s.lru.begin(), s.lru, it->second);
    hits_++;
    return it->second->second;
  }

  void update_local(LotusKey key, CachedVt cvt) {
    Sub& s = subs_[partition(key)];
    auto it = s.index.find(key);
    if (it != s.index.end()) {
      it->second->second = std::move(cvt);
      s.lru.splice(s.lru.begin(), s.lru, it->second);
      return;
    }
    s.lru.emplace_front(key, std::move(cvt));
    s.index[key] = s.lru.begin();
    if (s.lru.size() > cap_per_sub_) {
      s.index.erase(s.lru.back().first);
      s.lru.pop_back();
    }
  }

  void invalidate(LotusKey key) {
    Sub& s = subs_[partition(key)];
    auto it = s.index.find(key);
    if (it == s.index.end()) return;
    s.lru.erase(it->second);
    s.index.erase(it);
  }

  void clear_shard(u16 shard) {
    for (Sub& s : subs_) {
      for (auto it = s.lru.begin(); it != s.lru.end();) {
        if (shard_of(it->first) == shard) {
          s.index.erase(it->first);
          it = s.lru.erase(it);
        } else {
          ++it;
        }
      }
    }
  }

  void clear() {
    for (Sub& s : subs_) {
      s.lru.clear();
      s.index.clear();
    }
  }

  u64 size() const {
    u64 n = 0;
    for (const Sub& s : subs_) n += s.lru.size();
    return n;
  }
  u64 hits() const { return hits_; }
  u64 misses() const { return misses_; }
  u32 num_subs() const { return static_cast<u32>(subs_.size()); }

 private:
  struct Sub {
    std::list<std::pair<LotusKey, CachedVt>> lru;  // front = most recent
    std::unordered_map<LotusKey, std::list<std::pair<LotusKey, CachedVt>>::iterator> index;
  };
  std::vector<Sub> subs_;
  u64 cap_per_sub_;
  u64 hits_ = 0;
  u64 misses_ = 0;
};

// CVT address cache: unbounded, no consistency maintenance. Staleness is
// detected by validating the fetched CVT header against the requested key.
class AddrCache {
 public:
  std::optional<u64> lookup(LotusKey key) const {
    auto it = map_.find(key);
    if (it == map_.end()) return std::nullopt;
    return it->second;
  }

  void insert(LotusKey key, u64 addr) { map_[key] = addr; }
  void erase(LotusKey key) { map_.erase(key); }
  void clear() { map_.clear(); }
  u64 size() const { return map_.size(); }

  static bool validate(const CvtHeader& fetched, LotusKey key) { return fetched.key == key; }

 private:
  std::unordered_map<LotusKey, u64> map_;
};

}  // namespace lotus
