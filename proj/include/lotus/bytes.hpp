#pragma once

#include <cstdint>
#include <cstring>
#include <span>
#include <vector>

namespace lotus {

using u8 = std::uint8_t;
using u16 = std::uint16_t;
using u32 = std::uint32_t;
using u64 = std::uint64_t;
using i64 = std::int64_t;

using Bytes = std::vector<u8>;

// Little-endian fixed-width codec helpers. All on-wire and in-memory-pool
// layouts in this project go through these.
inline void put_u16(u8* p, u16 v) { std::memcpy(p, &v, 2); }
inline void put_u32(u8* p, u32 v) { std::memcpy(p, &v, 4); }
inline void put_u64(u8* p, u64 v) { std::memcpy(p, &v, 8); }
inline u16 get_u16(const u8* p) { u16 v; std::memcpy(&v, p, 2); return v; }
inline u32 get_u32(const u8* p) { u32 v; std::memcpy(&v, p, 4); return v; }
inline u64 get_u64(const u8* p) { u64 v; std::memcpy(&v, p, 8); return v; }

class ByteWriter {
 public:
  explicit ByteWriter(Bytes& out) : out_(out) {}
  void u8v(u8 v) { out_.push_back(v); }
  void u16v(u16 v) { grow(2); put_u16(tail(2), v); }
  void u32v(u32 v) { grow(4); put_u32(tail(4), v); }
  void u64v(u64 v) { grow(8); put_u64(tail(8), v); }
  void raw(std::span<const u8> s) { out_.insert(out_.end(), s.begin(), s.end()); }

 private:
  void grow(size_t n) { out_.resize(out_.size() + n); }
  u8* tail(size_t n) { return out_.data() + out_.size() - n; }
  Bytes& out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const u8> in) : in_(in) {}
  bool ok() const { return ok_; }
  size_t remaining() const { return in_.size() - pos_; }
  u8 u8v() { return ok_ && need(1) ? in_[pos_++] : 0; }
  u16 u16v() { return need(2) ? take16() : 0; }
  u32 u32v() { return need(4) ? take32() : 0; }
  u64 u64v() { return need(8) ? take64() : 0; }
  Bytes raw(size_t n) {
    if (!need(n)) return {};
    Bytes b(in_.begin() + pos_, in_.begin() + pos_ + n);
    pos_ += n;
    return b;
  }

 private:
  bool need(size_t n) {
    if (pos_ + n > in_.size()) ok_ = false;
    return ok_;
  }
  u16 take16() { u16 v = get_u16(&in_[pos_]); pos_ += 2; return v; }
  u32 take32() { u32 v = get_u32(&in_[pos_]); pos_ += 4; return v; }
  u64 take64() { u64 v = get_u64(&in_[pos_]); pos_ += 8; return v; }
  std::span<const u8> in_;
  size_t pos_ = 0;
  bool ok_ = true;
};

// splitmix64: cheap deterministic 64-bit mixer used for fingerprints,
// sub-cache partitioning and seed derivation.
inline u64 mix64(u64 x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

}  // namespace lotus
