#pragma once

#include <string>
#include <vector>

#include "lotus/bytes.hpp"
#include "lotus/sim.hpp"

namespace lotus {

// Append-only run history consumed by the offline checker. Binary file
// format (little-endian):
//   header: "LOTH" | version u32 | reserved u64
//   record: len u32 | payload
//   payload: seq u64 | txn_id u64 | type u8 | outcome u8 | cn u16 | coord u16
//            | t_start u64 | t_commit u64 | finished u64
//            | n_ops u16 | n_ops x {table u16, key u64, kind u8, version u64,
//                                   op_time u64}
// outcome 0 = committed; otherwise the abort reason code.
// op kind: 0 read, 1 write, 2 insert, 3 delete.
// op_time: simulated time the read completed / the write became visible.

constexpr u32 kHistoryVersion = 1;

enum class HistOpKind : u8 { Read = 0, Write = 1, Insert = 2, Delete = 3 };

struct HistOp {
  u16 table_id = 0;
  u64 key = 0;
  HistOpKind kind = HistOpKind::Read;
  u64 version = 0;  // version read, or version written (t_commit)
  u64 op_time = 0;

  bool operator==(const HistOp&) const = default;
  bool is_write() const { return kind != HistOpKind::Read; }
};

struct HistoryRecord {
  u64 seq = 0;
  u64 txn_id = 0;
  u8 type = 0;
  u8 outcome = 0;  // 0 committed, else abort reason
  u16 cn_id = 0;
  u16 coord_id = 0;
  u64 t_start = 0;
  u64 t_commit = 0;
  u64 finished = 0;
  std::vector<HistOp> ops;

  bool operator==(const HistoryRecord&) const = default;
  bool committed() const { return outcome == 0; }
};

struct MalformedHistory : std::runtime_error {
  using std::runtime_error::runtime_error;
};

class HistoryLog {
 public:
  void append(HistoryRecord rec) {
    rec.seq = next_seq_++;
    records_.push_back(std::move(rec));
  }

  const std::vector<HistoryRecord>& records() const { return records_; }
  void clear() { records_.clear(); next_seq_ = 0; }

  Bytes serialize() const;
  void write_file(const std::string& path) const;

 private:
  std::vector<HistoryRecord> records_;
  u64 next_seq_ = 0;
};

std::vector<HistoryRecord> parse_history(std::span<const u8> bytes);
std::vector<HistoryRecord> read_history_file(const std::string& path);
std::string history_to_text(const std::vector<HistoryRecord>& records);

}  // namespace lotus
