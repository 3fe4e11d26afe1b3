#include "lotus/history.hpp"

#include <fstream>
#include <sstream>

namespace lotus {

static void encode_record(ByteWriter& w, const HistoryRecord& r) {
  Bytes payload;
  ByteWriter p(payload);
  p.u64v(r.seq);
  p.u64v(r.txn_id);
  p.u8v(r.type);
  p.u8v(r.outcome);
  p.u16v(r.cn_id);
  p.u16v(r.coord_id);
  p.u64v(r.t_start);
  p.u64v(r.t_commit);
  p.u64v(r.finished);
  p.u16v(static_cast<u16>(r.ops.size()));
  for (const HistOp& op : r.ops) {
    p.u16v(op.table_id);
    p.u64v(op.key);
    p.u8v(static_cast<u8>(op.kind));
    p.u64v(op.version);
    p.u64v(op.op_time);
  }
  w.u32v(static_cast<u32>(payload.size()));
  w.raw(payload);
}

Bytes HistoryLog::serialize() const {
  Bytes out;
  ByteWriter w(out);
  w.raw(std::span<const u8>(reinterpret_cast<const u8*>("LOTH"), 4));
  w.u32v(kHistoryVersion);
  w.u64v(0);
  for (const HistoryRecord& r : records_) encode_record(w, r);
  return out;
}

void HistoryLog::write_file(const std::string& path) const {
  Bytes b = serialize();
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open history file for writing: " + path);
  f.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

std::vector<HistoryRecord> parse_history(std::span<const u8> bytes) {
  ByteReader r(bytes);
  Bytes magic = r.raw(4);
  if (!r.ok() || magic != Bytes{'L', 'O', 'T', 'H'})
    throw MalformedHistory("bad magic");
  if (r.u32v() != kHistoryVersion) throw MalformedHistory("unsupported version");
  r.u64v();
  std::vector<HistoryRecord> out;
  while (r.ok() && r.remaining() > 0) {
    u32 len = r.u32v();
    Bytes payload = r.raw(len);
    if (!r.ok()) throw MalformedHistory("truncated record");
    ByteReader p(payload);
    HistoryRecord rec;
    rec.seq = p.u64v();
    rec.txn_id = p.u64v();
    rec.type = p.u8v();
    rec.outcome = p.u8v();
    rec.cn_id = p.u16v();
    rec.coord_id = p.u16v();
    rec.t_start = p.u64v();
    rec.t_commit = p.u64v();
    rec.finished = p.u64v();
    u16 n = p.u16v();
    for (u16 i = 0; i < n; i++) {
      HistOp op;
      op.table_id = p.u16v();
      op.key = p.u64v();
      op.kind = static_cast<HistOpKind>(p.u8v());
      op.version = p.u64v();
      op.op_time = p.u64v();
      rec.ops.push_back(op);
    }
    if (!p.ok()) throw MalformedHistory("truncated payload");
    out.push_back(std::move(rec));
  }
  return out;
}

std::vector<HistoryRecord> read_history_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw MalformedHistory("cannot open history file: " + path);
  Bytes b((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_history(b);
}

std::string history_to_text(const std::vector<HistoryRecord>& records) {
  std::ostringstream os;
  for (const HistoryRecord& r : records) {
    os << "#" << r.seq << " txn=" << std::hex << r.txn_id << std::dec
       << " type=" << int(r.type) << " cn=" << r.cn_id << " coord=" << r.coord_id
       << " start=" << r.t_start << " commit=" << r.t_commit
       << " outcome=" << (r.committed() ? "committed" : "aborted(" + std::to_string(r.outcome) + ")")
       << " finished=" << r.finished << "\n";
    for (const HistOp& op : r.ops) {
      static const char* kinds[] = {"read", "write", "insert", "delete"};
      os << "    " << kinds[static_cast<int>(op.kind)] << " t" << op.table_id << ":"
         << op.key << " v=" << op.version << " @" << op.op_time << "\n";
    }
  }
  return os.str();
}

}  // namespace lotus
