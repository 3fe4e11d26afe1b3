#include "lotus/memstore.hpp"

#include <algorithm>

namespace lotus {

Bytes encode_cvt_header(const CvtHeader& h) {
  Bytes b(kCvtHeaderBytes, 0);
  put_u64(b.data(), h.key);
  put_u16(b.data() + 8, h.table_id);
  put_u32(b.data() + 10, h.length);
  return b;
}

CvtHeader decode_cvt_header(std::span<const u8> b) {
  if (b.size() < kCvtHeaderBytes) throw MalformedBytes("short cvt header");
  CvtHeader h;
  h.key = get_u64(b.data());
  h.table_id = get_u16(b.data() + 8);
  h.length = get_u32(b.data() + 10);
  return h;
}

Bytes encode_cvt_cell(const CvtCell& c) {
  Bytes b(kCvtCellBytes, 0);
  b[0] = c.head_cv;
  b[1] = c.valid ? 1 : 0;
  put_u64(b.data() + 8, c.address);
  put_u64(b.data() + kCellVersionOffset, c.version);
  b[kCvtCellBytes - 1] = c.tail_cv;
  return b;
}

CvtCell decode_cvt_cell(std::span<const u8> b) {
  if (b.size() < kCvtCellBytes) throw MalformedBytes("short cvt cell");
  if (b[1] > 1) throw MalformedBytes("cvt cell valid flag out of domain");
  CvtCell c;
  c.head_cv = b[0];
  c.valid = b[1] == 1;
  c.address = get_u64(b.data() + 8);
  c.version = get_u64(b.data() + kCellVersionOffset);
  c.tail_cv = b[kCvtCellBytes - 1];
  return c;
}

Bytes encode_cvt(const Cvt& cvt) {
  Bytes b = encode_cvt_header(cvt.header);
  for (const CvtCell& c : cvt.cells) {
    Bytes cb = encode_cvt_cell(c);
    b.insert(b.end(), cb.begin(), cb.end());
  }
  return b;
}

Cvt decode_cvt(std::span<const u8> b, u32 n_cells) {
  if (b.size() < cvt_bytes(n_cells)) throw MalformedBytes("short cvt");
  Cvt cvt;
  cvt.header = decode_cvt_header(b);
  cvt.cells.reserve(n_cells);
  for (u32 i = 0; i < n_cells; i++)
    cvt.cells.push_back(decode_cvt_cell(b.subspan(kCvtHeaderBytes + i * kCvtCellBytes)));
  return cvt;
}

Bytes record_encode(std::span<const u8> payload, u8 cv) {
  Bytes out;
  out.reserve(record_stored_bytes(payload.size()));
  size_t pos = 0;
  do {
    out.push_back(cv);
    size_t chunk = std::min<size_t>(kCacheline - 1, payload.size() - pos);
    out.insert(out.end(), payload.begin() + pos, payload.begin() + pos + chunk);
    pos += chunk;
  } while (pos < payload.size());
  return out;
}

Bytes record_payload(std::span<const u8> stored) {
  Bytes out;
  for (size_t pos = 0; pos < stored.size(); pos += kCacheline) {
    size_t chunk = std::min<size_t>(kCacheline, stored.size() - pos);
    if (chunk <= 1) break;
    out.insert(out.end(), stored.begin() + pos + 1, stored.begin() + pos + chunk);
  }
  return out;
}

bool cv_check(std::span<const u8> stored, const CvtCell& cell) {
  if (cell.torn()) return false;
  for (size_t pos = 0; pos < stored.size(); pos += kCacheline)
    if (stored[pos] != cell.head_cv) return false;
  return true;
}

void cv_stamp(Bytes& stored, u8 cv) {
  for (size_t pos = 0; pos < stored.size(); pos += kCacheline) stored[pos] = cv;
}

CellChoice select_cell_for_write(const Cvt& cvt, u64 local_clock_us, u64 gc_threshold_us) {
  for (u32 i = 0; i < cvt.cells.size(); i++)
    if (!cvt.cells[i].valid) return CellChoice{i, CellUse::Free};

  // INVISIBLE residue can only belong to a dead transaction: the caller
  // holds the write lock, so no live commit is in flight on this key.
  for (u32 i = 0; i < cvt.cells.size(); i++)
    if (cvt.cells[i].version == INVISIBLE) return CellChoice{i, CellUse::Reclaimed};

  std::optional<u32> newest;
  for (u32 i = 0; i < cvt.cells.size(); i++)
    if (!newest || cvt.cells[i].version > cvt.cells[*newest].version) newest = i;

  std::optional<u32> oldest;  // excluding the newest, which stays readable
  for (u32 i = 0; i < cvt.cells.size(); i++) {
    if (i == *newest) continue;
    if (!oldest || cvt.cells[i].version < cvt.cells[*oldest].version) oldest = i;
  }

  if (oldest) {
    u64 phys = ts_physical_us(cvt.cells[*oldest].version);
    if (phys + gc_threshold_us < local_clock_us)
      return CellChoice{*oldest, CellUse::Reclaimed};
    return CellChoice{*oldest, CellUse::Overwrite};
  }
  // Single-cell table: overwrite the only version.
  return CellChoice{*newest, CellUse::Overwrite};
}

std::optional<u32> choose_read_cell(const Cvt& cvt, u64 t_start) {
  std::optional<u32> best;
  for (u32 i = 0; i < cvt.cells.size(); i++) {
    const CvtCell& c = cvt.cells[i];
    if (!c.readable_version() || c.version >= t_start) continue;
    if (!best || c.version > cvt.cells[*best].version) best = i;
  }
  return best;
}

bool has_future_version(const Cvt& cvt, u64 t_start) {
  for (const CvtCell& c : cvt.cells)
    if (c.readable_version() && c.version > t_start) return true;
  return false;
}

}  // namespace lotus
