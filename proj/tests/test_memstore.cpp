#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "lotus/memstore.hpp"

using namespace lotus;

namespace {

Cvt make_cvt(u32 n_cells) {
  Cvt cvt;
  cvt.header = {0x123456789abcull << 12 | 0xabc, 3, 40};
  cvt.cells.assign(n_cells, CvtCell{});
  return cvt;
}

Cvt random_cvt(std::mt19937_64& rng, u32 n_cells) {
  Cvt cvt;
  cvt.header.key = rng();
  cvt.header.table_id = static_cast<u16>(rng());
  cvt.header.length = static_cast<u32>(rng() % 1024);
  for (u32 i = 0; i < n_cells; i++) {
    CvtCell c;
    c.head_cv = static_cast<u8>(rng());
    c.valid = rng() % 2 == 0;
    c.address = rng();
    c.version = rng();
    c.tail_cv = static_cast<u8>(rng());
    cvt.cells.push_back(c);
  }
  return cvt;
}

}  // namespace

TEST_CASE("cvt codec: random fuzz round-trips bit-exactly") {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 100'000; i++) {
    u32 n = 1 + rng() % 4;
    Cvt cvt = random_cvt(rng, n);
    Bytes b = encode_cvt(cvt);
    REQUIRE(b.size() == cvt_bytes(n));
    Cvt back = decode_cvt(b, n);
    REQUIRE(back == cvt);
    REQUIRE(encode_cvt(back) == b);
  }
}

TEST_CASE("cvt codec: torn cell flagged, malformed flags rejected") {
  Cvt cvt = make_cvt(2);
  cvt.cells[0] = {2, true, 100, 7, 3};  // head 2, tail 3
  Bytes b = encode_cvt(cvt);
  Cvt back = decode_cvt(b, 2);
  CHECK(back.cells[0].torn());
  CHECK_FALSE(back.cells[1].torn());

  b[kCvtHeaderBytes + 1] = 9;  // valid flag out of domain
  CHECK_THROWS_AS(decode_cvt(b, 2), MalformedBytes);
  CHECK_THROWS_AS(decode_cvt(Bytes(3, 0), 2), MalformedBytes);
}

TEST_CASE("record cv stamping and checking") {
  Bytes payload(200, 0xaa);
  Bytes stored = record_encode(payload, 5);
  CHECK(stored.size() == record_stored_bytes(200));
  CHECK(record_payload(stored) == payload);

  CvtCell cell;
  cell.head_cv = cell.tail_cv = 5;
  CHECK(cv_check(stored, cell));

  SUBCASE("boundary cv incremented mid-read is inconsistent") {
    stored[kCacheline * 2] = 6;  // third cacheline's guard
    CHECK_FALSE(cv_check(stored, cell));
  }
  SUBCASE("torn cell is inconsistent") {
    cell.tail_cv = 6;
    CHECK_FALSE(cv_check(stored, cell));
  }
  SUBCASE("restamp makes it consistent again") {
    cv_stamp(stored, 9);
    cell.head_cv = cell.tail_cv = 9;
    CHECK(cv_check(stored, cell));
  }
}

TEST_CASE("record sizes: one cv byte per cacheline") {
  CHECK(record_stored_bytes(40) == 41);
  CHECK(record_stored_bytes(63) == 64);
  CHECK(record_stored_bytes(64) == 66);
  CHECK(record_stored_bytes(672) == 683);
  CHECK(record_slot_stride(40) == 48);
}

TEST_CASE("scripted writer/reader interleavings: every inconsistent read flagged") {
  // Ground truth: reader snapshots the cell, then the record either before
  // the writer's record-store (consistent) or after it (flagged via CV).
  std::mt19937_64 rng(7);
  Bytes payload(100, 1);
  int flagged = 0, clean = 0;
  for (int trial = 0; trial < 10'000; trial++) {
    u8 cv = static_cast<u8>(1 + rng() % 250);
    Bytes record = record_encode(payload, cv);
    CvtCell cell;
    cell.head_cv = cell.tail_cv = cv;
    cell.valid = true;

    CvtCell seen_cell = cell;  // reader reads the cell first
    bool writer_hits_between = rng() % 2 == 0;
    if (writer_hits_between) {
      Bytes new_payload(100, 9);
      record = record_encode(new_payload, static_cast<u8>(cv + 1));
    }
    bool consistent = cv_check(record, seen_cell);
    bool truth_consistent = !writer_hits_between;
    REQUIRE(consistent == truth_consistent);  // no false-consistent, no false-torn
    (consistent ? clean : flagged)++;
  }
  CHECK(flagged > 0);
  CHECK(clean > 0);
}

TEST_CASE("select_cell_for_write: free cell preferred") {
  Cvt cvt = make_cvt(2);
  cvt.cells[0] = {1, true, 100, 50 << kTsSeqBits, 1};
  CellChoice c = select_cell_for_write(cvt, 60, 500'000);
  CHECK(c.index == 1);
  CHECK(c.use == CellUse::Free);
}

TEST_CASE("select_cell_for_write: all valid, no expiry -> oldest overwritten") {
  Cvt cvt = make_cvt(2);
  cvt.cells[0] = {1, true, 100, 10ull << kTsSeqBits, 1};
  cvt.cells[1] = {1, true, 200, 20ull << kTsSeqBits, 1};
  CellChoice c = select_cell_for_write(cvt, 25, 500'000);
  CHECK(c.index == 0);  // version 10
  CHECK(c.use == CellUse::Overwrite);
}

TEST_CASE("select_cell_for_write: expired cell cleared and reclaimed") {
  Cvt cvt = make_cvt(2);
  cvt.cells[0] = {1, true, 100, 10ull << kTsSeqBits, 1};
  cvt.cells[1] = {1, true, 200, 20ull << kTsSeqBits, 1};
  u64 clock_us = 10 + 600'000;  // version 10 is 600ms old
  CellChoice c = select_cell_for_write(cvt, clock_us, 500'000);
  CHECK(c.index == 0);
  CHECK(c.use == CellUse::Reclaimed);
}

TEST_CASE("select_cell_for_write: the newest version survives even when expired") {
  Cvt cvt = make_cvt(2);
  cvt.cells[0] = {1, true, 100, 10ull << kTsSeqBits, 1};
  cvt.cells[1] = {1, true, 200, 20ull << kTsSeqBits, 1};
  CellChoice c = select_cell_for_write(cvt, 10'000'000, 500'000);
  CHECK(c.index == 0);  // both expired; the newer one (20) is never chosen
}

TEST_CASE("select_cell_for_write: invisible residue reclaimed") {
  Cvt cvt = make_cvt(2);
  cvt.cells[0] = {1, true, 100, 10ull << kTsSeqBits, 1};
  cvt.cells[1] = {3, true, 200, INVISIBLE, 3};
  CellChoice c = select_cell_for_write(cvt, 20, 500'000);
  CHECK(c.index == 1);
  CHECK(c.use == CellUse::Reclaimed);
}

TEST_CASE("choose_read_cell picks largest visible version below t_start") {
  Cvt cvt = make_cvt(3);
  cvt.cells[0] = {1, true, 100, 10, 1};
  cvt.cells[1] = {1, true, 200, 30, 1};
  cvt.cells[2] = {1, true, 300, INVISIBLE, 1};  // mid-commit: skipped

  auto c = choose_read_cell(cvt, 20);
  REQUIRE(c.has_value());
  CHECK(*c == 0);
  c = choose_read_cell(cvt, 40);
  REQUIRE(c.has_value());
  CHECK(*c == 1);
  CHECK_FALSE(choose_read_cell(cvt, 5).has_value());
  CHECK(has_future_version(cvt, 20));
  CHECK_FALSE(has_future_version(cvt, 40));  // INVISIBLE is not a committed future
}

TEST_CASE("record heap: alloc/free balance with gc feedback") {
  RecordHeap heap;
  heap.init(1000, 8, 48);
  u64 a = heap.alloc();
  u64 b = heap.alloc();
  CHECK(a == 1000);
  CHECK(b == 1048);
  CHECK(heap.live() == 2);
  heap.free(a);
  CHECK(heap.live() == 1);
  CHECK(heap.alloc() == a);  // reuse via the free list
  CHECK(heap.live() == 2);
  for (int i = 0; i < 6; i++) heap.alloc();
  CHECK_THROWS(heap.alloc());
}
