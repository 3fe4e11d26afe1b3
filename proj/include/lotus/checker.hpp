#pragma once

#include <string>
#include <vector>

#include "lotus/history.hpp"
#include "lotus/txn.hpp"

namespace lotus {

struct CheckResult {
  std::vector<std::string> violations;
  bool ok() const { return violations.empty(); }
};

// Offline isolation checker over a run history.
//
// SR: builds the direct serialization graph over committed transactions
// (WW from per-key version order, WR from read-version matches, RW
// anti-dependencies inferred) and requires acyclicity. Reads of versions
// no committed transaction wrote (dirty reads) are violations.
//
// SI: requires snapshot reads (every read returns the largest version that
// was visible before the read and below T_start) and no lost updates
// (no two committed writers of one key with overlapping [T_start,T_commit]
// windows).
CheckResult check_history(const std::vector<HistoryRecord>& records, IsolationLevel iso);

// Exact conservation audit for zero-sum transfer workloads.
CheckResult check_balance(u64 expected_total, u64 observed_total);

}  // namespace lotus
