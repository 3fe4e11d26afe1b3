#include "lotus/checker.hpp"

#include <algorithm>
#include <map>
#include <set>
#include <sstream>

namespace lotus {

namespace {

using Key = std::pair<u16, u64>;
constexpr u64 kPreloadVersion = 1;

struct WriteEvent {
  u64 version = 0;
  u64 txn = 0;
  u64 visible_at = 0;
  u64 t_start = 0;
};

std::string key_str(const Key& k) {
  return "t" + std::to_string(k.first) + ":" + std::to_string(k.second);
}

struct Graph {
  std::map<u64, std::set<u64>> out;
  void edge(u64 a, u64 b) {
    if (a != b) out[a].insert(b);
  }

  // Returns one node on a cycle, or 0 if acyclic.
  u64 find_cycle() const {
    std::map<u64, int> state;  // 0 unseen, 1 on stack, 2 done
    for (const auto& [n, _] : out) {
      if (state[n]) continue;
      std::vector<std::pair<u64, std::set<u64>::const_iterator>> stack;
      state[n] = 1;
      stack.push_back({n, out.at(n).begin()});
      while (!stack.empty()) {
        auto& [cur, it] = stack.back();
        auto edges = out.find(cur);
        if (edges == out.end() || it == edges->second.end()) {
          state[cur] = 2;
          stack.pop_back();
          continue;
        }
        u64 next = *it++;
        if (state[next] == 1) return next;
        if (state[next] == 0) {
          state[next] = 1;
          auto ne = out.find(next);
          stack.push_back({next, ne == out.end() ? std::set<u64>::const_iterator{}
                                                 : ne->second.begin()});
        }
      }
    }
    return 0;
  }
};

}  // namespace

CheckResult check_history(const std::vector<HistoryRecord>& records, IsolationLevel iso) {
  CheckResult res;

  std::map<u64, const HistoryRecord*> committed;
  for (const HistoryRecord& r : records) {
    if (!r.committed()) continue;
    if (committed.count(r.txn_id)) {
      res.violations.push_back("txn committed twice: " + std::to_string(r.txn_id));
      continue;
    }
    committed[r.txn_id] = &r;
  }

  // Per-key committed writes ordered by version.
  std::map<Key, std::vector<WriteEvent>> writes;
  for (const auto& [id, r] : committed) {
    for (const HistOp& op : r->ops) {
      if (!op.is_write()) continue;
      writes[{op.table_id, op.key}].push_back({op.version, id, op.op_time, r->t_start});
    }
  }
  for (auto& [k, v] : writes) {
    std::sort(v.begin(), v.end(),
              [](const WriteEvent& a, const WriteEvent& b) { return a.version < b.version; });
    for (size_t i = 1; i < v.size(); i++)
      if (v[i].version == v[i - 1].version)
        res.violations.push_back("duplicate version " + std::to_string(v[i].version) +
                                 " on " + key_str(k));
  }

  auto writer_of = [&](const Key& k, u64 version) -> const WriteEvent* {
    auto it = writes.find(k);
    if (it == writes.end()) return nullptr;
    for (const WriteEvent& w : it->second)
      if (w.version == version) return &w;
    return nullptr;
  };

  if (iso == IsolationLevel::SR) {
    Graph g;
    for (auto& [k, v] : writes)
      for (size_t i = 1; i < v.size(); i++) g.edge(v[i - 1].txn, v[i].txn);  // WW

    for (const auto& [id, r] : committed) {
      for (const HistOp& op : r->ops) {
        if (op.is_write()) continue;
        Key k{op.table_id, op.key};
        const WriteEvent* w = writer_of(k, op.version);
        if (!w && op.version != kPreloadVersion) {
          res.violations.push_back("txn " + std::to_string(id) + " read version " +
                                   std::to_string(op.version) + " of " + key_str(k) +
                                   " that no committed txn wrote (dirty read)");
          continue;
        }
        if (w) g.edge(w->txn, id);  // WR
        // RW: reader -> writer of the next version.
        auto it = writes.find(k);
        if (it == writes.end()) continue;
        const WriteEvent* next = nullptr;
        for (const WriteEvent& cand : it->second) {
          if (cand.version > op.version) {
            next = &cand;
            break;
          }
        }
        if (next) g.edge(id, next->txn);
      }
    }

    if (u64 node = g.find_cycle())
      res.violations.push_back("serialization graph cycle through txn " +
                               std::to_string(node));
    return res;
  }

  // SI: lost updates.
  for (auto& [k, v] : writes) {
    for (size_t i = 0; i < v.size(); i++) {
      for (size_t j = i + 1; j < v.size(); j++) {
        const HistoryRecord* a = committed[v[i].txn];
        const HistoryRecord* b = committed[v[j].txn];
        if (a->t_start < b->t_commit && b->t_start < a->t_commit) {
          std::ostringstream os;
          os << "lost update on " << key_str(k) << ": txns " << v[i].txn << " and "
             << v[j].txn << " have overlapping [start,commit] windows";
          res.violations.push_back(os.str());
        }
      }
    }
  }

  // SI: snapshot reads.
  for (const auto& [id, r] : committed) {
    for (const HistOp& op : r->ops) {
      if (op.is_write()) continue;
      Key k{op.table_id, op.key};
      u64 expected = kPreloadVersion;  // preloaded data is visible from t=0
      auto it = writes.find(k);
      if (it != writes.end()) {
        for (const WriteEvent& w : it->second) {
          if (w.version < r->t_start && w.visible_at <= op.op_time &&
              w.version > expected)
            expected = w.version;
        }
      }
      if (op.version != expected) {
        std::ostringstream os;
        os << "non-snapshot read by txn " << id << " on " << key_str(k) << ": read v"
           << op.version << ", snapshot at T_start " << r->t_start << " is v" << expected;
        res.violations.push_back(os.str());
      }
    }
  }
  return res;
}

CheckResult check_balance(u64 expected_total, u64 observed_total) {
  CheckResult res;
  if (expected_total != observed_total) {
    std::ostringstream os;
    os << "balance conservation violated: expected " << expected_total << ", observed "
       << observed_total;
    res.violations.push_back(os.str());
  }
  return res;
}

}  // namespace lotus
