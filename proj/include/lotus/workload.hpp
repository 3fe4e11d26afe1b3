#pragma once

#include <random>
#include <string>

#include "lotus/cluster.hpp"

namespace lotus {

enum class WorkloadKind : u8 { Kvs, SmallBank };
enum class AccessDist : u8 { Uniform, Zipfian };

struct WorkloadSpec {
  WorkloadKind kind = WorkloadKind::Kvs;
  u64 scale = 100'000;  // keys (kvs) or accounts (smallbank)
  double rw_ratio = 0.5;
  AccessDist dist = AccessDist::Zipfian;
  double zipf_theta = 0.99;
  IsolationLevel isolation = IsolationLevel::SR;
  u64 txn_budget = 10'000;   // total across clients; 0 = duration-driven
  SimTime duration = 0;      // 0 = budget-driven
  int hot_shard = -1;        // >= 0: all RW traffic targets this shard
};

// Gray et al. Zipfian generator over [0, n), optionally scrambled.
class ZipfGen {
 public:
  ZipfGen(u64 n, double theta);
  u64 next(std::mt19937_64& rng);

 private:
  u64 n_;
  double theta_, alpha_, zetan_, eta_, zeta2_;
};

// A loaded benchmark: tables created in the cluster plus a request factory.
struct Workload {
  WorkloadSpec spec;
  std::vector<u16> tables;  // kvs: [kv]; smallbank: [checking, savings]
  u64 initial_total = 0;    // smallbank: sum of all balances at load

  virtual ~Workload() = default;
  virtual TxnRequest make_request(std::mt19937_64& rng) = 0;
  // Key-construction helper exposed for tests and audits.
  virtual LotusKey key_of(u64 id, u16 table_idx) const = 0;
};

std::unique_ptr<Workload> build_workload(Cluster& cluster, const WorkloadSpec& spec);

// smallbank record payloads are an i64 balance followed by padding
inline i64 balance_of(std::span<const u8> payload) {
  return static_cast<i64>(get_u64(payload.data()));
}
inline Bytes balance_payload(i64 v, u32 record_len) {
  Bytes b(record_len, 0);
  put_u64(b.data(), static_cast<u64>(v));
  return b;
}

}  // namespace lotus
