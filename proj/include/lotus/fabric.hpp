#pragma once

#include <functional>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "lotus/bytes.hpp"
#include "lotus/sim.hpp"

namespace lotus {

enum class NodeKind : u8 { ComputeNode, MemoryNode };

struct NodeId {
  NodeKind kind = NodeKind::ComputeNode;
  u16 index = 0;

  bool operator==(const NodeId&) const = default;
  bool operator<(const NodeId& o) const {
    return kind != o.kind ? kind < o.kind : index < o.index;
  }
  bool is_mn() const { return kind == NodeKind::MemoryNode; }
  bool is_cn() const { return kind == NodeKind::ComputeNode; }
};

inline NodeId cn(u16 i) { return {NodeKind::ComputeNode, i}; }
inline NodeId mn(u16 i) { return {NodeKind::MemoryNode, i}; }

// Simulated-cost model for the interconnect. Units: one 8B WRITE costs
// write_cost units; a NIC serves per_nic_capacity units per simulated
// millisecond. The 14:1 atomic-to-write ratio reflects measured RNIC IOPS
// asymmetry between CAS and small WRITE. Payloads add surcharge_bytes-sized
// increments to model bandwidth-bound transfers.
struct NicCostModel {
  u64 write_cost = 1;        // READ and WRITE, 8B class
  u64 atomic_cost = 14;      // CAS
  u64 rpc_cost = 2;          // per two-sided message, per NIC
  u64 per_nic_capacity = 1000;  // cost units per simulated ms
  u64 surcharge_bytes = 256;    // +write_cost per this many payload bytes

  u64 onesided_cost(u64 len) const { return write_cost + (len / surcharge_bytes) * write_cost; }
  u64 message_cost(u64 len) const { return rpc_cost + (len / surcharge_bytes) * write_cost; }
  SimTime service_ns(u64 cost) const { return cost * 1'000'000ull / per_nic_capacity; }
};

struct NicAccount {
  u64 reads = 0;
  u64 writes = 0;
  u64 atomics = 0;
  u64 rpcs = 0;  // messages transmitted from this NIC
  SimTime busy_until = 0;
};

struct OutOfRegion : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct Misaligned : std::runtime_error {
  using std::runtime_error::runtime_error;
};
// Thrown at an await point when the issuing node has fail-stopped.
struct NodeFailed : std::runtime_error {
  NodeFailed() : std::runtime_error("node failed") {}
};

struct RpcResult {
  bool ok = false;  // false means timeout after the retry budget
  Bytes response;
};

struct RpcMeta {
  NodeId from;
  u16 channel = 0;  // coordinator pairing: i-th coordinator talks to i-th peer
};

using RpcHandler = std::function<Bytes(const Bytes&, const RpcMeta&)>;

// The simulated one-sided/two-sided fabric. Memory nodes expose registered
// regions accessed by READ/WRITE/CAS; compute nodes expose RPC handlers.
// All ops advance the simulated clock through per-NIC cost accounting, so a
// saturated NIC queues subsequent ops (IOPS-bound behavior).
class Fabric {
 public:
  Fabric(Scheduler& sched, u16 num_cns, u16 num_mns, NicCostModel model, u64 seed);

  Scheduler& sched() { return sched_; }
  SimTime now() const { return sched_.now(); }
  const NicCostModel& cost_model() const { return model_; }

  u16 num_cns() const { return static_cast<u16>(cn_nics_.size()); }
  u16 num_mns() const { return static_cast<u16>(mns_.size()); }

  // --- region management (init phase) ---
  u64 register_region(NodeId owner, u64 len, const std::string& name);

  // --- one-sided verbs ---
  // Precondition violations (OutOfRegion, Misaligned) throw at issue: they
  // signal protocol bugs, not simulated outcomes.
  Task<Bytes> rdma_read(NodeId issuer, NodeId target, u64 addr, u64 len);
  Task<void> rdma_write(NodeId issuer, NodeId target, u64 addr, Bytes payload);
  Task<u64> rdma_cas(NodeId issuer, NodeId target, u64 addr, u64 compare, u64 swap);

  // --- two-sided RPC between compute nodes ---
  Task<RpcResult> rpc_call(NodeId issuer, NodeId target, Bytes payload, u16 channel = 0);
  void set_rpc_handler(NodeId node, RpcHandler h);
  void clear_rpc_handler(NodeId node);

  // Fire an RPC without awaiting the response (async unlock path).
  void rpc_post(NodeId issuer, NodeId target, Bytes payload, u16 channel = 0);

  // --- failure injection ---
  void fail_node(NodeId node);
  void restart_node(NodeId node);
  bool is_failed(NodeId node) const;
  void throw_if_failed(NodeId node) const {
    if (is_failed(node)) throw NodeFailed{};
  }

  // --- accounting ---
  const NicAccount& nic(NodeId node) const;
  u64 total_onesided_issued() const { return onesided_issued_; }
  u64 total_rpc_messages() const { return rpc_messages_; }
  u64 mn_atomics_total() const;

  // --- knobs ---
  void set_drop_probability(double p) { drop_prob_ = p; }
  void set_rpc_timeout(SimTime base, int retries) { rpc_timeout_ = base; rpc_retries_ = retries; }

  // --- cost-free access for loading, audits and test oracles ---
  // Deliberately bypasses the clock and NIC accounting; never used on the
  // simulated protocol paths.
  void poke(NodeId target, u64 addr, std::span<const u8> data);
  Bytes peek(NodeId target, u64 addr, u64 len) const;

 private:
  struct Region {
    u64 base = 0;
    Bytes backing;
    std::string name;
  };
  struct Mn {
    std::map<u64, Region> regions;  // keyed by base
    u64 next_base = 64;
    NicAccount nic;
  };

  Region& resolve(NodeId target, u64 addr, u64 len);
  const Region& resolve(NodeId target, u64 addr, u64 len) const;
  Task<Bytes> read_body(NodeId issuer, NodeId target, u64 addr, u64 len);
  Task<void> write_body(NodeId issuer, NodeId target, u64 addr, Bytes payload);
  Task<u64> cas_body(NodeId issuer, NodeId target, u64 addr, u64 compare, u64 swap);
  NicAccount& nic_mut(NodeId node);
  // Reserves NIC service for `cost` units; returns completion time.
  SimTime reserve(NicAccount& nic, u64 cost);
  bool chance(double p);

  Scheduler& sched_;
  NicCostModel model_;
  std::vector<Mn> mns_;
  std::vector<NicAccount> cn_nics_;
  std::vector<RpcHandler> cn_handlers_;
  std::vector<bool> cn_failed_;
  std::mt19937_64 rng_;
  double drop_prob_ = 0.0;
  SimTime rpc_timeout_ = sim_us(100);
  int rpc_retries_ = 3;
  u64 onesided_issued_ = 0;
  u64 rpc_messages_ = 0;
};

}  // namespace lotus
