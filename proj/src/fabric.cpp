#include "lotus/fabric.hpp"

#include <algorithm>

namespace lotus {

Fabric::Fabric(Scheduler& sched, u16 num_cns, u16 num_mns, NicCostModel model, u64 seed)
    : sched_(sched),
      model_(model),
      mns_(num_mns),
      cn_nics_(num_cns),
      cn_handlers_(num_cns),
      cn_failed_(num_cns, false),
      rng_(mix64(seed ^ 0xfab51cull)) {}

u64 Fabric::register_region(NodeId owner, u64 len, const std::string& name) {
  if (!owner.is_mn()) throw std::invalid_argument("regions live on memory nodes");
  Mn& m = mns_.at(owner.index);
  u64 base = m.next_base;
  Region r;
  r.base = base;
  r.backing.assign(len, 0);
  r.name = name;
  m.regions.emplace(base, std::move(r));
  m.next_base = base + len;  // contiguous: a straddling access is OutOfRegion
  return base;
}

Fabric::Region& Fabric::resolve(NodeId target, u64 addr, u64 len) {
  return const_cast<Region&>(std::as_const(*this).resolve(target, addr, len));
}

const Fabric::Region& Fabric::resolve(NodeId target, u64 addr, u64 len) const {
  if (!target.is_mn()) throw OutOfRegion("one-sided op targets a compute node");
  const Mn& m = mns_.at(target.index);
  auto it = m.regions.upper_bound(addr);
  if (it == m.regions.begin()) throw OutOfRegion("address below all regions");
  --it;
  const Region& r = it->second;
  if (addr < r.base || addr + len > r.base + r.backing.size())
    throw OutOfRegion("access not contained in one region: " + r.name);
  return r;
}

NicAccount& Fabric::nic_mut(NodeId node) {
  return node.is_mn() ? mns_.at(node.index).nic : cn_nics_.at(node.index);
}

const NicAccount& Fabric::nic(NodeId node) const {
  return node.is_mn() ? mns_.at(node.index).nic : cn_nics_.at(node.index);
}

u64 Fabric::mn_atomics_total() const {
  u64 n = 0;
  for (const Mn& m : mns_) n += m.nic.atomics;
  return n;
}

SimTime Fabric::reserve(NicAccount& nic, u64 cost) {
  SimTime start = std::max(sched_.now(), nic.busy_until);
  SimTime done = start + model_.service_ns(cost);
  nic.busy_until = done;
  return done;
}

bool Fabric::chance(double p) {
  if (p <= 0.0) return false;
  if (p >= 1.0) return true;
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng_) < p;
}

Task<Bytes> Fabric::rdma_read(NodeId issuer, NodeId target, u64 addr, u64 len) {
  resolve(target, addr, len);  // throws at issue on protocol bugs
  return read_body(issuer, target, addr, len);
}

Task<Bytes> Fabric::read_body(NodeId issuer, NodeId target, u64 addr, u64 len) {
  NicAccount& nic = nic_mut(target);
  nic.reads++;
  onesided_issued_++;
  SimTime done = reserve(nic, model_.onesided_cost(len));
  co_await resume_at(sched_, done);
  // Bytes captured at the linearization point (completion).
  const Region& r = resolve(target, addr, len);
  Bytes out(r.backing.begin() + (addr - r.base), r.backing.begin() + (addr - r.base) + len);
  throw_if_failed(issuer);
  co_return out;
}

Task<void> Fabric::rdma_write(NodeId issuer, NodeId target, u64 addr, Bytes payload) {
  resolve(target, addr, payload.size());
  return write_body(issuer, target, addr, std::move(payload));
}

Task<void> Fabric::write_body(NodeId issuer, NodeId target, u64 addr, Bytes payload) {
  NicAccount& nic = nic_mut(target);
  nic.writes++;
  onesided_issued_++;
  SimTime done = reserve(nic, model_.onesided_cost(payload.size()));
  co_await resume_at(sched_, done);
  if (!payload.empty()) {
    // The write lands even if the issuer has since crashed.
    Region& r = resolve(target, addr, payload.size());
    std::copy(payload.begin(), payload.end(), r.backing.begin() + (addr - r.base));
  }
  throw_if_failed(issuer);
  co_return;
}

Task<u64> Fabric::rdma_cas(NodeId issuer, NodeId target, u64 addr, u64 compare, u64 swap) {
  if (addr % 8 != 0) throw Misaligned("cas address must be 8-byte aligned");
  resolve(target, addr, 8);
  return cas_body(issuer, target, addr, compare, swap);
}

Task<u64> Fabric::cas_body(NodeId issuer, NodeId target, u64 addr, u64 compare, u64 swap) {
  NicAccount& nic = nic_mut(target);
  nic.atomics++;
  onesided_issued_++;
  SimTime done = reserve(nic, model_.atomic_cost);
  co_await resume_at(sched_, done);
  Region& r = resolve(target, addr, 8);
  u8* p = r.backing.data() + (addr - r.base);
  u64 prior = get_u64(p);
  if (prior == compare) put_u64(p, swap);
  throw_if_failed(issuer);
  co_return prior;
}

void Fabric::set_rpc_handler(NodeId node, RpcHandler h) {
  if (!node.is_cn()) throw std::invalid_argument("rpc handlers live on compute nodes");
  cn_handlers_.at(node.index) = std::move(h);
}

void Fabric::clear_rpc_handler(NodeId node) { cn_handlers_.at(node.index) = nullptr; }

Task<RpcResult> Fabric::rpc_call(NodeId issuer, NodeId target, Bytes payload, u16 channel) {
  if (!target.is_cn()) throw std::invalid_argument("rpc target must be a compute node");
  u64 req_cost = model_.message_cost(payload.size());
  for (int attempt = 0; attempt <= rpc_retries_; ++attempt) {
    SimTime attempt_start = sched_.now();
    SimTime timeout = rpc_timeout_ << attempt;

    NicAccount& snic = nic_mut(issuer);
    snic.rpcs++;
    rpc_messages_++;
    SimTime sent = reserve(snic, req_cost);
    co_await resume_at(sched_, sent);
    throw_if_failed(issuer);

    bool delivered = !is_failed(target) && cn_handlers_.at(target.index) && !chance(drop_prob_);
    if (delivered) {
      NicAccount& tnic = nic_mut(target);
      SimTime recv = reserve(tnic, req_cost);
      co_await resume_at(sched_, recv);
      throw_if_failed(issuer);
      if (!is_failed(target) && cn_handlers_.at(target.index)) {
        // Handler runs at the receiver at delivery time. It may run more
        // than once across retries; lock-state idempotency absorbs that.
        Bytes resp = cn_handlers_.at(target.index)(payload, RpcMeta{issuer, channel});
        if (!chance(drop_prob_)) {
          u64 resp_cost = model_.message_cost(resp.size());
          NicAccount& rnic = nic_mut(target);
          rnic.rpcs++;
          rpc_messages_++;
          SimTime r1 = reserve(rnic, resp_cost);
          SimTime r2 = reserve(nic_mut(issuer), resp_cost);
          co_await resume_at(sched_, std::max(r1, r2));
          throw_if_failed(issuer);
          co_return RpcResult{true, std::move(resp)};
        }
      }
    }
    co_await resume_at(sched_, attempt_start + timeout);
    throw_if_failed(issuer);
  }
  co_return RpcResult{false, {}};
}

void Fabric::rpc_post(NodeId issuer, NodeId target, Bytes payload, u16 channel) {
  auto wrap = [](Fabric* f, NodeId from, NodeId to, Bytes p, u16 ch) -> Task<void> {
    try {
      co_await f->rpc_call(from, to, std::move(p), ch);
    } catch (const NodeFailed&) {
    }
  };
  spawn(wrap(this, issuer, target, std::move(payload), channel));
}

void Fabric::fail_node(NodeId node) {
  if (!node.is_cn()) throw std::invalid_argument("only compute node failures are modeled");
  cn_failed_.at(node.index) = true;
}

void Fabric::restart_node(NodeId node) { cn_failed_.at(node.index) = false; }

bool Fabric::is_failed(NodeId node) const {
  return node.is_cn() && cn_failed_.at(node.index);
}

void Fabric::poke(NodeId target, u64 addr, std::span<const u8> data) {
  Region& r = resolve(target, addr, data.size());
  std::copy(data.begin(), data.end(), r.backing.begin() + (addr - r.base));
}

Bytes Fabric::peek(NodeId target, u64 addr, u64 len) const {
  const Region& r = resolve(target, addr, len);
  return Bytes(r.backing.begin() + (addr - r.base), r.backing.begin() + (addr - r.base) + len);
}

}  // namespace lotus
