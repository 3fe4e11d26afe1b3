#pragma once

#include <set>
#include <vector>

#include "lotus/bytes.hpp"
#include "lotus/sim.hpp"

namespace lotus {

// Lease-based membership as seen by one CN. A peer is suspected iff its
// lease expired; the epoch counter increments on every membership change.
struct MembershipView {
  std::vector<u64> lease_expiry;  // per CN, simulated ns
  u64 epoch = 0;
  std::set<u16> suspected;
};

// Emits each failure exactly once per epoch: a newly expired lease adds the
// CN to the suspected set; a renewed lease clears it.
std::vector<u16> detect_failures(MembershipView& view, SimTime now);

// Recovery task phases for one failed CN, tracked per survivor.
constexpr u8 kRecoveryStripesScanned = 1;
constexpr u8 kRecoveryDrained = 2;
constexpr u8 kRecoveryLocksReleased = 4;
constexpr u8 kRecoveryAllDone = 7;

// Lease slot layout (16B per CN): expiry u64 | epoch u64.
constexpr u64 kLeaseSlotBytes = 16;

}  // namespace lotus
