// SPDX-License-Identifier: Apache-2.0

//! Forwarding channels between a proxy-kernel and the guest OS.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::event::Channel;
use crate::memory::PhysMemory;
use crate::types::Pfn;
use crate::vcpu::SyscallRequest;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChannelState {
    /// Only the MSR protocol is available.
    MsrBootstrap,
    GhcbRegistered,
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq)]
pub struct HotcallSlot {
    pub request: Option<SyscallRequest>,
    pub response: Option<i64>,
}

#[derive(Clone, Debug)]
pub struct ForwardChannel {
    pub state: ChannelState,
    pub shared_page: Pfn,
    pub slot: HotcallSlot,
}

const GHCB_NR: u64 = 0;
const GHCB_ARGS: u64 = 8;
const GHCB_RET: u64 = 64;

impl ForwardChannel {
    pub fn new(shared_page: Pfn) -> Self {
        ForwardChannel { state: ChannelState::MsrBootstrap, shared_page, slot: HotcallSlot::default() }
    }

    pub fn kind(&self) -> Channel {
        match self.state {
            ChannelState::MsrBootstrap => Channel::Msr,
            ChannelState::GhcbRegistered => Channel::Ghcb,
        }
    }

    /// Marshal a request into the shared page.
    pub fn write_request(&self, mem: &mut PhysMemory, req: &SyscallRequest) {
        mem.write_u64(self.shared_page, GHCB_NR, req.nr);
        for (i, a) in req.args.iter().enumerate() {
            mem.write_u64(self.shared_page, GHCB_ARGS + 8 * i as u64, *a);
        }
    }

    pub fn write_response(&self, mem: &mut PhysMemory, ret: i64) {
        mem.write_u64(self.shared_page, GHCB_RET, ret as u64);
    }

    pub fn read_response(&self, mem: &PhysMemory) -> i64 {
        mem.read_u64(self.shared_page, GHCB_RET) as i64
    }
}

/// Global cap on simulated steps, including spin iterations.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct StepBudget {
    pub limit: u64,
    pub used: u64,
}

impl StepBudget {
    pub fn new(limit: u64) -> Self {
        StepBudget { limit, used: 0 }
    }

    pub fn consume(&mut self) -> bool {
        if self.used >= self.limit {
            return false;
        }
        self.used += 1;
        true
    }

    pub fn exhausted(&self) -> bool {
        self.used >= self.limit
    }
}

/// The VMPL0 service context that polls hotcall slots.
#[derive(Clone, Debug)]
pub struct HotcallService {
    pub vcpu: u32,
    rng: ChaCha8Rng,
    pub min_spins: u32,
    pub max_spins: u32,
    pub served: u64,
}

impl HotcallService {
    pub fn new(vcpu: u32, seed: u64) -> Self {
        HotcallService { vcpu, rng: ChaCha8Rng::seed_from_u64(seed), min_spins: 1, max_spins: 4, served: 0 }
    }

    /// Spin iterations before the service notices the next request.
    pub fn next_latency(&mut self) -> u32 {
        self.rng.gen_range(self.min_spins..=self.max_spins)
    }
}
