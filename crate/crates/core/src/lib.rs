// SPDX-License-Identifier: Apache-2.0

pub mod cost;
pub mod event;
pub mod guest;
pub mod isa;
pub mod memory;
pub mod mmu;
pub mod platform;
pub mod proxy;
pub mod report;
pub mod rmp;
pub mod scenario;
pub mod sim;
pub mod syscalls;
pub mod types;
pub mod vcpu;
pub mod xom;
