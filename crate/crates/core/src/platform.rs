// SPDX-License-Identifier: Apache-2.0

use crate::event::EventLog;
use crate::memory::PhysMemory;
use crate::rmp::{GuestId, Rmp};

/// Hardware-level state shared by every component: the RMP, physical page
/// contents and the event log.
#[derive(Clone, Debug)]
pub struct Platform {
    pub rmp: Rmp,
    pub mem: PhysMemory,
    pub log: EventLog,
}

pub const GUEST: GuestId = GuestId(1);

impl Platform {
    pub fn new(page_count: u64) -> Self {
        Platform { rmp: Rmp::new(page_count, GUEST), mem: PhysMemory::new(), log: EventLog::new() }
    }
}
