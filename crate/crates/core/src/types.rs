// SPDX-License-Identifier: Apache-2.0

//! Small shared vocabulary: page frames, virtual ranges, privilege modes.

use std::fmt;

use serde::{Deserialize, Serialize};

pub const PAGE_SHIFT: u32 = 12;
pub const PAGE_SIZE: u64 = 1 << PAGE_SHIFT;

pub type Pid = u32;
pub type Tid = u32;

/// Guest physical page frame number (4 KiB granule).
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Pfn(pub u64);

impl fmt::Display for Pfn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Current privilege level inside one VMPL.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cpl {
    User,
    Super,
}

impl fmt::Display for Cpl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Cpl::User => "user",
            Cpl::Super => "super",
        })
    }
}

#[inline]
pub const fn page_align_down(va: u64) -> u64 {
    va & !(PAGE_SIZE - 1)
}

#[inline]
pub const fn page_align_up(va: u64) -> u64 {
    va.saturating_add(PAGE_SIZE - 1) & !(PAGE_SIZE - 1)
}

#[inline]
pub const fn is_page_aligned(va: u64) -> bool {
    va & (PAGE_SIZE - 1) == 0
}

#[inline]
pub const fn pages_for(len: u64) -> u64 {
    len.div_ceil(PAGE_SIZE)
}

/// Half-open virtual address range `[start, end)`.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VaRange {
    pub start: u64,
    pub end: u64,
}

impl VaRange {
    pub fn new(start: u64, end: u64) -> Self {
        debug_assert!(start <= end);
        Self { start, end }
    }

    pub fn from_len(start: u64, len: u64) -> Self {
        Self::new(start, start.saturating_add(len))
    }

    pub fn pages(start: u64, count: u64) -> Self {
        Self::from_len(start, count * PAGE_SIZE)
    }

    pub fn len(&self) -> u64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn page_count(&self) -> u64 {
        pages_for(self.len())
    }

    pub fn is_page_aligned(&self) -> bool {
        is_page_aligned(self.start) && is_page_aligned(self.end)
    }

    pub fn contains(&self, va: u64) -> bool {
        self.start <= va && va < self.end
    }

    pub fn contains_range(&self, other: &VaRange) -> bool {
        self.start <= other.start && other.end <= self.end
    }

    pub fn overlaps(&self, other: &VaRange) -> bool {
        self.start < other.end && other.start < self.end
    }

    pub fn intersect(&self, other: &VaRange) -> Option<VaRange> {
        let start = self.start.max(other.start);
        let end = self.end.min(other.end);
        (start < end).then_some(VaRange { start, end })
    }

    /// Page-aligned start addresses covered by this range.
    pub fn page_addrs(&self) -> impl Iterator<Item = u64> {
        let start = page_align_down(self.start);
        let end = self.end;
        (start..end).step_by(PAGE_SIZE as usize)
    }
}

impl fmt::Display for VaRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}..{:#x}", self.start, self.end)
    }
}
