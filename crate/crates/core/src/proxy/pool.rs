// SPDX-License-Identifier: Apache-2.0

//! Pages granted to a proxy-kernel for serving mmap-family calls without
//! leaving its VMPL.

use std::collections::{BTreeMap, BTreeSet};

use crate::types::Pfn;

#[derive(Clone, Debug, Default)]
pub struct SelfMemPool {
    capacity: u64,
    granted: BTreeSet<Pfn>,
    free_list: Vec<Pfn>,
    /// Page-aligned VA to backing frame.
    mapped: BTreeMap<u64, Pfn>,
}

impl SelfMemPool {
    pub fn new(capacity: u64, pages: Vec<Pfn>) -> Self {
        let mut pool = SelfMemPool { capacity, ..SelfMemPool::default() };
        pool.add_pages(pages);
        pool
    }

    pub fn enabled(&self) -> bool {
        self.capacity > 0
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    /// Pages requested per refill.
    pub fn refill_size(&self) -> u64 {
        (self.capacity / 2).max(1)
    }

    pub fn free_count(&self) -> u64 {
        self.free_list.len() as u64
    }

    pub fn granted(&self) -> &BTreeSet<Pfn> {
        &self.granted
    }

    pub fn mapped(&self) -> &BTreeMap<u64, Pfn> {
        &self.mapped
    }

    pub fn add_pages(&mut self, pages: Vec<Pfn>) {
        for p in pages.into_iter().rev() {
            if self.granted.insert(p) {
                self.free_list.push(p);
            }
        }
    }

    /// Lowest-numbered frames come out first after a grant.
    pub fn take(&mut self, va: u64) -> Option<Pfn> {
        let pfn = self.free_list.pop()?;
        self.mapped.insert(va, pfn);
        Some(pfn)
    }

    pub fn give_back(&mut self, va: u64) -> Option<Pfn> {
        let pfn = self.mapped.remove(&va)?;
        self.free_list.push(pfn);
        Some(pfn)
    }

    pub fn rekey(&mut self, from: u64, to: u64) {
        if let Some(p) = self.mapped.remove(&from) {
            self.mapped.insert(to, p);
        }
    }

    /// granted = free ∪ mapped, with the two disjoint.
    pub fn is_conserved(&self) -> bool {
        let free: BTreeSet<Pfn> = self.free_list.iter().copied().collect();
        let mapped: BTreeSet<Pfn> = self.mapped.values().copied().collect();
        free.len() == self.free_list.len()
            && mapped.len() == self.mapped.len()
            && free.is_disjoint(&mapped)
            && free.union(&mapped).copied().collect::<BTreeSet<_>>() == self.granted
    }
}
