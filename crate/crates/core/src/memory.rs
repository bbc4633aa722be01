// SPDX-License-Identifier: Apache-2.0

//! Backing store for guest physical page contents. Pages materialise on
//! first write; untouched pages read as zero.

use std::collections::BTreeMap;

use crate::types::{Pfn, PAGE_SIZE};

type Page = Box<[u8; PAGE_SIZE as usize]>;

#[derive(Clone, Debug, Default)]
pub struct PhysMemory {
    pages: BTreeMap<Pfn, Page>,
}

impl PhysMemory {
    pub fn new() -> Self {
        Self::default()
    }

    fn page_mut(&mut self, pfn: Pfn) -> &mut Page {
        self.pages.entry(pfn).or_insert_with(|| Box::new([0u8; PAGE_SIZE as usize]))
    }

    pub fn read_byte(&self, pfn: Pfn, offset: u64) -> u8 {
        debug_assert!(offset < PAGE_SIZE);
        self.pages.get(&pfn).map_or(0, |p| p[offset as usize])
    }

    pub fn write_byte(&mut self, pfn: Pfn, offset: u64, value: u8) {
        debug_assert!(offset < PAGE_SIZE);
        self.page_mut(pfn)[offset as usize] = value;
    }

    pub fn read_u64(&self, pfn: Pfn, offset: u64) -> u64 {
        let mut b = [0u8; 8];
        for (i, slot) in b.iter_mut().enumerate() {
            *slot = self.read_byte(pfn, offset + i as u64);
        }
        u64::from_le_bytes(b)
    }

    pub fn write_u64(&mut self, pfn: Pfn, offset: u64, value: u64) {
        let page = self.page_mut(pfn);
        page[offset as usize..offset as usize + 8].copy_from_slice(&value.to_le_bytes());
    }

    pub fn write_slice(&mut self, pfn: Pfn, offset: u64, data: &[u8]) {
        let page = self.page_mut(pfn);
        page[offset as usize..offset as usize + data.len()].copy_from_slice(data);
    }

    pub fn page_bytes(&self, pfn: Pfn) -> Vec<u8> {
        self.pages.get(&pfn).map_or_else(|| vec![0u8; PAGE_SIZE as usize], |p| p.to_vec())
    }

    pub fn zero(&mut self, pfn: Pfn) {
        self.pages.remove(&pfn);
    }

    pub fn copy_page(&mut self, src: Pfn, dst: Pfn) {
        match self.pages.get(&src) {
            Some(p) => {
                let copy = p.clone();
                self.pages.insert(dst, copy);
            }
            None => {
                self.pages.remove(&dst);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_and_words() {
        let mut m = PhysMemory::new();
        assert_eq!(m.read_byte(Pfn(3), 17), 0);
        m.write_byte(Pfn(3), 17, 0xab);
        m.write_u64(Pfn(3), 64, 0x0102_0304_0506_0708);
        assert_eq!(m.read_byte(Pfn(3), 17), 0xab);
        assert_eq!(m.read_u64(Pfn(3), 64), 0x0102_0304_0506_0708);
        m.copy_page(Pfn(3), Pfn(4));
        assert_eq!(m.page_bytes(Pfn(3)), m.page_bytes(Pfn(4)));
        m.zero(Pfn(3));
        assert_eq!(m.read_byte(Pfn(3), 17), 0);
        assert_eq!(m.read_byte(Pfn(4), 17), 0xab);
    }
}
