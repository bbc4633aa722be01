// SPDX-License-Identifier: Apache-2.0

//! Per-process guest page tables and the nested permission walk.
//!
//! The walk applies the guest PTE checks in a fixed order and consults the
//! RMP last, so the first violated predicate names the fault:
//! present, write permission (and not COW), user/supervisor, no-execute,
//! then the RMP mask at the accessing VMPL.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::isa::Instruction;
use crate::rmp::{AccessType, Rmp, VmplLevel};
use crate::types::{is_page_aligned, page_align_down, Cpl, Pfn, Pid, VaRange, PAGE_SIZE};

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PteFlags {
    pub writable: bool,
    pub user: bool,
    pub nx: bool,
    pub cow: bool,
}

impl PteFlags {
    pub const fn user_rw() -> Self {
        PteFlags { writable: true, user: true, nx: true, cow: false }
    }

    pub const fn user_ro() -> Self {
        PteFlags { writable: false, user: true, nx: true, cow: false }
    }

    pub const fn user_rx() -> Self {
        PteFlags { writable: false, user: true, nx: false, cow: false }
    }
}

/// Leaf page-table entry. `cow` implies present and not writable.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pte {
    pub present: bool,
    pub writable: bool,
    pub user: bool,
    pub nx: bool,
    pub cow: bool,
    pub pfn: Pfn,
}

impl Pte {
    pub fn new(pfn: Pfn, flags: PteFlags) -> Self {
        Pte {
            present: true,
            writable: flags.writable && !flags.cow,
            user: flags.user,
            nx: flags.nx,
            cow: flags.cow,
            pfn,
        }
    }

    pub fn flags(&self) -> PteFlags {
        PteFlags { writable: self.writable, user: self.user, nx: self.nx, cow: self.cow }
    }
}

/// Access requested by an instruction; fetches are refined by CPL into the
/// RMP's user/supervisor fetch types.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Access {
    Read,
    Write,
    Execute,
}

impl Access {
    pub fn refine(self, cpl: Cpl) -> AccessType {
        match (self, cpl) {
            (Access::Read, _) => AccessType::Read,
            (Access::Write, _) => AccessType::Write,
            (Access::Execute, Cpl::User) => AccessType::FetchUser,
            (Access::Execute, Cpl::Super) => AccessType::FetchSuper,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FaultKind {
    NotPresent,
    WriteProtection,
    UserSupervisor,
    NoExecute,
    RmpViolation,
}

impl FaultKind {
    pub const ALL: [FaultKind; 5] = [
        FaultKind::NotPresent,
        FaultKind::WriteProtection,
        FaultKind::UserSupervisor,
        FaultKind::NoExecute,
        FaultKind::RmpViolation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FaultKind::NotPresent => "not_present",
            FaultKind::WriteProtection => "write_protection",
            FaultKind::UserSupervisor => "user_supervisor",
            FaultKind::NoExecute => "no_execute",
            FaultKind::RmpViolation => "rmp_violation",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for FaultKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Fault {
    pub kind: FaultKind,
    pub va: u64,
    pub access: AccessType,
    pub vmpl: VmplLevel,
    /// Frame resolved by the guest walk; always set for `RmpViolation`.
    pub pfn: Option<Pfn>,
    /// Set when the faulting PTE is a copy-on-write page.
    pub cow: bool,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VmaKind {
    Code,
    Data,
    Stack,
    Anon,
    Vdso,
    File,
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Prot {
    pub read: bool,
    pub write: bool,
    pub exec: bool,
}

impl Prot {
    pub const NONE: Prot = Prot { read: false, write: false, exec: false };
    pub const R: Prot = Prot { read: true, write: false, exec: false };
    pub const RW: Prot = Prot { read: true, write: true, exec: false };
    pub const RX: Prot = Prot { read: true, write: false, exec: true };

    /// From Linux `PROT_*` bits.
    pub fn from_linux(bits: u64) -> Self {
        Prot { read: bits & 1 != 0, write: bits & 2 != 0, exec: bits & 4 != 0 }
    }

    pub fn pte_flags(self) -> PteFlags {
        PteFlags { writable: self.write, user: true, nx: !self.exec, cow: false }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VmaOwner {
    /// Managed by the guest OS.
    Guest,
    /// Self-managed by the proxy-kernel from its page pool.
    Proxy,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FileBacking {
    pub ino: u32,
    pub page_offset: u64,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Vma {
    pub range: VaRange,
    pub kind: VmaKind,
    pub prot: Prot,
    pub owner: VmaOwner,
    pub backing: Option<FileBacking>,
}

impl Vma {
    pub fn new(range: VaRange, kind: VmaKind, prot: Prot) -> Self {
        Vma { range, kind, prot, owner: VmaOwner::Guest, backing: None }
    }

    pub fn owned_by(mut self, owner: VmaOwner) -> Self {
        self.owner = owner;
        self
    }

    fn clipped(&self, range: VaRange) -> Vma {
        let mut v = *self;
        v.range = range;
        if let Some(b) = v.backing.as_mut() {
            b.page_offset += (range.start - self.range.start) / PAGE_SIZE;
        }
        v
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MmuError {
    #[error("address range {0} is not page aligned")]
    Misaligned(VaRange),
    #[error("no VMA covers {0:#x}")]
    NoVma(u64),
    #[error("VMA {0} overlaps an existing mapping")]
    Overlap(VaRange),
}

#[derive(Clone, Debug)]
pub struct AddressSpace {
    pub pid: Pid,
    ptes: BTreeMap<u64, Pte>,
    vmas: BTreeMap<u64, Vma>,
    code: BTreeMap<u64, Instruction>,
}

fn vpn(va: u64) -> u64 {
    va / PAGE_SIZE
}

fn check_aligned(range: VaRange) -> Result<(), MmuError> {
    if range.is_page_aligned() {
        Ok(())
    } else {
        Err(MmuError::Misaligned(range))
    }
}

impl AddressSpace {
    pub fn new(pid: Pid) -> Self {
        AddressSpace { pid, ptes: BTreeMap::new(), vmas: BTreeMap::new(), code: BTreeMap::new() }
    }

    pub fn add_vma(&mut self, vma: Vma) -> Result<(), MmuError> {
        check_aligned(vma.range)?;
        if vma.range.is_empty() || self.vmas.values().any(|v| v.range.overlaps(&vma.range)) {
            return Err(MmuError::Overlap(vma.range));
        }
        self.vmas.insert(vma.range.start, vma);
        Ok(())
    }

    pub fn vma_at(&self, va: u64) -> Option<&Vma> {
        self.vmas.range(..=va).next_back().map(|(_, v)| v).filter(|v| v.range.contains(va))
    }

    pub fn vmas(&self) -> impl Iterator<Item = &Vma> {
        self.vmas.values()
    }

    /// VMAs intersecting `range`, in address order.
    pub fn vmas_in(&self, range: VaRange) -> Vec<Vma> {
        self.vmas.values().filter(|v| v.range.overlaps(&range)).copied().collect()
    }

    /// True when every byte of `range` lies inside some VMA.
    pub fn is_covered(&self, range: VaRange) -> bool {
        let mut cursor = range.start;
        while cursor < range.end {
            match self.vma_at(cursor) {
                Some(v) => cursor = v.range.end,
                None => return false,
            }
        }
        true
    }

    /// Remove the parts of every VMA that intersect `range`, splitting as needed.
    /// Returns the removed pieces.
    pub fn remove_vmas(&mut self, range: VaRange) -> Vec<Vma> {
        let hits = self.vmas_in(range);
        let mut removed = Vec::new();
        for v in hits {
            self.vmas.remove(&v.range.start);
            if v.range.start < range.start {
                let left = v.clipped(VaRange::new(v.range.start, range.start));
                self.vmas.insert(left.range.start, left);
            }
            if range.end < v.range.end {
                let right = v.clipped(VaRange::new(range.end, v.range.end));
                self.vmas.insert(right.range.start, right);
            }
            if let Some(mid) = v.range.intersect(&range) {
                removed.push(v.clipped(mid));
            }
        }
        removed
    }

    /// Change protections over `range`, splitting VMAs at the boundaries.
    pub fn set_vma_prot(&mut self, range: VaRange, prot: Prot) -> Result<(), MmuError> {
        check_aligned(range)?;
        if !self.is_covered(range) {
            return Err(MmuError::NoVma(range.start));
        }
        for mut piece in self.remove_vmas(range) {
            piece.prot = prot;
            self.vmas.insert(piece.range.start, piece);
        }
        Ok(())
    }

    /// Lowest page-aligned address ≥ `floor` with `len` free bytes below `ceiling`.
    pub fn find_free(&self, floor: u64, ceiling: u64, len: u64) -> Option<u64> {
        let mut cursor = floor;
        for v in self.vmas.values() {
            if v.range.end <= cursor {
                continue;
            }
            if v.range.start >= cursor.saturating_add(len) {
                break;
            }
            cursor = cursor.max(v.range.end);
        }
        (cursor.saturating_add(len) <= ceiling).then_some(cursor)
    }

    pub fn map(&mut self, va: u64, pfn: Pfn, flags: PteFlags) -> Result<Option<Pte>, MmuError> {
        if !is_page_aligned(va) {
            return Err(MmuError::Misaligned(VaRange::from_len(va, PAGE_SIZE)));
        }
        if self.vma_at(va).is_none() {
            return Err(MmuError::NoVma(va));
        }
        Ok(self.ptes.insert(vpn(va), Pte::new(pfn, flags)))
    }

    /// Clears present over `range`; returns the removed entries.
    pub fn unmap(&mut self, range: VaRange) -> Result<Vec<(u64, Pte)>, MmuError> {
        check_aligned(range)?;
        let keys: Vec<u64> = self.ptes.range(vpn(range.start)..vpn(range.end)).map(|(k, _)| *k).collect();
        Ok(keys
            .into_iter()
            .filter_map(|k| self.ptes.remove(&k).map(|p| (k * PAGE_SIZE, p)))
            .collect())
    }

    /// Rewrite writable/user/nx on present PTEs in `range`; COW pages stay read-only.
    pub fn protect(&mut self, range: VaRange, flags: PteFlags) -> Result<(), MmuError> {
        check_aligned(range)?;
        if !self.is_covered(range) {
            return Err(MmuError::NoVma(range.start));
        }
        for pte in self.ptes.range_mut(vpn(range.start)..vpn(range.end)).map(|(_, p)| p) {
            pte.writable = flags.writable && !pte.cow;
            pte.user = flags.user;
            pte.nx = flags.nx;
        }
        Ok(())
    }

    pub fn pte(&self, va: u64) -> Option<&Pte> {
        self.ptes.get(&vpn(va))
    }

    pub fn pte_mut(&mut self, va: u64) -> Option<&mut Pte> {
        self.ptes.get_mut(&vpn(va))
    }

    pub fn present_count(&self) -> usize {
        self.ptes.len()
    }

    /// Every present mapping, ascending by virtual address.
    pub fn all_ptes(&self) -> impl Iterator<Item = (u64, &Pte)> {
        self.ptes.iter().map(|(k, p)| (k * PAGE_SIZE, p))
    }

    /// Present PTEs in `range`, ascending by virtual address. Read-only.
    pub fn walk_region(&self, range: VaRange) -> Result<Vec<(u64, Pte)>, MmuError> {
        check_aligned(range)?;
        Ok(self
            .ptes
            .range(vpn(range.start)..vpn(range.end))
            .filter(|(_, p)| p.present)
            .map(|(k, p)| (k * PAGE_SIZE, *p))
            .collect())
    }

    /// Nested walk: guest PTE predicates first, RMP last. Never mutates state.
    pub fn translate_and_check(&self, rmp: &Rmp, va: u64, access: Access, cpl: Cpl, vmpl: VmplLevel) -> Result<Pfn, Fault> {
        let refined = access.refine(cpl);
        let fault = |kind, pfn, cow| Fault { kind, va, access: refined, vmpl, pfn, cow };
        let pte = match self.pte(va) {
            Some(p) if p.present => *p,
            _ => return Err(fault(FaultKind::NotPresent, None, false)),
        };
        if access == Access::Write && (!pte.writable || pte.cow) {
            return Err(fault(FaultKind::WriteProtection, Some(pte.pfn), pte.cow));
        }
        if cpl == Cpl::User && !pte.user {
            return Err(fault(FaultKind::UserSupervisor, Some(pte.pfn), pte.cow));
        }
        if access == Access::Execute && pte.nx {
            return Err(fault(FaultKind::NoExecute, Some(pte.pfn), pte.cow));
        }
        rmp.check(pte.pfn, vmpl, refined)
            .map(|_| pte.pfn)
            .map_err(|_| fault(FaultKind::RmpViolation, Some(pte.pfn), pte.cow))
    }

    /// Move every VMA piece and PTE in `old` so that it starts at `new_start`.
    pub fn relocate(&mut self, old: VaRange, new_start: u64) -> Result<(), MmuError> {
        check_aligned(old)?;
        let target = VaRange::from_len(new_start, old.len());
        check_aligned(target)?;
        if self.vmas.values().any(|v| v.range.overlaps(&target) && !v.range.overlaps(&old)) {
            return Err(MmuError::Overlap(target));
        }
        let pieces = self.remove_vmas(old);
        let ptes = self.unmap(old)?;
        for mut v in pieces {
            v.range = VaRange::new(v.range.start - old.start + new_start, v.range.end - old.start + new_start);
            self.add_vma(v)?;
        }
        for (va, pte) in ptes {
            self.ptes.insert(vpn(va - old.start + new_start), pte);
        }
        Ok(())
    }

    pub fn write_code(&mut self, va: u64, insn: Instruction) {
        self.code.insert(va, insn);
    }

    pub fn fetch_code(&self, va: u64) -> Option<&Instruction> {
        self.code.get(&va)
    }

    pub fn clear_code(&mut self, range: VaRange) {
        let keys: Vec<u64> = self.code.range(range.start..range.end).map(|(k, _)| *k).collect();
        for k in keys {
            self.code.remove(&k);
        }
    }
}

/// Page-aligned range covering `[va, va+len)`.
pub fn covering_range(va: u64, len: u64) -> VaRange {
    VaRange::new(page_align_down(va), crate::types::page_align_up(va.saturating_add(len)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rmp::{GuestId, PermMask};

    const G: GuestId = GuestId(1);

    fn setup() -> (AddressSpace, Rmp) {
        let mut space = AddressSpace::new(1);
        space.add_vma(Vma::new(VaRange::pages(0x1000, 16), VmaKind::Data, Prot::RW)).unwrap();
        let mut rmp = Rmp::new(32, G);
        for p in 0..32 {
            rmp.assign(Pfn(p), G).unwrap();
        }
        (space, rmp)
    }

    #[test]
    fn map_then_walk_resolves() {
        let (mut s, rmp) = setup();
        s.map(0x1000, Pfn(7), PteFlags::user_rw()).unwrap();
        assert_eq!(s.translate_and_check(&rmp, 0x1234, Access::Read, Cpl::User, VmplLevel::VMPL0), Ok(Pfn(7)));
    }

    #[test]
    fn protect_then_write_faults() {
        let (mut s, rmp) = setup();
        s.map(0x1000, Pfn(7), PteFlags::user_rw()).unwrap();
        s.protect(VaRange::pages(0x1000, 1), PteFlags::user_ro()).unwrap();
        let f = s.translate_and_check(&rmp, 0x1000, Access::Write, Cpl::User, VmplLevel::VMPL0).unwrap_err();
        assert_eq!(f.kind, FaultKind::WriteProtection);
    }

    #[test]
    fn unmap_then_not_present() {
        let (mut s, rmp) = setup();
        s.map(0x2000, Pfn(7), PteFlags::user_rw()).unwrap();
        let gone = s.unmap(VaRange::pages(0x1000, 4)).unwrap();
        assert_eq!(gone.len(), 1);
        for a in [Access::Read, Access::Write, Access::Execute] {
            let f = s.translate_and_check(&rmp, 0x2000, a, Cpl::User, VmplLevel::VMPL0).unwrap_err();
            assert_eq!(f.kind, FaultKind::NotPresent);
        }
    }

    #[test]
    fn mapping_errors() {
        let (mut s, _) = setup();
        assert!(matches!(s.map(0x1001, Pfn(1), PteFlags::user_rw()), Err(MmuError::Misaligned(_))));
        assert_eq!(s.map(0x40_0000, Pfn(1), PteFlags::user_rw()), Err(MmuError::NoVma(0x40_0000)));
        assert!(matches!(s.walk_region(VaRange::new(0x1000, 0x1800)), Err(MmuError::Misaligned(_))));
        assert!(matches!(
            s.add_vma(Vma::new(VaRange::pages(0x2000, 1), VmaKind::Anon, Prot::RW)),
            Err(MmuError::Overlap(_))
        ));
    }

    #[test]
    fn rmp_denies_after_pte_allows() {
        let (mut s, mut rmp) = setup();
        s.map(0x1000, Pfn(7), PteFlags::user_rw()).unwrap();
        rmp.set_permissions(VmplLevel::VMPL0, Pfn(7), VmplLevel::VMPL1, PermMask::EXEC_USER).unwrap();
        let f = s.translate_and_check(&rmp, 0x1000, Access::Read, Cpl::User, VmplLevel::VMPL1).unwrap_err();
        assert_eq!(f.kind, FaultKind::RmpViolation);
        assert_eq!(f.pfn, Some(Pfn(7)));
        rmp.set_permissions(VmplLevel::VMPL0, Pfn(7), VmplLevel::VMPL1, PermMask::READ_WRITE).unwrap();
        assert_eq!(s.translate_and_check(&rmp, 0x1000, Access::Write, Cpl::User, VmplLevel::VMPL1), Ok(Pfn(7)));
    }

    #[test]
    fn cow_write_is_write_protection_even_at_vmpl0() {
        let (mut s, rmp) = setup();
        s.map(0x3000, Pfn(9), PteFlags { writable: true, user: true, nx: true, cow: true }).unwrap();
        let pte = *s.pte(0x3000).unwrap();
        assert!(pte.cow && !pte.writable);
        let f = s.translate_and_check(&rmp, 0x3000, Access::Write, Cpl::User, VmplLevel::VMPL0).unwrap_err();
        assert_eq!(f.kind, FaultKind::WriteProtection);
        assert!(f.cow);
    }

    #[test]
    fn non_present_never_reports_rmp() {
        let (s, rmp) = setup();
        let f = s.translate_and_check(&rmp, 0x5000, Access::Read, Cpl::User, VmplLevel::VMPL3).unwrap_err();
        assert_eq!(f.kind, FaultKind::NotPresent);
        assert_eq!(f.pfn, None);
    }

    #[test]
    fn supervisor_fetch_of_user_page_passes_pte_stage() {
        let (mut s, mut rmp) = setup();
        s.map(0x1000, Pfn(4), PteFlags::user_rx()).unwrap();
        rmp.set_permissions(VmplLevel::VMPL0, Pfn(4), VmplLevel::VMPL1, PermMask::EXEC_SUPER).unwrap();
        assert_eq!(s.translate_and_check(&rmp, 0x1000, Access::Execute, Cpl::Super, VmplLevel::VMPL1), Ok(Pfn(4)));
        let f = s.translate_and_check(&rmp, 0x1000, Access::Execute, Cpl::User, VmplLevel::VMPL1).unwrap_err();
        assert_eq!((f.kind, f.access), (FaultKind::RmpViolation, AccessType::FetchUser));
    }

    #[test]
    fn walk_region_orders_present_entries() {
        let (mut s, _) = setup();
        assert!(s.walk_region(VaRange::new(0x1000, 0x1000)).unwrap().is_empty());
        s.map(0x3000, Pfn(3), PteFlags::user_rw()).unwrap();
        s.map(0x1000, Pfn(1), PteFlags::user_rw()).unwrap();
        let got: Vec<u64> = s.walk_region(VaRange::pages(0x1000, 8)).unwrap().into_iter().map(|(va, _)| va).collect();
        assert_eq!(got, vec![0x1000, 0x3000]);
    }

    #[test]
    fn vma_split_and_free_search() {
        let (mut s, _) = setup();
        s.set_vma_prot(VaRange::pages(0x4000, 2), Prot::R).unwrap();
        let vmas: Vec<_> = s.vmas().map(|v| (v.range, v.prot)).collect();
        assert_eq!(
            vmas,
            vec![
                (VaRange::new(0x1000, 0x4000), Prot::RW),
                (VaRange::new(0x4000, 0x6000), Prot::R),
                (VaRange::new(0x6000, 0x11000), Prot::RW),
            ]
        );
        let removed = s.remove_vmas(VaRange::pages(0x5000, 2));
        assert_eq!(removed.len(), 2);
        assert!(s.vma_at(0x5000).is_none());
        assert_eq!(s.find_free(0x1000, 0x100000, PAGE_SIZE * 2), Some(0x5000));
        assert_eq!(s.find_free(0x1000, 0x100000, PAGE_SIZE * 3), Some(0x11000));
    }
}
