// SPDX-License-Identifier: Apache-2.0

//! Reverse Mapping Table model.
//!
//! Every guest physical page has one row recording its owner and a
//! permission mask per VMPL. VMPL0 always holds the full mask; lower levels
//! start with nothing and are granted rights by a strictly more privileged
//! level, never more than the granting level holds itself.
//!
//! Pages in the [`Owner::Shared`] class (the forwarding page) bypass the
//! per-VMPL masks for data accesses and are never executable.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::Pfn;

/// Virtual Machine Privilege Level, 0 (most privileged) through 3.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct VmplLevel(u8);

impl VmplLevel {
    pub const VMPL0: VmplLevel = VmplLevel(0);
    pub const VMPL1: VmplLevel = VmplLevel(1);
    pub const VMPL2: VmplLevel = VmplLevel(2);
    pub const VMPL3: VmplLevel = VmplLevel(3);
    pub const COUNT: usize = 4;

    pub fn new(level: u8) -> Result<Self, RmpError> {
        if level < Self::COUNT as u8 {
            Ok(VmplLevel(level))
        } else {
            Err(RmpError::BadVmpl(level))
        }
    }

    pub const fn get(self) -> u8 {
        self.0
    }

    pub const fn index(self) -> usize {
        self.0 as usize
    }

    /// Numerically smaller levels are more privileged.
    pub const fn is_more_privileged_than(self, other: VmplLevel) -> bool {
        self.0 < other.0
    }

    pub fn all() -> [VmplLevel; 4] {
        [Self::VMPL0, Self::VMPL1, Self::VMPL2, Self::VMPL3]
    }

    pub fn lower() -> [VmplLevel; 3] {
        [Self::VMPL1, Self::VMPL2, Self::VMPL3]
    }
}

impl TryFrom<u8> for VmplLevel {
    type Error = RmpError;
    fn try_from(v: u8) -> Result<Self, Self::Error> {
        VmplLevel::new(v)
    }
}

impl From<VmplLevel> for u8 {
    fn from(v: VmplLevel) -> u8 {
        v.0
    }
}

impl fmt::Display for VmplLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// The four independent permission bits of one RMP row for one VMPL.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PermMask {
    pub read: bool,
    pub write: bool,
    pub exec_user: bool,
    pub exec_super: bool,
}

impl PermMask {
    pub const EMPTY: PermMask = PermMask::from_bits(0);
    pub const FULL: PermMask = PermMask::from_bits(0b1111);
    pub const READ: PermMask = PermMask::from_bits(0b0001);
    pub const READ_WRITE: PermMask = PermMask::from_bits(0b0011);
    pub const EXEC_USER: PermMask = PermMask::from_bits(0b0100);
    pub const EXEC_SUPER: PermMask = PermMask::from_bits(0b1000);

    /// bit0 read, bit1 write, bit2 user-execute, bit3 supervisor-execute.
    pub const fn from_bits(bits: u8) -> Self {
        PermMask {
            read: bits & 1 != 0,
            write: bits & 2 != 0,
            exec_user: bits & 4 != 0,
            exec_super: bits & 8 != 0,
        }
    }

    pub const fn bits(self) -> u8 {
        (self.read as u8) | (self.write as u8) << 1 | (self.exec_user as u8) << 2 | (self.exec_super as u8) << 3
    }

    pub const fn is_subset_of(self, other: PermMask) -> bool {
        self.bits() & !other.bits() == 0
    }

    pub const fn union(self, other: PermMask) -> PermMask {
        PermMask::from_bits(self.bits() | other.bits())
    }

    pub const fn difference(self, other: PermMask) -> PermMask {
        PermMask::from_bits(self.bits() & !other.bits())
    }

    pub const fn is_empty(self) -> bool {
        self.bits() == 0
    }

    pub const fn allows(self, access: AccessType) -> bool {
        match access {
            AccessType::Read => self.read,
            AccessType::Write => self.write,
            AccessType::FetchUser => self.exec_user,
            AccessType::FetchSuper => self.exec_super,
        }
    }

    /// `rwux` rendering, `-` for a cleared bit.
    pub fn render(self) -> String {
        let mut s = String::with_capacity(4);
        s.push(if self.read { 'r' } else { '-' });
        s.push(if self.write { 'w' } else { '-' });
        s.push(if self.exec_user { 'u' } else { '-' });
        s.push(if self.exec_super { 'x' } else { '-' });
        s
    }
}

impl fmt::Display for PermMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

/// Access kinds the RMP distinguishes. The fetch variants are derived from
/// the CPL of the fetching context by the MMU.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AccessType {
    Read,
    Write,
    FetchUser,
    FetchSuper,
}

impl AccessType {
    pub const ALL: [AccessType; 4] = [AccessType::Read, AccessType::Write, AccessType::FetchUser, AccessType::FetchSuper];

    pub fn name(self) -> &'static str {
        match self {
            AccessType::Read => "read",
            AccessType::Write => "write",
            AccessType::FetchUser => "fetch_user",
            AccessType::FetchSuper => "fetch_super",
        }
    }
}

impl fmt::Display for AccessType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GuestId(pub u32);

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Owner {
    Unassigned,
    Guest(GuestId),
    /// Hypervisor-shared page, e.g. the forwarding page.
    Shared,
}

impl fmt::Display for Owner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Owner::Unassigned => f.write_str("unassigned"),
            Owner::Guest(g) => write!(f, "guest{}", g.0),
            Owner::Shared => f.write_str("shared"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RmpEntry {
    pub pfn: Pfn,
    pub owner: Owner,
    perms: [PermMask; VmplLevel::COUNT],
}

impl RmpEntry {
    fn unassigned(pfn: Pfn) -> Self {
        RmpEntry { pfn, owner: Owner::Unassigned, perms: [PermMask::EMPTY; 4] }
    }

    pub fn perms(&self, vmpl: VmplLevel) -> PermMask {
        self.perms[vmpl.index()]
    }

    pub fn is_assigned(&self) -> bool {
        matches!(self.owner, Owner::Guest(_))
    }
}

/// Denied RMP access. Returned as a value, not raised.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RmpViolation {
    pub pfn: Pfn,
    pub vmpl: VmplLevel,
    pub access: AccessType,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RmpError {
    #[error("pfn {0} is outside physical memory")]
    OutOfBounds(Pfn),
    #[error("pfn {0} is already assigned")]
    AlreadyAssigned(Pfn),
    #[error("pfn {0} is not assigned")]
    NotAssigned(Pfn),
    #[error("VMPL{requestor} may not set VMPL{target} permissions on pfn {pfn}")]
    PrivilegeViolation { pfn: Pfn, requestor: VmplLevel, target: VmplLevel },
    #[error("VMPL0 permissions are immutable (pfn {0})")]
    Vmpl0Immutable(Pfn),
    #[error("pfn {0} carries no delegation for VMPL{1}")]
    NotDelegated(Pfn, VmplLevel),
    #[error("invalid VMPL {0}")]
    BadVmpl(u8),
}

/// Standing authority for a lower VMPL to set its own mask on a page, within `cap`.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Delegation {
    pub vmpl: VmplLevel,
    pub cap: PermMask,
}

#[derive(Clone, Debug)]
pub struct Rmp {
    guest: GuestId,
    entries: Vec<RmpEntry>,
    delegations: BTreeMap<Pfn, Delegation>,
}

impl Rmp {
    /// Empty table for `page_count` pages, checked on behalf of `guest`.
    pub fn new(page_count: u64, guest: GuestId) -> Self {
        Rmp {
            guest,
            entries: (0..page_count).map(|p| RmpEntry::unassigned(Pfn(p))).collect(),
            delegations: BTreeMap::new(),
        }
    }

    pub fn page_count(&self) -> u64 {
        self.entries.len() as u64
    }

    pub fn guest(&self) -> GuestId {
        self.guest
    }

    pub fn entry(&self, pfn: Pfn) -> Option<&RmpEntry> {
        self.entries.get(pfn.0 as usize)
    }

    fn entry_mut(&mut self, pfn: Pfn) -> Result<&mut RmpEntry, RmpError> {
        self.entries.get_mut(pfn.0 as usize).ok_or(RmpError::OutOfBounds(pfn))
    }

    pub fn perms(&self, pfn: Pfn, vmpl: VmplLevel) -> PermMask {
        self.entry(pfn).map(|e| e.perms(vmpl)).unwrap_or(PermMask::EMPTY)
    }

    pub fn assign(&mut self, pfn: Pfn, owner: GuestId) -> Result<&RmpEntry, RmpError> {
        let e = self.entry_mut(pfn)?;
        if e.owner != Owner::Unassigned {
            return Err(RmpError::AlreadyAssigned(pfn));
        }
        e.owner = Owner::Guest(owner);
        e.perms = [PermMask::FULL, PermMask::EMPTY, PermMask::EMPTY, PermMask::EMPTY];
        Ok(&self.entries[pfn.0 as usize])
    }

    /// Replace `target`'s mask on `pfn` with `mask`.
    pub fn set_permissions(&mut self, requestor: VmplLevel, pfn: Pfn, target: VmplLevel, mask: PermMask) -> Result<(), RmpError> {
        let e = self.entry_mut(pfn)?;
        if !e.is_assigned() {
            return Err(RmpError::NotAssigned(pfn));
        }
        if target == VmplLevel::VMPL0 {
            return Err(RmpError::Vmpl0Immutable(pfn));
        }
        if !requestor.is_more_privileged_than(target) || !mask.is_subset_of(e.perms(requestor)) {
            return Err(RmpError::PrivilegeViolation { pfn, requestor, target });
        }
        e.perms[target.index()] = mask;
        Ok(())
    }

    pub fn check(&self, pfn: Pfn, vmpl: VmplLevel, access: AccessType) -> Result<(), RmpViolation> {
        let deny = RmpViolation { pfn, vmpl, access };
        let Some(e) = self.entry(pfn) else { return Err(deny) };
        let ok = match e.owner {
            Owner::Guest(g) => g == self.guest && e.perms(vmpl).allows(access),
            Owner::Shared => matches!(access, AccessType::Read | AccessType::Write),
            Owner::Unassigned => false,
        };
        if ok {
            Ok(())
        } else {
            Err(deny)
        }
    }

    pub fn revoke(&mut self, pfn: Pfn) -> Result<(), RmpError> {
        let e = self.entry_mut(pfn)?;
        if !e.is_assigned() {
            return Err(RmpError::NotAssigned(pfn));
        }
        *e = RmpEntry::unassigned(pfn);
        self.delegations.remove(&pfn);
        Ok(())
    }

    /// Move an unassigned page into the shared class.
    pub fn share(&mut self, pfn: Pfn) -> Result<(), RmpError> {
        let e = self.entry_mut(pfn)?;
        if e.owner != Owner::Unassigned {
            return Err(RmpError::AlreadyAssigned(pfn));
        }
        e.owner = Owner::Shared;
        Ok(())
    }

    pub fn unshare(&mut self, pfn: Pfn) -> Result<(), RmpError> {
        let e = self.entry_mut(pfn)?;
        if e.owner != Owner::Shared {
            return Err(RmpError::NotAssigned(pfn));
        }
        e.owner = Owner::Unassigned;
        Ok(())
    }

    /// VMPL0 authorises `vmpl` to manage its own mask on `pfn` up to `cap`.
    pub fn delegate(&mut self, pfn: Pfn, vmpl: VmplLevel, cap: PermMask) -> Result<(), RmpError> {
        let e = self.entry_mut(pfn)?;
        if !e.is_assigned() {
            return Err(RmpError::NotAssigned(pfn));
        }
        if vmpl == VmplLevel::VMPL0 {
            return Err(RmpError::Vmpl0Immutable(pfn));
        }
        self.delegations.insert(pfn, Delegation { vmpl, cap });
        Ok(())
    }

    pub fn undelegate(&mut self, pfn: Pfn) -> Option<Delegation> {
        self.delegations.remove(&pfn)
    }

    pub fn delegation(&self, pfn: Pfn) -> Option<Delegation> {
        self.delegations.get(&pfn).copied()
    }

    /// Mask update issued by the delegate itself.
    pub fn set_delegated(&mut self, pfn: Pfn, vmpl: VmplLevel, mask: PermMask) -> Result<(), RmpError> {
        match self.delegations.get(&pfn) {
            Some(d) if d.vmpl == vmpl => {
                if !mask.is_subset_of(d.cap) {
                    return Err(RmpError::PrivilegeViolation { pfn, requestor: vmpl, target: vmpl });
                }
            }
            _ => return Err(RmpError::NotDelegated(pfn, vmpl)),
        }
        self.set_permissions(VmplLevel::VMPL0, pfn, vmpl, mask)
    }

    /// One line per non-unassigned page: `pfn owner vmpl0 vmpl1 vmpl2 vmpl3`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for e in self.entries.iter().filter(|e| e.owner != Owner::Unassigned) {
            let _ = write!(out, "{} {}", e.pfn.0, e.owner);
            for m in e.perms {
                let _ = write!(out, " {}", m.render());
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const G: GuestId = GuestId(1);

    fn table() -> Rmp {
        Rmp::new(16, G)
    }

    #[test]
    fn assign_is_deny_by_default() {
        let mut rmp = table();
        let e = rmp.assign(Pfn(7), G).unwrap().clone();
        assert_eq!(e.owner, Owner::Guest(G));
        assert_eq!(e.perms(VmplLevel::VMPL0), PermMask::FULL);
        for v in VmplLevel::lower() {
            assert_eq!(e.perms(v), PermMask::EMPTY);
            for a in AccessType::ALL {
                assert!(rmp.check(Pfn(7), v, a).is_err());
            }
        }
    }

    #[test]
    fn assign_errors() {
        let mut rmp = table();
        rmp.assign(Pfn(7), G).unwrap();
        assert_eq!(rmp.assign(Pfn(7), G).unwrap_err(), RmpError::AlreadyAssigned(Pfn(7)));
        assert_eq!(rmp.assign(Pfn(16), G).unwrap_err(), RmpError::OutOfBounds(Pfn(16)));
    }

    #[test]
    fn exec_only_grant() {
        let mut rmp = table();
        rmp.assign(Pfn(7), G).unwrap();
        rmp.set_permissions(VmplLevel::VMPL0, Pfn(7), VmplLevel::VMPL1, PermMask::EXEC_USER).unwrap();
        assert!(rmp.check(Pfn(7), VmplLevel::VMPL1, AccessType::FetchUser).is_ok());
        assert_eq!(
            rmp.check(Pfn(7), VmplLevel::VMPL1, AccessType::Read),
            Err(RmpViolation { pfn: Pfn(7), vmpl: VmplLevel::VMPL1, access: AccessType::Read })
        );
    }

    #[test]
    fn set_permissions_replaces() {
        let mut rmp = table();
        rmp.assign(Pfn(3), G).unwrap();
        rmp.set_permissions(VmplLevel::VMPL0, Pfn(3), VmplLevel::VMPL2, PermMask::READ_WRITE).unwrap();
        rmp.set_permissions(VmplLevel::VMPL0, Pfn(3), VmplLevel::VMPL2, PermMask::EXEC_SUPER).unwrap();
        assert_eq!(rmp.perms(Pfn(3), VmplLevel::VMPL2), PermMask::EXEC_SUPER);
    }

    #[test]
    fn self_escalation_and_vmpl0() {
        let mut rmp = table();
        rmp.assign(Pfn(7), G).unwrap();
        assert!(matches!(
            rmp.set_permissions(VmplLevel::VMPL1, Pfn(7), VmplLevel::VMPL1, PermMask::READ),
            Err(RmpError::PrivilegeViolation { .. })
        ));
        assert_eq!(
            rmp.set_permissions(VmplLevel::VMPL0, Pfn(7), VmplLevel::VMPL0, PermMask::EMPTY),
            Err(RmpError::Vmpl0Immutable(Pfn(7)))
        );
        assert_eq!(
            rmp.set_permissions(VmplLevel::VMPL0, Pfn(8), VmplLevel::VMPL1, PermMask::READ),
            Err(RmpError::NotAssigned(Pfn(8)))
        );
    }

    /// Enumerates every (held, requested) pair: a grant succeeds iff requested is a subset of held.
    #[test]
    fn grant_subset_rule_exhaustive() {
        for held in 0u8..16 {
            for requested in 0u8..16 {
                let mut rmp = table();
                rmp.assign(Pfn(1), G).unwrap();
                rmp.set_permissions(VmplLevel::VMPL0, Pfn(1), VmplLevel::VMPL1, PermMask::from_bits(held)).unwrap();
                let r = rmp.set_permissions(VmplLevel::VMPL1, Pfn(1), VmplLevel::VMPL2, PermMask::from_bits(requested));
                let expect_ok = requested & !held == 0;
                assert_eq!(r.is_ok(), expect_ok, "held={held:04b} requested={requested:04b}");
            }
        }
        let mut rmp = table();
        rmp.assign(Pfn(1), G).unwrap();
        rmp.set_permissions(VmplLevel::VMPL0, Pfn(1), VmplLevel::VMPL1, PermMask::READ).unwrap();
        assert!(matches!(
            rmp.set_permissions(VmplLevel::VMPL1, Pfn(1), VmplLevel::VMPL2, PermMask::READ_WRITE),
            Err(RmpError::PrivilegeViolation { .. })
        ));
    }

    #[test]
    fn revoke_lifecycle() {
        let mut rmp = table();
        rmp.assign(Pfn(7), G).unwrap();
        rmp.revoke(Pfn(7)).unwrap();
        assert!(rmp.check(Pfn(7), VmplLevel::VMPL0, AccessType::Read).is_err());
        assert_eq!(rmp.revoke(Pfn(7)), Err(RmpError::NotAssigned(Pfn(7))));
        rmp.assign(Pfn(7), GuestId(9)).unwrap();
        // owned by another guest: this table checks on behalf of G
        assert!(rmp.check(Pfn(7), VmplLevel::VMPL0, AccessType::Read).is_err());
    }

    #[test]
    fn shared_page_bypasses_masks() {
        let mut rmp = table();
        rmp.share(Pfn(2)).unwrap();
        for v in VmplLevel::all() {
            assert!(rmp.check(Pfn(2), v, AccessType::Read).is_ok());
            assert!(rmp.check(Pfn(2), v, AccessType::Write).is_ok());
            assert!(rmp.check(Pfn(2), v, AccessType::FetchUser).is_err());
        }
        rmp.unshare(Pfn(2)).unwrap();
        assert!(rmp.check(Pfn(2), VmplLevel::VMPL1, AccessType::Read).is_err());
    }

    #[test]
    fn delegated_updates_are_capped() {
        let mut rmp = table();
        rmp.assign(Pfn(4), G).unwrap();
        assert!(matches!(rmp.set_delegated(Pfn(4), VmplLevel::VMPL1, PermMask::READ), Err(RmpError::NotDelegated(..))));
        rmp.delegate(Pfn(4), VmplLevel::VMPL1, PermMask::READ_WRITE).unwrap();
        rmp.set_delegated(Pfn(4), VmplLevel::VMPL1, PermMask::READ_WRITE).unwrap();
        assert!(rmp.check(Pfn(4), VmplLevel::VMPL1, AccessType::Write).is_ok());
        assert!(rmp.set_delegated(Pfn(4), VmplLevel::VMPL1, PermMask::FULL).is_err());
        assert!(rmp.set_delegated(Pfn(4), VmplLevel::VMPL2, PermMask::READ).is_err());
    }

    #[test]
    fn dump_format() {
        let mut rmp = table();
        rmp.assign(Pfn(7), G).unwrap();
        rmp.set_permissions(VmplLevel::VMPL0, Pfn(7), VmplLevel::VMPL1, PermMask::EXEC_USER).unwrap();
        rmp.share(Pfn(9)).unwrap();
        assert_eq!(rmp.dump(), "7 guest1 rwux --u- ---- ----\n9 shared ---- ---- ---- ----\n");
    }

    #[test]
    fn bad_vmpl() {
        assert_eq!(VmplLevel::new(4), Err(RmpError::BadVmpl(4)));
        assert!(VmplLevel::VMPL0.is_more_privileged_than(VmplLevel::VMPL3));
        assert!(!VmplLevel::VMPL2.is_more_privileged_than(VmplLevel::VMPL2));
    }
}
