// SPDX-License-Identifier: Apache-2.0

//! Execute-only memory and cross-layer execution restriction, expressed as
//! RMP masks at a lower VMPL.

use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mmu::{Access, AddressSpace, FaultKind, VmaKind, VmaOwner};
use crate::rmp::{PermMask, Rmp, RmpError, VmplLevel};
use crate::types::{Cpl, Pfn, VaRange};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecLevel {
    UserOnly,
    SuperOnly,
}

impl ExecLevel {
    pub fn mask(self) -> PermMask {
        match self {
            ExecLevel::UserOnly => PermMask::EXEC_USER,
            ExecLevel::SuperOnly => PermMask::EXEC_SUPER,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct XomPolicy {
    pub region: VaRange,
    pub exec_level: ExecLevel,
    pub target_vmpl: VmplLevel,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum XomError {
    #[error("{0} is not page aligned")]
    Misaligned(VaRange),
    #[error("{0:#x} is not inside a code VMA")]
    NotCodeVma(u64),
    #[error("code page {0:#x} is not mapped")]
    NotMapped(u64),
    #[error(transparent)]
    Rmp(#[from] RmpError),
}

/// Install exec-only masks over a code region. Returns the (frame, mask)
/// pairs written, which the caller must treat as pinned policy.
pub fn apply_xom(rmp: &mut Rmp, space: &AddressSpace, policy: &XomPolicy) -> Result<Vec<(Pfn, PermMask)>, XomError> {
    if !policy.region.is_page_aligned() || policy.region.is_empty() {
        return Err(XomError::Misaligned(policy.region));
    }
    let mut frames = Vec::new();
    for va in policy.region.page_addrs() {
        if space.vma_at(va).map(|v| v.kind) != Some(VmaKind::Code) {
            return Err(XomError::NotCodeVma(va));
        }
        let pte = space.pte(va).ok_or(XomError::NotMapped(va))?;
        frames.push(pte.pfn);
    }
    let mask = policy.exec_level.mask();
    for pfn in &frames {
        rmp.set_permissions(VmplLevel::VMPL0, *pfn, policy.target_vmpl, mask)?;
    }
    Ok(frames.into_iter().map(|p| (p, mask)).collect())
}

/// Proxy code executes only in supervisor mode, application code only in
/// user mode.
pub fn apply_cross_layer(rmp: &mut Rmp, space: &AddressSpace, vmpl: VmplLevel) -> Result<Vec<(Pfn, PermMask)>, XomError> {
    let mut out = Vec::new();
    let code: Vec<_> = space.vmas().filter(|v| v.kind == VmaKind::Code).copied().collect();
    for vma in code {
        let level = match vma.owner {
            VmaOwner::Proxy => ExecLevel::SuperOnly,
            VmaOwner::Guest => ExecLevel::UserOnly,
        };
        for (_, pte) in space.walk_region(vma.range).unwrap_or_default() {
            rmp.set_permissions(VmplLevel::VMPL0, pte.pfn, vmpl, level.mask())?;
            out.push((pte.pfn, level.mask()));
        }
    }
    Ok(out)
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeOutcome {
    Allow,
    Deny(FaultKind),
}

impl fmt::Display for ProbeOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProbeOutcome::Allow => f.write_str("allow"),
            ProbeOutcome::Deny(k) => write!(f, "deny:{k}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub va: u64,
    pub pfn: Option<Pfn>,
    /// read, write, fetch at CPL3, fetch at CPL0
    pub outcomes: [ProbeOutcome; 4],
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub vmpl: VmplLevel,
    pub rows: Vec<ProbeRow>,
}

pub const PROBES: [(Access, Cpl); 4] =
    [(Access::Read, Cpl::User), (Access::Write, Cpl::User), (Access::Execute, Cpl::User), (Access::Execute, Cpl::Super)];

/// Try each access type on every page of `region` through the full nested
/// walk. Read-only.
pub fn probe_xom(rmp: &Rmp, space: &AddressSpace, region: VaRange, vmpl: VmplLevel) -> Result<ProbeReport, XomError> {
    if !region.is_page_aligned() {
        return Err(XomError::Misaligned(region));
    }
    let rows = region
        .page_addrs()
        .map(|va| {
            let outcomes = PROBES.map(|(access, cpl)| match space.translate_and_check(rmp, va, access, cpl, vmpl) {
                Ok(_) => ProbeOutcome::Allow,
                Err(f) => ProbeOutcome::Deny(f.kind),
            });
            ProbeRow { va, pfn: space.pte(va).map(|p| p.pfn), outcomes }
        })
        .collect();
    Ok(ProbeReport { vmpl, rows })
}

impl ProbeReport {
    pub fn render(&self) -> String {
        let mut s = format!("# vmpl={}\n{:<18}{:<8}{:<22}{:<22}{:<22}{}\n", self.vmpl, "page", "pfn", "read", "write", "fetch_user", "fetch_super");
        for row in &self.rows {
            let pfn = row.pfn.map_or_else(|| "-".to_string(), |p| p.to_string());
            let _ = write!(s, "{:<18}{:<8}", format!("{:#x}", row.va), pfn);
            for (i, o) in row.outcomes.iter().enumerate() {
                if i == 3 {
                    let _ = writeln!(s, "{o}");
                } else {
                    let _ = write!(s, "{:<22}", o.to_string());
                }
            }
        }
        s
    }
}
