// SPDX-License-Identifier: Apache-2.0

//! Cycle cost model applied to route counts.
//!
//! Costs are per handled event and already include whatever VMPL switches
//! the route implies. Lifecycle switches (boot, enter, exit, schedule) are
//! charged to a separate setup bucket so route totals compare like for like.

use serde::{Deserialize, Serialize};

use crate::report::RunReport;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModel {
    pub native_syscall: u64,
    pub ghcb_forward: u64,
    /// Forward before the shared page is registered.
    pub msr_forward: u64,
    pub hotcall_forward: u64,
    pub vmpl_switch: u64,
    /// Page fault handled in the same privilege domain.
    pub pf_base: u64,
    /// Page fault at CPL0 of a lower VMPL, forwarded to VMPL0.
    pub pf_vmpl_super: u64,
    /// Page fault at CPL3 of a lower VMPL, forwarded to VMPL0.
    pub pf_vmpl_user: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            native_syscall: 800,
            ghcb_forward: 13_000,
            msr_forward: 26_000,
            hotcall_forward: 3_000,
            vmpl_switch: 5_000,
            pf_base: 13_026,
            pf_vmpl_super: 29_627,
            pf_vmpl_user: 29_936,
        }
    }
}

impl CostModel {
    /// Confined over baseline page-fault cost, for CPL0 and CPL3 faults.
    pub fn pf_ratios(&self) -> (f64, f64) {
        let base = self.pf_base.max(1) as f64;
        (self.pf_vmpl_super as f64 / base, self.pf_vmpl_user as f64 / base)
    }
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostBreakdown {
    /// Same events handled natively by an unconfined kernel.
    pub baseline: u64,
    pub confined: u64,
    pub setup: u64,
    pub baseline_pf: u64,
    pub confined_pf: u64,
}

/// Σ count × cost over the route counts of `report`.
pub fn cost_account(report: &RunReport, m: &CostModel) -> CostBreakdown {
    let r = &report.routes;
    let f = &report.fault_routes;
    let e = &report.exceptions;
    let syscalls = r.self_handled + r.denied + r.sync + r.r#async;
    let faults = f.resolved + f.forwarded_user + f.forwarded_super;
    let confined_pf = f.resolved * m.pf_base + f.forwarded_user * m.pf_vmpl_user + f.forwarded_super * m.pf_vmpl_super;
    let baseline_pf = faults * m.pf_base;
    let ghcb_sync = r.sync - report.sync_msr;
    let confined = (r.self_handled + r.denied + e.breakpoint_local) * m.native_syscall
        + ghcb_sync * m.ghcb_forward
        + report.sync_msr * m.msr_forward
        + r.r#async * m.hotcall_forward
        + (e.breakpoint_forwarded + e.hw_breakpoint + e.timer) * m.ghcb_forward
        + confined_pf;
    let baseline = (syscalls + e.breakpoint_local + e.breakpoint_forwarded + e.hw_breakpoint + e.timer) * m.native_syscall + baseline_pf;
    CostBreakdown { baseline, confined, setup: report.switches.lifecycle() * m.vmpl_switch, baseline_pf, confined_pf }
}
