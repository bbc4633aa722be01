// SPDX-License-Identifier: Apache-2.0

//! Run summaries. Every count is recomputed from the event log.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cost::{cost_account, CostBreakdown, CostModel};
use crate::event::{Channel, EventKind, EventLog, ExceptionKind, FaultRoute, GrantReason, Route, SwitchReason, TrapTag};
use crate::mmu::FaultKind;
use crate::types::Cpl;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouteCounts {
    pub self_handled: u64,
    pub denied: u64,
    pub sync: u64,
    pub r#async: u64,
    pub vdso: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwitchCounts {
    /// Switches caused by routing a trap to VMPL0 and back.
    pub forward: u64,
    pub boot: u64,
    pub enter: u64,
    pub exit: u64,
    pub schedule: u64,
}

impl SwitchCounts {
    pub fn lifecycle(&self) -> u64 {
        self.boot + self.enter + self.exit + self.schedule
    }

    pub fn total(&self) -> u64 {
        self.forward + self.lifecycle()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultCounts {
    pub not_present: u64,
    pub write_protection: u64,
    pub user_supervisor: u64,
    pub no_execute: u64,
    pub rmp_violation: u64,
}

impl FaultCounts {
    pub fn total(&self) -> u64 {
        self.not_present + self.write_protection + self.user_supervisor + self.no_execute + self.rmp_violation
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultRouteCounts {
    pub resolved: u64,
    pub forwarded_user: u64,
    pub forwarded_super: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExceptionCounts {
    pub breakpoint_local: u64,
    pub breakpoint_forwarded: u64,
    pub timer: u64,
    pub hw_breakpoint: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrantCounts {
    pub init: u64,
    pub policy: u64,
    pub interpose: u64,
    pub notify: u64,
    pub fault: u64,
    pub prefault: u64,
    pub pool: u64,
    pub permissive: u64,
    pub revoke: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReport {
    pub schema_version: u32,
    pub scenario: String,
    pub seed: u64,
    pub steps: u64,
    /// `completed` or `deadlock`.
    pub outcome: String,
    pub threads: u64,
    pub exited: u64,
    pub segv: u64,
    pub routes: RouteCounts,
    /// Sync forwards that used the MSR protocol.
    pub sync_msr: u64,
    /// Sync and async forwards per syscall name.
    pub forwarded_by_syscall: BTreeMap<String, u64>,
    pub guest_syscalls: u64,
    pub switches: SwitchCounts,
    pub faults: FaultCounts,
    pub fault_routes: FaultRouteCounts,
    pub exceptions: ExceptionCounts,
    pub grants: GrantCounts,
    pub pool_grants: u64,
    pub pool_refills: u64,
    pub trace_hits: u64,
    pub syscall_traces: u64,
    pub vmsa_saves: u64,
    pub vmsa_restores: u64,
    pub hotcall_spins: u64,
    pub cycles: CostBreakdown,
    pub event_log: Option<String>,
}

impl RunReport {
    /// Tally `log`. Metadata fields are left for the caller.
    pub fn from_log(log: &EventLog) -> Self {
        let mut r = RunReport { schema_version: SCHEMA_VERSION, outcome: "completed".into(), ..RunReport::default() };
        for e in log.events() {
            match &e.kind {
                EventKind::VmplSwitch { reason, .. } => match reason {
                    SwitchReason::Forward => r.switches.forward += 1,
                    SwitchReason::Boot => r.switches.boot += 1,
                    SwitchReason::Enter => r.switches.enter += 1,
                    SwitchReason::Exit => r.switches.exit += 1,
                    SwitchReason::Schedule => r.switches.schedule += 1,
                },
                EventKind::Trap { cause: TrapTag::PageFault(k), .. } => match k {
                    FaultKind::NotPresent => r.faults.not_present += 1,
                    FaultKind::WriteProtection => r.faults.write_protection += 1,
                    FaultKind::UserSupervisor => r.faults.user_supervisor += 1,
                    FaultKind::NoExecute => r.faults.no_execute += 1,
                    FaultKind::RmpViolation => r.faults.rmp_violation += 1,
                },
                EventKind::SyscallRoute { nr, route, channel, .. } => {
                    match route {
                        Route::SelfHandled => r.routes.self_handled += 1,
                        Route::Denied => r.routes.denied += 1,
                        Route::Sync => r.routes.sync += 1,
                        Route::Async => r.routes.r#async += 1,
                        Route::Vdso => r.routes.vdso += 1,
                    }
                    if *channel == Channel::Msr {
                        r.sync_msr += 1;
                    }
                    if route.is_forward() {
                        *r.forwarded_by_syscall.entry(crate::syscalls::name(*nr)).or_default() += 1;
                    }
                }
                EventKind::GuestSyscall { .. } => r.guest_syscalls += 1,
                EventKind::FaultRoute { route, cpl, .. } => match (route, cpl) {
                    (FaultRoute::Resolved, _) => r.fault_routes.resolved += 1,
                    (FaultRoute::Forwarded, Cpl::User) => r.fault_routes.forwarded_user += 1,
                    (FaultRoute::Forwarded, Cpl::Super) => r.fault_routes.forwarded_super += 1,
                },
                EventKind::ExceptionRoute { kind, route, .. } => match (kind, route) {
                    (ExceptionKind::Breakpoint, FaultRoute::Resolved) => r.exceptions.breakpoint_local += 1,
                    (ExceptionKind::Breakpoint, FaultRoute::Forwarded) => r.exceptions.breakpoint_forwarded += 1,
                    (ExceptionKind::Timer, _) => r.exceptions.timer += 1,
                    (ExceptionKind::HwBreakpoint, _) => r.exceptions.hw_breakpoint += 1,
                },
                EventKind::Grant { reason, .. } => {
                    let g = &mut r.grants;
                    *match reason {
                        GrantReason::Init => &mut g.init,
                        GrantReason::Policy => &mut g.policy,
                        GrantReason::Interpose => &mut g.interpose,
                        GrantReason::Notify => &mut g.notify,
                        GrantReason::Fault => &mut g.fault,
                        GrantReason::Prefault => &mut g.prefault,
                        GrantReason::Pool => &mut g.pool,
                        GrantReason::Permissive => &mut g.permissive,
                        GrantReason::Revoke => &mut g.revoke,
                    } += 1;
                }
                EventKind::TcbState { state: crate::event::TcbStateTag::Created, .. } => r.threads += 1,
                EventKind::ThreadExit { .. } => r.exited += 1,
                EventKind::SegV { .. } => r.segv += 1,
                EventKind::PoolGrant { refill, .. } => {
                    r.pool_grants += 1;
                    if *refill {
                        r.pool_refills += 1;
                    }
                }
                EventKind::TraceHit { .. } => r.trace_hits += 1,
                EventKind::SyscallTrace { .. } => r.syscall_traces += 1,
                EventKind::VmsaSave { .. } => r.vmsa_saves += 1,
                EventKind::VmsaRestore { .. } => r.vmsa_restores += 1,
                EventKind::HotcallResponse { spins, .. } => r.hotcall_spins += u64::from(*spins),
                _ => {}
            }
        }
        r
    }

    pub fn with_costs(mut self, model: &CostModel) -> Self {
        self.cycles = cost_account(&self, model);
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises") + "\n"
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let r = &self.routes;
        let w = &self.switches;
        let f = &self.faults;
        let fr = &self.fault_routes;
        let e = &self.exceptions;
        let g = &self.grants;
        let c = &self.cycles;
        let _ = writeln!(s, "scenario      {}", self.scenario);
        let _ = writeln!(s, "seed          {}", self.seed);
        let _ = writeln!(s, "steps         {}", self.steps);
        let _ = writeln!(s, "outcome       {}", self.outcome);
        let _ = writeln!(s, "threads       created={} exited={} segv={}", self.threads, self.exited, self.segv);
        let _ = writeln!(s, "routes        self={} deny={} sync={} async={} vdso={}", r.self_handled, r.denied, r.sync, r.r#async, r.vdso);
        let _ = writeln!(s, "sync_msr      {}", self.sync_msr);
        let fwd: Vec<String> = self.forwarded_by_syscall.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let _ = writeln!(s, "forwarded     {}", if fwd.is_empty() { "-".to_string() } else { fwd.join(" ") });
        let _ = writeln!(s, "guest_calls   {}", self.guest_syscalls);
        let _ = writeln!(
            s,
            "switches      forward={} boot={} enter={} exit={} schedule={} total={}",
            w.forward,
            w.boot,
            w.enter,
            w.exit,
            w.schedule,
            w.total()
        );
        let _ = writeln!(
            s,
            "faults        not_present={} write_protection={} user_supervisor={} no_execute={} rmp_violation={}",
            f.not_present, f.write_protection, f.user_supervisor, f.no_execute, f.rmp_violation
        );
        let _ = writeln!(s, "fault_routes  resolved={} forwarded_user={} forwarded_super={}", fr.resolved, fr.forwarded_user, fr.forwarded_super);
        let _ = writeln!(
            s,
            "exceptions    breakpoint_local={} breakpoint_forwarded={} timer={} hw_breakpoint={}",
            e.breakpoint_local, e.breakpoint_forwarded, e.timer, e.hw_breakpoint
        );
        let _ = writeln!(
            s,
            "grants        init={} policy={} interpose={} notify={} fault={} prefault={} pool={} permissive={} revoke={}",
            g.init, g.policy, g.interpose, g.notify, g.fault, g.prefault, g.pool, g.permissive, g.revoke
        );
        let _ = writeln!(s, "pool          grants={} refills={}", self.pool_grants, self.pool_refills);
        let _ = writeln!(s, "tracing       syscall={} breakpoint={}", self.syscall_traces, self.trace_hits);
        let _ = writeln!(s, "vmsa          save={} restore={}", self.vmsa_saves, self.vmsa_restores);
        let _ = writeln!(s, "hotcall_spins {}", self.hotcall_spins);
        let _ = writeln!(s, "cycles        baseline={} confined={} setup={}", c.baseline, c.confined, c.setup);
        let _ = writeln!(s, "event_log     {}", self.event_log.as_deref().unwrap_or("-"));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rmp::VmplLevel;

    #[test]
    fn empty_log_is_all_zero() {
        let r = RunReport::from_log(&EventLog::new()).with_costs(&CostModel::default());
        assert_eq!(r.routes, RouteCounts::default());
        assert_eq!(r.switches.total(), 0);
        assert_eq!(r.cycles, CostBreakdown::default());
        assert_eq!(r.schema_version, 1);
    }

    #[test]
    fn json_round_trip() {
        let mut log = EventLog::new();
        log.push(EventKind::VmplSwitch { from: VmplLevel::VMPL1, to: VmplLevel::VMPL0, reason: SwitchReason::Forward });
        log.push(EventKind::SyscallRoute { tid: 1, nr: 39, route: Route::Sync, channel: Channel::Ghcb, ret: 100 });
        let r = RunReport::from_log(&log).with_costs(&CostModel::default());
        assert_eq!(RunReport::from_json(&r.to_json()).unwrap(), r);
        assert!(r.to_text().lines().nth(5).unwrap().starts_with("routes        self=0 deny=0 sync=1"));
    }
}
