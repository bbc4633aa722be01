// SPDX-License-Identifier: Apache-2.0

//! The simulator's event log.
//!
//! One record per line: `seq  kind  vcpu  vmpl  detail…`, fields separated
//! by two spaces, detail as space-separated `key=value` pairs. The format is
//! stable and every report count is derived from it.

use std::fmt::{self, Write as _};

use crate::mmu::FaultKind;
use crate::rmp::{PermMask, VmplLevel};
use crate::syscalls;
use crate::types::{Cpl, Pfn, Pid, Tid};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum SwitchReason {
    /// Channel registration round trip.
    Boot,
    /// Initial entry into the lower VMPL.
    Enter,
    /// Synchronous forwarding of a syscall or exception.
    Forward,
    /// Return to VMPL0 on thread termination.
    Exit,
    /// Scheduler resuming a thread after preemption.
    Schedule,
}

impl SwitchReason {
    pub fn name(self) -> &'static str {
        match self {
            SwitchReason::Boot => "boot",
            SwitchReason::Enter => "enter",
            SwitchReason::Forward => "forward",
            SwitchReason::Exit => "exit",
            SwitchReason::Schedule => "schedule",
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum Route {
    SelfHandled,
    Denied,
    Sync,
    Async,
    Vdso,
}

impl Route {
    pub fn name(self) -> &'static str {
        match self {
            Route::SelfHandled => "self",
            Route::Denied => "deny",
            Route::Sync => "sync",
            Route::Async => "async",
            Route::Vdso => "vdso",
        }
    }

    pub fn is_forward(self) -> bool {
        matches!(self, Route::Sync | Route::Async)
    }
}

/// Which forwarding channel carried a synchronous request.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum Channel {
    Msr,
    Ghcb,
    None,
}

impl Channel {
    pub fn name(self) -> &'static str {
        match self {
            Channel::Msr => "msr",
            Channel::Ghcb => "ghcb",
            Channel::None => "-",
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum TrapTag {
    Syscall(u64),
    PageFault(FaultKind),
    Breakpoint,
    Timer,
    HwBreakpoint,
}

impl fmt::Display for TrapTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrapTag::Syscall(nr) => write!(f, "syscall nr={}", syscalls::name(*nr)),
            TrapTag::PageFault(k) => write!(f, "page_fault fault={k}"),
            TrapTag::Breakpoint => f.write_str("breakpoint"),
            TrapTag::Timer => f.write_str("debug reason=timer"),
            TrapTag::HwBreakpoint => f.write_str("debug reason=hw_breakpoint"),
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum FaultRoute {
    Resolved,
    Forwarded,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum FaultOutcome {
    Mapped,
    Cow,
    Refill,
    SegV,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum ExceptionKind {
    Breakpoint,
    Timer,
    HwBreakpoint,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum GrantReason {
    Init,
    Policy,
    Interpose,
    Notify,
    Fault,
    Prefault,
    Pool,
    Permissive,
    Revoke,
}

impl GrantReason {
    pub fn name(self) -> &'static str {
        match self {
            GrantReason::Init => "init",
            GrantReason::Policy => "policy",
            GrantReason::Interpose => "interpose",
            GrantReason::Notify => "notify",
            GrantReason::Fault => "fault",
            GrantReason::Prefault => "prefault",
            GrantReason::Pool => "pool",
            GrantReason::Permissive => "permissive",
            GrantReason::Revoke => "revoke",
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum TcbStateTag {
    Created,
    Entered,
    Exited,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EventKind {
    VmplSwitch { from: VmplLevel, to: VmplLevel, reason: SwitchReason },
    Trap { tid: Tid, cause: TrapTag, ip: u64, va: Option<u64> },
    SyscallTrace { tid: Tid, nr: u64 },
    SyscallRoute { tid: Tid, nr: u64, route: Route, channel: Channel, ret: i64 },
    GuestSyscall { tid: Tid, nr: u64, ret: i64 },
    FaultRoute { tid: Tid, va: u64, kind: FaultKind, route: FaultRoute, cpl: Cpl },
    GuestFault { tid: Tid, va: u64, kind: FaultKind, outcome: FaultOutcome },
    ExceptionRoute { tid: Tid, kind: ExceptionKind, route: FaultRoute },
    Grant { pfn: Pfn, vmpl: VmplLevel, mask: PermMask, reason: GrantReason },
    TcbState { tid: Tid, state: TcbStateTag },
    VmsaSync { tid: Tid },
    VmsaSave { tid: Tid },
    VmsaRestore { tid: Tid },
    ChannelBoot { pid: Pid },
    HotcallRequest { tid: Tid, nr: u64 },
    HotcallServe { nr: u64, ret: i64 },
    HotcallResponse { tid: Tid, ret: i64, spins: u32 },
    PoolGrant { pid: Pid, pages: u64, refill: bool },
    TraceHit { tid: Tid, hook: u32, ip: u64, ret_reg: u64 },
    SegV { tid: Tid, va: u64 },
    ThreadExit { tid: Tid, code: i64 },
    ProcessRelease { pid: Pid, pages: u64 },
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::VmplSwitch { .. } => "VmplSwitch",
            EventKind::Trap { .. } => "Trap",
            EventKind::SyscallTrace { .. } => "SyscallTrace",
            EventKind::SyscallRoute { .. } => "SyscallRoute",
            EventKind::GuestSyscall { .. } => "GuestSyscall",
            EventKind::FaultRoute { .. } => "FaultRoute",
            EventKind::GuestFault { .. } => "GuestFault",
            EventKind::ExceptionRoute { .. } => "ExceptionRoute",
            EventKind::Grant { .. } => "Grant",
            EventKind::TcbState { .. } => "TcbState",
            EventKind::VmsaSync { .. } => "VmsaSync",
            EventKind::VmsaSave { .. } => "VmsaSave",
            EventKind::VmsaRestore { .. } => "VmsaRestore",
            EventKind::ChannelBoot { .. } => "ChannelBoot",
            EventKind::HotcallRequest { .. } => "HotcallRequest",
            EventKind::HotcallServe { .. } => "HotcallServe",
            EventKind::HotcallResponse { .. } => "HotcallResponse",
            EventKind::PoolGrant { .. } => "PoolGrant",
            EventKind::TraceHit { .. } => "TraceHit",
            EventKind::SegV { .. } => "SegV",
            EventKind::ThreadExit { .. } => "ThreadExit",
            EventKind::ProcessRelease { .. } => "ProcessRelease",
        }
    }

    /// Thread the record refers to, if any.
    pub fn tid(&self) -> Option<Tid> {
        use EventKind::*;
        match self {
            Trap { tid, .. }
            | SyscallTrace { tid, .. }
            | SyscallRoute { tid, .. }
            | GuestSyscall { tid, .. }
            | FaultRoute { tid, .. }
            | GuestFault { tid, .. }
            | ExceptionRoute { tid, .. }
            | TcbState { tid, .. }
            | VmsaSync { tid }
            | VmsaSave { tid }
            | VmsaRestore { tid }
            | HotcallRequest { tid, .. }
            | HotcallResponse { tid, .. }
            | TraceHit { tid, .. }
            | SegV { tid, .. }
            | ThreadExit { tid, .. } => Some(*tid),
            _ => None,
        }
    }

    fn write_detail(&self, out: &mut String) {
        use EventKind::*;
        let sys = syscalls::name;
        let _ = match self {
            VmplSwitch { from, to, reason } => write!(out, "from={from} to={to} reason={}", reason.name()),
            Trap { tid, cause, ip, va } => {
                let _ = write!(out, "tid={tid} cause={cause} ip={ip:#x}");
                match va {
                    Some(va) => write!(out, " va={va:#x}"),
                    None => Ok(()),
                }
            }
            SyscallTrace { tid, nr } => write!(out, "tid={tid} nr={}", sys(*nr)),
            SyscallRoute { tid, nr, route, channel, ret } => {
                write!(out, "tid={tid} nr={} route={} channel={} ret={ret}", sys(*nr), route.name(), channel.name())
            }
            GuestSyscall { tid, nr, ret } => write!(out, "tid={tid} nr={} ret={ret}", sys(*nr)),
            FaultRoute { tid, va, kind, route, cpl } => {
                let r = match route {
                    self::FaultRoute::Resolved => "resolved",
                    self::FaultRoute::Forwarded => "forwarded",
                };
                write!(out, "tid={tid} va={va:#x} fault={kind} route={r} cpl={cpl}")
            }
            GuestFault { tid, va, kind, outcome } => {
                let o = match outcome {
                    FaultOutcome::Mapped => "mapped",
                    FaultOutcome::Cow => "cow",
                    FaultOutcome::Refill => "refill",
                    FaultOutcome::SegV => "segv",
                };
                write!(out, "tid={tid} va={va:#x} fault={kind} outcome={o}")
            }
            ExceptionRoute { tid, kind, route } => {
                let k = match kind {
                    ExceptionKind::Breakpoint => "breakpoint",
                    ExceptionKind::Timer => "timer",
                    ExceptionKind::HwBreakpoint => "hw_breakpoint",
                };
                let r = match route {
                    self::FaultRoute::Resolved => "local",
                    self::FaultRoute::Forwarded => "forwarded",
                };
                write!(out, "tid={tid} exception={k} route={r}")
            }
            Grant { pfn, vmpl, mask, reason } => write!(out, "pfn={pfn} vmpl={vmpl} mask={mask} reason={}", reason.name()),
            TcbState { tid, state } => {
                let s = match state {
                    TcbStateTag::Created => "created",
                    TcbStateTag::Entered => "entered",
                    TcbStateTag::Exited => "exited",
                };
                write!(out, "tid={tid} state={s}")
            }
            VmsaSync { tid } | VmsaSave { tid } | VmsaRestore { tid } => write!(out, "tid={tid}"),
            ChannelBoot { pid } => write!(out, "pid={pid} channel=ghcb"),
            HotcallRequest { tid, nr } => write!(out, "tid={tid} nr={}", sys(*nr)),
            HotcallServe { nr, ret } => write!(out, "nr={} ret={ret}", sys(*nr)),
            HotcallResponse { tid, ret, spins } => write!(out, "tid={tid} ret={ret} spins={spins}"),
            PoolGrant { pid, pages, refill } => write!(out, "pid={pid} pages={pages} refill={refill}"),
            TraceHit { tid, hook, ip, ret_reg } => write!(out, "tid={tid} hook={hook} ip={ip:#x} r0={ret_reg:#x}"),
            SegV { tid, va } => write!(out, "tid={tid} va={va:#x}"),
            ThreadExit { tid, code } => write!(out, "tid={tid} code={code}"),
            ProcessRelease { pid, pages } => write!(out, "pid={pid} pages={pages}"),
        };
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Event {
    pub seq: u64,
    pub vcpu: u32,
    pub vmpl: VmplLevel,
    pub kind: EventKind,
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut detail = String::new();
        self.kind.write_detail(&mut detail);
        write!(f, "{}  {}  {}  {}  {}", self.seq, self.kind.name(), self.vcpu, self.vmpl, detail)
    }
}

/// Append-only log. Records are stamped with the current site (vCPU, VMPL).
#[derive(Clone, Debug, Default)]
pub struct EventLog {
    events: Vec<Event>,
    vcpu: u32,
    vmpl: VmplLevel,
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_site(&mut self, vcpu: u32, vmpl: VmplLevel) {
        self.vcpu = vcpu;
        self.vmpl = vmpl;
    }

    pub fn site(&self) -> (u32, VmplLevel) {
        (self.vcpu, self.vmpl)
    }

    pub fn set_vmpl(&mut self, vmpl: VmplLevel) {
        self.vmpl = vmpl;
    }

    pub fn push(&mut self, kind: EventKind) {
        let seq = self.events.len() as u64;
        self.events.push(Event { seq, vcpu: self.vcpu, vmpl: self.vmpl, kind });
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn count(&self, pred: impl Fn(&EventKind) -> bool) -> u64 {
        self.events.iter().filter(|e| pred(&e.kind)).count() as u64
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            let _ = writeln!(out, "{e}");
        }
        out
    }
}
