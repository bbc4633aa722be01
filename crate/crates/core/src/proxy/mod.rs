// SPDX-License-Identifier: Apache-2.0

//! The proxy-kernel: first handler for every trap raised at a lower VMPL.
//!
//! Each trap ends in exactly one routing record (`SyscallRoute`,
//! `FaultRoute` or `ExceptionRoute`). Forwarding to the guest costs a round
//! trip of VMPL switches; self-handling and denial cost none.

pub mod channel;
pub mod policy;
pub mod pool;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event::{Channel, EventKind, ExceptionKind, FaultRoute, GrantReason, Route, SwitchReason};
use crate::guest::layout::{PROXY_ANON_BASE, PROXY_ANON_CEIL, VDSO_VA};
use crate::guest::{FaultResolution, GuestOs, ProxyImage};
use crate::mmu::{covering_range, Access, Fault, FaultKind, Prot, Vma, VmaKind, VmaOwner};
use crate::platform::Platform;
use crate::rmp::{PermMask, VmplLevel};
use crate::syscalls::{self as sc, EINVAL};
use crate::types::{is_page_aligned, page_align_down, page_align_up, Cpl, Pid, Tid, VaRange, PAGE_SIZE};
use crate::vcpu::{DebugReason, SyscallRequest, TrapCause, TrapFrame, Vcpu, REG_RET};

use channel::{ChannelState, ForwardChannel, HotcallService, StepBudget};
use policy::{Action, FilterPolicy};
use pool::SelfMemPool;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProxyError {
    #[error("step budget of {0} exhausted while waiting for a hotcall response")]
    Deadlock(u64),
    #[error("hotcall slot is busy")]
    SlotBusy,
    #[error("forwarding channel already registered")]
    AlreadyRegistered,
    #[error("VMPL switch refused: {0}")]
    Switch(String),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum VmSyscallError {
    /// The pool cannot cover the request; forward instead.
    Overflow,
    /// Not a proxy-owned anonymous mapping; forward instead.
    BadAddress,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum SyscallDisposition {
    Resume(i64),
    Exited,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum FaultDisposition {
    Retry,
    Killed,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ExceptionDisposition {
    Advance,
    Retry,
    /// The vCPU was left at VMPL0 for the scheduler.
    Preempt,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProxyConfig {
    pub async_enabled: bool,
    pub forward_breakpoints: bool,
    /// One hook per entry; `None` fires on every breakpoint.
    pub trace_hooks: Vec<Option<BTreeSet<u64>>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceRecord {
    pub tid: Tid,
    pub ip: u64,
    pub regs: [u64; crate::vcpu::NUM_REGS],
}

#[derive(Clone, Debug)]
pub struct TraceHook {
    pub id: u32,
    pub addrs: Option<BTreeSet<u64>>,
    pub hits: Vec<TraceRecord>,
}

/// Mutable state a routing decision may touch.
pub struct RouteCtx<'a> {
    pub platform: &'a mut Platform,
    pub os: &'a mut GuestOs,
    pub vcpu: &'a mut Vcpu,
    pub service: &'a mut HotcallService,
    pub budget: &'a mut StepBudget,
}

impl RouteCtx<'_> {
    fn switch(&mut self, to: VmplLevel, reason: SwitchReason) -> Result<(), ProxyError> {
        self.vcpu.vmpl_switch(to, reason, &mut self.platform.log).map_err(|e| ProxyError::Switch(e.to_string()))
    }

    fn log(&mut self, kind: EventKind) {
        self.platform.log.set_site(self.vcpu.id, self.vcpu.current());
        self.platform.log.push(kind);
    }
}

#[derive(Clone, Debug)]
pub struct ProxyKernel {
    pub pid: Pid,
    pub vmpl: VmplLevel,
    pub channel: ForwardChannel,
    pub policy: FilterPolicy,
    pub pool: SelfMemPool,
    pub hooks: Vec<TraceHook>,
    pub config: ProxyConfig,
    pub code: VaRange,
}

fn is_exit(nr: u64) -> bool {
    nr == sc::EXIT || nr == sc::EXIT_GROUP
}

impl ProxyKernel {
    pub fn new(image: &ProxyImage, capacity: u64, policy: FilterPolicy, config: ProxyConfig) -> Self {
        let hooks = config
            .trace_hooks
            .iter()
            .enumerate()
            .map(|(i, a)| TraceHook { id: i as u32, addrs: a.clone(), hits: Vec::new() })
            .collect();
        ProxyKernel {
            pid: image.pid,
            vmpl: image.vmpl,
            channel: ForwardChannel::new(image.ghcb),
            policy,
            pool: SelfMemPool::new(capacity, image.pool.clone()),
            hooks,
            config,
            code: image.code,
        }
    }

    /// Register the shared page with one MSR-protocol round trip.
    pub fn pk_boot(&mut self, ctx: &mut RouteCtx) -> Result<(), ProxyError> {
        if self.channel.state == ChannelState::GhcbRegistered {
            return Err(ProxyError::AlreadyRegistered);
        }
        ctx.switch(VmplLevel::VMPL0, SwitchReason::Boot)?;
        ctx.log(EventKind::ChannelBoot { pid: self.pid });
        ctx.switch(self.vmpl, SwitchReason::Boot)?;
        self.channel.state = ChannelState::GhcbRegistered;
        Ok(())
    }

    // ---- syscalls ----

    pub fn handle_syscall(&mut self, ctx: &mut RouteCtx, tid: Tid, frame: &TrapFrame) -> Result<SyscallDisposition, ProxyError> {
        let req = frame.syscall.unwrap_or(SyscallRequest { nr: frame.regs[REG_RET], args: [0; 6] });
        let nr = req.nr;
        let decision = self.policy.evaluate(nr);
        for _ in 0..decision.traced {
            ctx.log(EventKind::SyscallTrace { tid, nr });
        }
        let route = |route, channel, ret| EventKind::SyscallRoute { tid, nr, route, channel, ret };
        let local = match decision.action {
            Action::Deny(e) => {
                ctx.log(route(Route::Denied, Channel::None, -e));
                return Ok(SyscallDisposition::Resume(-e));
            }
            Action::Allow | Action::SelfHandle | Action::Trace => true,
            Action::ForwardSync | Action::ForwardAsync => false,
        };
        if local {
            if sc::is_proxy_vm(nr) && self.pool.enabled() {
                if let Ok(v) = self.pk_vm_syscall(ctx, &req) {
                    ctx.log(route(Route::SelfHandled, Channel::None, v));
                    return Ok(SyscallDisposition::Resume(v));
                }
            }
            if nr == sc::CLOCK_GETTIME {
                if let Some(v) = self.vdso_clock(ctx) {
                    ctx.log(route(Route::Vdso, Channel::None, v));
                    return Ok(SyscallDisposition::Resume(v));
                }
            }
        }
        let want_async = match decision.action {
            Action::ForwardSync => false,
            _ => self.config.async_enabled,
        };
        if want_async && !is_exit(nr) {
            self.forward_async(ctx, tid, req)
        } else {
            self.forward_sync(ctx, tid, req)
        }
    }

    /// Read the clock through the vDSO mapping, if the RMP allows it.
    fn vdso_clock(&self, ctx: &mut RouteCtx) -> Option<i64> {
        let space = ctx.os.space(self.pid)?;
        let pfn = space.translate_and_check(&ctx.platform.rmp, VDSO_VA, Access::Read, Cpl::User, self.vmpl).ok()?;
        Some(ctx.platform.mem.read_u64(pfn, 0) as i64)
    }

    pub fn forward_sync(&mut self, ctx: &mut RouteCtx, tid: Tid, req: SyscallRequest) -> Result<SyscallDisposition, ProxyError> {
        let channel = self.channel.kind();
        self.channel.write_request(&mut ctx.platform.mem, &req);
        if is_exit(req.nr) {
            ctx.log(EventKind::SyscallRoute { tid, nr: req.nr, route: Route::Sync, channel, ret: 0 });
        }
        ctx.switch(VmplLevel::VMPL0, SwitchReason::Forward)?;
        let res = ctx.os.os_handle_syscall(ctx.platform, tid, &req);
        if res.exited {
            return Ok(SyscallDisposition::Exited);
        }
        self.channel.write_response(&mut ctx.platform.mem, res.ret);
        ctx.switch(self.vmpl, SwitchReason::Forward)?;
        let ret = self.channel.read_response(&ctx.platform.mem);
        ctx.log(EventKind::SyscallRoute { tid, nr: req.nr, route: Route::Sync, channel, ret });
        Ok(SyscallDisposition::Resume(ret))
    }

    /// Post to the hotcall slot and spin until the service context answers.
    pub fn forward_async(&mut self, ctx: &mut RouteCtx, tid: Tid, req: SyscallRequest) -> Result<SyscallDisposition, ProxyError> {
        if self.channel.slot.request.is_some() {
            return Err(ProxyError::SlotBusy);
        }
        self.channel.slot.request = Some(req);
        self.channel.write_request(&mut ctx.platform.mem, &req);
        ctx.log(EventKind::HotcallRequest { tid, nr: req.nr });
        let latency = ctx.service.next_latency();
        let mut spins = 0u32;
        let ret = loop {
            if let Some(r) = self.channel.slot.response.take() {
                break r;
            }
            if !ctx.budget.consume() {
                return Err(ProxyError::Deadlock(ctx.budget.limit));
            }
            spins += 1;
            if spins >= latency {
                self.serve(ctx, tid);
            }
        };
        ctx.log(EventKind::HotcallResponse { tid, ret, spins });
        ctx.log(EventKind::SyscallRoute { tid, nr: req.nr, route: Route::Async, channel: Channel::None, ret });
        Ok(SyscallDisposition::Resume(ret))
    }

    /// One poll by the service context.
    fn serve(&mut self, ctx: &mut RouteCtx, tid: Tid) {
        let Some(req) = self.channel.slot.request.take() else { return };
        ctx.platform.log.set_site(ctx.service.vcpu, VmplLevel::VMPL0);
        let res = ctx.os.os_handle_syscall(ctx.platform, tid, &req);
        ctx.platform.log.set_site(ctx.service.vcpu, VmplLevel::VMPL0);
        ctx.platform.log.push(EventKind::HotcallServe { nr: req.nr, ret: res.ret });
        ctx.service.served += 1;
        self.channel.write_response(&mut ctx.platform.mem, res.ret);
        self.channel.slot.response = Some(res.ret);
        ctx.platform.log.set_site(ctx.vcpu.id, ctx.vcpu.current());
    }

    // ---- page pool ----

    fn proxy_range(&self, ctx: &RouteCtx, addr: u64, len: u64) -> Result<VaRange, VmSyscallError> {
        if !is_page_aligned(addr) || len == 0 {
            return Err(VmSyscallError::BadAddress);
        }
        let r = covering_range(addr, len);
        let space = ctx.os.space(self.pid).ok_or(VmSyscallError::BadAddress)?;
        if !space.is_covered(r) || space.vmas_in(r).iter().any(|v| v.owner != VmaOwner::Proxy || v.kind == VmaKind::Code) {
            return Err(VmSyscallError::BadAddress);
        }
        Ok(r)
    }

    fn pool_mask(prot: Prot) -> PermMask {
        PermMask { read: prot.read, write: prot.write, exec_user: false, exec_super: false }
    }

    fn set_pool_mask(&self, ctx: &mut RouteCtx, pfn: crate::types::Pfn, mask: PermMask) {
        if ctx.platform.rmp.perms(pfn, self.vmpl) != mask && ctx.platform.rmp.set_delegated(pfn, self.vmpl, mask).is_ok() {
            ctx.log(EventKind::Grant { pfn, vmpl: self.vmpl, mask, reason: GrantReason::Pool });
        }
    }

    /// Release pool frames mapped in `range`.
    fn pool_unmap(&mut self, ctx: &mut RouteCtx, range: VaRange) {
        let removed = ctx.os.space_mut(self.pid).map(|s| s.unmap(range).unwrap_or_default()).unwrap_or_default();
        for (va, pte) in removed {
            self.set_pool_mask(ctx, pte.pfn, PermMask::EMPTY);
            ctx.platform.mem.zero(pte.pfn);
            self.pool.give_back(va);
        }
    }

    /// Serve mmap, munmap, mprotect or mremap from the pool.
    pub fn pk_vm_syscall(&mut self, ctx: &mut RouteCtx, req: &SyscallRequest) -> Result<i64, VmSyscallError> {
        let a = req.args;
        match req.nr {
            sc::MMAP => {
                let [_, len, prot, flags, _, _] = a;
                let anon_private = flags & sc::MAP_ANONYMOUS != 0 && flags & sc::MAP_PRIVATE != 0 && flags & (sc::MAP_FIXED | sc::MAP_SHARED) == 0;
                if !anon_private || len == 0 {
                    return Err(VmSyscallError::BadAddress);
                }
                let size = page_align_up(len);
                if size / PAGE_SIZE > self.pool.capacity() {
                    return Err(VmSyscallError::Overflow);
                }
                let space = ctx.os.space_mut(self.pid).ok_or(VmSyscallError::BadAddress)?;
                let start = space.find_free(PROXY_ANON_BASE, PROXY_ANON_CEIL, size).ok_or(VmSyscallError::Overflow)?;
                let vma = Vma::new(VaRange::from_len(start, size), VmaKind::Anon, Prot::from_linux(prot)).owned_by(VmaOwner::Proxy);
                space.add_vma(vma).map_err(|_| VmSyscallError::Overflow)?;
                Ok(start as i64)
            }
            sc::MUNMAP => {
                let r = self.proxy_range(ctx, a[0], a[1])?;
                self.pool_unmap(ctx, r);
                if let Some(s) = ctx.os.space_mut(self.pid) {
                    s.remove_vmas(r);
                }
                Ok(0)
            }
            sc::MPROTECT => {
                let r = self.proxy_range(ctx, a[0], a[1])?;
                let prot = Prot::from_linux(a[2]);
                let space = ctx.os.space_mut(self.pid).ok_or(VmSyscallError::BadAddress)?;
                space.set_vma_prot(r, prot).map_err(|_| VmSyscallError::BadAddress)?;
                let _ = space.protect(r, prot.pte_flags());
                let frames: Vec<_> = space.walk_region(r).unwrap_or_default().into_iter().map(|(_, p)| p.pfn).collect();
                for pfn in frames {
                    self.set_pool_mask(ctx, pfn, Self::pool_mask(prot));
                }
                Ok(0)
            }
            sc::MREMAP => self.pool_mremap(ctx, a[0], a[1], a[2], a[3]),
            _ => Err(VmSyscallError::BadAddress),
        }
    }

    fn pool_mremap(&mut self, ctx: &mut RouteCtx, old: u64, old_len: u64, new_len: u64, flags: u64) -> Result<i64, VmSyscallError> {
        let r = self.proxy_range(ctx, old, old_len)?;
        if new_len == 0 {
            return Ok(-EINVAL);
        }
        let vma = *ctx.os.space(self.pid).and_then(|s| s.vma_at(old)).ok_or(VmSyscallError::BadAddress)?;
        if !vma.range.contains_range(&r) {
            return Err(VmSyscallError::BadAddress);
        }
        let new_size = page_align_up(new_len);
        if new_size <= r.len() {
            let tail = VaRange::new(old + new_size, r.end);
            if !tail.is_empty() {
                self.pool_unmap(ctx, tail);
                if let Some(s) = ctx.os.space_mut(self.pid) {
                    s.remove_vmas(tail);
                }
            }
            return Ok(old as i64);
        }
        let grow = VaRange::new(r.end, old + new_size);
        let space = ctx.os.space_mut(self.pid).ok_or(VmSyscallError::BadAddress)?;
        let mut piece = vma;
        if space.find_free(grow.start, PROXY_ANON_CEIL, grow.len()) == Some(grow.start) {
            piece.range = grow;
            space.add_vma(piece).map_err(|_| VmSyscallError::Overflow)?;
            return Ok(old as i64);
        }
        if flags & sc::MREMAP_MAYMOVE == 0 {
            return Err(VmSyscallError::Overflow);
        }
        let dest = space.find_free(PROXY_ANON_BASE, PROXY_ANON_CEIL, new_size).ok_or(VmSyscallError::Overflow)?;
        let moved: Vec<u64> = space.walk_region(r).unwrap_or_default().into_iter().map(|(va, _)| va).collect();
        space.relocate(r, dest).map_err(|_| VmSyscallError::Overflow)?;
        piece.range = VaRange::new(dest + r.len(), dest + new_size);
        space.add_vma(piece).map_err(|_| VmSyscallError::Overflow)?;
        for va in moved {
            self.pool.rekey(va, va - r.start + dest);
        }
        Ok(dest as i64)
    }

    // ---- faults ----

    pub fn handle_page_fault(&mut self, ctx: &mut RouteCtx, tid: Tid, frame: &TrapFrame) -> Result<FaultDisposition, ProxyError> {
        let Some(fault) = frame.fault() else { return Ok(FaultDisposition::Retry) };
        let vma = ctx.os.space(self.pid).and_then(|s| s.vma_at(fault.va)).copied();
        let pool_fault = fault.kind == FaultKind::NotPresent
            && vma.is_some_and(|v| v.owner == VmaOwner::Proxy && v.kind != VmaKind::Code && Self::prot_allows(v.prot, &fault));
        let route = |route| EventKind::FaultRoute { tid, va: fault.va, kind: fault.kind, route, cpl: frame.cpl };
        if pool_fault {
            let vma = vma.expect("checked");
            let page = page_align_down(fault.va);
            if let Some(pfn) = self.pool.take(page) {
                if let Some(s) = ctx.os.space_mut(self.pid) {
                    let _ = s.map(page, pfn, vma.prot.pte_flags());
                }
                self.set_pool_mask(ctx, pfn, Self::pool_mask(vma.prot));
                ctx.log(route(FaultRoute::Resolved));
                return Ok(FaultDisposition::Retry);
            }
            ctx.log(route(FaultRoute::Forwarded));
            ctx.switch(VmplLevel::VMPL0, SwitchReason::Forward)?;
            let Some(pages) = ctx.os.os_refill(ctx.platform, tid, fault.va, self.pool.refill_size()) else {
                return Ok(FaultDisposition::Killed);
            };
            self.pool.add_pages(pages);
            ctx.switch(self.vmpl, SwitchReason::Forward)?;
            return Ok(FaultDisposition::Retry);
        }
        ctx.log(route(FaultRoute::Forwarded));
        ctx.switch(VmplLevel::VMPL0, SwitchReason::Forward)?;
        match ctx.os.os_handle_fault(ctx.platform, tid, &fault) {
            FaultResolution::Resolved => {
                ctx.switch(self.vmpl, SwitchReason::Forward)?;
                Ok(FaultDisposition::Retry)
            }
            FaultResolution::SegV => Ok(FaultDisposition::Killed),
        }
    }

    fn prot_allows(prot: Prot, fault: &Fault) -> bool {
        match fault.access {
            crate::rmp::AccessType::Read => prot.read,
            crate::rmp::AccessType::Write => prot.write,
            _ => false,
        }
    }

    // ---- exceptions ----

    pub fn handle_exception(&mut self, ctx: &mut RouteCtx, tid: Tid, frame: &TrapFrame) -> Result<ExceptionDisposition, ProxyError> {
        match frame.cause {
            TrapCause::Breakpoint => {
                for hook in self.hooks.iter_mut().filter(|h| h.addrs.as_ref().is_none_or(|a| a.contains(&frame.ip))) {
                    hook.hits.push(TraceRecord { tid, ip: frame.ip, regs: frame.regs });
                    ctx.platform.log.set_site(ctx.vcpu.id, ctx.vcpu.current());
                    ctx.platform.log.push(EventKind::TraceHit { tid, hook: hook.id, ip: frame.ip, ret_reg: frame.regs[REG_RET] });
                }
                if self.config.forward_breakpoints {
                    ctx.log(EventKind::ExceptionRoute { tid, kind: ExceptionKind::Breakpoint, route: FaultRoute::Forwarded });
                    ctx.switch(VmplLevel::VMPL0, SwitchReason::Forward)?;
                    ctx.os.handle_debug_trap(tid);
                    ctx.switch(self.vmpl, SwitchReason::Forward)?;
                } else {
                    ctx.log(EventKind::ExceptionRoute { tid, kind: ExceptionKind::Breakpoint, route: FaultRoute::Resolved });
                }
                Ok(ExceptionDisposition::Advance)
            }
            TrapCause::Debug(DebugReason::HwBreakpoint) => {
                ctx.log(EventKind::ExceptionRoute { tid, kind: ExceptionKind::HwBreakpoint, route: FaultRoute::Forwarded });
                ctx.switch(VmplLevel::VMPL0, SwitchReason::Forward)?;
                ctx.os.handle_debug_trap(tid);
                ctx.switch(self.vmpl, SwitchReason::Forward)?;
                Ok(ExceptionDisposition::Retry)
            }
            TrapCause::Debug(DebugReason::Timer) => {
                ctx.log(EventKind::ExceptionRoute { tid, kind: ExceptionKind::Timer, route: FaultRoute::Forwarded });
                ctx.switch(VmplLevel::VMPL0, SwitchReason::Forward)?;
                ctx.os.handle_interrupt();
                Ok(ExceptionDisposition::Preempt)
            }
            TrapCause::Syscall | TrapCause::PageFault(_) => Ok(ExceptionDisposition::Retry),
        }
    }
}
