// SPDX-License-Identifier: Apache-2.0

//! Deterministic round-robin scheduler tying the vCPUs, the proxy-kernels
//! and the guest OS together.

use std::collections::{BTreeMap, VecDeque};

use thiserror::Error;

use crate::event::{EventLog, SwitchReason, TcbStateTag};
use crate::guest::layout::CODE_BASE;
use crate::guest::{ConfineConfig, FaultResolution, GuestOs, OsConfig, OsError};
use crate::isa::{Program, INSN_BYTES};
use crate::platform::Platform;
use crate::proxy::channel::{HotcallService, StepBudget};
use crate::proxy::policy::FilterPolicy;
use crate::proxy::{
    ExceptionDisposition, FaultDisposition, ProxyConfig, ProxyError, ProxyKernel, RouteCtx, SyscallDisposition,
};
use crate::rmp::VmplLevel;
use crate::types::{pages_for, Pid, Tid};
use crate::vcpu::{ResumeAction, RouteStage, StepOutcome, TrapCause, TrapFrame, Vcpu, VcpuError};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SimConfig {
    pub memory_pages: u64,
    pub vcpus: u32,
    pub seed: u64,
    pub step_budget: u64,
    pub os: OsConfig,
    /// Timer interrupt period in retired instructions.
    pub timer_interval: Option<u64>,
    /// Register the shared page before the first trap.
    pub boot_channel: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            memory_pages: 4096,
            vcpus: 1,
            seed: 0,
            step_budget: 1_000_000,
            os: OsConfig::default(),
            timer_interval: None,
            boot_channel: true,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ThreadSpec {
    pub program: Program,
    pub confine: ConfineConfig,
    pub proxy: ProxyConfig,
    pub policy: FilterPolicy,
    pub vcpu: u32,
    pub data_pages: u64,
    /// Minimum size of the code region; grown to fit the program.
    pub code_pages: u64,
    /// Hardware breakpoint addresses.
    pub debug_regs: Vec<u64>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("step budget of {steps} exhausted with threads {pending:?} still live")]
    Deadlock { steps: u64, pending: Vec<Tid> },
    #[error("no vCPU {0}")]
    BadVcpu(u32),
    #[error(transparent)]
    Os(#[from] OsError),
    #[error(transparent)]
    Vcpu(#[from] VcpuError),
    #[error(transparent)]
    Proxy(#[from] ProxyError),
}

pub struct Simulator {
    config: SimConfig,
    platform: Platform,
    os: GuestOs,
    vcpus: Vec<Vcpu>,
    proxies: BTreeMap<Pid, ProxyKernel>,
    retired_proxies: BTreeMap<Pid, ProxyKernel>,
    service: HotcallService,
    budget: StepBudget,
    queues: Vec<VecDeque<Tid>>,
    steps: u64,
}

impl Simulator {
    pub fn new(config: SimConfig) -> Result<Self, SimError> {
        let mut platform = Platform::new(config.memory_pages);
        let os = GuestOs::boot(&mut platform, config.os.clone())?;
        let n = config.vcpus.max(1);
        let vcpus = (0..n)
            .map(|i| {
                let mut v = Vcpu::new(i);
                v.set_timer(config.timer_interval);
                v
            })
            .collect();
        Ok(Simulator {
            service: HotcallService::new(n, config.seed),
            budget: StepBudget::new(config.step_budget),
            queues: vec![VecDeque::new(); n as usize],
            config,
            platform,
            os,
            vcpus,
            proxies: BTreeMap::new(),
            retired_proxies: BTreeMap::new(),
            steps: 0,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn platform(&self) -> &Platform {
        &self.platform
    }

    pub fn platform_mut(&mut self) -> &mut Platform {
        &mut self.platform
    }

    pub fn log(&self) -> &EventLog {
        &self.platform.log
    }

    pub fn os(&self) -> &GuestOs {
        &self.os
    }

    pub fn os_mut(&mut self) -> &mut GuestOs {
        &mut self.os
    }

    pub fn vcpu(&self, id: u32) -> Option<&Vcpu> {
        self.vcpus.get(id as usize)
    }

    /// Live or finished proxy-kernel of `pid`.
    pub fn proxy(&self, pid: Pid) -> Option<&ProxyKernel> {
        self.proxies.get(&pid).or_else(|| self.retired_proxies.get(&pid))
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Create a confined process running `spec.program` and queue its thread.
    pub fn spawn(&mut self, spec: ThreadSpec) -> Result<Tid, SimError> {
        let v = spec.vcpu as usize;
        if v >= self.vcpus.len() {
            return Err(SimError::BadVcpu(spec.vcpu));
        }
        let code_pages = pages_for((spec.program.len() as u64 + 1) * INSN_BYTES).max(spec.code_pages);
        let pid = self.os.create_process(&mut self.platform, code_pages, spec.data_pages)?;
        let image = self.os.vmpl_init(&mut self.platform, pid, &spec.confine)?;
        let vmpl = spec.confine.vmpl;
        let vcpu = &mut self.vcpus[v];
        let space = self.os.space_mut(pid).expect("just created");
        vcpu.load_program(vmpl, space, &spec.program, CODE_BASE)?;
        let mut initial = vcpu.vmsa(vmpl).clone();
        initial.debug_regs = spec.debug_regs.clone();
        vcpu.set_vmsa_owner(vmpl, None);
        vcpu.vmsa_mut(vmpl).runnable = false;
        let tid = self.os.create_thread(&mut self.platform, pid, vmpl, spec.vcpu, initial)?;
        self.proxies.insert(pid, ProxyKernel::new(&image, spec.confine.pool_capacity, spec.policy, spec.proxy));
        self.queues[v].push_back(tid);
        Ok(tid)
    }

    fn live_threads(&self) -> Vec<Tid> {
        self.os.threads().filter(|t| t.state != TcbStateTag::Exited).map(|t| t.tid).collect()
    }

    /// Run until every thread exits or the step budget runs out.
    pub fn run(&mut self) -> Result<(), SimError> {
        loop {
            let mut progressed = false;
            for v in 0..self.vcpus.len() {
                if self.vcpus[v].pinned_thread.is_none() && !self.dispatch(v)? {
                    continue;
                }
                let tid = self.vcpus[v].pinned_thread.expect("dispatched");
                self.step_thread(v, tid)?;
                progressed = true;
            }
            if !progressed {
                let pending = self.live_threads();
                if pending.is_empty() {
                    return Ok(());
                }
                return Err(SimError::Deadlock { steps: self.budget.used, pending });
            }
        }
    }

    fn next_ready(&mut self, v: usize) -> Option<Tid> {
        while let Some(t) = self.queues[v].pop_front() {
            if self.os.is_alive(t) {
                return Some(t);
            }
        }
        None
    }

    fn site(&mut self, v: usize) {
        let vc = &self.vcpus[v];
        self.platform.log.set_site(vc.id, vc.current());
    }

    /// Start or resume the next queued thread on vCPU `v` (which sits at VMPL0).
    fn dispatch(&mut self, v: usize) -> Result<bool, SimError> {
        let Some(tid) = self.next_ready(v) else { return Ok(false) };
        self.site(v);
        self.start(v, tid)?;
        Ok(true)
    }

    fn start(&mut self, v: usize, tid: Tid) -> Result<(), SimError> {
        let tcb = self.os.thread(tid).expect("queued thread exists");
        let (state, vmpl, pid) = (tcb.state, tcb.vmpl, tcb.pid);
        if state == TcbStateTag::Created {
            self.os.enter_user(&mut self.platform, &mut self.vcpus[v], tid)?;
            if self.config.boot_channel {
                self.with_proxy(v, pid, |pk, ctx| match pk.pk_boot(ctx) {
                    Ok(()) | Err(ProxyError::AlreadyRegistered) => Ok(()),
                    Err(e) => Err(e),
                })?;
            }
        } else {
            self.os.restore_thread(&mut self.platform, &mut self.vcpus[v], tid)?;
            self.vcpus[v].vmpl_switch(vmpl, SwitchReason::Schedule, &mut self.platform.log)?;
        }
        Ok(())
    }

    fn with_proxy<T>(
        &mut self,
        v: usize,
        pid: Pid,
        f: impl FnOnce(&mut ProxyKernel, &mut RouteCtx) -> Result<T, ProxyError>,
    ) -> Result<T, SimError> {
        let mut pk = self.proxies.remove(&pid).expect("every confined process has a proxy");
        let mut ctx = RouteCtx {
            platform: &mut self.platform,
            os: &mut self.os,
            vcpu: &mut self.vcpus[v],
            service: &mut self.service,
            budget: &mut self.budget,
        };
        let res = f(&mut pk, &mut ctx);
        if self.os.process(pid).is_some() {
            self.proxies.insert(pid, pk);
        } else {
            self.retired_proxies.insert(pid, pk);
        }
        res.map_err(|e| match e {
            ProxyError::Deadlock(_) => SimError::Deadlock { steps: self.budget.used, pending: self.live_threads() },
            e => SimError::Proxy(e),
        })
    }

    fn step_thread(&mut self, v: usize, tid: Tid) -> Result<(), SimError> {
        if !self.budget.consume() {
            return Err(SimError::Deadlock { steps: self.budget.used, pending: self.live_threads() });
        }
        self.steps += 1;
        self.os.tick(&mut self.platform);
        let pid = self.os.thread(tid).expect("pinned thread exists").pid;
        self.site(v);
        let outcome = {
            let space = self.os.space(pid).expect("live thread has a process");
            self.vcpus[v].step(space, &self.platform.rmp, &mut self.platform.mem)
        };
        match outcome {
            StepOutcome::Running => {}
            StepOutcome::Halted => {
                self.vcpus[v].vmpl_switch(VmplLevel::VMPL0, SwitchReason::Exit, &mut self.platform.log)?;
                self.os.exit_thread(&mut self.platform, tid, 0);
            }
            StepOutcome::Trapped(frame) => match self.vcpus[v].deliver_trap(&frame, &mut self.platform.log) {
                RouteStage::ProxyKernel => self.route_proxy(v, tid, pid, &frame)?,
                RouteStage::GuestOs => self.route_native(v, tid, &frame),
            },
        }
        self.reap();
        Ok(())
    }

    fn route_proxy(&mut self, v: usize, tid: Tid, pid: Pid, frame: &TrapFrame) -> Result<(), SimError> {
        let preempt = self.with_proxy(v, pid, |pk, ctx| {
            match frame.cause {
                TrapCause::Syscall => {
                    if let SyscallDisposition::Resume(r) = pk.handle_syscall(ctx, tid, frame)? {
                        ctx.vcpu.resume(frame, ResumeAction::Return(r));
                    }
                }
                TrapCause::PageFault(_) => {
                    if pk.handle_page_fault(ctx, tid, frame)? == FaultDisposition::Retry {
                        ctx.vcpu.resume(frame, ResumeAction::Retry);
                    }
                }
                TrapCause::Breakpoint | TrapCause::Debug(_) => match pk.handle_exception(ctx, tid, frame)? {
                    ExceptionDisposition::Advance => ctx.vcpu.resume(frame, ResumeAction::Advance),
                    ExceptionDisposition::Retry => ctx.vcpu.resume(frame, ResumeAction::Retry),
                    ExceptionDisposition::Preempt => {
                        ctx.vcpu.resume(frame, ResumeAction::Retry);
                        return Ok(true);
                    }
                },
            }
            Ok(false)
        })?;
        if preempt {
            self.preempt(v, tid)?;
        }
        Ok(())
    }

    /// VMPL0 threads are handled by the guest directly.
    fn route_native(&mut self, v: usize, tid: Tid, frame: &TrapFrame) {
        match frame.cause {
            TrapCause::Syscall => {
                let req = frame.syscall.expect("syscall frame");
                let r = self.os.os_handle_syscall(&mut self.platform, tid, &req);
                if !r.exited {
                    self.vcpus[v].resume(frame, ResumeAction::Return(r.ret));
                }
            }
            TrapCause::PageFault(f) => {
                if self.os.os_handle_fault(&mut self.platform, tid, &f) == FaultResolution::Resolved {
                    self.vcpus[v].resume(frame, ResumeAction::Retry);
                }
            }
            TrapCause::Breakpoint => self.vcpus[v].resume(frame, ResumeAction::Advance),
            TrapCause::Debug(_) => self.vcpus[v].resume(frame, ResumeAction::Retry),
        }
    }

    /// Timer tick: the vCPU is at VMPL0. Run the next queued thread if any,
    /// else return to the interrupted one.
    fn preempt(&mut self, v: usize, cur: Tid) -> Result<(), SimError> {
        let vmpl = self.os.thread(cur).expect("current thread").vmpl;
        let Some(next) = self.next_ready(v) else {
            self.vcpus[v].vmpl_switch(vmpl, SwitchReason::Forward, &mut self.platform.log)?;
            return Ok(());
        };
        self.site(v);
        self.queues[v].push_back(cur);
        let next_tcb = self.os.thread(next).expect("queued thread exists");
        if next_tcb.state == TcbStateTag::Created {
            self.os.save_thread(&mut self.platform, &self.vcpus[v], cur)?;
            self.start(v, next)
        } else {
            let next_vmpl = next_tcb.vmpl;
            self.os.context_switch(&mut self.platform, &mut self.vcpus[v], cur, next)?;
            self.vcpus[v].vmpl_switch(next_vmpl, SwitchReason::Schedule, &mut self.platform.log)?;
            Ok(())
        }
    }

    /// Unpin exited threads and release their VMSA slots.
    fn reap(&mut self) {
        for v in 0..self.vcpus.len() {
            let Some(tid) = self.vcpus[v].pinned_thread else { continue };
            if self.os.is_alive(tid) {
                continue;
            }
            let vmpl = self.os.thread(tid).map(|t| t.vmpl);
            let vc = &mut self.vcpus[v];
            if vc.current() != VmplLevel::VMPL0 {
                let _ = vc.vmpl_switch(VmplLevel::VMPL0, SwitchReason::Exit, &mut self.platform.log);
            }
            if let Some(vmpl) = vmpl {
                if vc.vmsa_owner(vmpl) == Some(tid) {
                    vc.set_vmsa_owner(vmpl, None);
                    vc.vmsa_mut(vmpl).runnable = false;
                }
            }
            vc.pinned_thread = None;
        }
    }
}
