// SPDX-License-Identifier: Apache-2.0

//! vCPU with one save area per VMPL and a small interpreter for confined
//! programs.
//!
//! `step` executes one instruction at the current VMPL. Anything that needs
//! a handler (syscall, fault, breakpoint, timer) comes back as a
//! [`TrapFrame`]; the router decides what to do and calls [`Vcpu::resume`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event::{EventKind, EventLog, SwitchReason, TrapTag};
use crate::isa::{Instruction, INSN_BYTES};
use crate::memory::PhysMemory;
use crate::mmu::{Access, AddressSpace, Fault, VmaKind};
use crate::rmp::{Rmp, VmplLevel};
use crate::syscalls;
use crate::types::{Cpl, Tid, VaRange, PAGE_SIZE};

pub const NUM_REGS: usize = 16;
/// Syscall number on entry, return value on exit.
pub const REG_RET: usize = 0;
pub const REG_ARGS: [usize; 6] = [1, 2, 3, 4, 5, 6];
/// Destination of `Read`.
pub const REG_LOAD: usize = 7;

/// Byte stored into each page by `AllocTouchFree`.
pub const TOUCH_BYTE: u8 = 0x5a;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MacroPhase {
    Map,
    Touch { base: u64, next: u32 },
    Unmap { base: u64 },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacroOp {
    pub pages: u32,
    pub phase: MacroPhase,
}

/// Saved CPU state of one VMPL.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vmsa {
    pub regs: [u64; NUM_REGS],
    pub ip: u64,
    pub sp: u64,
    pub cpl: Cpl,
    pub debug_regs: Vec<u64>,
    pub runnable: bool,
    /// Suppresses the hardware breakpoint on the next fetch (x86 RF).
    pub resume_flag: bool,
    pub macro_op: Option<MacroOp>,
}

impl Default for Vmsa {
    fn default() -> Self {
        Vmsa {
            regs: [0; NUM_REGS],
            ip: 0,
            sp: 0,
            cpl: Cpl::Super,
            debug_regs: Vec::new(),
            runnable: false,
            resume_flag: false,
            macro_op: None,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DebugReason {
    Timer,
    HwBreakpoint,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrapCause {
    Syscall,
    PageFault(Fault),
    Breakpoint,
    Debug(DebugReason),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyscallRequest {
    pub nr: u64,
    pub args: [u64; 6],
}

/// Everything a handler needs to service a trap and resume the thread.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrapFrame {
    pub cause: TrapCause,
    pub vcpu: u32,
    pub vmpl: VmplLevel,
    pub cpl: Cpl,
    pub ip: u64,
    pub regs: [u64; NUM_REGS],
    pub va: Option<u64>,
    pub syscall: Option<SyscallRequest>,
}

impl TrapFrame {
    pub fn tag(&self) -> TrapTag {
        match self.cause {
            TrapCause::Syscall => TrapTag::Syscall(self.syscall.map_or(0, |s| s.nr)),
            TrapCause::PageFault(f) => TrapTag::PageFault(f.kind),
            TrapCause::Breakpoint => TrapTag::Breakpoint,
            TrapCause::Debug(DebugReason::Timer) => TrapTag::Timer,
            TrapCause::Debug(DebugReason::HwBreakpoint) => TrapTag::HwBreakpoint,
        }
    }

    pub fn fault(&self) -> Option<Fault> {
        match self.cause {
            TrapCause::PageFault(f) => Some(f),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
#[allow(clippy::large_enum_variant)]
pub enum StepOutcome {
    Running,
    Trapped(TrapFrame),
    Halted,
}

/// How the handler wants the trapped instruction completed.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ResumeAction {
    /// Write the syscall result and continue after the instruction.
    Return(i64),
    /// Re-execute the faulting instruction.
    Retry,
    /// Skip the instruction.
    Advance,
}

/// Where a delivered trap is handled first.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum RouteStage {
    ProxyKernel,
    GuestOs,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VcpuError {
    #[error("VMSA for VMPL{0} is not runnable")]
    NotRunnable(VmplLevel),
    #[error("no code VMA at {0:#x}")]
    NoVma(u64),
}

#[derive(Clone, Debug)]
pub struct Vcpu {
    pub id: u32,
    vmsa: [Vmsa; VmplLevel::COUNT],
    current: VmplLevel,
    /// Thread currently bound to and running on this vCPU.
    pub pinned_thread: Option<Tid>,
    owners: [Option<Tid>; VmplLevel::COUNT],
    timer_interval: Option<u64>,
    retired: u64,
    next_timer: u64,
}

impl Vcpu {
    pub fn new(id: u32) -> Self {
        let mut vmsa: [Vmsa; 4] = Default::default();
        vmsa[0].runnable = true;
        Vcpu {
            id,
            vmsa,
            current: VmplLevel::VMPL0,
            pinned_thread: None,
            owners: [None; 4],
            timer_interval: None,
            retired: 0,
            next_timer: 0,
        }
    }

    pub fn current(&self) -> VmplLevel {
        self.current
    }

    pub fn vmsa(&self, vmpl: VmplLevel) -> &Vmsa {
        &self.vmsa[vmpl.index()]
    }

    pub fn vmsa_mut(&mut self, vmpl: VmplLevel) -> &mut Vmsa {
        &mut self.vmsa[vmpl.index()]
    }

    /// Thread whose state currently occupies `vmsa[vmpl]`.
    pub fn vmsa_owner(&self, vmpl: VmplLevel) -> Option<Tid> {
        self.owners[vmpl.index()]
    }

    pub fn set_vmsa_owner(&mut self, vmpl: VmplLevel, tid: Option<Tid>) {
        self.owners[vmpl.index()] = tid;
    }

    /// Inject a timer interrupt every `interval` retired instructions.
    pub fn set_timer(&mut self, interval: Option<u64>) {
        self.timer_interval = interval.filter(|n| *n > 0);
        self.next_timer = self.retired + self.timer_interval.unwrap_or(0);
    }

    pub fn retired(&self) -> u64 {
        self.retired
    }

    pub fn vmpl_switch(&mut self, target: VmplLevel, reason: SwitchReason, log: &mut EventLog) -> Result<(), VcpuError> {
        if !self.vmsa(target).runnable {
            return Err(VcpuError::NotRunnable(target));
        }
        log.set_site(self.id, self.current);
        log.push(EventKind::VmplSwitch { from: self.current, to: target, reason });
        self.current = target;
        log.set_vmpl(target);
        Ok(())
    }

    /// Place `program` at `entry` in `space` and point `vmsa[vmpl]` at it.
    pub fn load_program(&mut self, vmpl: VmplLevel, space: &mut AddressSpace, program: &[Instruction], entry: u64) -> Result<(), VcpuError> {
        let span = VaRange::from_len(entry, (program.len() as u64).max(1) * INSN_BYTES);
        let in_code = |va: u64| space.vma_at(va).is_some_and(|v| v.kind == VmaKind::Code);
        if !in_code(span.start) || !in_code(span.end - 1) || !space.is_covered(span) {
            return Err(VcpuError::NoVma(entry));
        }
        space.clear_code(span);
        for (i, insn) in program.iter().enumerate() {
            space.write_code(entry + i as u64 * INSN_BYTES, insn.clone());
        }
        let v = self.vmsa_mut(vmpl);
        *v = Vmsa { ip: entry, cpl: Cpl::User, runnable: true, debug_regs: std::mem::take(&mut v.debug_regs), ..Vmsa::default() };
        Ok(())
    }

    fn frame(&self, cause: TrapCause, va: Option<u64>, syscall: Option<SyscallRequest>) -> TrapFrame {
        let v = self.vmsa(self.current);
        TrapFrame { cause, vcpu: self.id, vmpl: self.current, cpl: v.cpl, ip: v.ip, regs: v.regs, va, syscall }
    }

    fn trap_syscall(&mut self, nr: u64, args: [u64; 6]) -> StepOutcome {
        let v = &mut self.vmsa[self.current.index()];
        v.regs[REG_RET] = nr;
        for (slot, a) in REG_ARGS.iter().zip(args) {
            v.regs[*slot] = a;
        }
        StepOutcome::Trapped(self.frame(TrapCause::Syscall, None, Some(SyscallRequest { nr, args })))
    }

    fn retire(&mut self) {
        let v = &mut self.vmsa[self.current.index()];
        v.ip += INSN_BYTES;
        v.resume_flag = false;
        self.retired += 1;
    }

    /// Execute one instruction at the current VMPL.
    pub fn step(&mut self, space: &AddressSpace, rmp: &Rmp, mem: &mut PhysMemory) -> StepOutcome {
        let vmpl = self.current;
        let (ip, cpl, runnable, rf, hw_bp) = {
            let v = self.vmsa(vmpl);
            (v.ip, v.cpl, v.runnable, v.resume_flag, v.debug_regs.contains(&v.ip))
        };
        if !runnable {
            return StepOutcome::Halted;
        }
        if self.timer_interval.is_some() && self.retired >= self.next_timer {
            self.next_timer = self.retired + self.timer_interval.unwrap_or(0);
            return StepOutcome::Trapped(self.frame(TrapCause::Debug(DebugReason::Timer), None, None));
        }
        if hw_bp && !rf {
            return StepOutcome::Trapped(self.frame(TrapCause::Debug(DebugReason::HwBreakpoint), Some(ip), None));
        }
        if let Err(f) = space.translate_and_check(rmp, ip, Access::Execute, cpl, vmpl) {
            return StepOutcome::Trapped(self.frame(TrapCause::PageFault(f), Some(ip), None));
        }
        let Some(insn) = space.fetch_code(ip).cloned() else {
            return StepOutcome::Halted;
        };
        let access = |va: u64, a: Access| space.translate_and_check(rmp, va, a, cpl, vmpl);
        match insn {
            Instruction::Read(va) => match access(va, Access::Read) {
                Ok(pfn) => {
                    self.vmsa[vmpl.index()].regs[REG_LOAD] = u64::from(mem.read_byte(pfn, va % PAGE_SIZE));
                    self.retire();
                    StepOutcome::Running
                }
                Err(f) => StepOutcome::Trapped(self.frame(TrapCause::PageFault(f), Some(va), None)),
            },
            Instruction::Write(va, byte) => match access(va, Access::Write) {
                Ok(pfn) => {
                    mem.write_byte(pfn, va % PAGE_SIZE, byte);
                    self.retire();
                    StepOutcome::Running
                }
                Err(f) => StepOutcome::Trapped(self.frame(TrapCause::PageFault(f), Some(va), None)),
            },
            Instruction::Exec(va) => match access(va, Access::Execute) {
                Ok(_) => {
                    self.retire();
                    StepOutcome::Running
                }
                Err(f) => StepOutcome::Trapped(self.frame(TrapCause::PageFault(f), Some(va), None)),
            },
            Instruction::Syscall { nr, args } => self.trap_syscall(nr, args),
            Instruction::Breakpoint => StepOutcome::Trapped(self.frame(TrapCause::Breakpoint, Some(ip), None)),
            Instruction::Halt => StepOutcome::Halted,
            Instruction::AllocTouchFree { pages } => self.step_macro(pages, space, rmp, mem),
        }
    }

    fn step_macro(&mut self, pages: u32, space: &AddressSpace, rmp: &Rmp, mem: &mut PhysMemory) -> StepOutcome {
        let vmpl = self.current;
        let len = u64::from(pages) * PAGE_SIZE;
        let op = self.vmsa(vmpl).macro_op;
        match op.map(|m| m.phase) {
            None | Some(MacroPhase::Map) => {
                if pages == 0 {
                    self.retire();
                    return StepOutcome::Running;
                }
                self.vmsa_mut(vmpl).macro_op = Some(MacroOp { pages, phase: MacroPhase::Map });
                let flags = syscalls::MAP_PRIVATE | syscalls::MAP_ANONYMOUS;
                let prot = syscalls::PROT_READ | syscalls::PROT_WRITE;
                self.trap_syscall(syscalls::MMAP, [0, len, prot, flags, u64::MAX, 0])
            }
            Some(MacroPhase::Touch { base, next }) if next >= pages => {
                self.vmsa_mut(vmpl).macro_op = Some(MacroOp { pages, phase: MacroPhase::Unmap { base } });
                self.trap_syscall(syscalls::MUNMAP, [base, len, 0, 0, 0, 0])
            }
            Some(MacroPhase::Touch { base, next }) => {
                let va = base + u64::from(next) * PAGE_SIZE;
                let cpl = self.vmsa(vmpl).cpl;
                match space.translate_and_check(rmp, va, Access::Write, cpl, vmpl) {
                    Ok(pfn) => {
                        mem.write_byte(pfn, 0, TOUCH_BYTE);
                        self.vmsa_mut(vmpl).macro_op = Some(MacroOp { pages, phase: MacroPhase::Touch { base, next: next + 1 } });
                        StepOutcome::Running
                    }
                    Err(f) => StepOutcome::Trapped(self.frame(TrapCause::PageFault(f), Some(va), None)),
                }
            }
            Some(MacroPhase::Unmap { base }) => self.trap_syscall(syscalls::MUNMAP, [base, len, 0, 0, 0, 0]),
        }
    }

    /// Complete a trapped instruction on the VMSA that raised `frame`.
    pub fn resume(&mut self, frame: &TrapFrame, action: ResumeAction) {
        let saved = self.current;
        self.current = frame.vmpl;
        match action {
            ResumeAction::Return(value) => {
                let v = self.vmsa_mut(frame.vmpl);
                v.regs[REG_RET] = value as u64;
                match v.macro_op {
                    Some(MacroOp { pages, phase: MacroPhase::Map }) if value >= 0 => {
                        v.macro_op = Some(MacroOp { pages, phase: MacroPhase::Touch { base: value as u64, next: 0 } });
                    }
                    Some(_) | None => {
                        v.macro_op = None;
                        self.retire();
                    }
                }
            }
            ResumeAction::Retry => {
                if frame.cause == TrapCause::Debug(DebugReason::HwBreakpoint) {
                    self.vmsa_mut(frame.vmpl).resume_flag = true;
                }
            }
            ResumeAction::Advance => self.retire(),
        }
        self.current = saved;
    }

    /// Log the trap and pick the first handler: lower VMPLs go through the
    /// proxy-kernel, VMPL0 traps go to the guest OS directly.
    pub fn deliver_trap(&self, frame: &TrapFrame, log: &mut EventLog) -> RouteStage {
        log.set_site(self.id, frame.vmpl);
        log.push(EventKind::Trap { tid: self.pinned_thread.unwrap_or(0), cause: frame.tag(), ip: frame.ip, va: frame.va });
        if frame.vmpl == VmplLevel::VMPL0 {
            RouteStage::GuestOs
        } else {
            RouteStage::ProxyKernel
        }
    }
}
