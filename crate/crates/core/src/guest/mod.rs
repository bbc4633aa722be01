// SPDX-License-Identifier: Apache-2.0

//! The trusted guest kernel running at VMPL0.
//!
//! It owns the frame allocator, processes, threads and the page cache, and
//! is the only component that writes lower-VMPL masks on guest-managed
//! pages. Every such write goes through [`GuestOs::set_mask`] so it shows up
//! as a `Grant` record.

pub mod layout;
mod syscall;

pub use syscall::SyscallResult;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event::{EventKind, FaultOutcome, GrantReason, TcbStateTag};
use crate::mmu::{Access, AddressSpace, Fault, FaultKind, FileBacking, MmuError, Prot, PteFlags, Vma, VmaKind, VmaOwner};
use crate::platform::{Platform, GUEST};
use crate::rmp::{PermMask, RmpError, VmplLevel};
use crate::types::{page_align_down, Pfn, Pid, Tid, VaRange, PAGE_SIZE};
use crate::vcpu::{Vcpu, Vmsa};
use crate::xom::{self, ExecLevel, XomError, XomPolicy};

use layout::*;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OsConfig {
    /// Pages mapped per not-present fault, the faulting page included.
    pub prefault_window: u64,
    /// Grant every lower VMPL full access to all guest pages, except pinned
    /// execute-only policy pages.
    pub permissive: bool,
    pub uid: u32,
}

impl Default for OsConfig {
    fn default() -> Self {
        OsConfig { prefault_window: 4, permissive: false, uid: 1000 }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum XomTarget {
    UserCode,
    ProxyCode,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct XomSpec {
    pub target: XomTarget,
    pub exec_level: ExecLevel,
}

/// Per-process confinement settings consumed by [`GuestOs::vmpl_init`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfineConfig {
    pub vmpl: VmplLevel,
    pub pool_capacity: u64,
    pub vdso_enabled: bool,
    pub xom: Vec<XomSpec>,
    pub cross_layer: bool,
}

impl Default for ConfineConfig {
    fn default() -> Self {
        ConfineConfig { vmpl: VmplLevel::VMPL1, pool_capacity: 0, vdso_enabled: true, xom: Vec::new(), cross_layer: false }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OsError {
    #[error("out of physical memory")]
    OutOfMemory,
    #[error("no process {0}")]
    NoProcess(Pid),
    #[error("no thread {0}")]
    NoThread(Tid),
    #[error("thread {tid} is {state:?}, expected {expected:?}")]
    BadState { tid: Tid, state: TcbStateTag, expected: TcbStateTag },
    #[error("invalid confinement config: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Mmu(#[from] MmuError),
    #[error(transparent)]
    Rmp(#[from] RmpError),
    #[error(transparent)]
    Xom(#[from] XomError),
}

#[derive(Clone, Debug)]
pub struct Tcb {
    pub tid: Tid,
    pub pid: Pid,
    pub vmpl: VmplLevel,
    pub vcpu: u32,
    pub state: TcbStateTag,
    pub saved_state: Vmsa,
    pub debug_traps: u64,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct OpenFile {
    pub ino: u32,
    pub offset: u64,
}

#[derive(Clone, Debug)]
pub struct Confinement {
    pub vmpl: VmplLevel,
    pub ghcb: Pfn,
    pub proxy_code: VaRange,
    /// Masks installed by execute-only policy; never touched by grants.
    pub policy: BTreeMap<Pfn, PermMask>,
    pub config: ConfineConfig,
}

#[derive(Clone, Debug)]
pub struct Process {
    pub pid: Pid,
    pub space: AddressSpace,
    pub fds: BTreeMap<u64, OpenFile>,
    pub brk_start: u64,
    pub brk: u64,
    pub threads: BTreeSet<Tid>,
    pub code: VaRange,
    pub confine: Option<Confinement>,
}

/// What the proxy-kernel needs after confinement is set up.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProxyImage {
    pub pid: Pid,
    pub vmpl: VmplLevel,
    pub ghcb: Pfn,
    pub pool: Vec<Pfn>,
    pub code: VaRange,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum FaultResolution {
    Resolved,
    SegV,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameStats {
    pub total: u64,
    pub free: u64,
    pub in_use: u64,
    pub pooled: u64,
    pub initial_free: u64,
}

#[derive(Copy, Clone, Debug)]
struct CachePage {
    pfn: Pfn,
    refs: u32,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
enum FaultIn {
    Present,
    Mapped,
    Cow,
}

#[derive(Clone, Debug)]
pub struct GuestOs {
    config: OsConfig,
    total: u64,
    free: BTreeSet<Pfn>,
    in_use: BTreeSet<Pfn>,
    ledger: BTreeMap<Pid, BTreeSet<Pfn>>,
    initial_free: u64,
    processes: BTreeMap<Pid, Process>,
    threads: BTreeMap<Tid, Tcb>,
    files: Vec<Vec<u8>>,
    cache: BTreeMap<(u32, u64), CachePage>,
    cache_index: BTreeMap<Pfn, (u32, u64)>,
    console: Vec<u8>,
    clock: u64,
    next_pid: Pid,
    next_tid: Tid,
    in_handler: bool,
    irqs_enabled: bool,
}

impl GuestOs {
    /// Take ownership of every physical page and set up the vDSO frame.
    pub fn boot(platform: &mut Platform, config: OsConfig) -> Result<Self, OsError> {
        let n = platform.rmp.page_count();
        if n <= VDSO_PFN + 1 {
            return Err(OsError::OutOfMemory);
        }
        for p in 0..n {
            platform.rmp.assign(Pfn(p), GUEST)?;
        }
        let free: BTreeSet<Pfn> = (VDSO_PFN + 1..n).map(Pfn).collect();
        let mut os = GuestOs {
            config,
            total: n - VDSO_PFN - 1,
            initial_free: free.len() as u64,
            free,
            in_use: BTreeSet::new(),
            ledger: BTreeMap::new(),
            processes: BTreeMap::new(),
            threads: BTreeMap::new(),
            files: Vec::new(),
            cache: BTreeMap::new(),
            cache_index: BTreeMap::new(),
            console: Vec::new(),
            clock: 0,
            next_pid: 100,
            next_tid: 1,
            in_handler: false,
            irqs_enabled: true,
        };
        os.tick(platform);
        Ok(os)
    }

    pub fn config(&self) -> &OsConfig {
        &self.config
    }

    pub fn add_file(&mut self, data: Vec<u8>) -> u32 {
        self.files.push(data);
        (self.files.len() - 1) as u32
    }

    pub fn file(&self, ino: u32) -> Option<&[u8]> {
        self.files.get(ino as usize).map(Vec::as_slice)
    }

    pub fn console(&self) -> &[u8] {
        &self.console
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    /// Advance the clock and publish it on the vDSO page.
    pub fn tick(&mut self, platform: &mut Platform) {
        self.clock += 1000;
        platform.mem.write_u64(Pfn(VDSO_PFN), 0, self.clock);
    }

    pub fn frame_stats(&self) -> FrameStats {
        FrameStats {
            total: self.total,
            free: self.free.len() as u64,
            in_use: self.in_use.len() as u64,
            pooled: self.ledger.values().map(|s| s.len() as u64).sum(),
            initial_free: self.initial_free,
        }
    }

    pub fn ledger(&self, pid: Pid) -> BTreeSet<Pfn> {
        self.ledger.get(&pid).cloned().unwrap_or_default()
    }

    pub fn process(&self, pid: Pid) -> Option<&Process> {
        self.processes.get(&pid)
    }

    pub fn processes(&self) -> impl Iterator<Item = &Process> {
        self.processes.values()
    }

    pub fn space(&self, pid: Pid) -> Option<&AddressSpace> {
        self.processes.get(&pid).map(|p| &p.space)
    }

    pub fn space_mut(&mut self, pid: Pid) -> Option<&mut AddressSpace> {
        self.processes.get_mut(&pid).map(|p| &mut p.space)
    }

    pub fn thread(&self, tid: Tid) -> Option<&Tcb> {
        self.threads.get(&tid)
    }

    pub fn threads(&self) -> impl Iterator<Item = &Tcb> {
        self.threads.values()
    }

    pub fn is_alive(&self, tid: Tid) -> bool {
        self.threads.get(&tid).is_some_and(|t| t.state != TcbStateTag::Exited)
    }

    fn proc_mut(&mut self, pid: Pid) -> Result<&mut Process, OsError> {
        self.processes.get_mut(&pid).ok_or(OsError::NoProcess(pid))
    }

    fn tcb(&self, tid: Tid) -> Result<&Tcb, OsError> {
        self.threads.get(&tid).ok_or(OsError::NoThread(tid))
    }

    // ---- frames ----

    fn alloc_frame(&mut self, platform: &mut Platform) -> Option<Pfn> {
        let pfn = self.free.pop_first()?;
        self.in_use.insert(pfn);
        platform.mem.zero(pfn);
        if self.config.permissive {
            for v in VmplLevel::lower() {
                let _ = platform.rmp.set_permissions(VmplLevel::VMPL0, pfn, v, PermMask::FULL);
            }
        }
        Some(pfn)
    }

    fn free_frame(&mut self, platform: &mut Platform, pfn: Pfn) {
        if !self.in_use.remove(&pfn) {
            return;
        }
        for v in VmplLevel::lower() {
            self.set_mask(platform, pfn, v, PermMask::EMPTY, GrantReason::Revoke);
        }
        platform.mem.zero(pfn);
        self.free.insert(pfn);
    }

    /// Drop one mapping reference to `pfn`.
    fn release_frame(&mut self, platform: &mut Platform, pfn: Pfn) {
        if pfn.0 == VDSO_PFN {
            return;
        }
        if let Some(key) = self.cache_index.get(&pfn).copied() {
            let page = self.cache.get_mut(&key).expect("cache index out of sync");
            page.refs -= 1;
            if page.refs == 0 {
                self.cache.remove(&key);
                self.cache_index.remove(&pfn);
                self.free_frame(platform, pfn);
            }
            return;
        }
        self.free_frame(platform, pfn);
    }

    /// Page-cache frame for `(ino, index)`, filled from the file on first use.
    fn cache_page(&mut self, platform: &mut Platform, ino: u32, index: u64) -> Option<Pfn> {
        if let Some(p) = self.cache.get_mut(&(ino, index)) {
            p.refs += 1;
            return Some(p.pfn);
        }
        let pfn = self.alloc_frame(platform)?;
        let data = self.files.get(ino as usize).map(Vec::as_slice).unwrap_or(&[]);
        let start = (index * PAGE_SIZE) as usize;
        if start < data.len() {
            let end = (start + PAGE_SIZE as usize).min(data.len());
            platform.mem.write_slice(pfn, 0, &data[start..end]);
        }
        self.cache.insert((ino, index), CachePage { pfn, refs: 1 });
        self.cache_index.insert(pfn, (ino, index));
        Some(pfn)
    }

    /// Write a lower-VMPL mask, logging only real changes.
    fn set_mask(&self, platform: &mut Platform, pfn: Pfn, vmpl: VmplLevel, mask: PermMask, reason: GrantReason) {
        if platform.rmp.perms(pfn, vmpl) == mask {
            return;
        }
        if platform.rmp.set_permissions(VmplLevel::VMPL0, pfn, vmpl, mask).is_ok() {
            platform.log.push(EventKind::Grant { pfn, vmpl, mask, reason });
        }
    }

    /// Mask a confined process should hold on the page mapped at `va`.
    fn derived_mask(&self, pid: Pid, va: u64) -> Option<(Pfn, VmplLevel, PermMask)> {
        let proc = self.processes.get(&pid)?;
        let conf = proc.confine.as_ref()?;
        let pte = proc.space.pte(va).filter(|p| p.present)?;
        let vma = proc.space.vma_at(va)?;
        if vma.owner == VmaOwner::Proxy || pte.pfn.0 == VDSO_PFN {
            return None;
        }
        if let Some(m) = conf.policy.get(&pte.pfn) {
            return Some((pte.pfn, conf.vmpl, *m));
        }
        let mask = PermMask {
            read: vma.prot.read || vma.prot.exec,
            write: pte.writable,
            exec_user: vma.prot.exec && !pte.nx && pte.user,
            exec_super: false,
        };
        Some((pte.pfn, conf.vmpl, mask))
    }

    /// Bring the lower-VMPL mask of the page at `va` in line with its PTE.
    fn grant_page(&self, platform: &mut Platform, pid: Pid, va: u64, reason: GrantReason) {
        if self.config.permissive {
            return;
        }
        if let Some((pfn, vmpl, mask)) = self.derived_mask(pid, va) {
            self.set_mask(platform, pfn, vmpl, mask, reason);
        }
    }

    /// Re-derive masks for every present page of a guest-managed range.
    fn interpose(&self, platform: &mut Platform, pid: Pid, range: VaRange) {
        let Some(space) = self.space(pid) else { return };
        for (va, _) in space.walk_region(range).unwrap_or_default() {
            self.grant_page(platform, pid, va, GrantReason::Interpose);
        }
    }

    // ---- processes and threads ----

    /// New process with code, data, stack and vDSO mappings. Code frames are
    /// populated eagerly, everything else faults in.
    pub fn create_process(&mut self, platform: &mut Platform, code_pages: u64, data_pages: u64) -> Result<Pid, OsError> {
        let pid = self.next_pid;
        let mut space = AddressSpace::new(pid);
        let code = VaRange::pages(CODE_BASE, code_pages.max(1));
        space.add_vma(Vma::new(code, VmaKind::Code, Prot::RX))?;
        if data_pages > 0 {
            space.add_vma(Vma::new(VaRange::pages(DATA_BASE, data_pages), VmaKind::Data, Prot::RW))?;
        }
        space.add_vma(Vma::new(VaRange::new(STACK_TOP - STACK_PAGES * PAGE_SIZE, STACK_TOP), VmaKind::Stack, Prot::RW))?;
        space.add_vma(Vma::new(VaRange::pages(VDSO_VA, 1), VmaKind::Vdso, Prot::R))?;
        space.map(VDSO_VA, Pfn(VDSO_PFN), PteFlags::user_ro())?;
        if code.page_count() > self.free.len() as u64 {
            return Err(OsError::OutOfMemory);
        }
        for va in code.page_addrs() {
            let pfn = self.alloc_frame(platform).ok_or(OsError::OutOfMemory)?;
            space.map(va, pfn, PteFlags::user_rx())?;
        }
        self.next_pid += 1;
        self.processes.insert(
            pid,
            Process {
                pid,
                space,
                fds: BTreeMap::new(),
                brk_start: HEAP_BASE,
                brk: HEAP_BASE,
                threads: BTreeSet::new(),
                code,
                confine: None,
            },
        );
        Ok(pid)
    }

    /// Register a thread whose initial register state is `initial`.
    pub fn create_thread(&mut self, platform: &mut Platform, pid: Pid, vmpl: VmplLevel, vcpu: u32, initial: Vmsa) -> Result<Tid, OsError> {
        let tid = self.next_tid;
        self.proc_mut(pid)?.threads.insert(tid);
        self.next_tid += 1;
        let mut saved_state = initial;
        saved_state.sp = STACK_TOP - 8;
        self.threads.insert(
            tid,
            Tcb { tid, pid, vmpl, vcpu, state: TcbStateTag::Created, saved_state, debug_traps: 0 },
        );
        platform.log.push(EventKind::TcbState { tid, state: TcbStateTag::Created });
        Ok(tid)
    }

    /// Set up a lower-VMPL confinement for `pid`: proxy-kernel code, the
    /// shared forwarding page, baseline masks, execute-only policy and the
    /// initial page pool.
    pub fn vmpl_init(&mut self, platform: &mut Platform, pid: Pid, cfg: &ConfineConfig) -> Result<ProxyImage, OsError> {
        let proc = self.processes.get(&pid).ok_or(OsError::NoProcess(pid))?;
        if proc.confine.is_some() {
            return Err(OsError::ConfigInvalid(format!("process {pid} is already confined")));
        }
        if cfg.vmpl == VmplLevel::VMPL0 {
            return Err(OsError::ConfigInvalid("confinement needs a VMPL below 0".into()));
        }
        let need = PROXY_CODE_PAGES + 1 + cfg.pool_capacity;
        if need > self.free.len() as u64 {
            return Err(OsError::OutOfMemory);
        }
        let proxy_code = VaRange::pages(PROXY_CODE_BASE, PROXY_CODE_PAGES);
        let mut code_frames = Vec::new();
        {
            let space = &mut self.processes.get_mut(&pid).expect("checked").space;
            space.add_vma(Vma::new(proxy_code, VmaKind::Code, Prot::RX).owned_by(VmaOwner::Proxy))?;
        }
        for va in proxy_code.page_addrs() {
            let pfn = self.alloc_frame(platform).ok_or(OsError::OutOfMemory)?;
            // The user bit stays set so only the RMP separates the layers.
            self.proc_mut(pid)?.space.map(va, pfn, PteFlags::user_rx())?;
            code_frames.push(pfn);
        }
        let ghcb = self.alloc_frame(platform).ok_or(OsError::OutOfMemory)?;
        platform.rmp.revoke(ghcb)?;
        platform.rmp.share(ghcb)?;

        let mut policy: BTreeMap<Pfn, PermMask> = code_frames.iter().map(|p| (*p, PermMask::EXEC_SUPER)).collect();
        let user_code = self.processes[&pid].code;
        for spec in &cfg.xom {
            let region = match spec.target {
                XomTarget::UserCode => user_code,
                XomTarget::ProxyCode => proxy_code,
            };
            let pol = XomPolicy { region, exec_level: spec.exec_level, target_vmpl: cfg.vmpl };
            for (pfn, mask) in xom::apply_xom(&mut platform.rmp, &self.processes[&pid].space, &pol)? {
                policy.insert(pfn, mask);
            }
        }
        if cfg.cross_layer {
            for (pfn, mask) in xom::apply_cross_layer(&mut platform.rmp, &self.processes[&pid].space, cfg.vmpl)? {
                policy.insert(pfn, mask);
            }
        }
        // The xom helpers write the RMP directly; mirror them in the log.
        for (pfn, mask) in &policy {
            platform.rmp.set_permissions(VmplLevel::VMPL0, *pfn, cfg.vmpl, PermMask::EMPTY)?;
            self.set_mask(platform, *pfn, cfg.vmpl, *mask, GrantReason::Policy);
        }

        self.proc_mut(pid)?.confine = Some(Confinement { vmpl: cfg.vmpl, ghcb, proxy_code, policy, config: cfg.clone() });
        for va in user_code.page_addrs() {
            self.grant_page(platform, pid, va, GrantReason::Init);
        }
        if cfg.vdso_enabled {
            self.set_mask(platform, Pfn(VDSO_PFN), cfg.vmpl, PermMask::READ, GrantReason::Init);
        }
        let pool = if cfg.pool_capacity > 0 { self.grant_pages(platform, pid, cfg.pool_capacity, false)? } else { Vec::new() };
        if self.config.permissive {
            self.permissive_mode(platform);
        }
        Ok(ProxyImage { pid, vmpl: cfg.vmpl, ghcb, pool, code: proxy_code })
    }

    /// Move `count` free frames into `pid`'s pool with a standing RW delegation.
    pub fn grant_pages(&mut self, platform: &mut Platform, pid: Pid, count: u64, refill: bool) -> Result<Vec<Pfn>, OsError> {
        let vmpl = self
            .processes
            .get(&pid)
            .ok_or(OsError::NoProcess(pid))?
            .confine
            .as_ref()
            .map(|c| c.vmpl)
            .ok_or_else(|| OsError::ConfigInvalid(format!("process {pid} is not confined")))?;
        if count > self.free.len() as u64 {
            return Err(OsError::OutOfMemory);
        }
        let mut pages = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let pfn = self.free.pop_first().expect("count checked");
            platform.mem.zero(pfn);
            for v in VmplLevel::lower() {
                self.set_mask(platform, pfn, v, PermMask::EMPTY, GrantReason::Revoke);
            }
            platform.rmp.delegate(pfn, vmpl, PermMask::READ_WRITE)?;
            pages.push(pfn);
        }
        self.ledger.entry(pid).or_default().extend(pages.iter().copied());
        platform.log.push(EventKind::PoolGrant { pid, pages: count, refill });
        Ok(pages)
    }

    /// Full access for every lower VMPL on every guest page, except pinned
    /// policy masks and delegated pool pages. No-op unless configured.
    pub fn permissive_mode(&self, platform: &mut Platform) {
        if !self.config.permissive {
            return;
        }
        let pinned: BTreeMap<(Pfn, VmplLevel), PermMask> = self
            .processes
            .values()
            .filter_map(|p| p.confine.as_ref())
            .flat_map(|c| c.policy.iter().map(move |(pfn, m)| ((*pfn, c.vmpl), *m)))
            .collect();
        for p in 0..platform.rmp.page_count() {
            let pfn = Pfn(p);
            if !platform.rmp.entry(pfn).is_some_and(|e| e.is_assigned()) || platform.rmp.delegation(pfn).is_some() {
                continue;
            }
            for v in VmplLevel::lower() {
                let mask = pinned.get(&(pfn, v)).copied().unwrap_or(PermMask::FULL);
                self.set_mask(platform, pfn, v, mask, GrantReason::Permissive);
            }
        }
    }

    /// First entry of a thread into its VMPL. The vCPU must be at VMPL0.
    pub fn enter_user(&mut self, platform: &mut Platform, vcpu: &mut Vcpu, tid: Tid) -> Result<(), OsError> {
        let tcb = self.tcb(tid)?;
        if tcb.state != TcbStateTag::Created {
            return Err(OsError::BadState { tid, state: tcb.state, expected: TcbStateTag::Created });
        }
        let vmpl = tcb.vmpl;
        *vcpu.vmsa_mut(vmpl) = tcb.saved_state.clone();
        vcpu.vmsa_mut(vmpl).runnable = true;
        vcpu.set_vmsa_owner(vmpl, Some(tid));
        vcpu.pinned_thread = Some(tid);
        platform.log.set_site(vcpu.id, vcpu.current());
        platform.log.push(EventKind::VmsaSync { tid });
        self.threads.get_mut(&tid).expect("checked").state = TcbStateTag::Entered;
        platform.log.push(EventKind::TcbState { tid, state: TcbStateTag::Entered });
        vcpu.vmpl_switch(vmpl, crate::event::SwitchReason::Enter, &mut platform.log)
            .map_err(|_| OsError::BadState { tid, state: TcbStateTag::Created, expected: TcbStateTag::Entered })?;
        Ok(())
    }

    /// Save the outgoing thread's VMSA into its TCB.
    pub fn save_thread(&mut self, platform: &mut Platform, vcpu: &Vcpu, tid: Tid) -> Result<(), OsError> {
        let tcb = self.threads.get_mut(&tid).ok_or(OsError::NoThread(tid))?;
        tcb.saved_state = vcpu.vmsa(tcb.vmpl).clone();
        platform.log.push(EventKind::VmsaSave { tid });
        Ok(())
    }

    /// Make `tid`'s VMSA current on `vcpu`, restoring it only if another
    /// thread has occupied that slot since it last ran.
    pub fn restore_thread(&mut self, platform: &mut Platform, vcpu: &mut Vcpu, tid: Tid) -> Result<(), OsError> {
        let tcb = self.tcb(tid)?;
        if tcb.state != TcbStateTag::Entered {
            return Err(OsError::BadState { tid, state: tcb.state, expected: TcbStateTag::Entered });
        }
        let vmpl = tcb.vmpl;
        if vcpu.vmsa_owner(vmpl) != Some(tid) {
            *vcpu.vmsa_mut(vmpl) = tcb.saved_state.clone();
            vcpu.set_vmsa_owner(vmpl, Some(tid));
            platform.log.push(EventKind::VmsaRestore { tid });
        }
        vcpu.pinned_thread = Some(tid);
        Ok(())
    }

    /// Switch `vcpu` from thread `out` to thread `inc`, both already entered.
    pub fn context_switch(&mut self, platform: &mut Platform, vcpu: &mut Vcpu, out: Tid, inc: Tid) -> Result<(), OsError> {
        for t in [out, inc] {
            let tcb = self.tcb(t)?;
            if tcb.state != TcbStateTag::Entered {
                return Err(OsError::BadState { tid: t, state: tcb.state, expected: TcbStateTag::Entered });
            }
        }
        self.save_thread(platform, vcpu, out)?;
        self.restore_thread(platform, vcpu, inc)
    }

    pub fn handle_interrupt(&mut self) {
        self.enter_handler();
        self.leave_handler();
    }

    /// Transparent debugging: the guest only records the event.
    pub fn handle_debug_trap(&mut self, tid: Tid) {
        self.enter_handler();
        if let Some(t) = self.threads.get_mut(&tid) {
            t.debug_traps += 1;
        }
        self.leave_handler();
    }

    fn enter_handler(&mut self) {
        assert!(!self.in_handler, "guest handler re-entered");
        self.in_handler = true;
        self.irqs_enabled = false;
    }

    fn leave_handler(&mut self) {
        self.in_handler = false;
        self.irqs_enabled = true;
    }

    pub fn irqs_enabled(&self) -> bool {
        self.irqs_enabled
    }

    /// Terminate one thread; the process goes away with its last thread.
    pub fn exit_thread(&mut self, platform: &mut Platform, tid: Tid, code: i64) {
        let Some(tcb) = self.threads.get_mut(&tid) else { return };
        if tcb.state == TcbStateTag::Exited {
            return;
        }
        tcb.state = TcbStateTag::Exited;
        tcb.saved_state.runnable = false;
        let pid = tcb.pid;
        platform.log.push(EventKind::ThreadExit { tid, code });
        platform.log.push(EventKind::TcbState { tid, state: TcbStateTag::Exited });
        let last = self.processes.get_mut(&pid).is_some_and(|p| {
            p.threads.remove(&tid);
            p.threads.is_empty()
        });
        if last {
            self.release_process(platform, pid);
        }
    }

    pub fn exit_group(&mut self, platform: &mut Platform, pid: Pid, code: i64) {
        let tids: Vec<Tid> = self.processes.get(&pid).map(|p| p.threads.iter().copied().collect()).unwrap_or_default();
        for t in tids {
            self.exit_thread(platform, t, code);
        }
    }

    fn release_process(&mut self, platform: &mut Platform, pid: Pid) {
        let Some(proc) = self.processes.remove(&pid) else { return };
        let mut pages = 0;
        let mapped: Vec<(u64, Pfn)> = proc.space.all_ptes().map(|(va, p)| (va, p.pfn)).collect();
        for (va, pfn) in mapped {
            if proc.space.vma_at(va).is_some_and(|v| v.owner == VmaOwner::Proxy && v.kind != VmaKind::Code) {
                continue;
            }
            if pfn.0 != VDSO_PFN {
                pages += 1;
            }
            self.release_frame(platform, pfn);
        }
        if let Some(conf) = &proc.confine {
            let _ = platform.rmp.unshare(conf.ghcb);
            let _ = platform.rmp.assign(conf.ghcb, GUEST);
            self.free_frame(platform, conf.ghcb);
            pages += 1;
            if conf.config.vdso_enabled && !self.processes.values().any(|p| p.confine.as_ref().is_some_and(|c| c.vmpl == conf.vmpl && c.config.vdso_enabled)) {
                self.set_mask(platform, Pfn(VDSO_PFN), conf.vmpl, PermMask::EMPTY, GrantReason::Revoke);
            }
        }
        for pfn in self.ledger.remove(&pid).unwrap_or_default() {
            platform.rmp.undelegate(pfn);
            for v in VmplLevel::lower() {
                self.set_mask(platform, pfn, v, PermMask::EMPTY, GrantReason::Revoke);
            }
            platform.mem.zero(pfn);
            self.free.insert(pfn);
            pages += 1;
        }
        platform.log.push(EventKind::ProcessRelease { pid, pages });
    }

    // ---- faults ----

    /// Make the page at `va` present (and writable when `write`). Kernel
    /// path: no RMP checks, no grants.
    fn fault_in(&mut self, platform: &mut Platform, pid: Pid, va: u64, write: bool) -> Result<FaultIn, ()> {
        let page = page_align_down(va);
        let proc = self.processes.get(&pid).ok_or(())?;
        let vma = *proc.space.vma_at(va).ok_or(())?;
        if vma.owner == VmaOwner::Proxy {
            return Err(());
        }
        match proc.space.pte(page).copied() {
            Some(pte) if write && pte.cow => {
                let new = self.alloc_frame(platform).ok_or(())?;
                platform.mem.copy_page(pte.pfn, new);
                let flags = vma.prot.pte_flags();
                self.proc_mut(pid).map_err(|_| ())?.space.map(page, new, flags).map_err(|_| ())?;
                self.release_frame(platform, pte.pfn);
                Ok(FaultIn::Cow)
            }
            Some(pte) if write && !pte.writable => Err(()),
            Some(_) => Ok(FaultIn::Present),
            None => {
                if (write && !vma.prot.write) || !(vma.prot.read || vma.prot.write || vma.prot.exec) {
                    return Err(());
                }
                let (pfn, flags) = match vma.backing {
                    Some(FileBacking { ino, page_offset }) => {
                        let index = page_offset + (page - vma.range.start) / PAGE_SIZE;
                        if write {
                            let pfn = self.alloc_frame(platform).ok_or(())?;
                            let src = self.cache_page(platform, ino, index).ok_or(())?;
                            platform.mem.copy_page(src, pfn);
                            self.release_frame(platform, src);
                            (pfn, vma.prot.pte_flags())
                        } else {
                            let pfn = self.cache_page(platform, ino, index).ok_or(())?;
                            let mut f = vma.prot.pte_flags();
                            f.cow = vma.prot.write;
                            (pfn, f)
                        }
                    }
                    None => (self.alloc_frame(platform).ok_or(())?, vma.prot.pte_flags()),
                };
                self.proc_mut(pid).map_err(|_| ())?.space.map(page, pfn, flags).map_err(|_| ())?;
                Ok(FaultIn::Mapped)
            }
        }
    }

    fn access_allowed(vma: &Vma, access: Access) -> bool {
        match access {
            Access::Read => vma.prot.read || vma.prot.exec,
            Access::Write => vma.prot.write,
            Access::Execute => vma.prot.exec,
        }
    }

    /// Resolve a forwarded fault on behalf of `tid`. Unresolvable faults
    /// terminate the thread.
    pub fn os_handle_fault(&mut self, platform: &mut Platform, tid: Tid, fault: &Fault) -> FaultResolution {
        self.enter_handler();
        let res = self.handle_fault_inner(platform, tid, fault);
        self.leave_handler();
        let outcome = match res {
            Some(o) => o,
            None => FaultOutcome::SegV,
        };
        platform.log.push(EventKind::GuestFault { tid, va: fault.va, kind: fault.kind, outcome });
        if outcome == FaultOutcome::SegV {
            platform.log.push(EventKind::SegV { tid, va: fault.va });
            self.exit_thread(platform, tid, -11);
            return FaultResolution::SegV;
        }
        FaultResolution::Resolved
    }

    fn handle_fault_inner(&mut self, platform: &mut Platform, tid: Tid, fault: &Fault) -> Option<FaultOutcome> {
        let pid = self.threads.get(&tid)?.pid;
        let vma = *self.space(pid)?.vma_at(fault.va)?;
        let access = match fault.access {
            crate::rmp::AccessType::Read => Access::Read,
            crate::rmp::AccessType::Write => Access::Write,
            _ => Access::Execute,
        };
        match fault.kind {
            FaultKind::NotPresent => {
                if !Self::access_allowed(&vma, access) {
                    return None;
                }
                self.fault_in(platform, pid, fault.va, access == Access::Write).ok()?;
                self.grant_page(platform, pid, fault.va, GrantReason::Fault);
                let page = page_align_down(fault.va);
                for i in 1..self.config.prefault_window {
                    let va = page + i * PAGE_SIZE;
                    if !vma.range.contains(va) {
                        break;
                    }
                    if self.space(pid)?.pte(va).is_some() {
                        continue;
                    }
                    if self.fault_in(platform, pid, va, false) == Ok(FaultIn::Mapped) {
                        self.grant_page(platform, pid, va, GrantReason::Prefault);
                    }
                }
                Some(FaultOutcome::Mapped)
            }
            FaultKind::WriteProtection if fault.cow && vma.prot.write => {
                let r = self.fault_in(platform, pid, fault.va, true).ok()?;
                self.grant_page(platform, pid, fault.va, GrantReason::Fault);
                Some(if r == FaultIn::Cow { FaultOutcome::Cow } else { FaultOutcome::Mapped })
            }
            _ => None,
        }
    }

    /// Forwarded pool exhaustion: hand the proxy `count` more pages.
    pub fn os_refill(&mut self, platform: &mut Platform, tid: Tid, va: u64, count: u64) -> Option<Vec<Pfn>> {
        self.enter_handler();
        let pid = self.threads.get(&tid).map(|t| t.pid);
        let res = pid.and_then(|pid| self.grant_pages(platform, pid, count, true).ok());
        self.leave_handler();
        let outcome = if res.is_some() { FaultOutcome::Refill } else { FaultOutcome::SegV };
        platform.log.push(EventKind::GuestFault { tid, va, kind: FaultKind::NotPresent, outcome });
        if res.is_none() {
            platform.log.push(EventKind::SegV { tid, va });
            self.exit_thread(platform, tid, -12);
        }
        res
    }

    // ---- user memory ----

    fn copy_to_user(&mut self, platform: &mut Platform, pid: Pid, va: u64, data: &[u8]) -> Result<(), ()> {
        let mut done = 0usize;
        while done < data.len() {
            let cur = va + done as u64;
            let page = page_align_down(cur);
            let chunk = ((page + PAGE_SIZE - cur) as usize).min(data.len() - done);
            self.fault_in(platform, pid, cur, true)?;
            let pfn = self.space(pid).and_then(|s| s.pte(page)).ok_or(())?.pfn;
            platform.mem.write_slice(pfn, cur - page, &data[done..done + chunk]);
            self.grant_page(platform, pid, page, GrantReason::Notify);
            done += chunk;
        }
        Ok(())
    }

    fn copy_from_user(&mut self, platform: &mut Platform, pid: Pid, va: u64, len: u64) -> Result<Vec<u8>, ()> {
        let mut out = Vec::with_capacity(len as usize);
        let mut cur = va;
        while cur < va + len {
            let page = page_align_down(cur);
            if self.fault_in(platform, pid, cur, false)? == FaultIn::Mapped {
                self.grant_page(platform, pid, page, GrantReason::Notify);
            }
            let pfn = self.space(pid).and_then(|s| s.pte(page)).ok_or(())?.pfn;
            let end = (page + PAGE_SIZE).min(va + len);
            let bytes = platform.mem.page_bytes(pfn);
            out.extend_from_slice(&bytes[(cur - page) as usize..(end - page) as usize]);
            cur = end;
        }
        Ok(out)
    }

    /// Unmap guest-managed pages in `range` and drop their frames.
    fn unmap_range(&mut self, platform: &mut Platform, pid: Pid, range: VaRange) {
        let Ok(proc) = self.proc_mut(pid) else { return };
        let removed = proc.space.unmap(range).unwrap_or_default();
        for (_, pte) in removed {
            self.release_frame(platform, pte.pfn);
        }
    }
}
