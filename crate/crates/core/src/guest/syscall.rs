// SPDX-License-Identifier: Apache-2.0

//! Guest-side syscall implementations.

use crate::event::EventKind;
use crate::mmu::{covering_range, FileBacking, Prot, Vma, VmaKind, VmaOwner};
use crate::platform::Platform;
use crate::syscalls::{self as sc, EBADF, EFAULT, EINVAL, ENOENT, ENOMEM, ENOSYS};
use crate::types::{is_page_aligned, page_align_up, Pid, Tid, VaRange, PAGE_SIZE};
use crate::vcpu::SyscallRequest;

use super::layout::{MMAP_BASE, MMAP_CEIL};
use super::{GuestOs, OpenFile};

const O_CREAT: u64 = 0x40;

/// Outcome of a guest-handled syscall.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct SyscallResult {
    pub ret: i64,
    /// The calling thread no longer exists.
    pub exited: bool,
}

impl GuestOs {
    /// Execute a syscall for `tid`. Interposed calls are followed by a walk
    /// over the affected range that re-derives lower-VMPL masks.
    pub fn os_handle_syscall(&mut self, platform: &mut Platform, tid: Tid, req: &SyscallRequest) -> SyscallResult {
        let Some(pid) = self.threads.get(&tid).filter(|t| t.state == crate::event::TcbStateTag::Entered).map(|t| t.pid) else {
            return SyscallResult { ret: -sc::ESRCH, exited: true };
        };
        let a = req.args;
        match req.nr {
            sc::EXIT => {
                platform.log.push(EventKind::GuestSyscall { tid, nr: req.nr, ret: 0 });
                self.exit_thread(platform, tid, a[0] as i64);
                return SyscallResult { ret: 0, exited: true };
            }
            sc::EXIT_GROUP => {
                platform.log.push(EventKind::GuestSyscall { tid, nr: req.nr, ret: 0 });
                self.exit_group(platform, pid, a[0] as i64);
                return SyscallResult { ret: 0, exited: true };
            }
            _ => {}
        }
        self.enter_handler();
        let (ret, touched) = self.dispatch(platform, pid, req);
        if sc::is_interposed(req.nr) {
            match touched {
                Touched::Range(r) => self.interpose(platform, pid, r),
                Touched::All => {
                    let ranges: Vec<VaRange> = self.space(pid).map(|s| s.vmas().map(|v| v.range).collect()).unwrap_or_default();
                    for r in ranges {
                        self.interpose(platform, pid, r);
                    }
                }
                Touched::Nothing => {}
            }
        }
        self.leave_handler();
        platform.log.push(EventKind::GuestSyscall { tid, nr: req.nr, ret });
        SyscallResult { ret, exited: false }
    }

    fn dispatch(&mut self, platform: &mut Platform, pid: Pid, req: &SyscallRequest) -> (i64, Touched) {
        let a = req.args;
        let plain = |r: i64| (r, Touched::Nothing);
        match req.nr {
            sc::READ => plain(self.sys_read(platform, pid, a[0], a[1], a[2])),
            sc::WRITE => plain(self.sys_write(platform, pid, a[0], a[1], a[2])),
            sc::OPEN => plain(self.sys_open(pid, a[0], a[1])),
            sc::CLOSE => plain(match self.processes.get_mut(&pid).and_then(|p| p.fds.remove(&a[0])) {
                Some(_) => 0,
                None => -EBADF,
            }),
            sc::GETPID => plain(i64::from(pid)),
            sc::GETUID => plain(i64::from(self.config.uid)),
            sc::CLOCK_GETTIME => plain(self.clock as i64),
            sc::BRK => {
                let r = self.sys_brk(platform, pid, a[0]);
                let p = &self.processes[&pid];
                (r, Touched::Range(VaRange::new(p.brk_start, page_align_up(p.brk))))
            }
            sc::MMAP => {
                let r = self.sys_mmap(platform, pid, a);
                (r, if r >= 0 { Touched::Range(covering_range(r as u64, a[1])) } else { Touched::Nothing })
            }
            sc::MUNMAP => (self.sys_munmap(platform, pid, a[0], a[1]), Touched::Nothing),
            sc::MPROTECT | sc::PKEY_MPROTECT => {
                let r = self.sys_mprotect(pid, a[0], a[1], a[2]);
                (r, range_of(a[0], a[1]))
            }
            sc::MREMAP => {
                let r = self.sys_mremap(platform, pid, a[0], a[1], a[2], a[3]);
                (r, if r >= 0 { Touched::Range(covering_range(r as u64, a[2])) } else { Touched::Nothing })
            }
            sc::MADVISE => (self.sys_madvise(platform, pid, a[0], a[1], a[2]), range_of(a[0], a[1])),
            sc::MLOCK | sc::MLOCK2 => (self.populate(platform, pid, a[0], a[1]), range_of(a[0], a[1])),
            sc::MLOCKALL => {
                let ranges: Vec<VaRange> = self.guest_vmas(pid).iter().map(|v| v.range).collect();
                for r in ranges {
                    self.populate(platform, pid, r.start, r.len());
                }
                (0, Touched::All)
            }
            sc::REMAP_FILE_PAGES => (-ENOSYS, range_of(a[0], a[1])),
            sc::SHMAT | sc::SHMDT => (-ENOSYS, Touched::Nothing),
            _ => plain(-ENOSYS),
        }
    }

    fn guest_vmas(&self, pid: Pid) -> Vec<Vma> {
        self.space(pid)
            .map(|s| s.vmas().filter(|v| v.owner == VmaOwner::Guest && v.kind != VmaKind::Vdso).copied().collect())
            .unwrap_or_default()
    }

    fn sys_read(&mut self, platform: &mut Platform, pid: Pid, fd: u64, buf: u64, count: u64) -> i64 {
        if fd == 0 {
            return 0;
        }
        let Some(of) = self.processes[&pid].fds.get(&fd).copied() else { return -EBADF };
        let data = self.files.get(of.ino as usize).cloned().unwrap_or_default();
        let start = (of.offset as usize).min(data.len());
        let end = (start + count as usize).min(data.len());
        if self.copy_to_user(platform, pid, buf, &data[start..end]).is_err() {
            return -EFAULT;
        }
        if let Some(f) = self.processes.get_mut(&pid).and_then(|p| p.fds.get_mut(&fd)) {
            f.offset = end as u64;
        }
        (end - start) as i64
    }

    fn sys_write(&mut self, platform: &mut Platform, pid: Pid, fd: u64, buf: u64, count: u64) -> i64 {
        let Ok(bytes) = self.copy_from_user(platform, pid, buf, count) else { return -EFAULT };
        match fd {
            1 | 2 => {
                self.console.extend_from_slice(&bytes);
                count as i64
            }
            _ => {
                let Some(of) = self.processes[&pid].fds.get(&fd).copied() else { return -EBADF };
                let file = &mut self.files[of.ino as usize];
                let off = of.offset as usize;
                if file.len() < off + bytes.len() {
                    file.resize(off + bytes.len(), 0);
                }
                file[off..off + bytes.len()].copy_from_slice(&bytes);
                self.sync_cache(platform, of.ino, of.offset, &bytes);
                if let Some(f) = self.processes.get_mut(&pid).and_then(|p| p.fds.get_mut(&fd)) {
                    f.offset += count;
                }
                count as i64
            }
        }
    }

    /// Keep cached pages coherent with a write to the file.
    fn sync_cache(&self, platform: &mut Platform, ino: u32, offset: u64, bytes: &[u8]) {
        for (i, b) in bytes.iter().enumerate() {
            let pos = offset + i as u64;
            if let Some(p) = self.cache.get(&(ino, pos / PAGE_SIZE)) {
                platform.mem.write_byte(p.pfn, pos % PAGE_SIZE, *b);
            }
        }
    }

    fn sys_open(&mut self, pid: Pid, ino: u64, flags: u64) -> i64 {
        let ino = if (ino as usize) < self.files.len() {
            ino as u32
        } else if flags & O_CREAT != 0 {
            self.add_file(Vec::new())
        } else {
            return -ENOENT;
        };
        let proc = self.processes.get_mut(&pid).expect("caller checked");
        let fd = (3..).find(|fd| !proc.fds.contains_key(fd)).expect("fd space");
        proc.fds.insert(fd, OpenFile { ino, offset: 0 });
        fd as i64
    }

    fn sys_brk(&mut self, platform: &mut Platform, pid: Pid, addr: u64) -> i64 {
        let (start, cur) = {
            let p = &self.processes[&pid];
            (p.brk_start, p.brk)
        };
        if addr < start {
            return cur as i64;
        }
        let old_end = page_align_up(cur);
        let new_end = page_align_up(addr);
        if new_end > old_end {
            let grow = VaRange::new(old_end, new_end);
            let space = &mut self.processes.get_mut(&pid).expect("caller checked").space;
            if space.find_free(old_end, new_end, grow.len()) != Some(old_end) {
                return cur as i64;
            }
            let _ = space.add_vma(Vma::new(grow, VmaKind::Data, Prot::RW));
        } else if new_end < old_end {
            let shrink = VaRange::new(new_end, old_end);
            self.unmap_range(platform, pid, shrink);
            self.processes.get_mut(&pid).expect("caller checked").space.remove_vmas(shrink);
        }
        self.processes.get_mut(&pid).expect("caller checked").brk = addr;
        addr as i64
    }

    fn sys_mmap(&mut self, platform: &mut Platform, pid: Pid, a: [u64; 6]) -> i64 {
        let [addr, len, prot, flags, fd, off] = a;
        if len == 0 || off % PAGE_SIZE != 0 || flags & (sc::MAP_PRIVATE | sc::MAP_SHARED) == 0 {
            return -EINVAL;
        }
        let size = page_align_up(len);
        let backing = if flags & sc::MAP_ANONYMOUS != 0 {
            None
        } else {
            match self.processes[&pid].fds.get(&fd) {
                Some(f) => Some(FileBacking { ino: f.ino, page_offset: off / PAGE_SIZE }),
                None => return -EBADF,
            }
        };
        let start = if flags & sc::MAP_FIXED != 0 {
            if !is_page_aligned(addr) {
                return -EINVAL;
            }
            let r = VaRange::from_len(addr, size);
            if self.space(pid).is_some_and(|s| s.vmas_in(r).iter().any(|v| v.owner == VmaOwner::Proxy || v.kind == VmaKind::Vdso)) {
                return -EINVAL;
            }
            self.unmap_range(platform, pid, r);
            self.processes.get_mut(&pid).expect("caller checked").space.remove_vmas(r);
            addr
        } else {
            match self.space(pid).and_then(|s| s.find_free(MMAP_BASE, MMAP_CEIL, size)) {
                Some(s) => s,
                None => return -ENOMEM,
            }
        };
        let kind = if backing.is_some() { VmaKind::File } else { VmaKind::Anon };
        let mut vma = Vma::new(VaRange::from_len(start, size), kind, Prot::from_linux(prot));
        vma.backing = backing;
        match self.processes.get_mut(&pid).expect("caller checked").space.add_vma(vma) {
            Ok(()) => start as i64,
            Err(_) => -ENOMEM,
        }
    }

    /// Guest-managed range check shared by the VM syscalls.
    fn guest_range(&self, pid: Pid, addr: u64, len: u64) -> Result<VaRange, i64> {
        if !is_page_aligned(addr) || len == 0 {
            return Err(-EINVAL);
        }
        let r = covering_range(addr, len);
        let space = self.space(pid).ok_or(-EINVAL)?;
        if space.vmas_in(r).iter().any(|v| v.owner == VmaOwner::Proxy || v.kind == VmaKind::Vdso) {
            return Err(-EINVAL);
        }
        Ok(r)
    }

    fn sys_munmap(&mut self, platform: &mut Platform, pid: Pid, addr: u64, len: u64) -> i64 {
        let r = match self.guest_range(pid, addr, len) {
            Ok(r) => r,
            Err(e) => return e,
        };
        self.unmap_range(platform, pid, r);
        let space = &mut self.processes.get_mut(&pid).expect("caller checked").space;
        space.remove_vmas(r);
        space.clear_code(r);
        0
    }

    fn sys_mprotect(&mut self, pid: Pid, addr: u64, len: u64, prot: u64) -> i64 {
        let r = match self.guest_range(pid, addr, len) {
            Ok(r) => r,
            Err(e) => return e,
        };
        let prot = Prot::from_linux(prot);
        let space = &mut self.processes.get_mut(&pid).expect("caller checked").space;
        if space.set_vma_prot(r, prot).is_err() {
            return -ENOMEM;
        }
        let _ = space.protect(r, prot.pte_flags());
        0
    }

    fn sys_mremap(&mut self, platform: &mut Platform, pid: Pid, old: u64, old_len: u64, new_len: u64, flags: u64) -> i64 {
        let r = match self.guest_range(pid, old, old_len) {
            Ok(r) => r,
            Err(e) => return e,
        };
        if new_len == 0 {
            return -EINVAL;
        }
        let Some(vma) = self.space(pid).and_then(|s| s.vma_at(old)).copied() else { return -EFAULT };
        if !vma.range.contains_range(&r) {
            return -EFAULT;
        }
        let new_size = page_align_up(new_len);
        let old_size = r.len();
        if new_size == old_size {
            return old as i64;
        }
        if new_size < old_size {
            let tail = VaRange::new(old + new_size, r.end);
            self.unmap_range(platform, pid, tail);
            self.processes.get_mut(&pid).expect("caller checked").space.remove_vmas(tail);
            return old as i64;
        }
        let grow = VaRange::new(r.end, old + new_size);
        let space = &mut self.processes.get_mut(&pid).expect("caller checked").space;
        if space.find_free(grow.start, grow.end, grow.len()) == Some(grow.start) {
            let mut piece = vma;
            piece.range = grow;
            if let Some(b) = piece.backing.as_mut() {
                b.page_offset = vma.backing.map_or(0, |v| v.page_offset) + (grow.start - vma.range.start) / PAGE_SIZE;
            }
            return match space.add_vma(piece) {
                Ok(()) => old as i64,
                Err(_) => -ENOMEM,
            };
        }
        if flags & sc::MREMAP_MAYMOVE == 0 {
            return -ENOMEM;
        }
        let Some(dest) = space.find_free(MMAP_BASE, MMAP_CEIL, new_size) else { return -ENOMEM };
        if space.relocate(r, dest).is_err() {
            return -ENOMEM;
        }
        let mut piece = vma;
        piece.range = VaRange::new(dest + old_size, dest + new_size);
        if let Some(b) = piece.backing.as_mut() {
            b.page_offset = vma.backing.map_or(0, |v| v.page_offset) + (r.start - vma.range.start + old_size) / PAGE_SIZE;
        }
        match space.add_vma(piece) {
            Ok(()) => dest as i64,
            Err(_) => -ENOMEM,
        }
    }

    fn sys_madvise(&mut self, platform: &mut Platform, pid: Pid, addr: u64, len: u64, advice: u64) -> i64 {
        let r = match self.guest_range(pid, addr, len) {
            Ok(r) => r,
            Err(e) => return e,
        };
        if !self.space(pid).is_some_and(|s| s.is_covered(r)) {
            return -ENOMEM;
        }
        if advice == sc::MADV_DONTNEED {
            let anon: Vec<VaRange> = self
                .space(pid)
                .map(|s| s.vmas_in(r).iter().filter(|v| v.backing.is_none() && v.kind != VmaKind::Code).filter_map(|v| v.range.intersect(&r)).collect())
                .unwrap_or_default();
            for piece in anon {
                self.unmap_range(platform, pid, piece);
            }
        }
        0
    }

    /// Fault in every page of the range, as mlock does.
    fn populate(&mut self, platform: &mut Platform, pid: Pid, addr: u64, len: u64) -> i64 {
        let r = match self.guest_range(pid, addr, len) {
            Ok(r) => r,
            Err(e) => return e,
        };
        if !self.space(pid).is_some_and(|s| s.is_covered(r)) {
            return -ENOMEM;
        }
        for va in r.page_addrs() {
            let _ = self.fault_in(platform, pid, va, false);
        }
        0
    }
}

enum Touched {
    Nothing,
    Range(VaRange),
    All,
}

fn range_of(addr: u64, len: u64) -> Touched {
    if len == 0 || !is_page_aligned(addr) {
        Touched::Nothing
    } else {
        Touched::Range(covering_range(addr, len))
    }
}
