// SPDX-License-Identifier: Apache-2.0

//! x86-64 Linux syscall numbers and errno values used by the model.

pub const READ: u64 = 0;
pub const WRITE: u64 = 1;
pub const OPEN: u64 = 2;
pub const CLOSE: u64 = 3;
pub const MMAP: u64 = 9;
pub const MPROTECT: u64 = 10;
pub const MUNMAP: u64 = 11;
pub const BRK: u64 = 12;
pub const MREMAP: u64 = 25;
pub const MADVISE: u64 = 28;
pub const SHMAT: u64 = 30;
pub const GETPID: u64 = 39;
pub const EXIT: u64 = 60;
pub const SHMDT: u64 = 67;
pub const GETUID: u64 = 102;
pub const MLOCK: u64 = 149;
pub const MLOCKALL: u64 = 151;
pub const REMAP_FILE_PAGES: u64 = 216;
pub const CLOCK_GETTIME: u64 = 228;
pub const EXIT_GROUP: u64 = 231;
pub const MLOCK2: u64 = 325;
pub const PKEY_MPROTECT: u64 = 329;

const TABLE: &[(u64, &str)] = &[
    (READ, "read"),
    (WRITE, "write"),
    (OPEN, "open"),
    (CLOSE, "close"),
    (MMAP, "mmap"),
    (MPROTECT, "mprotect"),
    (MUNMAP, "munmap"),
    (BRK, "brk"),
    (MREMAP, "mremap"),
    (MADVISE, "madvise"),
    (SHMAT, "shmat"),
    (GETPID, "getpid"),
    (EXIT, "exit"),
    (SHMDT, "shmdt"),
    (GETUID, "getuid"),
    (MLOCK, "mlock"),
    (MLOCKALL, "mlockall"),
    (REMAP_FILE_PAGES, "remap_file_pages"),
    (CLOCK_GETTIME, "clock_gettime"),
    (EXIT_GROUP, "exit_group"),
    (MLOCK2, "mlock2"),
    (PKEY_MPROTECT, "pkey_mprotect"),
];

/// Virtual-memory syscalls after which the guest re-walks the affected range
/// and adjusts lower-VMPL permissions.
pub const INTERPOSED: [u64; 13] = [
    MMAP,
    MREMAP,
    MUNMAP,
    BRK,
    MPROTECT,
    PKEY_MPROTECT,
    MADVISE,
    SHMAT,
    SHMDT,
    REMAP_FILE_PAGES,
    MLOCK,
    MLOCK2,
    MLOCKALL,
];

pub fn is_interposed(nr: u64) -> bool {
    INTERPOSED.contains(&nr)
}

/// Syscalls the proxy-kernel can serve from its own page pool.
pub fn is_proxy_vm(nr: u64) -> bool {
    matches!(nr, MMAP | MUNMAP | MPROTECT | MREMAP)
}

/// Symbolic name, or the decimal number for syscalls outside the table.
pub fn name(nr: u64) -> String {
    TABLE
        .iter()
        .find(|(n, _)| *n == nr)
        .map_or_else(|| nr.to_string(), |(_, s)| (*s).to_string())
}

/// Accepts a symbolic name or a decimal number.
pub fn parse(s: &str) -> Option<u64> {
    TABLE
        .iter()
        .find(|(_, n)| *n == s)
        .map(|(nr, _)| *nr)
        .or_else(|| s.parse().ok())
}

pub const EPERM: i64 = 1;
pub const ENOENT: i64 = 2;
pub const ESRCH: i64 = 3;
pub const EBADF: i64 = 9;
pub const ENOMEM: i64 = 12;
pub const EACCES: i64 = 13;
pub const EFAULT: i64 = 14;
pub const EINVAL: i64 = 22;
pub const ENOSYS: i64 = 38;

const ERRNOS: &[(i64, &str)] = &[
    (EPERM, "EPERM"),
    (ENOENT, "ENOENT"),
    (ESRCH, "ESRCH"),
    (EBADF, "EBADF"),
    (ENOMEM, "ENOMEM"),
    (EACCES, "EACCES"),
    (EFAULT, "EFAULT"),
    (EINVAL, "EINVAL"),
    (ENOSYS, "ENOSYS"),
];

pub fn parse_errno(s: &str) -> Option<i64> {
    ERRNOS
        .iter()
        .find(|(_, n)| *n == s)
        .map(|(v, _)| *v)
        .or_else(|| s.parse().ok().filter(|v: &i64| *v > 0))
}

pub fn errno_name(e: i64) -> String {
    ERRNOS
        .iter()
        .find(|(v, _)| *v == e)
        .map_or_else(|| e.to_string(), |(_, n)| (*n).to_string())
}

// mmap flag and protection bits
pub const PROT_READ: u64 = 1;
pub const PROT_WRITE: u64 = 2;
pub const PROT_EXEC: u64 = 4;
pub const MAP_SHARED: u64 = 0x01;
pub const MAP_PRIVATE: u64 = 0x02;
pub const MAP_FIXED: u64 = 0x10;
pub const MAP_ANONYMOUS: u64 = 0x20;
pub const MREMAP_MAYMOVE: u64 = 1;
pub const MADV_DONTNEED: u64 = 4;
