// SPDX-License-Identifier: Apache-2.0

//! Fixed virtual layout of every simulated process.

pub const CODE_BASE: u64 = 0x40_0000;
pub const DATA_BASE: u64 = 0x60_0000;
pub const HEAP_BASE: u64 = 0x100_0000;

pub const MMAP_BASE: u64 = 0x10_0000_0000;
pub const MMAP_CEIL: u64 = 0x20_0000_0000;

/// Window the proxy-kernel carves its self-managed mappings from.
pub const PROXY_ANON_BASE: u64 = 0x20_0000_0000;
pub const PROXY_ANON_CEIL: u64 = 0x30_0000_0000;

pub const STACK_TOP: u64 = 0x7fff_0000_0000;
pub const STACK_PAGES: u64 = 16;

pub const PROXY_CODE_BASE: u64 = 0x7fff_8000_0000;
pub const PROXY_CODE_PAGES: u64 = 4;

pub const VDSO_VA: u64 = 0x7fff_f000_0000;

/// Reserved frame never handed out.
pub const NULL_PFN: u64 = 0;
pub const VDSO_PFN: u64 = 1;
