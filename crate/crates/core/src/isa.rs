// SPDX-License-Identifier: Apache-2.0

//! The abstract instruction set that confined programs are written in.

use serde::{Deserialize, Serialize};

/// Every instruction occupies this many bytes of the code region.
pub const INSN_BYTES: u64 = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Instruction {
    /// Load one byte into the scratch register.
    Read(u64),
    Write(u64, u8),
    /// Explicit instruction-fetch probe at an address; does not transfer control.
    Exec(u64),
    Syscall { nr: u64, args: [u64; 6] },
    Breakpoint,
    Halt,
    /// mmap `pages` anonymous pages, write one byte to each, munmap.
    AllocTouchFree { pages: u32 },
}

impl Instruction {
    pub fn syscall(nr: u64, args: &[u64]) -> Self {
        let mut a = [0u64; 6];
        a[..args.len()].copy_from_slice(args);
        Instruction::Syscall { nr, args: a }
    }
}

pub type Program = Vec<Instruction>;
