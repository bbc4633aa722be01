// SPDX-License-Identifier: Apache-2.0

//! Reference models and scenario generators shared by the property and
//! acceptance suites. The reference models are written from the permission
//! rules directly and never call the code they are compared against.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use proptest::prelude::*;

use vmplsim::guest::{XomSpec, XomTarget};
use vmplsim::mmu::FaultKind;
use vmplsim::scenario::{BootChannel, Num, Op, Scenario, ScenarioConfig, SyscallName, ThreadDef};
use vmplsim::xom::ExecLevel;

/// Mask bit order used by the RMP: read, write, user fetch, supervisor fetch.
pub const BIT_READ: u8 = 1 << 0;
pub const BIT_WRITE: u8 = 1 << 1;
pub const BIT_FETCH_USER: u8 = 1 << 2;
pub const BIT_FETCH_SUPER: u8 = 1 << 3;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Acc {
    Read,
    Write,
    FetchUser,
    FetchSuper,
}

pub const ACCS: [Acc; 4] = [Acc::Read, Acc::Write, Acc::FetchUser, Acc::FetchSuper];

/// Truth table for a guest-owned page: an access is allowed iff its bit is set.
pub fn rmp_oracle(mask_bits: u8, acc: Acc) -> bool {
    const TABLE: [(Acc, u8); 4] = [
        (Acc::Read, BIT_READ),
        (Acc::Write, BIT_WRITE),
        (Acc::FetchUser, BIT_FETCH_USER),
        (Acc::FetchSuper, BIT_FETCH_SUPER),
    ];
    let bit = TABLE.iter().find(|(a, _)| *a == acc).map(|(_, b)| *b).unwrap();
    mask_bits & bit == bit
}

/// One randomly drawn nested-walk input.
#[derive(Copy, Clone, Debug)]
pub struct WalkTuple {
    pub present: bool,
    pub writable: bool,
    pub user: bool,
    pub nx: bool,
    pub cow: bool,
    pub mask_bits: u8,
    /// 0 read, 1 write, 2 execute.
    pub op: u8,
    pub user_mode: bool,
    pub vmpl: u8,
}

/// The five predicates in hardware order. Returns the first failing one.
pub fn walk_oracle(t: &WalkTuple) -> Option<FaultKind> {
    let is_write = t.op == 1;
    let is_exec = t.op == 2;
    // A copy-on-write entry is installed read-only.
    let pte_w = t.writable && !t.cow;
    let rmp_acc = match (t.op, t.user_mode) {
        (0, _) => Acc::Read,
        (1, _) => Acc::Write,
        (_, true) => Acc::FetchUser,
        (_, false) => Acc::FetchSuper,
    };
    let checks: [(bool, FaultKind); 5] = [
        (t.present, FaultKind::NotPresent),
        (!is_write || pte_w, FaultKind::WriteProtection),
        (!t.user_mode || t.user, FaultKind::UserSupervisor),
        (!is_exec || !t.nx, FaultKind::NoExecute),
        (rmp_oracle(t.mask_bits, rmp_acc), FaultKind::RmpViolation),
    ];
    checks.iter().find(|(ok, _)| !ok).map(|(_, k)| *k)
}

pub fn walk_tuple() -> impl Strategy<Value = WalkTuple> {
    (any::<[bool; 6]>(), 0u8..16, 0u8..3, 1u8..4).prop_map(|(b, mask_bits, op, vmpl)| WalkTuple {
        present: b[0],
        writable: b[1],
        user: b[2],
        nx: b[3],
        cow: b[4],
        mask_bits,
        op,
        user_mode: b[5],
        vmpl,
    })
}

/// Count event-log lines of `kind` whose detail contains every needle.
/// Works on the rendered text only.
pub fn grep(log: &str, kind: &str, needles: &[&str]) -> u64 {
    log.lines()
        .filter(|l| {
            let mut cols = l.split("  ");
            let _seq = cols.next();
            cols.next() == Some(kind) && needles.iter().all(|n| l.split_whitespace().any(|w| w == *n))
        })
        .count() as u64
}

/// Sum of `key=<n>` values across lines of `kind`.
pub fn grep_sum(log: &str, kind: &str, key: &str) -> u64 {
    let prefix = format!("{key}=");
    log.lines()
        .filter(|l| l.split("  ").nth(1) == Some(kind))
        .flat_map(|l| l.split_whitespace().filter_map(|w| w.strip_prefix(prefix.as_str())).map(|v| v.parse::<u64>().unwrap()).collect::<Vec<_>>())
        .sum()
}

/// TcbState transitions per tid, in log order.
pub fn tcb_histories(log: &str) -> BTreeMap<u64, Vec<String>> {
    let mut out: BTreeMap<u64, Vec<String>> = BTreeMap::new();
    for l in log.lines().filter(|l| l.split("  ").nth(1) == Some("TcbState")) {
        let field = |k: &str| l.split_whitespace().find_map(|w| w.strip_prefix(k)).unwrap().to_string();
        out.entry(field("tid=").parse().unwrap()).or_default().push(field("state="));
    }
    out
}

pub const DATA: u64 = 0x60_0000;
pub const CODE: u64 = 0x40_0000;
pub const PAGE: u64 = 4096;

pub fn sys(name: &str, args: &[u64]) -> Op {
    Op::Syscall { nr: SyscallName::Name(name.into()), args: args.iter().map(|a| Num(*a)).collect() }
}

pub fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        3 => Just(sys("getpid", &[])),
        1 => Just(sys("getuid", &[])),
        2 => Just(sys("clock_gettime", &[])),
        1 => Just(sys("open", &[0, 0])),
        3 => (0u64..4).prop_map(|p| Op::Write { va: Num(DATA + p * PAGE + 8), byte: 5 }),
        1 => (0u64..4).prop_map(|p| Op::Read { va: Num(DATA + p * PAGE) }),
        1 => Just(Op::Read { va: Num(CODE) }),
        2 => (1u32..5).prop_map(|pages| Op::AllocTouchFree { pages }),
        1 => Just(Op::Breakpoint {}),
        1 => Just(sys("brk", &[0])),
    ]
}

pub fn policy() -> impl Strategy<Value = Option<String>> {
    prop_oneof![
        Just(None),
        Just(Some("10 open deny:EPERM".to_string())),
        Just(Some("5 getpid trace\n10 getpid async\n20 * allow".to_string())),
        Just(Some("1 * trace\n10 getuid sync".to_string())),
    ]
}

pub fn thread(vcpus: u32) -> impl Strategy<Value = ThreadDef> {
    (1u8..4, 0..vcpus, policy(), prop::collection::vec(op(), 0..24), any::<bool>()).prop_map(|(vmpl, vcpu, policy_inline, mut program, group_exit)| {
        if group_exit {
            program.push(sys("exit_group", &[0]));
        }
        ThreadDef {
            vmpl,
            vcpu,
            policy: None,
            policy_inline,
            data_pages: 4,
            code_pages: 0,
            debug_regs: Vec::new(),
            trace_hooks: vec![None],
            program,
        }
    })
}

pub fn config() -> impl Strategy<Value = ScenarioConfig> {
    (
        any::<bool>(),
        prop_oneof![Just(0u64), Just(4), Just(64)],
        1u64..6,
        prop::option::of(2u64..30),
        any::<bool>(),
        any::<bool>(),
        any::<bool>(),
    )
        .prop_map(|(async_enabled, pool_capacity, prefault_window, timer_interval, forward_breakpoints, msr, xom)| ScenarioConfig {
            async_enabled,
            pool_capacity,
            prefault_window,
            timer_interval,
            forward_breakpoints,
            boot_channel: if msr { BootChannel::Msr } else { BootChannel::Ghcb },
            xom: if xom { vec![XomSpec { target: XomTarget::ProxyCode, exec_level: ExecLevel::SuperOnly }] } else { Vec::new() },
            ..ScenarioConfig::default()
        })
}

pub fn scenario() -> impl Strategy<Value = Scenario> {
    (1u32..3, any::<u64>(), config())
        .prop_flat_map(|(vcpus, seed, config)| (Just(vcpus), Just(seed), Just(config), prop::collection::vec(thread(vcpus), 1..4)))
        .prop_map(|(vcpus, seed, config, threads)| Scenario {
            name: "generated".into(),
            memory_pages: 2048,
            vcpus,
            seed,
            step_budget: 200_000,
            config,
            files: vec!["payload".into()],
            threads,
            base_dir: PathBuf::from("."),
        })
}
