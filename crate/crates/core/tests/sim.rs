// SPDX-License-Identifier: Apache-2.0

use std::path::Path;

use vmplsim::event::{EventKind, FaultRoute, Route, SwitchReason, TcbStateTag};
use vmplsim::report::RunReport;
use vmplsim::scenario::{RunOptions, RunOutput, Scenario};

fn run(text: &str) -> RunOutput {
    let s = Scenario::parse(text, Path::new(".")).expect("scenario");
    s.run(&RunOptions::default()).expect("run")
}

fn completed(out: &RunOutput) -> &RunReport {
    assert!(out.error.is_none(), "run failed: {:?}\n{}", out.error, out.log);
    assert_eq!(out.report.outcome, "completed");
    &out.report
}

fn getpids(n: u32, extra: &str) -> String {
    format!(
        r#"{{"seed": 5, {extra} "threads": [{{"program": [
            {{"op": "repeat", "count": {n}, "body": [{{"op": "syscall", "nr": "getpid"}}]}}
        ]}}]}}"#
    )
}

#[test]
fn one_getpid_is_two_forward_switches() {
    let out = run(&getpids(1, ""));
    let r = completed(&out);
    assert_eq!(r.routes.sync, 1);
    assert_eq!(r.switches.forward, 2);
    assert_eq!(r.switches.boot, 2);
    assert_eq!(r.switches.enter, 1);
    assert_eq!(r.switches.exit, 1);
    assert_eq!(r.forwarded_by_syscall.get("getpid"), Some(&1));
    let ret = out.sim.log().events().iter().find_map(|e| match &e.kind {
        EventKind::SyscallRoute { nr, ret, .. } if *nr == 39 => Some(*ret),
        _ => None,
    });
    assert_eq!(ret, Some(100));
}

#[test]
fn async_getpid_skips_vmpl_switches() {
    let sync = run(&getpids(20, ""));
    let asyn = run(&getpids(20, r#""config": {"async_enabled": true},"#));
    let (s, a) = (completed(&sync), completed(&asyn));
    assert_eq!(a.routes.r#async, 20);
    assert_eq!(a.routes.sync, 0);
    assert_eq!(a.switches.forward, 0);
    let rets = |o: &RunOutput| -> Vec<i64> {
        o.sim
            .log()
            .events()
            .iter()
            .filter_map(|e| match &e.kind {
                EventKind::SyscallRoute { ret, .. } => Some(*ret),
                _ => None,
            })
            .collect()
    };
    assert_eq!(rets(&sync), rets(&asyn));
    assert!(a.hotcall_spins >= 20);
    assert!(s.cycles.confined > a.cycles.confined);
}

#[test]
fn vdso_clock_stays_local() {
    let out = run(r#"{"threads": [{"program": [{"op": "syscall", "nr": "clock_gettime"}]}]}"#);
    let r = completed(&out);
    assert_eq!(r.routes.vdso, 1);
    assert_eq!(r.switches.forward, 0);
    assert_eq!(r.cycles.confined, r.cycles.baseline);
}

#[test]
fn denied_open_never_reaches_the_guest() {
    let out = run(
        r#"{"threads": [{"policy_inline": "10 open deny:1", "program": [
        {"op": "repeat", "count": 5, "body": [{"op": "syscall", "nr": "open", "args": [0, 0]}]}
    ]}]}"#,
    );
    let r = completed(&out);
    assert_eq!(r.routes.denied, 5);
    assert_eq!(r.routes.sync, 0);
    assert_eq!(r.guest_syscalls, 0);
    assert!(out.sim.log().events().iter().all(|e| !matches!(e.kind, EventKind::SyscallRoute { nr: 2, ret, .. } if ret != -1)));
}

#[test]
fn pool_absorbs_alloc_touch_free() {
    let text = |cap: u64| {
        format!(
            r#"{{"config": {{"pool_capacity": {cap}}}, "threads": [{{"program": [
            {{"op": "repeat", "count": 10, "body": [{{"op": "alloc_touch_free", "pages": 4}}]}}
        ]}}]}}"#
        )
    };
    let pooled = run(&text(64));
    let p = completed(&pooled);
    assert_eq!(p.fault_routes.forwarded_user + p.fault_routes.forwarded_super, 0);
    assert_eq!(p.fault_routes.resolved, 40);
    assert_eq!(p.routes.self_handled, 20);
    let plain = run(&text(0));
    let n = completed(&plain);
    assert_eq!(n.fault_routes.forwarded_user, 10);
    assert_eq!(n.routes.sync, 20);
}

#[test]
fn small_pool_refills() {
    // Two 2-page mappings against a 2-page pool: the second one drains it.
    let mmap = r#"{"op": "syscall", "nr": "mmap", "args": [0, 8192, 3, 34, 0, 0]}"#;
    let out = run(&format!(
        r#"{{"config": {{"pool_capacity": 2}}, "threads": [{{"program": [{mmap}, {mmap},
        {{"op": "touch_pages", "va": "0x2000000000", "pages": 4}}]}}]}}"#
    ));
    let r = completed(&out);
    assert_eq!(r.routes.self_handled, 2);
    assert_eq!(r.fault_routes.resolved, 4);
    assert_eq!(r.fault_routes.forwarded_user, 2);
    assert_eq!(r.pool_refills, 2);
}

#[test]
fn oversized_pool_mmap_is_forwarded() {
    let out = run(r#"{"config": {"pool_capacity": 2}, "threads": [{"program": [
        {"op": "syscall", "nr": "mmap", "args": [0, 12288, 3, 34, 0, 0]}
    ]}]}"#);
    let r = completed(&out);
    assert_eq!(r.routes.self_handled, 0);
    assert_eq!(r.routes.sync, 1);
}

#[test]
fn prefault_window_batches_faults() {
    let out = run(r#"{"threads": [{"data_pages": 16, "program": [{"op": "touch_pages", "va": "0x600000", "pages": 16}]}]}"#);
    let r = completed(&out);
    assert_eq!(r.fault_routes.forwarded_user, 4);
    assert_eq!(r.grants.fault, 4);
    assert_eq!(r.grants.prefault, 12);
}

#[test]
fn timer_preempts_and_round_robins() {
    let out = run(
        r#"{"config": {"timer_interval": 3}, "threads": [
        {"program": [{"op": "repeat", "count": 10, "body": [{"op": "read", "va": "0x400000"}]}]},
        {"program": [{"op": "repeat", "count": 10, "body": [{"op": "read", "va": "0x400000"}]}]}
    ]}"#,
    );
    let r = completed(&out);
    assert_eq!(r.threads, 2);
    assert_eq!(r.exited, 2);
    assert!(r.exceptions.timer > 0);
    assert!(r.switches.schedule > 0);
    assert!(r.vmsa_saves > 0 && r.vmsa_restores > 0);
}

#[test]
fn breakpoints_and_trace_hooks() {
    let out = run(
        r#"{"threads": [{"trace_hooks": [null, ["0x400004"]], "program": [
        {"op": "breakpoint"}, {"op": "breakpoint"}, {"op": "syscall", "nr": "getpid"}
    ]}]}"#,
    );
    let r = completed(&out);
    assert_eq!(r.exceptions.breakpoint_local, 2);
    assert_eq!(r.trace_hits, 3);
    let fwd = run(
        r#"{"config": {"forward_breakpoints": true}, "threads": [{"program": [{"op": "breakpoint"}]}]}"#,
    );
    assert_eq!(completed(&fwd).exceptions.breakpoint_forwarded, 1);
}

#[test]
fn hardware_breakpoint_fires_once() {
    let out = run(
        r#"{"threads": [{"debug_regs": ["0x400004"], "program": [
        {"op": "syscall", "nr": "getpid"}, {"op": "syscall", "nr": "getpid"}, {"op": "halt"}
    ]}]}"#,
    );
    let r = completed(&out);
    assert_eq!(r.exceptions.hw_breakpoint, 1);
    assert_eq!(r.routes.sync, 2);
}

#[test]
fn exit_is_forwarded_and_final() {
    let out = run(r#"{"threads": [{"program": [{"op": "syscall", "nr": "exit", "args": [3]}, {"op": "syscall", "nr": "getpid"}]}]}"#);
    let r = completed(&out);
    assert_eq!(r.exited, 1);
    assert_eq!(r.routes.sync, 1);
    let events = out.sim.log().events();
    let exited = events
        .iter()
        .position(|e| matches!(e.kind, EventKind::TcbState { state: TcbStateTag::Exited, .. }))
        .unwrap();
    assert!(events[exited + 1..].iter().all(|e| e.kind.tid().is_none()));
    assert!(events.iter().any(|e| matches!(e.kind, EventKind::ThreadExit { code: 3, .. })));
    assert!(out.sim.os().processes().next().is_none());
}

#[test]
fn segv_on_unmapped_access() {
    let out = run(r#"{"threads": [{"program": [{"op": "write", "va": "0x5000000", "byte": 1}, {"op": "syscall", "nr": "getpid"}]}]}"#);
    let r = completed(&out);
    assert_eq!(r.segv, 1);
    assert_eq!(r.routes.sync, 0);
    assert!(out
        .sim
        .log()
        .events()
        .iter()
        .any(|e| matches!(e.kind, EventKind::FaultRoute { route: FaultRoute::Forwarded, .. })));
}

#[test]
fn budget_exhaustion_is_a_deadlock() {
    let s = Scenario::parse(&getpids(50, r#""step_budget": 10,"#), Path::new(".")).unwrap();
    let out = s.run(&RunOptions::default()).unwrap();
    assert!(out.deadlocked());
    assert_eq!(out.report.outcome, "deadlock");
}

#[test]
fn msr_channel_before_boot() {
    let out = run(&getpids(2, r#""config": {"boot_channel": "msr"},"#));
    let r = completed(&out);
    assert_eq!(r.sync_msr, 2);
    assert_eq!(r.switches.boot, 0);
    assert!(out.sim.log().events().iter().all(|e| !matches!(
        e.kind,
        EventKind::VmplSwitch { reason: SwitchReason::Boot, .. }
    )));
    assert!(out.sim.log().events().iter().any(|e| matches!(e.kind, EventKind::SyscallRoute { route: Route::Sync, .. })));
}

#[test]
fn empty_scenarios_are_quiet() {
    let none = run("{}");
    let r = completed(&none);
    assert_eq!(r.routes, Default::default());
    assert_eq!(r.switches.total(), 0);
    let empty = run(r#"{"threads": [{"program": []}]}"#);
    let r = completed(&empty);
    assert_eq!(r.routes.sync, 0);
    assert_eq!(r.switches.forward, 0);
    assert_eq!(r.faults.total(), 0);
}
