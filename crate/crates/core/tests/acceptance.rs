// SPDX-License-Identifier: Apache-2.0

//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

mod common;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;
use vmplsim::event::{EventKind, Route};
use vmplsim::guest::{ConfineConfig, GuestOs, OsConfig};
use vmplsim::mmu::{Access, AddressSpace, Prot, PteFlags, Vma, VmaKind};
use vmplsim::platform::{Platform, GUEST};
use vmplsim::rmp::{AccessType, PermMask, VmplLevel};
use vmplsim::scenario::{self, Mode, RunOptions, RunOutput, Scenario};
use vmplsim::syscalls;
use vmplsim::types::{Cpl, Pfn, VaRange};
use vmplsim::xom::{apply_cross_layer, apply_xom, probe_xom, ExecLevel, ProbeOutcome, XomPolicy};

const RMP_TIME_LIMIT: Duration = Duration::from_secs(1);
const WALK_TIME_LIMIT: Duration = Duration::from_secs(5);
const WALK_TUPLES: usize = 10_000;
const WALK_SEED: u64 = 0x0005_eed0_0b1e;
const XOM_PAGES: u64 = 64;
const GETPID_CALLS: u64 = 1000;
const ATF_ITERATIONS: u64 = 100;
const ATF_POOL: u64 = 512;
const ATF_UNPOOLED_MIN: u64 = 300;
const PF_RATIO_SUPER: f64 = 2.274;
const PF_RATIO_USER: f64 = 2.298;
const PF_RATIO_TOL: f64 = 0.001;
const DENIED_OPENS: u64 = 100;
const EPERM: i64 = 1;
const PREFAULT_PAGES: u64 = 16;
const PREFAULT_FORWARDS: u64 = 4;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn scenarios_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn load(name: &str) -> Scenario {
    Scenario::load(&scenarios_dir().join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn run(s: &Scenario) -> RunOutput {
    s.run(&RunOptions::default()).expect("scenario runs")
}

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rmp_oracle_equivalence() -> Outcome {
    let t0 = Instant::now();
    let mut cases = 0;
    let mut mismatches = Vec::new();
    for vmpl in 1..=3u8 {
        for bits in 0..16u8 {
            let mut p = Platform::new(8);
            let v = VmplLevel::new(vmpl).unwrap();
            p.rmp.assign(Pfn(3), GUEST).unwrap();
            p.rmp.set_permissions(VmplLevel::VMPL0, Pfn(3), v, PermMask::from_bits(bits)).unwrap();
            for (acc, real) in ACCS.iter().zip(AccessType::ALL) {
                cases += 1;
                if p.rmp.check(Pfn(3), v, real).is_ok() != rmp_oracle(bits, *acc) {
                    mismatches.push((vmpl, bits, *acc));
                }
            }
        }
    }
    let dt = t0.elapsed();
    check(cases == 192 && mismatches.is_empty() && dt < RMP_TIME_LIMIT, format!("{cases} cases, {} mismatches, {dt:?}", mismatches.len()))
}

fn nested_walk_oracle() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(WALK_SEED);
    let mut p = Platform::new(64);
    let mut space = AddressSpace::new(1);
    let base = 0x7000_0000u64;
    space.add_vma(Vma::new(VaRange::pages(base, WALK_TUPLES as u64), VmaKind::Anon, Prot::RW)).unwrap();
    let mut mismatches = 0;
    for i in 0..WALK_TUPLES {
        let t = WalkTuple {
            present: rng.gen(),
            writable: rng.gen(),
            user: rng.gen(),
            nx: rng.gen(),
            cow: rng.gen(),
            mask_bits: rng.gen_range(0..16),
            op: rng.gen_range(0..3),
            user_mode: rng.gen(),
            vmpl: rng.gen_range(1..4),
        };
        let pfn = Pfn(1 + (i as u64 % 60));
        let v = VmplLevel::new(t.vmpl).unwrap();
        let _ = p.rmp.assign(pfn, GUEST);
        p.rmp.set_permissions(VmplLevel::VMPL0, pfn, v, PermMask::from_bits(t.mask_bits)).unwrap();
        let va = base + i as u64 * 4096;
        if t.present {
            space.map(va, pfn, PteFlags { writable: t.writable, user: t.user, nx: t.nx, cow: t.cow }).unwrap();
        }
        let access = [Access::Read, Access::Write, Access::Execute][t.op as usize];
        let cpl = if t.user_mode { Cpl::User } else { Cpl::Super };
        let got = space.translate_and_check(&p.rmp, va, access, cpl, v).err().map(|f| f.kind);
        if got != walk_oracle(&t) {
            mismatches += 1;
        }
    }
    let dt = t0.elapsed();
    check(mismatches == 0 && dt < WALK_TIME_LIMIT, format!("{WALK_TUPLES} tuples, {mismatches} mismatches, {dt:?}"))
}

fn xom_completeness() -> Outcome {
    let mut p = Platform::new(512);
    let mut os = GuestOs::boot(&mut p, OsConfig::default()).unwrap();
    let pid = os.create_process(&mut p, XOM_PAGES, 1).unwrap();
    let v = VmplLevel::VMPL1;
    let image = os.vmpl_init(&mut p, pid, &ConfineConfig { vmpl: v, ..ConfineConfig::default() }).unwrap();
    let space = os.space(pid).unwrap();
    let code = VaRange::pages(0x40_0000, XOM_PAGES);
    apply_xom(&mut p.rmp, space, &XomPolicy { region: code, exec_level: ExecLevel::UserOnly, target_vmpl: v }).unwrap();
    let xom = probe_xom(&p.rmp, space, code, v).unwrap();
    let count = |rows: &[vmplsim::xom::ProbeRow], col: usize, allow: bool| rows.iter().filter(|r| (r.outcomes[col] == ProbeOutcome::Allow) == allow).count() as u64;
    let read_deny = count(&xom.rows, 0, false);
    let write_deny = count(&xom.rows, 1, false);
    let fetch_allow = count(&xom.rows, 2, true);
    apply_cross_layer(&mut p.rmp, space, v).unwrap();
    let user = probe_xom(&p.rmp, space, code, v).unwrap();
    let proxy = probe_xom(&p.rmp, space, image.code, v).unwrap();
    let super_into_user = count(&user.rows, 3, false);
    let user_into_proxy = count(&proxy.rows, 2, false);
    let proxy_pages = proxy.rows.len() as u64;
    // The proxy code PTEs carry the user bit, so only the RMP stops the fetch.
    let us_permissive = image.code.page_addrs().all(|va| space.pte(va).is_some_and(|p| p.user));
    let n = XOM_PAGES;
    check(
        xom.rows.len() as u64 == n && read_deny == n && write_deny == n && fetch_allow == n && super_into_user == n && user_into_proxy == proxy_pages && proxy_pages > 0 && us_permissive,
        format!("read deny {read_deny}/{n}, write deny {write_deny}/{n}, fetch_user allow {fetch_allow}/{n}, fetch_super->user deny {super_into_user}/{n}, fetch_user->proxy deny {user_into_proxy}/{proxy_pages}"),
    )
}

fn syscall_returns(out: &RunOutput) -> Vec<i64> {
    out.sim
        .log()
        .events()
        .iter()
        .filter_map(|e| match &e.kind {
            EventKind::SyscallRoute { ret, .. } => Some(*ret),
            _ => None,
        })
        .collect()
}

fn routing_accounting() -> Outcome {
    let sync = run(&load("getpid_sync.json"));
    let asyn = run(&load("getpid_async.json"));
    let (s, a) = (&sync.report, &asyn.report);
    let same = syscall_returns(&sync) == syscall_returns(&asyn);
    check(
        s.routes.sync == GETPID_CALLS && s.switches.forward == 2 * GETPID_CALLS && a.routes.r#async == GETPID_CALLS && a.switches.forward == 0 && same,
        format!(
            "sync: {} forward switches (+{} lifecycle); async: {} forward switches (+{} lifecycle); identical results: {same}",
            s.switches.forward,
            s.switches.lifecycle(),
            a.switches.forward,
            a.switches.lifecycle()
        ),
    )
}

/// Forwarded mmap/munmap syscalls plus forwarded page faults.
fn vm_forwards(out: &RunOutput) -> u64 {
    let log = &out.log;
    grep(log, "SyscallRoute", &["nr=mmap", "route=sync"])
        + grep(log, "SyscallRoute", &["nr=munmap", "route=sync"])
        + grep(log, "SyscallRoute", &["nr=mmap", "route=async"])
        + grep(log, "SyscallRoute", &["nr=munmap", "route=async"])
        + grep(log, "FaultRoute", &["route=forwarded"])
}

fn self_managed_memory() -> Outcome {
    let base = load("alloc_touch_free.json");
    let pooled = run(&base.with_mode(Mode::Pool));
    let mut plain_s = base.with_mode(Mode::Sync);
    plain_s.config.pool_capacity = 0;
    let plain = run(&plain_s);
    let (with, without) = (vm_forwards(&pooled), vm_forwards(&plain));
    let iterations = grep(&pooled.log, "SyscallRoute", &["nr=mmap"]);
    check(
        base.config.pool_capacity == ATF_POOL && iterations == ATF_ITERATIONS && with == 0 && without >= ATF_UNPOOLED_MIN,
        format!("{iterations} iterations; pool {ATF_POOL}: {with} forwarded; no pool: {without} forwarded"),
    )
}

fn ratio_line(text: &str, key: &str) -> Option<f64> {
    text.lines().find_map(|l| l.strip_prefix(key)).and_then(|v| v.trim().parse().ok())
}

fn table_two_echo() -> Outcome {
    let s = load("prefault.json");
    let cmp = scenario::compare(&s, &Mode::ALL, &RunOptions::default()).map_err(|e| e.to_string())?;
    let text = cmp.render();
    let sup = ratio_line(&text, "pf_ratio_super").unwrap_or(f64::NAN);
    let user = ratio_line(&text, "pf_ratio_user").unwrap_or(f64::NAN);
    let costs = &s.config.costs;
    check(
        (costs.pf_base, costs.pf_vmpl_super, costs.pf_vmpl_user) == (13_026, 29_627, 29_936)
            && (sup - PF_RATIO_SUPER).abs() <= PF_RATIO_TOL
            && (user - PF_RATIO_USER).abs() <= PF_RATIO_TOL,
        format!("super {sup:.3}, user {user:.3} (tolerance {PF_RATIO_TOL})"),
    )
}

fn filter_soundness() -> Outcome {
    let out = run(&load("deny_open.json"));
    let events = out.sim.log().events();
    let open = syscalls::parse("open").unwrap();
    let eperm = events.iter().filter(|e| matches!(e.kind, EventKind::SyscallRoute { nr, route: Route::Denied, ret, .. } if nr == open && ret == -EPERM)).count() as u64;
    let guest_opens = events.iter().filter(|e| matches!(e.kind, EventKind::GuestSyscall { nr, .. } if nr == open)).count() as u64;
    // Between each open trap and its route record nothing else may happen.
    let mut switches = 0;
    for (i, e) in events.iter().enumerate() {
        if let EventKind::Trap { cause: vmplsim::event::TrapTag::Syscall(nr), .. } = e.kind {
            if nr == open {
                let end = events[i..].iter().position(|e| matches!(e.kind, EventKind::SyscallRoute { .. })).unwrap() + i;
                switches += events[i..end].iter().filter(|e| matches!(e.kind, EventKind::VmplSwitch { .. })).count();
            }
        }
    }
    check(
        eperm == DENIED_OPENS && guest_opens == 0 && switches == 0,
        format!("{eperm} EPERM returns, {guest_opens} guest open calls, {switches} switches for denied calls"),
    )
}

fn all_scenarios() -> Vec<(String, Scenario)> {
    let mut v: Vec<_> = std::fs::read_dir(scenarios_dir())
        .unwrap()
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    v.sort();
    v.into_iter().map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), Scenario::load(&p).unwrap())).collect()
}

fn lifecycle_and_conservation() -> Outcome {
    let out = run(&load("mixed.json"));
    let os = out.sim.os();
    let stats = os.frame_stats();
    let pids: Vec<u32> = out.sim.log().events().iter().filter_map(|e| match e.kind {
        EventKind::ProcessRelease { pid, .. } => Some(pid),
        _ => None,
    }).collect();
    let ledgers_empty = pids.iter().all(|p| os.ledger(*p).is_empty());
    let lines: Vec<&str> = out.log.lines().collect();
    let mut late = 0;
    for (tid, _) in tcb_histories(&out.log) {
        let tag = format!("tid={tid}");
        let exit = lines.iter().position(|l| l.contains("  TcbState  ") && l.split_whitespace().any(|w| w == tag) && l.contains("state=exited")).unwrap();
        late += lines[exit + 1..].iter().filter(|l| l.split_whitespace().any(|w| w == tag)).count();
    }
    let exit_group = grep(&out.log, "SyscallRoute", &["nr=exit_group"]);
    let mut bad_histories = Vec::new();
    for (name, s) in all_scenarios() {
        for (tid, h) in tcb_histories(&run(&s).log) {
            if h != ["created", "entered", "exited"] {
                bad_histories.push(format!("{name}:{tid}={h:?}"));
            }
        }
    }
    check(
        exit_group > 0 && ledgers_empty && stats.free == stats.initial_free && late == 0 && bad_histories.is_empty() && !pids.is_empty(),
        format!(
            "{} processes released, ledgers empty: {ledgers_empty}, free {}/{}, post-exit tid events {late}, bad Tcb histories {bad_histories:?}",
            pids.len(),
            stats.free,
            stats.initial_free
        ),
    )
}

fn determinism() -> Outcome {
    let mut differing = Vec::new();
    let all = all_scenarios();
    for (name, s) in &all {
        if run(s).log != run(s).log {
            differing.push(name.clone());
        }
    }
    check(differing.is_empty(), format!("{} scenarios run twice, differing: {differing:?}", all.len()))
}

fn prefault() -> Outcome {
    let s = load("prefault.json");
    let out = run(&s);
    let touched = s.threads[0].program.iter().map(|o| match o {
        vmplsim::scenario::Op::TouchPages { pages, .. } => u64::from(*pages),
        _ => 0,
    }).sum::<u64>();
    let forwarded = grep(&out.log, "FaultRoute", &["route=forwarded"]);
    check(
        s.config.prefault_window == 4 && touched == PREFAULT_PAGES && forwarded == PREFAULT_FORWARDS,
        format!("{touched} pages touched, {forwarded} forwarded faults"),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("rmp-oracle-equivalence", rmp_oracle_equivalence),
        ("nested-walk-oracle", nested_walk_oracle),
        ("xom-completeness", xom_completeness),
        ("routing-accounting", routing_accounting),
        ("self-managed-memory", self_managed_memory),
        ("pf-cost-ratios", table_two_echo),
        ("filter-soundness", filter_soundness),
        ("lifecycle-conservation", lifecycle_and_conservation),
        ("determinism", determinism),
        ("prefault", prefault),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        match f() {
            Ok(d) => println!("PASS  {name:<24} {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL  {name:<24} {d}");
            }
        }
    }
    println!("acceptance: {}/{} passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
