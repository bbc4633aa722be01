// SPDX-License-Identifier: Apache-2.0

//! Scenario files: strict JSON describing memory, configuration and the
//! confined threads to run. See `docs/scenario.md` for the schema.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::CostModel;
use crate::guest::{ConfineConfig, OsConfig, XomSpec};
use crate::isa::{Instruction, Program};
use crate::proxy::policy::FilterPolicy;
use crate::proxy::ProxyConfig;
use crate::report::{FaultRouteCounts, RouteCounts, RunReport};
use crate::rmp::VmplLevel;
use crate::sim::{SimConfig, SimError, Simulator, ThreadSpec};
use crate::syscalls;
use crate::types::VaRange;
use crate::xom::{probe_xom, ProbeReport};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {msg}")]
    Io { path: String, msg: String },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid scenario: {0}")]
    Validation(String),
    #[error("setup failed: {0}")]
    Setup(#[from] SimError),
}

/// Integer given either as a JSON number or as a `0x`-prefixed string.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "NumRepr", into = "u64")]
pub struct Num(pub u64);

#[derive(Deserialize)]
#[serde(untagged)]
enum NumRepr {
    Int(u64),
    Str(String),
}

impl TryFrom<NumRepr> for Num {
    type Error = String;

    fn try_from(r: NumRepr) -> Result<Self, String> {
        match r {
            NumRepr::Int(v) => Ok(Num(v)),
            NumRepr::Str(s) => {
                let t = s.trim();
                let parsed = match t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
                    Some(hex) => u64::from_str_radix(&hex.replace('_', ""), 16),
                    None => t.replace('_', "").parse(),
                };
                parsed.map(Num).map_err(|_| format!("not a number: `{s}`"))
            }
        }
    }
}

impl From<Num> for u64 {
    fn from(n: Num) -> u64 {
        n.0
    }
}

/// Syscall given by name or number.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SyscallName {
    Nr(u64),
    Name(String),
}

impl SyscallName {
    fn resolve(&self) -> Result<u64, String> {
        match self {
            SyscallName::Nr(n) => Ok(*n),
            SyscallName::Name(s) => syscalls::parse(s).ok_or_else(|| format!("unknown syscall `{s}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Op {
    Read { va: Num },
    Write { va: Num, #[serde(default)] byte: u8 },
    Exec { va: Num },
    Syscall { nr: SyscallName, #[serde(default)] args: Vec<Num> },
    Breakpoint {},
    Halt {},
    AllocTouchFree { pages: u32 },
    /// Repeat `body` `count` times.
    Repeat { count: u32, body: Vec<Op> },
    /// Touch `pages` consecutive pages from `va` with one write each.
    TouchPages { va: Num, pages: u32 },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BootChannel {
    Ghcb,
    Msr,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub async_enabled: bool,
    pub pool_capacity: u64,
    pub prefault_window: u64,
    pub permissive_mode: bool,
    pub timer_interval: Option<u64>,
    pub forward_breakpoints: bool,
    pub vdso_enabled: bool,
    pub boot_channel: BootChannel,
    pub cross_layer: bool,
    pub xom: Vec<XomSpec>,
    pub costs: CostModel,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            async_enabled: false,
            pool_capacity: 0,
            prefault_window: 4,
            permissive_mode: false,
            timer_interval: None,
            forward_breakpoints: false,
            vdso_enabled: true,
            boot_channel: BootChannel::Ghcb,
            cross_layer: false,
            xom: Vec::new(),
            costs: CostModel::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThreadDef {
    #[serde(default = "default_vmpl")]
    pub vmpl: u8,
    #[serde(default)]
    pub vcpu: u32,
    /// Policy file, relative to the scenario file.
    #[serde(default)]
    pub policy: Option<String>,
    #[serde(default)]
    pub policy_inline: Option<String>,
    #[serde(default)]
    pub data_pages: u64,
    /// Minimum code region size in pages.
    #[serde(default)]
    pub code_pages: u64,
    #[serde(default)]
    pub debug_regs: Vec<Num>,
    /// One entry per hook; `null` fires on every breakpoint.
    #[serde(default)]
    pub trace_hooks: Vec<Option<Vec<Num>>>,
    pub program: Vec<Op>,
}

fn default_vmpl() -> u8 {
    1
}

fn default_pages() -> u64 {
    4096
}

fn default_vcpus() -> u32 {
    1
}

fn default_budget() -> u64 {
    1_000_000
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    #[serde(default = "default_pages")]
    pub memory_pages: u64,
    #[serde(default = "default_vcpus")]
    pub vcpus: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_budget")]
    pub step_budget: u64,
    #[serde(default)]
    pub config: ScenarioConfig,
    /// File contents, indexed by inode number.
    #[serde(default)]
    pub files: Vec<String>,
    #[serde(default)]
    pub threads: Vec<ThreadDef>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Forwarding configuration applied on top of a scenario by `compare`.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Baseline,
    Sync,
    Async,
    Pool,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Baseline, Mode::Sync, Mode::Async, Mode::Pool];
    pub const POOL_DEFAULT: u64 = 512;

    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Sync => "sync",
            Mode::Async => "async",
            Mode::Pool => "pool",
        }
    }

    pub fn parse(s: &str) -> Option<Mode> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub steps: Option<u64>,
    pub log_path: Option<PathBuf>,
}

pub struct RunOutput {
    pub report: RunReport,
    pub log: String,
    pub sim: Simulator,
    pub error: Option<SimError>,
}

impl RunOutput {
    pub fn deadlocked(&self) -> bool {
        matches!(self.error, Some(SimError::Deadlock { .. }))
    }
}

pub fn compile(ops: &[Op]) -> Result<Program, String> {
    let mut out = Vec::new();
    compile_into(ops, &mut out, 0)?;
    Ok(out)
}

const MAX_PROGRAM: usize = 1 << 22;
const MIN_PAGES: u64 = 64;
const MAX_PAGES: u64 = 1 << 20;

fn compile_into(ops: &[Op], out: &mut Program, depth: u32) -> Result<(), String> {
    if depth > 8 {
        return Err("repeat nesting deeper than 8".into());
    }
    for op in ops {
        match op {
            Op::Read { va } => out.push(Instruction::Read(va.0)),
            Op::Write { va, byte } => out.push(Instruction::Write(va.0, *byte)),
            Op::Exec { va } => out.push(Instruction::Exec(va.0)),
            Op::Syscall { nr, args } => {
                if args.len() > 6 {
                    return Err("a syscall takes at most 6 arguments".into());
                }
                let a: Vec<u64> = args.iter().map(|n| n.0).collect();
                out.push(Instruction::syscall(nr.resolve()?, &a));
            }
            Op::Breakpoint {} => out.push(Instruction::Breakpoint),
            Op::Halt {} => out.push(Instruction::Halt),
            Op::AllocTouchFree { pages } => out.push(Instruction::AllocTouchFree { pages: *pages }),
            Op::Repeat { count, body } => {
                for _ in 0..*count {
                    compile_into(body, out, depth + 1)?;
                    if out.len() > MAX_PROGRAM {
                        return Err(format!("program longer than {MAX_PROGRAM} instructions"));
                    }
                }
            }
            Op::TouchPages { va, pages } => {
                for i in 0..u64::from(*pages) {
                    out.push(Instruction::Write(va.0 + i * crate::types::PAGE_SIZE, 1));
                }
            }
        }
        if out.len() > MAX_PROGRAM {
            return Err(format!("program longer than {MAX_PROGRAM} instructions"));
        }
    }
    Ok(())
}

impl Scenario {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ScenarioError> {
        let mut s: Scenario = serde_json::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        s.base_dir = base_dir.to_path_buf();
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = fs::read_to_string(path).map_err(|e| ScenarioError::Io { path: path.display().to_string(), msg: e.to_string() })?;
        let mut s = Self::parse(text.as_str(), path.parent().unwrap_or(Path::new(".")))?;
        if s.name.is_empty() {
            s.name = path.file_stem().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        }
        Ok(s)
    }

    fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Validation(m));
        if !(MIN_PAGES..=MAX_PAGES).contains(&self.memory_pages) {
            return bad(format!("memory_pages must be {MIN_PAGES}..={MAX_PAGES}, got {}", self.memory_pages));
        }
        if self.vcpus == 0 || self.vcpus > 64 {
            return bad(format!("vcpus must be 1..=64, got {}", self.vcpus));
        }
        if self.config.prefault_window == 0 {
            return bad("prefault_window must be at least 1".into());
        }
        for (i, t) in self.threads.iter().enumerate() {
            if !(1..=3).contains(&t.vmpl) {
                return bad(format!("thread {i}: vmpl must be 1..=3, got {}", t.vmpl));
            }
            if t.vcpu >= self.vcpus {
                return bad(format!("thread {i}: vcpu {} out of range", t.vcpu));
            }
            if t.code_pages > 4096 || t.data_pages > 1 << 20 {
                return bad(format!("thread {i}: code_pages or data_pages too large"));
            }
            if t.policy.is_some() && t.policy_inline.is_some() {
                return bad(format!("thread {i}: give either policy or policy_inline"));
            }
            if let Some(p) = &t.policy {
                let path = self.base_dir.join(p);
                if !path.is_file() {
                    return bad(format!("thread {i}: policy file {} does not exist", path.display()));
                }
            }
            self.policy_for(t).map_err(|e| ScenarioError::Validation(format!("thread {i}: {e}")))?;
            compile(&t.program).map_err(|e| ScenarioError::Validation(format!("thread {i}: {e}")))?;
        }
        Ok(())
    }

    fn policy_for(&self, t: &ThreadDef) -> Result<FilterPolicy, String> {
        let text = match (&t.policy, &t.policy_inline) {
            (Some(p), _) => fs::read_to_string(self.base_dir.join(p)).map_err(|e| e.to_string())?,
            (None, Some(s)) => s.clone(),
            (None, None) => return Ok(FilterPolicy::default()),
        };
        FilterPolicy::parse(&text).map_err(|e| e.to_string())
    }

    /// Copy of this scenario with `mode`'s forwarding settings.
    pub fn with_mode(&self, mode: Mode) -> Scenario {
        let mut s = self.clone();
        match mode {
            Mode::Baseline | Mode::Sync => {
                s.config.async_enabled = false;
                s.config.pool_capacity = 0;
            }
            Mode::Async => {
                s.config.async_enabled = true;
                s.config.pool_capacity = 0;
            }
            Mode::Pool => {
                s.config.async_enabled = false;
                if s.config.pool_capacity == 0 {
                    s.config.pool_capacity = Mode::POOL_DEFAULT;
                }
            }
        }
        s
    }

    pub fn build(&self, opts: &RunOptions) -> Result<Simulator, ScenarioError> {
        let c = &self.config;
        let sim_cfg = SimConfig {
            memory_pages: self.memory_pages,
            vcpus: self.vcpus,
            seed: opts.seed.unwrap_or(self.seed),
            step_budget: opts.steps.unwrap_or(self.step_budget),
            os: OsConfig { prefault_window: c.prefault_window, permissive: c.permissive_mode, ..OsConfig::default() },
            timer_interval: c.timer_interval,
            boot_channel: c.boot_channel == BootChannel::Ghcb,
        };
        let mut sim = Simulator::new(sim_cfg)?;
        for f in &self.files {
            sim.os_mut().add_file(f.as_bytes().to_vec());
        }
        for t in &self.threads {
            let vmpl = VmplLevel::new(t.vmpl).map_err(|e| ScenarioError::Validation(e.to_string()))?;
            let spec = ThreadSpec {
                program: compile(&t.program).map_err(ScenarioError::Validation)?,
                confine: ConfineConfig {
                    vmpl,
                    pool_capacity: c.pool_capacity,
                    vdso_enabled: c.vdso_enabled,
                    xom: c.xom.clone(),
                    cross_layer: c.cross_layer,
                },
                proxy: ProxyConfig {
                    async_enabled: c.async_enabled,
                    forward_breakpoints: c.forward_breakpoints,
                    trace_hooks: t
                        .trace_hooks
                        .iter()
                        .map(|h| h.as_ref().map(|a| a.iter().map(|n| n.0).collect::<BTreeSet<u64>>()))
                        .collect(),
                },
                policy: self.policy_for(t).map_err(ScenarioError::Validation)?,
                vcpu: t.vcpu,
                data_pages: t.data_pages,
                code_pages: t.code_pages,
                debug_regs: t.debug_regs.iter().map(|n| n.0).collect(),
            };
            sim.spawn(spec)?;
        }
        Ok(sim)
    }

    /// Build, run to completion or budget, and summarise.
    pub fn run(&self, opts: &RunOptions) -> Result<RunOutput, ScenarioError> {
        let mut sim = self.build(opts)?;
        let error = sim.run().err();
        let log = sim.log().render();
        if let Some(p) = &opts.log_path {
            fs::write(p, &log).map_err(|e| ScenarioError::Io { path: p.display().to_string(), msg: e.to_string() })?;
        }
        let mut report = RunReport::from_log(sim.log()).with_costs(&self.config.costs);
        report.scenario = self.name.clone();
        report.seed = sim.config().seed;
        report.steps = sim.steps();
        report.event_log = opts.log_path.as_ref().map(|p| p.display().to_string());
        if let Some(e) = &error {
            report.outcome = match e {
                SimError::Deadlock { .. } => "deadlock".into(),
                other => format!("error: {other}"),
            };
        }
        Ok(RunOutput { report, log, sim, error })
    }
}

/// Set up the scenario without running it and probe `region` in the
/// address space of the first process confined at `vmpl`.
pub fn probe(scenario: &Scenario, region: VaRange, vmpl: VmplLevel) -> Result<ProbeReport, ScenarioError> {
    let sim = scenario.build(&RunOptions::default())?;
    let proc = sim
        .os()
        .processes()
        .find(|p| p.confine.as_ref().is_some_and(|c| c.vmpl == vmpl))
        .ok_or_else(|| ScenarioError::Validation(format!("no thread confined at vmpl {}", vmpl.index())))?;
    probe_xom(&sim.platform().rmp, &proc.space, region, vmpl).map_err(|e| ScenarioError::Validation(e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareRow {
    pub mode: Mode,
    pub outcome: String,
    pub routes: RouteCounts,
    pub forward_switches: u64,
    pub faults_forwarded: u64,
    pub faults_resolved: u64,
    pub cycles: u64,
    pub pf_cycles: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Comparison {
    pub scenario: String,
    pub rows: Vec<CompareRow>,
    pub pf_ratio_super: f64,
    pub pf_ratio_user: f64,
}

impl Comparison {
    pub fn deadlocked(&self) -> bool {
        self.rows.iter().any(|r| r.outcome == "deadlock")
    }

    pub fn render(&self) -> String {
        let mut out = format!("# scenario={}\n", self.scenario);
        out.push_str("mode      sync   async  self   denied vdso   fwd_sw  pf_fwd  pf_res  cycles        pf_cycles\n");
        for r in &self.rows {
            let c = &r.routes;
            out.push_str(&format!(
                "{:<9} {:<6} {:<6} {:<6} {:<6} {:<6} {:<7} {:<7} {:<7} {:<13} {}\n",
                r.mode.name(),
                c.sync,
                c.r#async,
                c.self_handled,
                c.denied,
                c.vdso,
                r.forward_switches,
                r.faults_forwarded,
                r.faults_resolved,
                r.cycles,
                r.pf_cycles
            ));
        }
        out.push_str(&format!("pf_ratio_super {:.3}\npf_ratio_user {:.3}\n", self.pf_ratio_super, self.pf_ratio_user));
        out
    }
}

/// Run `scenario` once per mode. The baseline row re-prices the sync run
/// as if every event were handled natively.
pub fn compare(scenario: &Scenario, modes: &[Mode], opts: &RunOptions) -> Result<Comparison, ScenarioError> {
    let mut rows = Vec::new();
    for &mode in modes {
        let out = scenario.with_mode(mode).run(&RunOptions { log_path: None, ..opts.clone() })?;
        let r = &out.report;
        let fr = &r.fault_routes;
        let (cycles, pf_cycles, forwarded) = match mode {
            Mode::Baseline => (r.cycles.baseline, r.cycles.baseline_pf, 0),
            _ => (r.cycles.confined, r.cycles.confined_pf, fr.forwarded_user + fr.forwarded_super),
        };
        rows.push(CompareRow {
            mode,
            outcome: r.outcome.clone(),
            routes: if mode == Mode::Baseline { RouteCounts::default() } else { r.routes.clone() },
            forward_switches: if mode == Mode::Baseline { 0 } else { r.switches.forward },
            faults_forwarded: forwarded,
            faults_resolved: if mode == Mode::Baseline { fr.resolved + forwarded_all(fr) } else { fr.resolved },
            cycles,
            pf_cycles,
        });
    }
    let (pf_ratio_super, pf_ratio_user) = scenario.config.costs.pf_ratios();
    Ok(Comparison { scenario: scenario.name.clone(), rows, pf_ratio_super, pf_ratio_user })
}

fn forwarded_all(fr: &FaultRouteCounts) -> u64 {
    fr.forwarded_user + fr.forwarded_super
}

pub fn run_scenario(path: &Path, opts: &RunOptions) -> Result<RunOutput, ScenarioError> {
    Scenario::load(path)?.run(opts)
}
