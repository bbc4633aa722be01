// SPDX-License-Identifier: Apache-2.0

//! Python bindings: scenarios, reports, the RMP table and filter policies.

use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use vmplsim::cost::CostModel;
use vmplsim::platform::GUEST;
use vmplsim::proxy::policy::{Action, FilterPolicy};
use vmplsim::report::RunReport;
use vmplsim::rmp::{self, AccessType, PermMask, VmplLevel};
use vmplsim::scenario::{self, Mode, RunOptions, ScenarioError};
use vmplsim::syscalls;
use vmplsim::types::{Pfn, VaRange};

fn scenario_err(e: ScenarioError) -> PyErr {
    match e {
        ScenarioError::Parse(_) | ScenarioError::Validation(_) | ScenarioError::Io { .. } => PyValueError::new_err(e.to_string()),
        ScenarioError::Setup(_) => PyRuntimeError::new_err(e.to_string()),
    }
}

fn vmpl(level: u8) -> PyResult<VmplLevel> {
    VmplLevel::new(level).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn access(name: &str) -> PyResult<AccessType> {
    AccessType::ALL
        .into_iter()
        .find(|a| a.name() == name)
        .ok_or_else(|| PyValueError::new_err(format!("unknown access `{name}`")))
}

/// Parse a mask written as `rwux` with `-` for cleared bits.
fn mask(text: &str) -> PyResult<PermMask> {
    let chars: Vec<char> = text.chars().collect();
    if chars.len() != 4 {
        return Err(PyValueError::new_err(format!("mask `{text}` must have 4 characters")));
    }
    let mut bits = 0u8;
    for (i, (c, want)) in chars.iter().zip(['r', 'w', 'u', 'x']).enumerate() {
        match *c {
            '-' => {}
            c if c == want => bits |= 1 << i,
            _ => return Err(PyValueError::new_err(format!("mask `{text}`: expected `{want}` or `-` at {i}"))),
        }
    }
    Ok(PermMask::from_bits(bits))
}

fn rmp_err(e: rmp::RmpError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Result of one scenario run.
#[pyclass(module = "vmplsim_py", frozen)]
pub struct RunResult {
    report: RunReport,
    log: String,
    error: Option<String>,
    deadlocked: bool,
}

#[pymethods]
impl RunResult {
    #[getter]
    fn log(&self) -> &str {
        &self.log
    }

    #[getter]
    fn outcome(&self) -> &str {
        &self.report.outcome
    }

    #[getter]
    fn error(&self) -> Option<&str> {
        self.error.as_deref()
    }

    #[getter]
    fn deadlocked(&self) -> bool {
        self.deadlocked
    }

    fn report_json(&self) -> String {
        self.report.to_json()
    }

    fn report_text(&self) -> String {
        self.report.to_text()
    }

    /// Route counts as `(self, deny, sync, async, vdso)`.
    fn routes(&self) -> (u64, u64, u64, u64, u64) {
        let r = &self.report.routes;
        (r.self_handled, r.denied, r.sync, r.r#async, r.vdso)
    }

    #[getter]
    fn forward_switches(&self) -> u64 {
        self.report.switches.forward
    }

    #[getter]
    fn lifecycle_switches(&self) -> u64 {
        self.report.switches.lifecycle()
    }

    /// `(resolved, forwarded_user, forwarded_super)`.
    fn fault_routes(&self) -> (u64, u64, u64) {
        let f = &self.report.fault_routes;
        (f.resolved, f.forwarded_user, f.forwarded_super)
    }

    /// `(baseline, confined, setup)` cycles.
    fn cycles(&self) -> (u64, u64, u64) {
        let c = &self.report.cycles;
        (c.baseline, c.confined, c.setup)
    }
}

#[pyclass(module = "vmplsim_py", frozen)]
pub struct Scenario {
    inner: scenario::Scenario,
}

#[pymethods]
impl Scenario {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        scenario::Scenario::load(&path).map(|inner| Scenario { inner }).map_err(scenario_err)
    }

    /// Parse JSON text; relative policy paths resolve against `base_dir`.
    #[staticmethod]
    #[pyo3(signature = (text, base_dir = "."))]
    fn from_json(text: &str, base_dir: &str) -> PyResult<Self> {
        scenario::Scenario::parse(text, Path::new(base_dir)).map(|inner| Scenario { inner }).map_err(scenario_err)
    }

    #[getter]
    fn name(&self) -> &str {
        &self.inner.name
    }

    #[getter]
    fn thread_count(&self) -> usize {
        self.inner.threads.len()
    }

    #[pyo3(signature = (seed = None, steps = None, log_path = None))]
    fn run(&self, py: Python<'_>, seed: Option<u64>, steps: Option<u64>, log_path: Option<PathBuf>) -> PyResult<RunResult> {
        let opts = RunOptions { seed, steps, log_path };
        let out = py.detach(|| self.inner.run(&opts)).map_err(scenario_err)?;
        Ok(RunResult { deadlocked: out.deadlocked(), error: out.error.map(|e| e.to_string()), report: out.report, log: out.log })
    }

    /// Per-mode cost table as text. Modes: baseline, sync, async, pool.
    #[pyo3(signature = (modes = vec!["baseline".to_string(), "sync".to_string(), "async".to_string(), "pool".to_string()]))]
    fn compare(&self, modes: Vec<String>) -> PyResult<String> {
        let modes = modes
            .iter()
            .map(|m| Mode::parse(m).ok_or_else(|| PyValueError::new_err(format!("unknown mode `{m}`"))))
            .collect::<PyResult<Vec<_>>>()?;
        scenario::compare(&self.inner, &modes, &RunOptions::default()).map(|c| c.render()).map_err(scenario_err)
    }

    /// Probe `[start, end)` at `vmpl` after setup; returns the text matrix.
    fn probe_xom(&self, start: u64, end: u64, vmpl: u8) -> PyResult<String> {
        if start >= end {
            return Err(PyValueError::new_err("empty region"));
        }
        let level = self::vmpl(vmpl)?;
        scenario::probe(&self.inner, VaRange::new(start, end), level).map(|r| r.render()).map_err(scenario_err)
    }
}

/// A standalone reverse-map table owned by a single guest.
#[pyclass(module = "vmplsim_py")]
pub struct Rmp {
    inner: rmp::Rmp,
}

#[pymethods]
impl Rmp {
    #[new]
    fn new(pages: u64) -> Self {
        Rmp { inner: rmp::Rmp::new(pages, GUEST) }
    }

    fn assign(&mut self, pfn: u64) -> PyResult<()> {
        self.inner.assign(Pfn(pfn), GUEST).map(|_| ()).map_err(rmp_err)
    }

    fn set_permissions(&mut self, requestor: u8, pfn: u64, target: u8, mask: &str) -> PyResult<()> {
        let m = self::mask(mask)?;
        self.inner.set_permissions(vmpl(requestor)?, Pfn(pfn), vmpl(target)?, m).map_err(rmp_err)
    }

    /// True when `access` (read, write, fetch_user, fetch_super) is allowed.
    fn check(&self, pfn: u64, vmpl: u8, access: &str) -> PyResult<bool> {
        Ok(self.inner.check(Pfn(pfn), self::vmpl(vmpl)?, self::access(access)?).is_ok())
    }

    fn perms(&self, pfn: u64, vmpl: u8) -> PyResult<String> {
        Ok(self.inner.perms(Pfn(pfn), self::vmpl(vmpl)?).render())
    }

    fn dump(&self) -> String {
        self.inner.dump()
    }
}

#[pyclass(module = "vmplsim_py", frozen)]
pub struct Policy {
    inner: FilterPolicy,
}

#[pymethods]
impl Policy {
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        FilterPolicy::parse(text).map(|inner| Policy { inner }).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// Decision for a syscall name or number: `(action, errno, traces)`.
    fn evaluate(&self, syscall: &Bound<'_, PyAny>) -> PyResult<(String, Option<i64>, u32)> {
        let nr = match syscall.extract::<u64>() {
            Ok(n) => n,
            Err(_) => {
                let name: String = syscall.extract()?;
                syscalls::parse(&name).ok_or_else(|| PyValueError::new_err(format!("unknown syscall `{name}`")))?
            }
        };
        let d = self.inner.evaluate(nr);
        let (action, errno) = match d.action {
            Action::Allow => ("allow", None),
            Action::Deny(e) => ("deny", Some(e)),
            Action::SelfHandle => ("self", None),
            Action::ForwardSync => ("sync", None),
            Action::ForwardAsync => ("async", None),
            Action::Trace => ("trace", None),
        };
        Ok((action.to_string(), errno, d.traced))
    }

    fn render(&self) -> String {
        self.inner.render()
    }
}

/// Default page-fault cost ratios `(super, user)` relative to a native fault.
#[pyfunction]
fn pf_ratios() -> (f64, f64) {
    CostModel::default().pf_ratios()
}

#[pymodule]
fn vmplsim_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<Scenario>()?;
    m.add_class::<RunResult>()?;
    m.add_class::<Rmp>()?;
    m.add_class::<Policy>()?;
    m.add_function(wrap_pyfunction!(pf_ratios, m)?)?;
    Ok(())
}
