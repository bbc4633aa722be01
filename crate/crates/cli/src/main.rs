// SPDX-License-Identifier: Apache-2.0

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use vmplsim::rmp::VmplLevel;
use vmplsim::scenario::{self, Mode, RunOptions, Scenario, ScenarioError};
use vmplsim::types::VaRange;

const EXIT_FAILURE: u8 = 1;
const EXIT_INVALID: u8 = 2;
const EXIT_DEADLOCK: u8 = 3;

#[derive(Parser)]
#[command(name = "vmplsim", version, about = "Run confined-execution scenarios on a simulated VMPL guest")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a scenario and print its report.
    Run {
        scenario: PathBuf,
        /// Write the event log here.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "text")]
        report: Format,
        /// Write the report to a file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Step budget; overrides the scenario's.
        #[arg(long)]
        steps: Option<u64>,
        /// Write the final RMP table here.
        #[arg(long)]
        dump_rmp: Option<PathBuf>,
    },
    /// Probe every page of a region with read, write and both fetch kinds.
    ProbeXom {
        scenario: PathBuf,
        /// Page-aligned range, `START..END`, hex or decimal.
        #[arg(long, value_parser = parse_region)]
        region: VaRange,
        #[arg(long, value_parser = parse_vmpl)]
        vmpl: VmplLevel,
    },
    /// Run a scenario under several forwarding modes and tabulate costs.
    Compare {
        scenario: PathBuf,
        #[arg(long, value_delimiter = ',', value_parser = parse_mode, default_value = "baseline,sync,async,pool")]
        modes: Vec<Mode>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "text")]
        report: Format,
    },
}

fn parse_u64(s: &str) -> Result<u64, String> {
    let t = s.trim();
    match t.strip_prefix("0x") {
        Some(h) => u64::from_str_radix(&h.replace('_', ""), 16),
        None => t.replace('_', "").parse(),
    }
    .map_err(|e| format!("`{s}`: {e}"))
}

fn parse_region(s: &str) -> Result<VaRange, String> {
    let (a, b) = s.split_once("..").ok_or("expected START..END")?;
    let (start, end) = (parse_u64(a)?, parse_u64(b)?);
    if start >= end {
        return Err("empty region".into());
    }
    Ok(VaRange::new(start, end))
}

fn parse_vmpl(s: &str) -> Result<VmplLevel, String> {
    let n: u8 = s.parse().map_err(|e| format!("`{s}`: {e}"))?;
    VmplLevel::new(n).map_err(|e| e.to_string())
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    Mode::parse(s.trim()).ok_or_else(|| format!("unknown mode `{s}`; expected baseline, sync, async or pool"))
}

fn fail(e: &ScenarioError) -> ExitCode {
    eprintln!("error: {e}");
    match e {
        ScenarioError::Io { .. } | ScenarioError::Parse(_) | ScenarioError::Validation(_) => ExitCode::from(EXIT_INVALID),
        ScenarioError::Setup(_) => ExitCode::from(EXIT_FAILURE),
    }
}

fn write_or_print(path: Option<&PathBuf>, text: &str) -> Result<(), ExitCode> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| {
            eprintln!("error: cannot write {}: {e}", p.display());
            ExitCode::from(EXIT_FAILURE)
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, ExitCode> {
    match cli.command {
        Command::Run { scenario, log, report, out, seed, steps, dump_rmp } => {
            let sc = Scenario::load(&scenario).map_err(|e| fail(&e))?;
            let opts = RunOptions { seed, steps, log_path: log };
            let res = sc.run(&opts).map_err(|e| fail(&e))?;
            let text = match report {
                Format::Text => res.report.to_text(),
                Format::Json => res.report.to_json() + "\n",
            };
            write_or_print(out.as_ref(), &text)?;
            if let Some(p) = dump_rmp {
                write_or_print(Some(&p), &res.sim.platform().rmp.dump())?;
            }
            match &res.error {
                None => Ok(ExitCode::SUCCESS),
                Some(e) => {
                    eprintln!("error: {e}");
                    Ok(ExitCode::from(if res.deadlocked() { EXIT_DEADLOCK } else { EXIT_FAILURE }))
                }
            }
        }
        Command::ProbeXom { scenario, region, vmpl } => {
            let sc = Scenario::load(&scenario).map_err(|e| fail(&e))?;
            let report = scenario::probe(&sc, region, vmpl).map_err(|e| fail(&e))?;
            print!("{}", report.render());
            Ok(ExitCode::SUCCESS)
        }
        Command::Compare { scenario, modes, seed, report } => {
            let sc = Scenario::load(&scenario).map_err(|e| fail(&e))?;
            let opts = RunOptions { seed, ..RunOptions::default() };
            let cmp = scenario::compare(&sc, &modes, &opts).map_err(|e| fail(&e))?;
            match report {
                Format::Text => print!("{}", cmp.render()),
                Format::Json => println!("{}", serde_json::to_string_pretty(&cmp).expect("comparison serializes")),
            }
            if cmp.deadlocked() {
                eprintln!("error: at least one mode exhausted its step budget");
                return Ok(ExitCode::from(EXIT_DEADLOCK));
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    run(Cli::parse()).unwrap_or_else(|code| code)
}
