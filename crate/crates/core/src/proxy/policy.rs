// SPDX-License-Identifier: Apache-2.0

//! Syscall filter policy and its text format.
//!
//! One rule per line: `<priority> <syscall|*> <action>`, where action is one
//! of `allow`, `deny[:ERRNO]`, `self`, `sync`, `async`, `trace`. Lower
//! priority numbers are consulted first; ties keep file order. `trace` rules
//! record the call and keep looking. A call no rule decides is allowed.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::syscalls;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Allow,
    Deny(i64),
    SelfHandle,
    ForwardSync,
    ForwardAsync,
    Trace,
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Allow => f.write_str("allow"),
            Action::Deny(e) => write!(f, "deny:{}", syscalls::errno_name(*e)),
            Action::SelfHandle => f.write_str("self"),
            Action::ForwardSync => f.write_str("sync"),
            Action::ForwardAsync => f.write_str("async"),
            Action::Trace => f.write_str("trace"),
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    pub priority: u32,
    /// `None` matches every syscall.
    pub syscall: Option<u64>,
    pub action: Action,
}

impl Rule {
    pub fn matches(&self, nr: u64) -> bool {
        self.syscall.is_none_or(|s| s == nr)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Decision {
    /// Never `Trace`.
    pub action: Action,
    pub traced: u32,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("policy line {line}: {msg}")]
pub struct PolicyError {
    pub line: usize,
    pub msg: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterPolicy {
    rules: Vec<Rule>,
}

impl FilterPolicy {
    pub fn new(mut rules: Vec<Rule>) -> Self {
        rules.sort_by_key(|r| r.priority);
        FilterPolicy { rules }
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn evaluate(&self, nr: u64) -> Decision {
        let mut traced = 0;
        for r in self.rules.iter().filter(|r| r.matches(nr)) {
            if r.action == Action::Trace {
                traced += 1;
                continue;
            }
            return Decision { action: r.action, traced };
        }
        Decision { action: Action::Allow, traced }
    }

    pub fn parse(text: &str) -> Result<Self, PolicyError> {
        let mut rules = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| PolicyError { line: i + 1, msg };
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [prio, sys, act] = fields[..] else {
                return Err(err(format!("expected 3 fields, found {}", fields.len())));
            };
            let priority = prio.parse().map_err(|_| err(format!("bad priority `{prio}`")))?;
            let syscall = match sys {
                "*" => None,
                s => Some(syscalls::parse(s).ok_or_else(|| err(format!("unknown syscall `{s}`")))?),
            };
            let action = match act.split_once(':') {
                Some(("deny", e)) => Action::Deny(syscalls::parse_errno(e).ok_or_else(|| err(format!("bad errno `{e}`")))?),
                Some(_) => return Err(err(format!("unknown action `{act}`"))),
                None => match act {
                    "allow" => Action::Allow,
                    "deny" => Action::Deny(syscalls::EPERM),
                    "self" => Action::SelfHandle,
                    "sync" => Action::ForwardSync,
                    "async" => Action::ForwardAsync,
                    "trace" => Action::Trace,
                    _ => return Err(err(format!("unknown action `{act}`"))),
                },
            };
            rules.push(Rule { priority, syscall, action });
        }
        Ok(FilterPolicy::new(rules))
    }

    pub fn render(&self) -> String {
        self.rules
            .iter()
            .map(|r| {
                let sys = r.syscall.map_or_else(|| "*".to_string(), syscalls::name);
                format!("{} {} {}\n", r.priority, sys, r.action)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::syscalls::*;

    #[test]
    fn first_match_by_priority() {
        let p = FilterPolicy::parse("20 getpid allow\n10 getpid deny:EACCES\n5 * trace\n").unwrap();
        assert_eq!(p.evaluate(GETPID), Decision { action: Action::Deny(EACCES), traced: 1 });
        assert_eq!(p.evaluate(GETUID), Decision { action: Action::Allow, traced: 1 });
    }

    #[test]
    fn trace_after_deny_is_not_reached() {
        let p = FilterPolicy::parse("1 open deny\n2 open trace\n").unwrap();
        assert_eq!(p.evaluate(OPEN), Decision { action: Action::Deny(EPERM), traced: 0 });
    }

    #[test]
    fn ties_keep_file_order() {
        let p = FilterPolicy::parse("3 mmap self\n3 mmap sync\n").unwrap();
        assert_eq!(p.evaluate(MMAP).action, Action::SelfHandle);
    }

    #[test]
    fn parse_errors_name_the_line() {
        let e = FilterPolicy::parse("# ok\n1 getpid allow\nx getpid allow").unwrap_err();
        assert_eq!(e.line, 3);
        assert!(FilterPolicy::parse("1 nosuch allow").is_err());
        assert!(FilterPolicy::parse("1 getpid deny:EWHAT").is_err());
        assert!(FilterPolicy::parse("1 getpid maybe").is_err());
        assert!(FilterPolicy::parse("1 getpid").is_err());
    }

    #[test]
    fn render_round_trips() {
        let p = FilterPolicy::parse("1 * trace\n2 open deny:ENOENT\n3 9 async # mmap\n").unwrap();
        assert_eq!(FilterPolicy::parse(&p.render()).unwrap(), p);
        assert_eq!(p.render(), "1 * trace\n2 open deny:ENOENT\n3 mmap async\n");
    }
}
