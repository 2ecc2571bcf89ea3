use std::collections::BTreeMap;

use serde::Serialize;
use serde_json::Value;

use crate::config::RunConfig;
use crate::Command;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Tolerances {
    pub solver: f64,
    pub discretization: f64,
}

impl Tolerances {
    pub fn solver(t: f64) -> Self {
        Self { solver: t, discretization: 0.0 }
    }

    pub fn total(&self) -> f64 {
        self.solver + self.discretization
    }
}

/// One assertion, always of the form `slack >= -(solver + discretization)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub interval: Option<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tuple_id: Option<String>,
    pub slack: f64,
    pub tolerances: Tolerances,
    pub pass: bool,
}

impl Check {
    pub fn new(name: impl Into<String>, slack: f64, tolerances: Tolerances) -> Self {
        let pass = !slack.is_nan() && slack >= -tolerances.total();
        Self { name: name.into(), interval: None, tuple_id: None, slack, tolerances, pass }
    }

    /// A yes/no property; the slack is 0 on success and -1 on failure.
    pub fn flag(name: impl Into<String>, ok: bool) -> Self {
        Self::new(name, if ok { 0.0 } else { -1.0 }, Tolerances::solver(0.0))
    }

    pub fn over(mut self, t0: f64, t1: f64) -> Self {
        self.interval = Some([t0, t1]);
        self
    }

    pub fn tuple(mut self, id: &str) -> Self {
        self.tuple_id = Some(id.to_string());
        self
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Summary {
    pub checks: usize,
    pub failed: usize,
    /// Names of the failing checks, deduplicated, in order of appearance.
    pub failing: Vec<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub command: Command,
    pub version: String,
    pub seed: u64,
    pub config: RunConfig,
    pub summary: Summary,
    pub pass: bool,
    pub tables: BTreeMap<String, Value>,
    pub checks: Vec<Check>,
}

impl Report {
    pub fn new(command: Command, config: &RunConfig) -> Self {
        Self {
            command,
            version: crate::VERSION.to_string(),
            seed: config.seed,
            config: config.clone(),
            summary: Summary { checks: 0, failed: 0, failing: Vec::new() },
            pass: true,
            tables: BTreeMap::new(),
            checks: Vec::new(),
        }
    }

    pub fn push(&mut self, c: Check) {
        if !c.pass {
            self.pass = false;
            self.summary.failed += 1;
            if !self.summary.failing.contains(&c.name) {
                self.summary.failing.push(c.name.clone());
            }
        }
        self.summary.checks += 1;
        self.checks.push(c);
    }

    pub fn extend(&mut self, cs: impl IntoIterator<Item = Check>) {
        for c in cs {
            self.push(c);
        }
    }

    pub fn table(&mut self, name: &str, value: impl Serialize) {
        self.tables.insert(name.to_string(), serde_json::to_value(value).expect("table serialises"));
    }

    /// Checks whose name starts with `prefix`.
    pub fn checks_named<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a Check> + 'a {
        self.checks.iter().filter(move |c| c.name.starts_with(prefix))
    }

    /// True when at least one check carries the prefix and all of them pass.
    pub fn all_pass(&self, prefix: &str) -> bool {
        let mut any = false;
        for c in self.checks_named(prefix) {
            any = true;
            if !c.pass {
                return false;
            }
        }
        any
    }
}
