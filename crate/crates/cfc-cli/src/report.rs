//! Machine-readable scenario reports.
//!
//! A report renders as line-delimited canonical JSON records (one `check`,
//! `release`, or `ledger` record per line, then a `summary` line), so the
//! same scenario with the same seed produces byte-identical output. The
//! human-readable summary goes to stderr, never into the report.

use serde::{Deserialize, Serialize};

use cfc_core::canonical;
use cfc_core::ledger::LedgerDump;
use cfc_core::pipeline::ReleasedOutput;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub name: String,
    pub expected: String,
    pub observed: String,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub scenario: String,
    pub seed: u64,
    pub noise_off: bool,
    pub checks: Vec<CheckRecord>,
    pub released: Vec<ReleasedOutput>,
    pub ledger: LedgerDump,
}

impl ScenarioReport {
    pub fn new(scenario: &str, seed: u64, noise_off: bool) -> Self {
        Self {
            scenario: scenario.to_string(),
            seed,
            noise_off,
            checks: Vec::new(),
            released: Vec::new(),
            ledger: LedgerDump::default(),
        }
    }

    /// Records one verdict; `expected` and `observed` are display strings.
    pub fn check(&mut self, name: &str, expected: impl ToString, observed: impl ToString, pass: bool) {
        self.checks.push(CheckRecord {
            name: name.to_string(),
            expected: expected.to_string(),
            observed: observed.to_string(),
            pass,
        });
    }

    /// Convenience for equality-style checks.
    pub fn check_eq<T: PartialEq + std::fmt::Debug>(&mut self, name: &str, expected: T, observed: T) {
        let pass = expected == observed;
        self.check(name, format!("{expected:?}"), format!("{observed:?}"), pass);
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn exit_code(&self) -> i32 {
        if self.all_passed() {
            0
        } else {
            1
        }
    }

    /// Line-delimited canonical rendering.
    pub fn render(&self) -> String {
        #[derive(Serialize)]
        struct Line<'a, T: Serialize> {
            record: &'a str,
            #[serde(flatten)]
            body: T,
        }
        let mut out = String::new();
        for check in &self.checks {
            out.push_str(&canonical::to_string(&Line { record: "check", body: check }).unwrap());
            out.push('\n');
        }
        for release in &self.released {
            out.push_str(&canonical::to_string(&Line { record: "release", body: release }).unwrap());
            out.push('\n');
        }
        out.push_str(&canonical::to_string(&Line { record: "ledger", body: &self.ledger }).unwrap());
        out.push('\n');
        let summary = Summary {
            scenario: &self.scenario,
            seed: self.seed,
            noise_off: self.noise_off,
            checks: self.checks.len(),
            passed: self.checks.iter().filter(|c| c.pass).count(),
            exit_code: self.exit_code(),
        };
        out.push_str(&canonical::to_string(&Line { record: "summary", body: summary }).unwrap());
        out.push('\n');
        out
    }

    /// Two-line human digest for stderr.
    pub fn human_summary(&self) -> String {
        let failed: Vec<&str> =
            self.checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
        let mut out = format!(
            "scenario {} (seed {}): {}/{} checks passed, {} release(s)\n",
            self.scenario,
            self.seed,
            self.checks.iter().filter(|c| c.pass).count(),
            self.checks.len(),
            self.released.len(),
        );
        if !failed.is_empty() {
            out.push_str(&format!("failed checks: {}\n", failed.join(", ")));
        }
        out
    }
}

#[derive(Serialize)]
struct Summary<'a> {
    scenario: &'a str,
    seed: u64,
    noise_off: bool,
    checks: usize,
    passed: usize,
    exit_code: i32,
}
