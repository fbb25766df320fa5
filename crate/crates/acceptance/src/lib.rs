//! Bookkeeping for the acceptance run: named checks with the measured
//! value, the bound it was held to, and a verdict.

use std::fmt;
use std::io::Write;

#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub measured: String,
    pub bound: String,
    pub pass: bool,
}

impl Check {
    pub fn new(
        name: impl Into<String>,
        measured: impl Into<String>,
        bound: impl Into<String>,
        pass: bool,
    ) -> Self {
        Self {
            name: name.into(),
            measured: measured.into(),
            bound: bound.into(),
            pass,
        }
    }

    /// `value < bound`
    pub fn below(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self::new(
            name,
            fmt_num(value),
            format!("< {}", fmt_num(bound)),
            value < bound,
        )
    }

    /// `value > bound`
    pub fn above(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self::new(
            name,
            fmt_num(value),
            format!("> {}", fmt_num(bound)),
            value > bound,
        )
    }

    /// `value >= bound`
    pub fn at_least(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self::new(
            name,
            fmt_num(value),
            format!(">= {}", fmt_num(bound)),
            value >= bound,
        )
    }

    /// `value <= bound`
    pub fn at_most(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self::new(
            name,
            fmt_num(value),
            format!("<= {}", fmt_num(bound)),
            value <= bound,
        )
    }

    /// `lo <= value <= hi`
    pub fn within(name: impl Into<String>, value: f64, lo: f64, hi: f64) -> Self {
        Self::new(
            name,
            fmt_num(value),
            format!("in [{}, {}]", fmt_num(lo), fmt_num(hi)),
            (lo..=hi).contains(&value),
        )
    }
}

fn fmt_num(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-3 || v.abs() >= 1e5) {
        format!("{v:.3e}")
    } else {
        format!("{v:.4}")
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.pass { "PASS" } else { "FAIL" };
        write!(
            f,
            "[{tag}] {}: {} (want {})",
            self.name, self.measured, self.bound
        )
    }
}

/// Checks in the order they were recorded; each is printed as it lands so a
/// long run shows progress.
#[derive(Debug, Default)]
pub struct Report {
    pub checks: Vec<Check>,
}

impl Report {
    pub fn record(&mut self, check: Check) {
        println!("{check}");
        std::io::stdout().flush().ok();
        self.checks.push(check);
    }

    pub fn note(&self, line: impl fmt::Display) {
        println!("       {line}");
        std::io::stdout().flush().ok();
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.pass).collect()
    }
}
