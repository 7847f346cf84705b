use std::fmt::Write;

use crate::error::{Error, Result};
use crate::metaselect::toys::{oracle_suite, OracleOptions};
use crate::seqmodel::{gradient_suite, GRAD_TOL};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CheckOptions {
    pub seed: u64,
    pub grad_seeds: usize,
    pub inject_fault: bool,
}

/// One line per fixture: suite, name, worst relative error, tolerance, verdict.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub rows: Vec<(String, String, f64, f64, bool)>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.4)
    }

    pub fn failures(&self) -> Vec<String> {
        self.rows.iter().filter(|r| !r.4).map(|r| format!("{}/{}", r.0, r.1)).collect()
    }

    pub fn table(&self) -> String {
        let width = self.rows.iter().map(|r| r.0.len() + r.1.len() + 1).max().unwrap_or(0).max(7);
        let mut out = format!("{:<width$}  {:>10}  {:>8}  result\n", "fixture", "max_rel", "tol");
        for (suite, name, err, tol, pass) in &self.rows {
            let label = format!("{suite}/{name}");
            let verdict = if *pass { "pass" } else { "FAIL" };
            let _ = writeln!(out, "{label:<width$}  {err:>10.3e}  {tol:>8.1e}  {verdict}");
        }
        out
    }

    pub fn into_result(self) -> Result<()> {
        if self.passed() {
            Ok(())
        } else {
            Err(Error::Oracle(format!("fixtures over tolerance: {}", self.failures().join(", "))))
        }
    }
}

/// Autodiff against finite differences for every primitive and loss, then
/// exact against finite-difference hyper-gradients on every fixture.
pub fn cmd_check(opts: &CheckOptions) -> Result<CheckReport> {
    let mut rows = Vec::new();
    for r in gradient_suite(opts.grad_seeds)? {
        rows.push(("grad".to_string(), r.name.to_string(), r.max_rel, GRAD_TOL, r.pass));
    }
    let oracle = OracleOptions {
        inject_fault: opts.inject_fault,
        ..OracleOptions::default()
    };
    for r in oracle_suite(opts.seed, &oracle)? {
        rows.push(("hypergrad".to_string(), r.name, r.gap, oracle.rel_tol, r.pass));
    }
    Ok(CheckReport { rows })
}
