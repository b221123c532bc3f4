//! Machine-readable run reports. `wall_time_ms` is the only field that
//! varies between identical runs; everything else is a pure function of the
//! config and seed.

use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

/// One verified quantity: `|value| <= tolerance` decides `pass` for gap
/// checks, with the estimate's standard error attached when the tolerance is
/// statistical.
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub std_error: Option<f64>,
    pub tolerance: f64,
    pub pass: bool,
}

impl Check {
    /// A gap that must be at most `tolerance` in magnitude.
    pub fn gap(
        name: impl Into<String>,
        value: f64,
        std_error: Option<f64>,
        tolerance: f64,
    ) -> Self {
        Self {
            name: name.into(),
            value,
            std_error,
            tolerance,
            pass: value.abs() <= tolerance,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct Report {
    pub command: String,
    pub experiment: Option<String>,
    pub seed: u64,
    pub n_samples: usize,
    pub checks: Vec<Check>,
    pub pass: bool,
    pub wall_time_ms: f64,
}

impl Report {
    pub fn new(command: &str, experiment: Option<String>, seed: u64, n_samples: usize) -> Self {
        Self {
            command: command.into(),
            experiment,
            seed,
            n_samples,
            checks: Vec::new(),
            pass: true,
            wall_time_ms: 0.0,
        }
    }

    pub fn push(&mut self, check: Check) {
        self.pass &= check.pass;
        self.checks.push(check);
    }

    /// Writes `report.json` into `dir`, prints one line per check, and names
    /// the failing quantities on stderr.
    pub fn finish(mut self, dir: &Path, started: std::time::Instant) -> Result<bool> {
        self.wall_time_ms = started.elapsed().as_secs_f64() * 1e3;
        std::fs::create_dir_all(dir)
            .with_context(|| format!("cannot create output dir {}", dir.display()))?;
        let path = dir.join("report.json");
        let json = serde_json::to_string_pretty(&self).context("serializing report")?;
        std::fs::write(&path, json).with_context(|| format!("cannot write {}", path.display()))?;

        for c in &self.checks {
            let se = c
                .std_error
                .map_or(String::new(), |s| format!(" (se {s:.3e})"));
            println!(
                "{} {}: |{:.6e}| <= {:.3e}{se}",
                if c.pass { "pass" } else { "FAIL" },
                c.name,
                c.value,
                c.tolerance
            );
        }
        if !self.pass {
            let failing: Vec<&str> = self
                .checks
                .iter()
                .filter(|c| !c.pass)
                .map(|c| c.name.as_str())
                .collect();
            eprintln!("failed checks: {}", failing.join(", "));
        }
        println!(
            "{}: {} of {} checks passed; report at {}",
            self.command,
            self.checks.iter().filter(|c| c.pass).count(),
            self.checks.len(),
            path.display()
        );
        Ok(self.pass)
    }
}
