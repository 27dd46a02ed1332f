use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One named pass/fail check with its headline metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub metric: f64,
    pub threshold: f64,
    pub detail: String,
}

impl Check {
    /// Passes when `metric <= threshold`.
    pub fn at_most(name: impl Into<String>, metric: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed: metric <= threshold,
            metric,
            threshold,
            detail: detail.into(),
        }
    }

    /// Passes when `metric >= threshold`.
    pub fn at_least(name: impl Into<String>, metric: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed: metric >= threshold,
            metric,
            threshold,
            detail: detail.into(),
        }
    }

    pub fn flag(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            metric: f64::from(u8::from(passed)),
            threshold: 1.0,
            detail: detail.into(),
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {:<36} metric={:<12.4e} threshold={:<10.3e} {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.metric,
            self.threshold,
            self.detail
        )
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Report {
    pub title: String,
    pub checks: Vec<Check>,
}

impl Report {
    pub fn new(title: impl Into<String>) -> Self {
        Self {
            title: title.into(),
            checks: Vec::new(),
        }
    }

    pub fn push(&mut self, check: Check) {
        self.checks.push(check);
    }

    pub fn extend(&mut self, checks: impl IntoIterator<Item = Check>) {
        self.checks.extend(checks);
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{}", self.title);
        for c in &self.checks {
            let _ = writeln!(out, "{}", c.line());
        }
        let passed = self.checks.iter().filter(|c| c.passed).count();
        let _ = writeln!(out, "{passed}/{} checks passed", self.checks.len());
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// Writes `report.txt` and `report.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        for (name, body) in [("report.txt", self.to_text()), ("report.json", self.to_json() + "\n")] {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|source| Error::Io { path, source })?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_round_trips_through_json() {
        let mut r = Report::new("t");
        r.push(Check::at_most("a", 1e-10, 1e-9, ""));
        r.push(Check::at_least("b", 0.5, 0.9, "low"));
        assert!(!r.passed());
        let back: Report = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
        assert!(r.to_text().contains("FAIL b"));
    }

    #[test]
    fn nan_metric_fails() {
        assert!(!Check::at_most("n", f64::NAN, 1.0, "").passed);
    }
}
