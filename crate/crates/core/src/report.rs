//! Verification report: one entry per checked identity, written as JSON and
//! as a flat CSV.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::hazard::SignConvention;
use crate::measure::{Comparison, WeightedEstimator};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryMode {
    /// Statistical comparison with a z-score.
    Mc,
    /// Deterministic identity with a maximum discrepancy.
    Pathwise,
}

impl EntryMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            EntryMode::Mc => "mc",
            EntryMode::Pathwise => "pathwise",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub theorem_id: String,
    pub mode: EntryMode,
    pub lhs: f64,
    pub rhs: f64,
    /// Combined standard error (MC entries).
    pub se: Option<f64>,
    pub z: Option<f64>,
    /// Largest absolute discrepancy (pathwise entries).
    pub max_abs_discrepancy: Option<f64>,
    /// z threshold (MC) or discrepancy bound (pathwise).
    pub tolerance: f64,
    pub pass: bool,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

impl ReportEntry {
    /// MC entry passing iff `|z| ≤ threshold`.
    pub fn mc(id: impl Into<String>, c: Comparison, threshold: f64) -> Self {
        Self {
            theorem_id: id.into(),
            mode: EntryMode::Mc,
            lhs: c.lhs,
            rhs: c.rhs,
            se: Some(c.se),
            z: Some(c.z),
            max_abs_discrepancy: None,
            tolerance: threshold,
            pass: c.z.abs() <= threshold,
            detail: String::new(),
        }
    }

    /// MC entry with an extra absolute allowance: passes iff
    /// `|lhs − rhs| ≤ threshold·se + allowance`.
    pub fn mc_with_allowance(id: impl Into<String>, c: Comparison, threshold: f64, allowance: f64) -> Self {
        let mut e = Self::mc(id, c, threshold);
        e.pass = (c.lhs - c.rhs).abs() <= threshold * c.se + allowance;
        e
    }

    /// Pathwise entry passing iff the discrepancy is within `tol`.
    pub fn pathwise(id: impl Into<String>, lhs: f64, rhs: f64, discrepancy: f64, tol: f64) -> Self {
        Self {
            theorem_id: id.into(),
            mode: EntryMode::Pathwise,
            lhs,
            rhs,
            se: None,
            z: None,
            max_abs_discrepancy: Some(discrepancy),
            tolerance: tol,
            pass: discrepancy <= tol,
            detail: String::new(),
        }
    }

    /// A boolean check recorded as a pathwise entry.
    pub fn check(id: impl Into<String>, lhs: f64, rhs: f64, pass: bool) -> Self {
        let mut e = Self::pathwise(id, lhs, rhs, (lhs - rhs).abs(), 0.0);
        e.pass = pass;
        e
    }

    pub fn with_detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = detail.into();
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub fingerprint: String,
    pub seed: u64,
    pub n_paths: usize,
    pub n_steps: usize,
    pub model_kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sign_convention: Option<SignConvention>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub created_at: Option<String>,
    pub pass: bool,
    pub entries: Vec<ReportEntry>,
    pub estimators: Vec<WeightedEstimator>,
    pub notes: Vec<String>,
}

impl VerificationReport {
    pub fn new(fingerprint: String, seed: u64, n_paths: usize, n_steps: usize, model_kind: String) -> Self {
        Self {
            fingerprint,
            seed,
            n_paths,
            n_steps,
            model_kind,
            sign_convention: None,
            created_at: None,
            pass: true,
            entries: Vec::new(),
            estimators: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn extend(&mut self, entries: impl IntoIterator<Item = ReportEntry>) {
        self.entries.extend(entries);
    }

    /// Sorts entries by id (stable) and recomputes the overall flag.
    pub fn finalize(&mut self) {
        self.entries.sort_by(|a, b| a.theorem_id.cmp(&b.theorem_id));
        self.pass = self.entries.iter().all(|e| e.pass);
    }

    pub fn failures(&self) -> impl Iterator<Item = &ReportEntry> {
        self.entries.iter().filter(|e| !e.pass)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// `theorem_id,mode,lhs,rhs,se,z,pass`; `se` and `z` are empty for pathwise entries.
    pub fn write_entries_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["theorem_id", "mode", "lhs", "rhs", "se", "z", "pass"])?;
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        for e in &self.entries {
            w.write_record([
                e.theorem_id.clone(),
                e.mode.as_str().to_string(),
                e.lhs.to_string(),
                e.rhs.to_string(),
                opt(e.se),
                opt(e.z),
                e.pass.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
