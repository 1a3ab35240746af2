//! Experiment configuration: JSON (or TOML) with unknown keys rejected, and a
//! fingerprint over its canonical JSON form.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bsde::{BsdeConfig, CashflowSpec, DriverSpec};
use crate::error::{Error, Result};
use crate::functions::StateFunction;
use crate::gate::OracleConfig;
use crate::model::ModelConfig;
use crate::pde::PdeConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuiteKind {
    /// Hazard oracle, sign resolution, shape and martingale checks.
    Gate,
    /// Transfer formulas, pathwise transfers, characteristics.
    Transfer,
    /// Cox closed forms and the linear-BSDE closed form.
    ClosedForm,
    Bsde,
    Pde,
    /// Four-estimator comparison and semigroup check.
    Compare,
}

impl SuiteKind {
    pub const ALL: [SuiteKind; 6] = [SuiteKind::Gate, SuiteKind::Transfer, SuiteKind::ClosedForm, SuiteKind::Bsde, SuiteKind::Pde, SuiteKind::Compare];

    pub fn as_str(&self) -> &'static str {
        match self {
            SuiteKind::Gate => "gate",
            SuiteKind::Transfer => "transfer",
            SuiteKind::ClosedForm => "closed_form",
            SuiteKind::Bsde => "bsde",
            SuiteKind::Pde => "pde",
            SuiteKind::Compare => "compare",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default = "default_steps")]
    pub n_steps: usize,
}

fn default_steps() -> usize {
    200
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { n_steps: default_steps() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    /// |z| bound for statistical entries.
    #[serde(default = "default_z")]
    pub z_threshold: f64,
    /// Relative bound for pathwise identities.
    #[serde(default = "default_pathwise")]
    pub pathwise: f64,
    /// Relative bound for closed-form reproductions.
    #[serde(default = "default_closed_form")]
    pub closed_form: f64,
}

fn default_z() -> f64 {
    4.0
}
fn default_pathwise() -> f64 {
    1e-10
}
fn default_closed_form() -> f64 {
    5e-3
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { z_threshold: default_z(), pathwise: default_pathwise(), closed_form: default_closed_form() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BsdeCase {
    pub driver: DriverSpec,
    pub cashflow: CashflowSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BsdeSuiteConfig {
    #[serde(default = "default_cases")]
    pub cases: Vec<BsdeCase>,
    #[serde(default)]
    pub regression: BsdeConfig,
    /// Case used for the residual-bias grid-halving probe.
    #[serde(default = "default_halving_case")]
    pub halving_case: Option<BsdeCase>,
    #[serde(default = "default_halving_paths")]
    pub halving_paths: usize,
    #[serde(default = "default_halving_steps")]
    pub halving_steps: usize,
}

fn linear_case() -> BsdeCase {
    BsdeCase { driver: DriverSpec::Linear { rate: 0.1 }, cashflow: CashflowSpec::AbsolutelyContinuous { density: StateFunction::Constant { value: 1.0 } } }
}

fn default_cases() -> Vec<BsdeCase> {
    vec![
        linear_case(),
        BsdeCase { driver: DriverSpec::IntensityDiscount, cashflow: CashflowSpec::ClientDefaultLump { exposure: StateFunction::PositivePart { cap: 2.0 } } },
    ]
}
fn default_halving_case() -> Option<BsdeCase> {
    Some(linear_case())
}
fn default_halving_paths() -> usize {
    20_000
}
fn default_halving_steps() -> usize {
    50
}

impl Default for BsdeSuiteConfig {
    fn default() -> Self {
        Self {
            cases: default_cases(),
            regression: BsdeConfig::default(),
            halving_case: default_halving_case(),
            halving_paths: default_halving_paths(),
            halving_steps: default_halving_steps(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemigroupConfig {
    pub h: StateFunction,
    pub s: f64,
    pub t: f64,
    #[serde(default = "default_semigroup_bins")]
    pub n_bins: usize,
}

fn default_semigroup_bins() -> usize {
    20
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdeSuiteConfig {
    #[serde(default)]
    pub solver: PdeConfig,
    /// Payoffs `G` for the Feynman–Kac solve and the four-estimator comparison.
    #[serde(default = "default_payoffs")]
    pub payoffs: Vec<StateFunction>,
    /// Smooth payoffs for the Richardson check.
    #[serde(default = "default_richardson")]
    pub richardson: Vec<StateFunction>,
    /// Semigroup check; `s` and `t` default to half the horizon each.
    #[serde(default)]
    pub semigroup: Option<SemigroupConfig>,
    /// Repeat the naive-gap entries on a batch with a derived seed.
    #[serde(default = "default_true")]
    pub reseed: bool,
}

fn default_payoffs() -> Vec<StateFunction> {
    vec![StateFunction::FactorPositive, StateFunction::Zero, StateFunction::Constant { value: 1.0 }]
}
fn default_richardson() -> Vec<StateFunction> {
    vec![StateFunction::SmoothStep { scale: 0.5 }]
}
fn default_true() -> bool {
    true
}

impl Default for PdeSuiteConfig {
    fn default() -> Self {
        Self { solver: PdeConfig::default(), payoffs: default_payoffs(), richardson: default_richardson(), semigroup: None, reseed: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default = "default_paths")]
    pub n_paths: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Suites to run; all of them when absent.
    #[serde(default = "default_suites")]
    pub suites: Vec<SuiteKind>,
    #[serde(default)]
    pub tolerances: Tolerances,
    /// Equal-mass bins of the conditional survival check.
    #[serde(default = "default_conditional_bins")]
    pub conditional_bins: usize,
    #[serde(default)]
    pub oracle: OracleConfig,
    #[serde(default)]
    pub bsde: BsdeSuiteConfig,
    #[serde(default)]
    pub pde: PdeSuiteConfig,
    /// Not part of the fingerprint.
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

fn default_paths() -> usize {
    100_000
}
fn default_seed() -> u64 {
    42
}
fn default_suites() -> Vec<SuiteKind> {
    SuiteKind::ALL.to_vec()
}
fn default_conditional_bins() -> usize {
    10
}
fn default_output() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn new(model: ModelConfig) -> Self {
        Self {
            model,
            grid: GridConfig::default(),
            n_paths: default_paths(),
            seed: default_seed(),
            suites: default_suites(),
            tolerances: Tolerances::default(),
            conditional_bins: default_conditional_bins(),
            oracle: OracleConfig::default(),
            bsde: BsdeSuiteConfig::default(),
            pde: PdeSuiteConfig::default(),
            output_dir: default_output(),
        }
    }

    /// Reads `.toml` files as TOML and anything else as JSON.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
        let cfg: Self = if is_toml {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.grid.n_steps == 0 {
            return Err(Error::Config("grid.n_steps must be positive".into()));
        }
        if self.n_paths < 2 {
            return Err(Error::Config(format!("n_paths = {} is below 2", self.n_paths)));
        }
        let t = &self.tolerances;
        if !(t.z_threshold > 0.0 && t.pathwise > 0.0 && t.closed_form > 0.0) {
            return Err(Error::Config(format!("tolerances must be positive: {t:?}")));
        }
        let mut seen = self.suites.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.suites.len() {
            return Err(Error::Config("a suite is listed twice".into()));
        }
        for case in self.bsde.cases.iter().chain(&self.bsde.halving_case) {
            case.driver.validate()?;
            if matches!(case.cashflow, CashflowSpec::ClientDefaultLump { .. }) && self.model.client_hazard.is_none() {
                return Err(Error::Config("a client-default cashflow needs model.client_hazard".into()));
            }
        }
        self.pde.solver.validate()?;
        if let Some(sg) = &self.pde.semigroup {
            let horizon = self.model.horizon;
            if !(sg.s > 0.0 && sg.t > 0.0 && sg.s + sg.t <= horizon * (1.0 + 1e-12)) {
                return Err(Error::Config(format!("semigroup needs 0 < s < s+t ≤ T, got s={}, t={}", sg.s, sg.t)));
            }
        }
        for g in self.pde.payoffs.iter().chain(&self.pde.richardson) {
            if !g.sup_abs().is_finite() {
                return Err(Error::Config(format!("payoff {} is unbounded", g.label())));
            }
        }
        Ok(())
    }

    pub fn runs(&self, suite: SuiteKind) -> bool {
        self.suites.contains(&suite)
    }

    /// Hex SHA-256 of the canonical JSON (sorted keys, no whitespace) of the
    /// configuration without its output directory.
    pub fn fingerprint(&self) -> Result<String> {
        let mut value = serde_json::to_value(self)?;
        if let Some(obj) = value.as_object_mut() {
            obj.remove("output_dir");
        }
        let canonical = serde_json::to_string(&value)?;
        Ok(Sha256::digest(canonical.as_bytes()).iter().map(|b| format!("{b:02x}")).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_json_takes_defaults() {
        let cfg: ExperimentConfig = serde_json::from_str(r#"{"model": {"kind": "cox"}}"#).unwrap();
        assert_eq!(cfg.n_paths, 100_000);
        assert_eq!(cfg.suites.len(), 6);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"model": {"kind": "cox"}, "paths": 10}"#).is_err());
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"model": {"kind": "cox"}, "grid": {"steps": 10}}"#).is_err());
    }

    #[test]
    fn fingerprint_ignores_output_and_key_order() {
        let a: ExperimentConfig = serde_json::from_str(r#"{"model": {"kind": "dgc"}, "seed": 3, "output_dir": "x"}"#).unwrap();
        let b: ExperimentConfig = serde_json::from_str(r#"{"seed": 3, "model": {"kind": "dgc"}, "output_dir": "y"}"#).unwrap();
        assert_eq!(a.fingerprint().unwrap(), b.fingerprint().unwrap());
        let c = ExperimentConfig { seed: 4, ..a.clone() };
        assert_ne!(a.fingerprint().unwrap(), c.fingerprint().unwrap());
        assert_eq!(a.fingerprint().unwrap().len(), 64);
    }

    #[test]
    fn toml_front_end_matches_json() {
        let dir = tempfile::tempdir().unwrap();
        let tp = dir.path().join("c.toml");
        std::fs::write(&tp, "seed = 9\nsuites = [\"gate\"]\n[model]\nkind = \"cox\"\n").unwrap();
        let jp = dir.path().join("c.json");
        std::fs::write(&jp, r#"{"seed": 9, "suites": ["gate"], "model": {"kind": "cox"}}"#).unwrap();
        let (t, j) = (ExperimentConfig::load(&tp).unwrap(), ExperimentConfig::load(&jp).unwrap());
        assert_eq!(t.fingerprint().unwrap(), j.fingerprint().unwrap());
    }
}
