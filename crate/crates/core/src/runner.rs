//! Experiment orchestration: simulate once, run the selected suites in
//! dependency order on the in-memory batch, and write the report files.

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::bsde::{self, BsdeConfig, CashflowSpec, DriverSpec};
use crate::config::{BsdeCase, ExperimentConfig, SemigroupConfig, SuiteKind};
use crate::error::{Error, Result};
use crate::functions::StateFunction;
use crate::gate;
use crate::grid::TimeGrid;
use crate::hazard::{HazardModel, PathFunctionals};
use crate::measure::{p_influence, Comparison, Influence, WeightKind, WeightedEstimator};
use crate::model::{CoxHazard, ModelKind};
use crate::paths::{par_paths, simulate_with_defaults, ScenarioBatch};
use crate::pde::{self, PdeGrid};
use crate::report::{ReportEntry, VerificationReport};
use crate::rng::{derive_seed, RngSpec};
use crate::transfer::Suite;

/// Seed tags of the auxiliary runs.
const ORACLE_TAG: u64 = 0x0_0AC1E;
const RESEED_TAG: u64 = 0xC0_FFEE;
const DRIVER_PROBE_TAG: u64 = 0xD12;

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Leave the timestamp out of `report.json`.
    pub canonical: bool,
    /// Per-suite progress lines on stderr.
    pub progress: bool,
}

/// Files written by a run.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub report: VerificationReport,
    pub files: Vec<PathBuf>,
}

struct Progress {
    on: bool,
    start: Instant,
}

impl Progress {
    fn say(&self, msg: &str) {
        if self.on {
            eprintln!("[{:7.1}s] {msg}", self.start.elapsed().as_secs_f64());
        }
    }
}

/// Runs every selected suite and writes `report.json`, `entries.csv` and the
/// per-suite CSVs into `cfg.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, opts: RunOptions) -> Result<RunOutput> {
    cfg.validate()?;
    let progress = Progress { on: opts.progress, start: Instant::now() };
    let out_dir = cfg.output_dir.clone();
    std::fs::create_dir_all(&out_dir)?;
    let grid = TimeGrid::uniform(cfg.model.horizon, cfg.grid.n_steps)?;
    let kind = match cfg.model.kind {
        ModelKind::Cox => "cox",
        ModelKind::Dgc => "dgc",
    };
    let mut report = VerificationReport::new(cfg.fingerprint()?, cfg.seed, cfg.n_paths, cfg.grid.n_steps, kind.into());
    if !opts.canonical {
        let secs = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        report.created_at = Some(format!("unix:{secs}"));
    }
    let mut files = Vec::new();

    if !cfg.suites.is_empty() {
        run_suites(cfg, &grid, &out_dir, &mut report, &mut files, &progress)?;
    }

    report.finalize();
    let json = out_dir.join("report.json");
    report.write_json(&json)?;
    let csv = out_dir.join("entries.csv");
    report.write_entries_csv(&csv)?;
    files.splice(0..0, [json, csv]);
    progress.say(&format!("done: {} entries, {} failing", report.entries.len(), report.failures().count()));
    Ok(RunOutput { report, files })
}

fn run_suites(cfg: &ExperimentConfig, grid: &TimeGrid, out_dir: &Path, report: &mut VerificationReport, files: &mut Vec<PathBuf>, progress: &Progress) -> Result<()> {
    let z = cfg.tolerances.z_threshold;
    let base = HazardModel::new(cfg.model.clone())?;
    progress.say(&format!("simulating {} paths x {} steps", cfg.n_paths, cfg.grid.n_steps));
    let batch = simulate_with_defaults(&base, grid, cfg.n_paths, RngSpec::new(cfg.seed, 0))?;

    // the orientation of S is settled before anything reads γ or μ
    let (sign, sign_entry) = gate::resolve_sign(&batch, &cfg.model, cfg.oracle.sign_bins, z)?;
    report.sign_convention = Some(sign.chosen);
    let model = HazardModel::with_sign(cfg.model.clone(), sign.chosen)?;
    let fun = PathFunctionals::compute(&batch, &model)?;

    if cfg.runs(SuiteKind::Gate) {
        progress.say("gate");
        let mut entries = vec![sign_entry];
        entries.extend(gate::hazard_oracle(&model, &cfg.oracle, derive_seed(cfg.seed, ORACLE_TAG))?);
        entries.extend(gate::shape_checks(&model)?);
        entries.extend(gate::path_checks(&batch, &model, &fun, z, cfg.tolerances.pathwise)?);
        if entries.iter().any(|e| !e.pass) {
            report.notes.push("hazard gate failed: downstream entries are not valid".into());
        }
        report.extend(entries);
    }
    if cfg.runs(SuiteKind::Transfer) {
        progress.say("transfer");
        let suite = Suite::new(&batch, &model, &fun, z, cfg.tolerances.pathwise)?;
        report.extend(suite.run_all(cfg.conditional_bins)?);
    }
    if cfg.runs(SuiteKind::ClosedForm) {
        progress.say("closed forms");
        report.extend(closed_form_entries(cfg, &batch, &model, &fun)?);
        if model.kind() != ModelKind::Cox {
            report.notes.push("hazard closed forms exist only in Cox mode; only the linear BSDE was checked".into());
        }
    }
    if cfg.runs(SuiteKind::Bsde) {
        progress.say("bsde");
        bsde_suite(cfg, &batch, &model, &fun, out_dir, report, files, progress)?;
    }
    if cfg.runs(SuiteKind::Pde) || cfg.runs(SuiteKind::Compare) {
        pde_and_compare(cfg, &batch, &model, &fun, out_dir, report, files, progress)?;
    }
    Ok(())
}

/// `∫_0^T e^{−C(t)} dt` for the Cox hazard.
fn discounted_time(h: &CoxHazard, horizon: f64) -> f64 {
    match *h {
        CoxHazard::Constant { rate } if rate > 0.0 => -(-rate * horizon).exp_m1() / rate,
        _ => {
            // composite Simpson, the integrand is smooth
            let n = 20_000;
            let dx = horizon / n as f64;
            let f = |t: f64| (-h.cumulative(t)).exp();
            let mut s = f(0.0) + f(horizon);
            for k in 1..n {
                s += f(k as f64 * dx) * if k % 2 == 1 { 4.0 } else { 2.0 };
            }
            s * dx / 3.0
        }
    }
}

fn relative_entry(id: &str, est: &Influence, exact: f64, rel: f64) -> ReportEntry {
    let d = (est.value - exact).abs() / exact.abs().max(f64::MIN_POSITIVE);
    ReportEntry::pathwise(id, est.value, exact, d, rel).with_detail(format!("relative error, MC standard error {:.2e}", est.std_error()))
}

fn closed_form_entries(cfg: &ExperimentConfig, batch: &ScenarioBatch, model: &HazardModel, fun: &PathFunctionals) -> Result<Vec<ReportEntry>> {
    let rel = cfg.tolerances.closed_form;
    let z = cfg.tolerances.z_threshold;
    let grid = &batch.grid;
    let horizon = grid.horizon();
    let ns = grid.n_steps();
    let mut out = Vec::new();
    if model.kind() == ModelKind::Cox {
        let h = model.config().cox_hazard;
        let surv = (-h.cumulative(horizon)).exp();
        let rows = par_paths(batch.n_paths, |p| {
            let g = fun.cum_hazard(p);
            let mut dtime = 0.0;
            for i in 0..ns {
                let dg = g[i + 1] - g[i];
                // ∫ e^{−Γ} over a step with Γ linear in t
                let w = if dg > 1e-12 { -(-dg).exp_m1() / dg } else { 1.0 - 0.5 * dg };
                dtime += (-g[i]).exp() * w * grid.dt(i);
            }
            let alive = f64::from(batch.tau(p) > horizon);
            Ok(((-g[ns]).exp(), -(-g[ns]).exp_m1(), dtime, fun.q_terminal(p), alive))
        })?;
        let col = |f: fn(&(f64, f64, f64, f64, f64)) -> f64| rows.iter().map(f).collect::<Vec<f64>>();
        let q = col(|r| r.3);
        let s_p = p_influence(&col(|r| r.0), &q)?;
        let d_p = p_influence(&col(|r| r.1), &q)?;
        let t_p = p_influence(&col(|r| r.2), &q)?;
        out.push(relative_entry("closed_form.survival", &s_p, surv, rel));
        out.push(relative_entry("closed_form.default_probability", &d_p, 1.0 - surv, rel));
        out.push(relative_entry("closed_form.discounted_time", &t_p, discounted_time(&h, horizon), rel));
        let freq = Influence::mean(&col(|r| r.4))?;
        out.push(
            ReportEntry::mc("closed_form.survival_frequency", Comparison::against(&freq, surv), z)
                .with_detail("simulated ℚ(τ > T) against e^{−C(T)}"),
        );
    }
    let (a, rate) = (1.0, 0.1);
    let sol = bsde::solve_reduced(
        batch,
        model,
        fun,
        DriverSpec::Linear { rate },
        CashflowSpec::AbsolutelyContinuous { density: StateFunction::Constant { value: a } },
        &cfg.bsde.regression,
    )?;
    let exact = bsde::linear_closed_form(a, rate, 0.0, horizon);
    let d = (sol.u0() - exact).abs() / exact;
    out.push(ReportEntry::pathwise("closed_form.bsde_linear", sol.u0(), exact, d, rel).with_detail(format!("U_0 for g = {rate}·v, dA = {a} dt; relative error")));
    Ok(out)
}

fn case_label(i: usize, case: &BsdeCase) -> String {
    format!("{i}_{}_{}", case.driver.label(), case.cashflow.label())
}

#[allow(clippy::too_many_arguments)]
fn bsde_suite(
    cfg: &ExperimentConfig,
    batch: &ScenarioBatch,
    model: &HazardModel,
    fun: &PathFunctionals,
    out_dir: &Path,
    report: &mut VerificationReport,
    files: &mut Vec<PathBuf>,
    progress: &Progress,
) -> Result<()> {
    let z = cfg.tolerances.z_threshold;
    let rcfg: &BsdeConfig = &cfg.bsde.regression;
    let q: Vec<f64> = (0..batch.n_paths).map(|p| fun.q_terminal(p)).collect();
    let mut drivers: Vec<DriverSpec> = Vec::new();
    for (i, case) in cfg.bsde.cases.iter().enumerate() {
        if !drivers.contains(&case.driver) {
            drivers.push(case.driver);
        }
        let label = case_label(i, case);
        progress.say(&format!("bsde case {label}"));
        let sol = bsde::solve_reduced(batch, model, fun, case.driver, case.cashflow, rcfg)?;
        let lifted = bsde::lift_to_full(&sol, batch)?;
        let tag = |e: ReportEntry| ReportEntry { theorem_id: format!("{}/{label}", e.theorem_id), ..e };
        let mut entries = vec![
            bsde::verify_full_residual(&lifted, model, fun, z)?,
            bsde::verify_terminal(&lifted),
            bsde::norm_transfer_check(&lifted, fun, &q, z)?,
            bsde::verify_fixed_point(&sol),
        ];
        if case.driver == DriverSpec::IntensityDiscount {
            entries.push(bsde::verify_value_cross_check(&sol, batch, model, fun, &q, z)?);
        }
        report.extend(entries.into_iter().map(tag));
        let path = out_dir.join(format!("bsde_surface_{label}.csv"));
        sol.write_surface_csv(model, &path)?;
        files.push(path);
    }
    for (k, d) in drivers.iter().enumerate() {
        report.entries.push(d.probe(10_000, derive_seed(cfg.seed, DRIVER_PROBE_TAG + k as u64)));
    }
    if let Some(case) = cfg.bsde.halving_case {
        progress.say("bsde grid halving");
        let hgrid = TimeGrid::uniform(cfg.model.horizon, cfg.bsde.halving_steps)?;
        let (e, _) = bsde::grid_halving_probe(model, &hgrid, cfg.bsde.halving_paths, cfg.seed, case.driver, case.cashflow, rcfg)?;
        report.entries.push(e);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn pde_and_compare(
    cfg: &ExperimentConfig,
    batch: &ScenarioBatch,
    model: &HazardModel,
    fun: &PathFunctionals,
    out_dir: &Path,
    report: &mut VerificationReport,
    files: &mut Vec<PathBuf>,
    progress: &Progress,
) -> Result<()> {
    let z = cfg.tolerances.z_threshold;
    let pcfg = &cfg.pde.solver;
    let pgrid = PdeGrid::covering(model, batch.grid.clone(), pcfg)?;
    let mut values = Vec::new();
    progress.say("pde");
    for g in &cfg.pde.payoffs {
        let (sol, tol) = pde::value_with_tolerance(model, g, &pgrid, pcfg)?;
        if cfg.runs(SuiteKind::Pde) {
            report.entries.push(rename(pde::maximum_principle_check(&sol, g), &g.label()));
            let path = out_dir.join(format!("pde_u0_{}.csv", g.label()));
            sol.write_csv(&path)?;
            files.push(path);
        }
        values.push((sol.u0(), tol));
    }
    if cfg.runs(SuiteKind::Pde) {
        for g in &cfg.pde.richardson {
            report.entries.push(rename(pde::richardson_check(model, g, &pgrid, pcfg)?, &g.label()));
        }
    }
    if !cfg.runs(SuiteKind::Compare) {
        return Ok(());
    }
    progress.say("compare");
    let mut rows = Vec::new();
    for (g, &(u, tol)) in cfg.pde.payoffs.iter().zip(&values) {
        let (est, entries) = pde::compare_four_estimators(batch, model, fun, g, u, tol, z)?;
        report.extend(entries);
        for (name, inf, kind) in [
            ("direct", &est.direct, WeightKind::None),
            ("invariance", &est.invariance, WeightKind::Invariance),
            ("survival", &est.survival, WeightKind::Survival),
            ("naive", &est.naive, WeightKind::None),
        ] {
            report.estimators.push(WeightedEstimator::from_influence(inf, kind).named(format!("pde.four_estimators/{}/{name}", g.label())));
            rows.push([g.label(), name.to_string(), inf.value.to_string(), inf.std_error().to_string()]);
        }
        rows.push([g.label(), "pde".into(), u.to_string(), tol.to_string()]);
    }
    let horizon = cfg.model.horizon;
    let sg = cfg.pde.semigroup.clone().unwrap_or(SemigroupConfig { h: StateFunction::FactorPositive, s: 0.5 * horizon, t: 0.5 * horizon, n_bins: 20 });
    report.entries.push(pde::semigroup_check(batch, model, fun, &sg.h, sg.s, sg.t, sg.n_bins, z, pcfg)?);

    if cfg.pde.reseed {
        progress.say("compare: reseeded batch");
        let seed = derive_seed(cfg.seed, RESEED_TAG);
        let other = simulate_with_defaults(model, &batch.grid, batch.n_paths, RngSpec::new(seed, 0))?;
        let ofun = PathFunctionals::compute(&other, model)?;
        for g in &cfg.pde.payoffs {
            let mut e = pde::naive_gap_entry(&other, model, &ofun, g, "reseeded")?;
            e.detail = format!("{}; batch seed {seed}", e.detail);
            report.entries.push(e);
        }
    }

    let path = out_dir.join("compare.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["payoff", "estimator", "value", "se"])?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    files.push(path);
    Ok(())
}

fn rename(e: ReportEntry, suffix: &str) -> ReportEntry {
    ReportEntry { theorem_id: format!("{}/{suffix}", e.theorem_id), ..e }
}

/// Exit status: 0 when every entry passes, 1 otherwise.
pub fn exit_status(report: &VerificationReport) -> i32 {
    if report.pass {
        0
    } else {
        1
    }
}

/// Exit status for an error: 2 for configuration problems, 1 otherwise.
pub fn error_status(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Json(_) => 2,
        _ => 1,
    }
}
