//! Both sides of the transfer identities between the enlarged basis (ℚ, with
//! the default time) and the reduced basis (ℙ, factor and jumps only).
//!
//! Monte Carlo entries pair a ℚ-side estimator with a ℙ-side estimator on the
//! same batch. Pathwise entries build a process from enlarged-filtration
//! ingredients and its reduction from factor/jump data only, stop both before
//! `τ` on the grid and compare them at every grid time.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functions::{JumpIntegrand, StateFunction, StoppingRule};
use crate::hazard::{HazardModel, PathFunctionals};
use crate::measure::{p_influence, zero_mean_test, Comparison, Influence, ZeroMeanTest};
use crate::paths::{par_paths, ScenarioBatch};
use crate::report::ReportEntry;

/// Integrand against the Brownian motion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BrownianIntegrand {
    Zero,
    One,
    /// `sign(m_{t−})`.
    SignFactor,
}

impl BrownianIntegrand {
    fn eval(&self, m: f64) -> f64 {
        match self {
            BrownianIntegrand::Zero => 0.0,
            BrownianIntegrand::One => 1.0,
            BrownianIntegrand::SignFactor => {
                if m > 0.0 {
                    1.0
                } else if m < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
        }
    }

    fn label(&self) -> &'static str {
        match self {
            BrownianIntegrand::Zero => "zero",
            BrownianIntegrand::One => "one",
            BrownianIntegrand::SignFactor => "sign_factor",
        }
    }
}

/// `|a − b| / max(|a|, |b|)`, zero when both vanish.
pub fn relative_discrepancy(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Largest relative discrepancy between an enlarged-side process (already
/// stopped) and a reduced-side process stopped at index `k`, with both
/// terminal values.
fn stopped_discrepancy(g_side: &[f64], f_side: &[f64], k: usize) -> (f64, f64, f64) {
    let mut worst = 0.0_f64;
    for j in 0..g_side.len() {
        let d = relative_discrepancy(g_side[j], f_side[j.min(k)]);
        if d > worst || d.is_nan() {
            worst = d;
        }
    }
    let last = g_side.len() - 1;
    (worst, g_side[last], f_side[last.min(k)])
}

fn cumulative(increments: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut out = vec![0.0];
    let mut acc = 0.0;
    for x in increments {
        acc += x;
        out.push(acc);
    }
    out
}

/// Turns a zero-mean test into a report entry (worst step shown).
pub fn zero_mean_entry(id: impl Into<String>, t: &ZeroMeanTest) -> ReportEntry {
    let j = t.worst_column;
    let (mean, se, z) = if t.means.is_empty() { (f64::NAN, f64::NAN, f64::NAN) } else { (t.means[j], t.std_errors[j], t.z_scores[j]) };
    let mut e = ReportEntry::mc(id, Comparison { lhs: mean, rhs: 0.0, se, z }, t.threshold);
    e.pass = t.pass;
    e.with_detail(format!("max |z| = {:.3} over {} steps (worst step {j}){}", t.max_abs_z, t.z_scores.len(), if t.inconclusive { ", inconclusive" } else { "" }))
}

/// Per-path grid processes shared by several checks.
struct PathData {
    k: usize,
    dw_enlarged: Vec<f64>,
    dw_reduced: Vec<f64>,
    dj: Vec<f64>,
    drift_enlarged: Vec<f64>,
}

/// Verifier bound to one batch.
pub struct Suite<'a> {
    pub batch: &'a ScenarioBatch,
    pub model: &'a HazardModel,
    pub fun: &'a PathFunctionals,
    pub z_threshold: f64,
    pub pathwise_tol: f64,
    q_terminal: Vec<f64>,
}

impl<'a> Suite<'a> {
    pub fn new(batch: &'a ScenarioBatch, model: &'a HazardModel, fun: &'a PathFunctionals, z_threshold: f64, pathwise_tol: f64) -> Result<Self> {
        batch.defaults_or_err()?;
        let q_terminal = (0..batch.n_paths).map(|p| fun.q_terminal(p)).collect();
        Ok(Self { batch, model, fun, z_threshold, pathwise_tol, q_terminal })
    }

    pub fn q_terminal(&self) -> &[f64] {
        &self.q_terminal
    }

    fn n(&self) -> usize {
        self.batch.n_paths
    }

    /// `mean(𝒬_T²) / mean(𝒬_T)²`, the variance factor of a self-normalized
    /// ℙ-mean of noise independent of the weights.
    fn weight_second_moment(&self) -> f64 {
        let n = self.n() as f64;
        let m1 = self.q_terminal.iter().sum::<f64>() / n;
        let m2 = self.q_terminal.iter().map(|w| w * w).sum::<f64>() / n;
        m2 / (m1 * m1)
    }

    /// Paired ℚ-mean vs ℙ-mean entry.
    fn q_vs_p(&self, id: impl Into<String>, lhs: &[f64], rhs: &[f64]) -> Result<ReportEntry> {
        let l = Influence::mean(lhs)?;
        let r = p_influence(rhs, &self.q_terminal)?;
        Ok(ReportEntry::mc(id, l.compare(&r)?, self.z_threshold))
    }

    fn path_data(&self, p: usize) -> Result<PathData> {
        let b = self.batch;
        let grid = &b.grid;
        let ns = grid.n_steps();
        let (m, db, mu) = (b.m(p), b.db(p), self.fun.mu(p));
        let tau = b.tau(p);
        let jumps_cfg = self.model.config().jumps;
        let comp = jumps_cfg.intensity * jumps_cfg.marks.mean();
        let mut dw_enlarged = Vec::with_capacity(ns);
        let mut dw_reduced = Vec::with_capacity(ns);
        let mut drift_enlarged = Vec::with_capacity(ns);
        let mut dj = vec![0.0; ns];
        for i in 0..ns {
            let dt = grid.dt(i);
            let beta = self.model.enlarged_drift(grid.t(i), m[i], tau)?;
            drift_enlarged.push(beta);
            dw_enlarged.push(db[i] - beta * dt);
            dw_reduced.push(db[i] - mu[i] * dt);
            dj[i] = -comp * dt;
        }
        for j in b.jumps(p) {
            dj[grid.step_of(j.time)] += j.mark;
        }
        Ok(PathData { k: b.last_alive_index(p), dw_enlarged, dw_reduced, dj, drift_enlarged })
    }

    /// `𝔼[χ 1{σ<τ}] = 𝔼′[χ e^{−Γ_σ}]`.
    pub fn verify_survival_formula(&self, sigma: StoppingRule, chi: StateFunction) -> Result<ReportEntry> {
        let b = self.batch;
        let rows = par_paths(self.n(), |p| {
            let m = b.m(p);
            let j = sigma.index(&b.grid, m);
            let x = chi.eval(b.grid.t(j), m[j]);
            if !(x >= 0.0) {
                return Err(Error::Precondition(format!("payoff must be nonnegative, got {x}")));
            }
            let alive = if b.last_alive_index(p) >= j { 1.0 } else { 0.0 };
            Ok((x * alive, x * self.fun.d_decay(p, j)))
        })?;
        let (l, r): (Vec<f64>, Vec<f64>) = rows.into_iter().unzip();
        Ok(self.q_vs_p("transfer.survival", &l, &r)?.with_detail(format!("chi={}, sigma={}", chi.label(), sigma.label())))
    }

    /// Survivor-binned version at an intermediate time `t`, with `σ = T`: one
    /// entry per equal-mass bin of `m_t` among ℚ-survivors.
    pub fn verify_survival_conditional(&self, chi: StateFunction, t: f64, n_bins: usize) -> Result<Vec<ReportEntry>> {
        let b = self.batch;
        let grid = &b.grid;
        let n = self.n();
        let (i0, last) = (grid.nearest_index(t), grid.n_steps());
        let mut surv: Vec<f64> = (0..n).filter(|&p| b.last_alive_index(p) >= i0).map(|p| b.m(p)[i0]).collect();
        if n_bins == 0 || surv.len() < 10 * n_bins {
            return Err(Error::Precondition(format!("{} survivors at t={t} are too few for {n_bins} bins", surv.len())));
        }
        surv.sort_by(|a, c| a.total_cmp(c));
        let edges: Vec<f64> = (1..n_bins).map(|k| surv[k * surv.len() / n_bins]).collect();
        let bins: Vec<usize> = (0..n).map(|p| edges.partition_point(|&e| e <= b.m(p)[i0])).collect();
        let mut payoff = Vec::with_capacity(n);
        for p in 0..n {
            let x = chi.eval(grid.horizon(), b.m(p)[last]);
            if !(x >= 0.0) {
                return Err(Error::Precondition(format!("payoff must be nonnegative, got {x}")));
            }
            payoff.push(x);
        }
        let mut out = Vec::with_capacity(n_bins);
        for bin in 0..n_bins {
            let mut ln = vec![0.0; n];
            let mut ld = vec![0.0; n];
            let mut rn = vec![0.0; n];
            let mut rd = vec![0.0; n];
            for p in 0..n {
                if bins[p] != bin {
                    continue;
                }
                let alive_t = b.last_alive_index(p) >= i0;
                if alive_t {
                    ld[p] = 1.0;
                    if b.tau(p) > grid.horizon() {
                        ln[p] = payoff[p];
                    }
                }
                let g = self.fun.cum_hazard(p);
                let w = self.q_terminal[p] * (-g[i0]).exp();
                rd[p] = w;
                rn[p] = w * payoff[p] * (-(g[last] - g[i0])).exp();
            }
            let c = Influence::ratio(&ln, &ld)?.compare(&Influence::ratio(&rn, &rd)?)?;
            out.push(
                ReportEntry::mc(format!("transfer.survival.conditional/bin_{bin:02}"), c, self.z_threshold)
                    .with_detail(format!("chi={}, t={}", chi.label(), grid.t(i0))),
            );
        }
        Ok(out)
    }

    /// `𝔼[K_τ 1{τ≤T}] = 𝔼′[∫_0^T K_s e^{−Γ_s} γ_s ds]`.
    pub fn verify_density_formula(&self, k: StateFunction) -> Result<ReportEntry> {
        let b = self.batch;
        let horizon = b.grid.horizon();
        let rows = par_paths(self.n(), |p| {
            let tau = b.tau(p);
            let lhs = if tau <= horizon { k.eval(tau, b.factor_at_tau(p)) } else { 0.0 };
            let m = b.m(p);
            let g = self.fun.cum_hazard(p);
            let mut rhs = 0.0;
            for i in 0..b.grid.n_steps() {
                let kk = 0.5 * (k.eval(b.grid.t(i), m[i]) + k.eval(b.grid.t(i + 1), m[i + 1]));
                // e^{−Γ_i} − e^{−Γ_{i+1}} = e^{−Γ_i}(1 − e^{−ΔΓ})
                rhs += kk * (-g[i]).exp() * -(-(g[i + 1] - g[i])).exp_m1();
            }
            Ok((lhs, rhs))
        })?;
        let (l, r): (Vec<f64>, Vec<f64>) = rows.into_iter().unzip();
        Ok(self.q_vs_p("transfer.density", &l, &r)?.with_detail(format!("K={}", k.label())))
    }

    /// `𝔼[A^{τ−}_T] = 𝔼′[∫_0^T e^{−Γ_s} dA_s]` for `dA = a(t, m_t) dt`.
    pub fn verify_dividend_continuous(&self, a: StateFunction) -> Result<ReportEntry> {
        let b = self.batch;
        let grid = &b.grid;
        let rows = par_paths(self.n(), |p| {
            let m = b.m(p);
            let g = self.fun.cum_hazard(p);
            let av: Vec<f64> = (0..=grid.n_steps()).map(|i| a.eval(grid.t(i), m[i])).collect();
            if let Some(x) = av.iter().find(|x| !(**x >= 0.0)) {
                return Err(Error::Precondition(format!("cashflow density must be nonnegative, got {x}")));
            }
            let k = b.last_alive_index(p);
            let mut lhs = 0.0;
            for i in 0..k {
                lhs += 0.5 * (av[i] + av[i + 1]) * grid.dt(i);
            }
            if k < grid.n_steps() {
                let tau = b.tau(p);
                let at = a.eval(tau, b.factor_at_tau(p)).max(0.0);
                lhs += 0.5 * (av[k] + at) * (tau - grid.t(k));
            }
            let mut rhs = 0.0;
            for i in 0..grid.n_steps() {
                let dg = g[i + 1] - g[i];
                // ∫ e^{−Γ} over the step with Γ linear in time
                let avg_decay = if dg > 1e-12 { -(-dg).exp_m1() / dg } else { 1.0 - 0.5 * dg };
                rhs += 0.5 * (av[i] + av[i + 1]) * (-g[i]).exp() * avg_decay * grid.dt(i);
            }
            Ok((lhs, rhs))
        })?;
        let (l, r): (Vec<f64>, Vec<f64>) = rows.into_iter().unzip();
        Ok(self.q_vs_p("transfer.dividend", &l, &r)?.with_detail(format!("a={}", a.label())))
    }

    /// Lump cashflow `A = G 1_{[θ,∞)}` at the client default time `θ`, with `G`
    /// read at the grid point preceding `θ`.
    pub fn verify_dividend_lump(&self, g: StateFunction) -> Result<ReportEntry> {
        let b = self.batch;
        let horizon = b.grid.horizon();
        if b.client_theta(0).is_none() {
            return Err(Error::Precondition("lump cashflow needs a client default clock".into()));
        }
        let rows = par_paths(self.n(), |p| {
            let theta = b.client_theta(p).expect("checked above");
            if theta > horizon {
                return Ok((0.0, 0.0));
            }
            let i = b.grid.step_of(theta);
            let x = g.eval(b.grid.t(i), b.m(p)[i]);
            if !(x >= 0.0) {
                return Err(Error::Precondition(format!("lump size must be nonnegative, got {x}")));
            }
            let lhs = if theta < b.tau(p) { x } else { 0.0 };
            let gamma_theta = self.fun.cum_hazard_at(b, self.model, p, theta, None)?;
            Ok((lhs, x * (-gamma_theta).exp()))
        })?;
        let (l, r): (Vec<f64>, Vec<f64>) = rows.into_iter().unzip();
        Ok(self.q_vs_p("transfer.dividend.lump", &l, &r)?.with_detail(format!("G={}", g.label())))
    }

    /// Brackets of stopped processes versus stopped brackets of reductions,
    /// plus the factor/jump covariation test.
    pub fn verify_qv_transfer(&self) -> Result<Vec<ReportEntry>> {
        let b = self.batch;
        let rows = par_paths(self.n(), |p| {
            let d = self.path_data(p)?;
            let m = b.m(p);
            let dm: Vec<f64> = m.windows(2).map(|w| w[1] - w[0]).collect();
            let k = d.k;
            // enlarged side: increments of the stopped processes
            let stop = |i: usize, x: f64| if i < k { x } else { 0.0 };
            let g_mm = cumulative((0..dm.len()).map(|i| stop(i, dm[i]).powi(2)));
            let g_wm = cumulative((0..dm.len()).map(|i| stop(i, d.dw_enlarged[i]) * stop(i, dm[i])));
            let g_jj = cumulative((0..dm.len()).map(|i| stop(i, d.dj[i]).powi(2)));
            // reduced side, stopped afterwards
            let f_mm = cumulative(dm.iter().map(|x| x * x));
            let f_wm = cumulative((0..dm.len()).map(|i| d.dw_reduced[i] * dm[i]));
            let f_jj = cumulative(d.dj.iter().map(|x| x * x));
            let cov_mj: f64 = (0..dm.len().min(k)).map(|i| dm[i] * d.dj[i]).sum();
            Ok([
                stopped_discrepancy(&g_mm, &f_mm, k),
                stopped_discrepancy(&g_wm, &f_wm, k),
                stopped_discrepancy(&g_jj, &f_jj, k),
                (cov_mj, 0.0, 0.0),
            ])
        })?;
        let mut out = Vec::new();
        for (c, name) in ["factor", "brownian_factor", "jump"].iter().enumerate() {
            let worst = rows.iter().map(|r| r[c].0).fold(0.0, f64::max);
            let lhs = rows.iter().map(|r| r[c].1).sum::<f64>() / self.n() as f64;
            let rhs = rows.iter().map(|r| r[c].2).sum::<f64>() / self.n() as f64;
            out.push(ReportEntry::pathwise(format!("pathwise.quadratic_variation/{name}"), lhs, rhs, worst, self.pathwise_tol));
        }
        let cov: Vec<f64> = rows.iter().map(|r| r[3].0).collect();
        out.push(
            ReportEntry::mc("quadratic_variation.factor_jump_covariation", Comparison::against(&Influence::mean(&cov)?, 0.0), self.z_threshold)
                .with_detail("[m, J] stopped before default has zero mean"),
        );
        Ok(out)
    }

    /// `(L·W)^{τ−}` built from the enlarged Brownian motion and an integrand
    /// that changes after default, against `(L′·W*)^{τ−}`.
    pub fn verify_integral_transfer(&self, l: BrownianIntegrand) -> Result<ReportEntry> {
        let b = self.batch;
        let rows = par_paths(self.n(), |p| {
            let d = self.path_data(p)?;
            let m = b.m(p);
            let ns = d.dw_enlarged.len();
            let g_side = cumulative((0..ns).map(|i| {
                let li = if i <= d.k { l.eval(m[i]) } else { -3.0 * l.eval(m[i]) + 1.0 };
                if i < d.k {
                    li * d.dw_enlarged[i]
                } else {
                    0.0
                }
            }));
            let f_side = cumulative((0..ns).map(|i| l.eval(m[i]) * d.dw_reduced[i]));
            Ok(stopped_discrepancy(&g_side, &f_side, d.k))
        })?;
        let worst = rows.iter().map(|r| r.0).fold(0.0, f64::max);
        let lhs = rows.iter().map(|r| r.1).sum::<f64>() / self.n() as f64;
        let rhs = rows.iter().map(|r| r.2).sum::<f64>() / self.n() as f64;
        Ok(ReportEntry::pathwise(format!("pathwise.stochastic_integral/{}", l.label()), lhs, rhs, worst, self.pathwise_tol))
    }

    /// Jump-measure compensator before default (MC) and the compensated jump
    /// integral transfer (pathwise).
    pub fn verify_jump_compensator(&self, psi: JumpIntegrand) -> Result<Vec<ReportEntry>> {
        let b = self.batch;
        let grid = &b.grid;
        let jc = self.model.config().jumps;
        let horizon = grid.horizon();
        let rows = par_paths(self.n(), |p| {
            let m = b.m(p);
            let tau = b.tau(p);
            let k = b.last_alive_index(p);
            let ns = grid.n_steps();
            let mut lhs = 0.0;
            let mut sum_step = vec![0.0; ns];
            for j in b.jumps(p) {
                let i = grid.step_of(j.time);
                let v = psi.eval(j.mark, m[i]);
                if j.time < tau && j.time <= horizon {
                    lhs += v;
                }
                sum_step[i] += v;
            }
            let mut rhs = 0.0;
            let mut comp_step = vec![0.0; ns];
            for i in 0..ns {
                let rate = jc.intensity * psi.mark_mean(&jc.marks, m[i]);
                comp_step[i] = rate * grid.dt(i);
                let end = grid.t(i + 1).min(tau);
                if end > grid.t(i) {
                    rhs += rate * (end - grid.t(i));
                }
            }
            // the enlarged-side integrand doubles after default; stopping removes it
            let g_side = cumulative((0..ns).map(|i| {
                let x = sum_step[i] - comp_step[i];
                let x = if i <= k { x } else { 2.0 * x };
                if i < k {
                    x
                } else {
                    0.0
                }
            }));
            let f_side = cumulative((0..ns).map(|i| sum_step[i] - comp_step[i]));
            let (worst, gl, fl) = stopped_discrepancy(&g_side, &f_side, k);
            Ok((lhs, rhs, worst, gl, fl))
        })?;
        let lhs: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let rhs: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let c = Influence::mean(&lhs)?.compare(&Influence::mean(&rhs)?)?;
        let worst = rows.iter().map(|r| r.2).fold(0.0, f64::max);
        let n = self.n() as f64;
        Ok(vec![
            ReportEntry::mc(format!("jump.compensator/{}", psi.label()), c, self.z_threshold),
            ReportEntry::pathwise(
                format!("pathwise.jump_integral/{}", psi.label()),
                rows.iter().map(|r| r.3).sum::<f64>() / n,
                rows.iter().map(|r| r.4).sum::<f64>() / n,
                worst,
                self.pathwise_tol,
            ),
        ])
    }

    /// `𝔼[N_T] = λT` for the jump counter.
    pub fn verify_poisson_mean(&self) -> Result<ReportEntry> {
        let b = self.batch;
        let counts: Vec<f64> = (0..self.n()).map(|p| b.jumps(p).len() as f64).collect();
        let want = self.model.config().jumps.intensity * b.grid.horizon();
        Ok(ReportEntry::mc("jump.poisson_mean", Comparison::against(&Influence::mean(&counts)?, want), self.z_threshold))
    }

    /// Triplet of `X = m + J` stopped before default: the enlarged-basis
    /// arrays against the reduced ones (pathwise), and drift-removed
    /// increments under both bases (statistical).
    pub fn verify_characteristics(&self) -> Result<Vec<ReportEntry>> {
        let b = self.batch;
        let grid = &b.grid;
        let ns = grid.n_steps();
        let vol = self.model.config().vol();
        let jc = self.model.config().jumps;
        let steps: Vec<(f64, f64)> = (0..ns).map(|i| (vol.vol_integral(grid.t(i), grid.t(i + 1)), vol.var_between(grid.t(i), grid.t(i + 1)))).collect();
        let data = par_paths(self.n(), |p| self.path_data(p))?;
        let rows = par_paths(self.n(), |p| {
            let d = &data[p];
            let mu = self.fun.mu(p);
            let k = d.k;
            let stop = |i: usize, x: f64| if i < k { x } else { 0.0 };
            let gb = cumulative((0..ns).map(|i| stop(i, steps[i].0 * d.drift_enlarged[i])));
            let ga = cumulative((0..ns).map(|i| stop(i, steps[i].1)));
            let gc = cumulative((0..ns).map(|i| stop(i, jc.intensity * grid.dt(i))));
            let fb = cumulative((0..ns).map(|i| steps[i].0 * mu[i]));
            let fa = cumulative((0..ns).map(|i| steps[i].1));
            let fc = cumulative((0..ns).map(|i| jc.intensity * grid.dt(i)));
            let parts = [stopped_discrepancy(&gb, &fb, k), stopped_discrepancy(&ga, &fa, k), stopped_discrepancy(&gc, &fc, k)];
            Ok(parts)
        })?;
        let mut out = Vec::new();
        for (c, name) in ["drift", "diffusion", "jump_compensator"].iter().enumerate() {
            let worst = rows.iter().map(|r| r[c].0).fold(0.0, f64::max);
            let n = self.n() as f64;
            out.push(ReportEntry::pathwise(
                format!("pathwise.characteristics/{name}"),
                rows.iter().map(|r| r[c].1).sum::<f64>() / n,
                rows.iter().map(|r| r[c].2).sum::<f64>() / n,
                worst,
                self.pathwise_tol,
            ));
        }
        // the jump part is independent of the rest, so its known
        // compound-Poisson variance is added to the plug-in variance of the
        // continuous part (the plug-in value is unreliable for sparse jumps)
        let cont_enlarged = |p: usize, i: usize| {
            let (d, m) = (&data[p], b.m(p));
            m[i + 1] - m[i] - steps[i].0 * d.drift_enlarged[i]
        };
        let cont_reduced = |p: usize, i: usize| {
            let m = b.m(p);
            m[i + 1] - m[i] - steps[i].0 * self.fun.mu(p)[i]
        };
        let stopped_row = |p: usize, with_jumps: bool| -> Result<Vec<f64>> {
            let d = &data[p];
            Ok((0..ns).map(|i| if i <= d.k { cont_enlarged(p, i) + if with_jumps { d.dj[i] } else { 0.0 } } else { 0.0 }).collect())
        };
        let reduced_row = |p: usize, with_jumps: bool| -> Result<Vec<f64>> {
            let d = &data[p];
            Ok((0..ns).map(|i| cont_reduced(p, i) + if with_jumps { d.dj[i] } else { 0.0 }).collect())
        };
        let n = self.n() as f64;
        let jump_var: Vec<f64> = (0..ns).map(|i| jc.intensity * grid.dt(i) * jc.marks.second_moment() / n).collect();
        let alive: Vec<f64> = (0..ns).map(|i| data.iter().filter(|d| d.k >= i).count() as f64 / n).collect();
        let q2 = self.weight_second_moment();
        let enlarged = {
            let full = zero_mean_test(self.n(), ns, None, self.z_threshold, 0.0, |p| stopped_row(p, true))?;
            let cont = zero_mean_test(self.n(), ns, None, self.z_threshold, 0.0, |p| stopped_row(p, false))?;
            full.rescored((0..ns).map(|i| (cont.std_errors[i].powi(2) + alive[i] * jump_var[i]).sqrt()).collect(), 0.0)
        };
        let reduced = {
            let w = Some(self.q_terminal.as_slice());
            let full = zero_mean_test(self.n(), ns, w, self.z_threshold, 0.0, |p| reduced_row(p, true))?;
            let cont = zero_mean_test(self.n(), ns, w, self.z_threshold, 0.0, |p| reduced_row(p, false))?;
            full.rescored((0..ns).map(|i| (cont.std_errors[i].powi(2) + q2 * jump_var[i]).sqrt()).collect(), 0.0)
        };
        out.push(zero_mean_entry("characteristics.drift_removed/enlarged", &enlarged));
        out.push(zero_mean_entry("characteristics.drift_removed/reduced", &reduced));
        Ok(out)
    }

    /// Reduced-basis martingales stopped before default are enlarged-basis
    /// martingales: per-step increment tests under ℚ (stopped) and under ℙ.
    pub fn verify_stopped_martingales(&self) -> Result<Vec<ReportEntry>> {
        let b = self.batch;
        let ns = b.grid.n_steps();
        let data = par_paths(self.n(), |p| self.path_data(p))?;
        let increments = |name: &str, p: usize| -> Vec<f64> {
            let d = &data[p];
            let m = b.m(p);
            match name {
                "brownian" => d.dw_reduced.clone(),
                "sign_integral" => (0..ns).map(|i| BrownianIntegrand::SignFactor.eval(m[i]) * d.dw_reduced[i]).collect(),
                "jump" => d.dj.clone(),
                _ => (0..ns).map(|i| 1.0 / self.fun.q_density(p, i + 1) - 1.0 / self.fun.q_density(p, i)).collect(),
            }
        };
        let mut out = Vec::new();
        for name in ["brownian", "sign_integral", "jump", "inverse_density"] {
            let mut stopped = zero_mean_test(self.n(), ns, None, self.z_threshold, 0.0, |p| {
                let k = data[p].k;
                Ok(increments(name, p).into_iter().enumerate().map(|(i, x)| if i <= k { x } else { 0.0 }).collect())
            })?;
            let mut reduced = zero_mean_test(self.n(), ns, Some(&self.q_terminal), self.z_threshold, 0.0, |p| Ok(increments(name, p)))?;
            if name == "jump" {
                // sparse jump columns: the plug-in variance shrinks with the
                // jump count and inflates |z|; the compound-Poisson variance
                // λ Δt E[e²] is known and independent of the factor
                let jc = self.model.config().jumps;
                let n = self.n() as f64;
                let q2 = self.weight_second_moment();
                let alive: Vec<f64> = (0..ns).map(|i| data.iter().filter(|d| d.k >= i).count() as f64 / n).collect();
                let var = |i: usize| jc.intensity * b.grid.dt(i) * jc.marks.second_moment();
                stopped = stopped.rescored((0..ns).map(|i| (var(i) * alive[i] / n).sqrt()).collect(), 0.0);
                reduced = reduced.rescored((0..ns).map(|i| (var(i) * q2 / n).sqrt()).collect(), 0.0);
            }
            out.push(zero_mean_entry(format!("martingale.stopped/{name}"), &stopped));
            out.push(zero_mean_entry(format!("martingale.reduced/{name}"), &reduced));
        }
        Ok(out)
    }

    /// The stock set of transfer checks.
    pub fn run_all(&self, conditional_bins: usize) -> Result<Vec<ReportEntry>> {
        let horizon = self.batch.grid.horizon();
        let mut out = Vec::new();
        let terminal = StoppingRule::Fixed { t: horizon };
        out.push(self.verify_survival_formula(terminal, StateFunction::Constant { value: 1.0 })?);
        out.push(self.verify_survival_formula(terminal, StateFunction::FactorPositive)?);
        out.push(self.verify_survival_formula(StoppingRule::FirstPassage { level: 0.5 }, StateFunction::Constant { value: 1.0 })?);
        out.extend(self.verify_survival_conditional(StateFunction::FactorPositive, 0.5 * horizon, conditional_bins)?);
        out.push(self.verify_density_formula(StateFunction::Constant { value: 1.0 })?);
        out.push(self.verify_density_formula(StateFunction::FactorPositive)?);
        out.push(self.verify_dividend_continuous(StateFunction::Constant { value: 1.0 })?);
        out.push(self.verify_dividend_continuous(StateFunction::PositivePart { cap: 2.0 })?);
        if self.batch.client_theta(0).is_some() {
            out.push(self.verify_dividend_lump(StateFunction::Constant { value: 1.0 })?);
            out.push(self.verify_dividend_lump(StateFunction::PositivePart { cap: 2.0 })?);
        }
        out.extend(self.verify_qv_transfer()?);
        for l in [BrownianIntegrand::Zero, BrownianIntegrand::One, BrownianIntegrand::SignFactor] {
            out.push(self.verify_integral_transfer(l)?);
        }
        for psi in [JumpIntegrand::One, JumpIntegrand::Mark, JumpIntegrand::MarkIfFactorPositive] {
            out.extend(self.verify_jump_compensator(psi)?);
        }
        out.push(self.verify_poisson_mean()?);
        out.extend(self.verify_characteristics()?);
        out.extend(self.verify_stopped_martingales()?);
        Ok(out)
    }
}
