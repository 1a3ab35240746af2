//! Hazard gate: independent oracles for the sign of the survival formula and
//! for the closed-form intensity and drift, plus the martingale checks that
//! must hold before any transfer test is meaningful.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::hazard::{HazardModel, PathFunctionals, SignConvention};
use crate::measure::{expect_survival, zero_mean_test, Comparison, Influence};
use crate::model::{ModelConfig, ModelKind};
use crate::paths::{par_paths, ScenarioBatch};
use crate::report::ReportEntry;
use crate::rng::{derive_seed, RngSpec};
use crate::transfer::{relative_discrepancy, zero_mean_entry};

/// Expected default count below which a frequency is not compared by a z-test.
pub const MIN_EXPECTED_EVENTS: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    /// Conditional samples per oracle point.
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Finite-difference half-width in `t` and in `m`.
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_times")]
    pub times: Vec<f64>,
    #[serde(default = "default_factors")]
    pub factors: Vec<f64>,
    /// Agreement bound in oracle standard errors.
    #[serde(default = "default_oracle_z")]
    pub z_threshold: f64,
    #[serde(default = "default_bins")]
    pub sign_bins: usize,
}

fn default_samples() -> usize {
    4_000_000
}
fn default_delta() -> f64 {
    0.01
}
fn default_times() -> Vec<f64> {
    vec![0.25, 0.5, 0.75, 1.0]
}
fn default_factors() -> Vec<f64> {
    vec![-0.5, 0.0, 0.5]
}
fn default_oracle_z() -> f64 {
    3.0
}
fn default_bins() -> usize {
    20
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            samples: default_samples(),
            delta: default_delta(),
            times: default_times(),
            factors: default_factors(),
            z_threshold: default_oracle_z(),
            sign_bins: default_bins(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignResolution {
    pub chosen: SignConvention,
    /// Worst binned z-score of `ℚ̂(τ>t | bin)` against `S` for each convention.
    pub max_abs_z_factor_minus_threshold: f64,
    pub max_abs_z_threshold_minus_factor: f64,
}

/// Picks the orientation of `S` whose binned values match the simulated
/// survival frequencies at `t = T/2`. Cox mode has no orientation and keeps
/// the default.
pub fn resolve_sign(batch: &ScenarioBatch, config: &ModelConfig, n_bins: usize, z_threshold: f64) -> Result<(SignResolution, ReportEntry)> {
    let conventions = [SignConvention::FactorMinusThreshold, SignConvention::ThresholdMinusFactor];
    if config.kind == ModelKind::Cox {
        let r = SignResolution { chosen: conventions[0], max_abs_z_factor_minus_threshold: 0.0, max_abs_z_threshold_minus_factor: 0.0 };
        return Ok((r, ReportEntry::check("hazard.sign_oracle", 0.0, 0.0, true).with_detail("no orientation in Cox mode")));
    }
    let defaults = batch.defaults_or_err()?;
    let grid = &batch.grid;
    let i0 = grid.nearest_index(0.5 * grid.horizon());
    let t = grid.t(i0);
    let n = batch.n_paths;
    let mut ms: Vec<f64> = (0..n).map(|p| batch.m(p)[i0]).collect();
    ms.sort_by(|a, b| a.total_cmp(b));
    let edges: Vec<f64> = (1..n_bins).map(|k| ms[k * n / n_bins]).collect();
    let bins: Vec<usize> = (0..n).map(|p| edges.partition_point(|&e| e <= batch.m(p)[i0])).collect();
    let mut worst = [0.0_f64; 2];
    for (c, conv) in conventions.iter().enumerate() {
        let model = HazardModel::with_sign(config.clone(), *conv)?;
        let s: Vec<f64> = (0..n).map(|p| model.azema_s(t, batch.m(p)[i0])).collect::<Result<_>>()?;
        for bin in 0..n_bins {
            let den: Vec<f64> = bins.iter().map(|&b| f64::from(b == bin)).collect();
            let freq: Vec<f64> = (0..n).map(|p| den[p] * f64::from(defaults.tau[p] > t)).collect();
            let model_s: Vec<f64> = (0..n).map(|p| den[p] * s[p]).collect();
            let cmp = Influence::ratio(&freq, &den)?.compare(&Influence::ratio(&model_s, &den)?)?;
            worst[c] = worst[c].max(cmp.z.abs());
        }
    }
    let chosen = if worst[0] <= worst[1] { conventions[0] } else { conventions[1] };
    let best = worst[0].min(worst[1]);
    let r = SignResolution { chosen, max_abs_z_factor_minus_threshold: worst[0], max_abs_z_threshold_minus_factor: worst[1] };
    let entry = ReportEntry::check("hazard.sign_oracle", best, worst[0].max(worst[1]), best <= z_threshold)
        .with_detail(format!("chosen {chosen:?} at t={t}; worst binned |z| {:.3} vs {:.3}", worst[0], worst[1]));
    Ok((r, entry))
}

/// Counts of the conditional oracle at one point `(t, m)`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct OracleCounts {
    n: u64,
    survive: u64,
    window_t: u64,
    window_t_survive: u64,
    window_m: u64,
    window_m_survive: u64,
}

/// Delta-method standard error of `Σx/Σy` from indicator counts with
/// `x = scale·1{w}`, `y = 1{s}`.
fn count_ratio(n: u64, cw: u64, cs: u64, cws: u64, scale: f64) -> (f64, f64) {
    let nf = n as f64;
    let r = scale * cw as f64 / cs as f64;
    let ybar = cs as f64 / nf;
    let sxx = scale * scale * cw as f64;
    let sxy = scale * cws as f64;
    let syy = cs as f64;
    let ss = (sxx - 2.0 * r * sxy + r * r * syy) / (ybar * ybar);
    (r, (ss / (nf * (nf - 1.0))).sqrt())
}

/// Brute-force conditional Monte Carlo of `ξ = m + ν(t) Z` given `m_t = m`,
/// without the Gaussian cdf: the intensity is the default mass in
/// `(t−δ, t+δ]` per unit time among survivors, the drift is `ς(t)` times the
/// survival mass in an `m`-window of width `2δ` per unit `m`.
fn oracle_counts(config: &ModelConfig, t: f64, m: f64, delta: f64, samples: usize, seed: u64) -> OracleCounts {
    const CHUNKS: usize = 64;
    let vol = config.vol();
    let nu = vol.nu(t);
    let a = config.psi.inverse(t);
    let (a_lo, a_hi) = (config.psi.inverse(t - delta), config.psi.inverse(t + delta));
    let per = samples.div_ceil(CHUNKS);
    (0..CHUNKS)
        .into_par_iter()
        .map(|c| {
            let mut rng = RngSpec::new(seed, c as u64).rng();
            let mut k = OracleCounts::default();
            let len = per.min(samples.saturating_sub(c * per));
            for _ in 0..len {
                let z: f64 = StandardNormal.sample(&mut rng);
                let xi = m + nu * z;
                let s = xi > a;
                k.n += 1;
                k.survive += s as u64;
                if xi > a_lo && xi <= a_hi {
                    k.window_t += 1;
                    k.window_t_survive += s as u64;
                }
                if xi > a - delta && xi <= a + delta {
                    k.window_m += 1;
                    k.window_m_survive += s as u64;
                }
            }
            k
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold(OracleCounts::default(), |acc, k| OracleCounts {
            n: acc.n + k.n,
            survive: acc.survive + k.survive,
            window_t: acc.window_t + k.window_t,
            window_t_survive: acc.window_t_survive + k.window_t_survive,
            window_m: acc.window_m + k.window_m,
            window_m_survive: acc.window_m_survive + k.window_m_survive,
        })
}

/// Nested-MC oracle entries for `γ` and `μ` at the configured points.
pub fn hazard_oracle(model: &HazardModel, oracle: &OracleConfig, seed: u64) -> Result<Vec<ReportEntry>> {
    let mut out = Vec::new();
    if model.kind() == ModelKind::Cox {
        return Ok(out);
    }
    let config = model.config();
    let vol = config.vol();
    for (ti, &t) in oracle.times.iter().enumerate() {
        for (mi, &m) in oracle.factors.iter().enumerate() {
            let s = derive_seed(seed, (ti * 1000 + mi) as u64);
            let k = oracle_counts(config, t, m, oracle.delta, oracle.samples, s);
            let scale = 1.0 / (2.0 * oracle.delta);
            let (g_hat, g_se) = count_ratio(k.n, k.window_t, k.survive, k.window_t_survive, scale);
            let (w_hat, w_se) = count_ratio(k.n, k.window_m, k.survive, k.window_m_survive, scale);
            let (mu_hat, mu_se) = (vol.sigma(t) * w_hat, vol.sigma(t) * w_se);
            let point = model.point(t, m)?;
            out.push(
                ReportEntry::mc(format!("hazard.intensity_oracle/t{t}_m{m}"), Comparison::new(g_hat, point.gamma, g_se), oracle.z_threshold)
                    .with_detail(format!("{} conditional samples, delta={}", oracle.samples, oracle.delta)),
            );
            out.push(
                ReportEntry::mc(format!("hazard.drift_oracle/t{t}_m{m}"), Comparison::new(mu_hat, point.mu, mu_se), oracle.z_threshold)
                    .with_detail(format!("{} conditional samples, delta={}", oracle.samples, oracle.delta)),
            );
        }
    }
    Ok(out)
}

/// Shape checks of the closed forms on an `m`-grid at `t = T/2`: the
/// intensity decreases to zero beyond the threshold and `μ` decreases in `m`.
pub fn shape_checks(model: &HazardModel) -> Result<Vec<ReportEntry>> {
    if model.kind() == ModelKind::Cox {
        return Ok(Vec::new());
    }
    let t = 0.5 * model.horizon();
    let a = model.config().psi.inverse(t);
    let ms: Vec<f64> = (0..=400).map(|k| a - 4.0 + 0.05 * k as f64).collect();
    let pts: Vec<_> = ms.iter().map(|&m| model.point(t, m)).collect::<Result<_>>()?;
    let beyond: Vec<f64> = ms.iter().zip(&pts).filter(|(m, _)| **m >= a).map(|(_, p)| p.gamma).collect();
    let gamma_ok = beyond.windows(2).all(|w| w[1] <= w[0]) && *beyond.last().unwrap_or(&0.0) < 1e-6 * beyond[0];
    let mu_ok = pts.windows(2).all(|w| w[1].mu < w[0].mu);
    Ok(vec![
        ReportEntry::check("hazard.shape/intensity_deep_survival", beyond[0], *beyond.last().unwrap_or(&0.0), gamma_ok)
            .with_detail("gamma nonincreasing in m beyond the threshold, vanishing far out"),
        ReportEntry::check("hazard.shape/drift_monotone", pts[0].mu, pts[pts.len() - 1].mu, mu_ok)
            .with_detail("mu strictly decreasing in m; no interior maximum at the threshold"),
    ])
}

/// Martingale and positivity checks on the simulated paths.
pub fn path_checks(batch: &ScenarioBatch, model: &HazardModel, fun: &PathFunctionals, z_threshold: f64, pathwise_tol: f64) -> Result<Vec<ReportEntry>> {
    let grid = &batch.grid;
    let (n, ns) = (batch.n_paths, grid.n_steps());
    let q_t: Vec<f64> = (0..n).map(|p| fun.q_terminal(p)).collect();
    let mut out = Vec::new();

    // B − ∫μ under ℙ
    let drift = zero_mean_test(n, ns, Some(&q_t), z_threshold, 0.0, |p| {
        let (db, mu) = (batch.db(p), fun.mu(p));
        Ok((0..ns).map(|i| db[i] - mu[i] * grid.dt(i)).collect())
    })?;
    out.push(zero_mean_entry("hazard.drift_test", &drift));

    // 𝒬_t has ℚ-mean one at every grid time
    let q_mean = zero_mean_test(n, ns + 1, None, z_threshold, 0.0, |p| Ok((0..=ns).map(|i| fun.q_density(p, i) - 1.0).collect()))?;
    out.push(zero_mean_entry("hazard.density_martingale", &q_mean));
    out.push(ReportEntry::mc(
        "hazard.density_terminal_mean",
        Comparison::against(&Influence::mean(&q_t)?, 1.0),
        z_threshold.min(3.0),
    ));

    // 1{τ ≤ t} − Γ_{τ∧t}, at grid times with enough expected defaults for the
    // normal approximation
    let comp_rows = par_paths(n, |p| {
        let tau = batch.tau(p);
        let g = fun.cum_hazard(p);
        let g_tau = if tau <= grid.horizon() { fun.cum_hazard_at(batch, model, p, tau, Some(batch.factor_at_tau(p)))? } else { f64::NAN };
        Ok((0..=ns).map(|i| if tau <= grid.t(i) { (1.0, g_tau) } else { (0.0, g[i]) }).collect::<Vec<_>>())
    })?;
    let cols: Vec<usize> = (0..=ns)
        .filter(|&i| comp_rows.iter().map(|r| r[i].1).sum::<f64>() >= MIN_EXPECTED_EVENTS)
        .collect();
    let comp = zero_mean_test(n, cols.len(), None, z_threshold, 0.0, |p| Ok(cols.iter().map(|&i| comp_rows[p][i].0 - comp_rows[p][i].1).collect()))?;
    let skipped = ns + 1 - cols.len();
    out.push(zero_mean_entry("hazard.compensator", &comp).with_detail(format!(
        "max |z| = {:.3} over {} grid times; {skipped} early times with fewer than {MIN_EXPECTED_EVENTS} expected defaults not tested",
        comp.max_abs_z,
        cols.len()
    )));

    // survival weights have unit mean
    let gamma_t: Vec<f64> = (0..n).map(|p| fun.cum_hazard(p)[ns]).collect();
    let tau: Vec<f64> = (0..n).map(|p| batch.tau(p)).collect();
    let ones = vec![1.0; n];
    let w: Vec<f64> = (0..n).map(|p| if tau[p] > grid.horizon() { gamma_t[p].exp() } else { 0.0 }).collect();
    out.push(ReportEntry::mc("measure.survival_weight_mean", Comparison::against(&Influence::mean(&w)?, 1.0), z_threshold));
    let one = expect_survival(&ones, &gamma_t, &tau, grid.horizon())?;
    out.push(ReportEntry::check("measure.survival_normalization", one.mean, 1.0, (one.mean - 1.0).abs() <= 1e-12));

    // S = 𝒬 e^{−Γ} and S > 0
    let rows = par_paths(n, |p| {
        let s = fun.s(p);
        let mut worst = 0.0_f64;
        let mut min_s = f64::INFINITY;
        for i in 0..=ns {
            worst = worst.max(relative_discrepancy(s[i], fun.q_density(p, i) * fun.d_decay(p, i)));
            min_s = min_s.min(s[i]);
        }
        Ok((worst, min_s))
    })?;
    let worst = rows.iter().map(|r| r.0).fold(0.0, f64::max);
    let min_s = rows.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
    out.push(ReportEntry::pathwise("hazard.multiplicative_decomposition", 0.0, 0.0, worst, pathwise_tol));
    out.push(ReportEntry::check("hazard.positivity", min_s, 0.0, min_s > 0.0).with_detail("min S over paths and grid"));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_ratio_matches_influence_ratio() {
        // 10 samples: survive on 0..6, window on {4, 5, 7}
        let x: Vec<f64> = (0..10).map(|i| if [4, 5, 7].contains(&i) { 2.0 } else { 0.0 }).collect();
        let y: Vec<f64> = (0..10).map(|i| f64::from(i < 6)).collect();
        let inf = Influence::ratio(&x, &y).unwrap();
        let (r, se) = count_ratio(10, 3, 6, 2, 2.0);
        assert!((r - inf.value).abs() < 1e-15);
        assert!((se - inf.std_error()).abs() < 1e-15);
    }
}
