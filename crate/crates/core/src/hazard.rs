//! Closed-form hazard package: Azéma supermartingale `S`, intensity `γ`,
//! cumulative hazard `Γ`, pre-default factor drift `μ`, invariance density
//! `𝒬 = S e^{Γ}` and decay `𝒟 = e^{−Γ}`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelKind};
use crate::paths::ScenarioBatch;
use crate::special::{mills_ratio_lower, norm_cdf};

/// Orientation of the Gaussian argument of `S`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignConvention {
    /// `S = Φ((m − Ψ⁻¹(t)) / ν(t))`.
    FactorMinusThreshold,
    /// `S = Φ((Ψ⁻¹(t) − m) / ν(t))`.
    ThresholdMinusFactor,
}

impl SignConvention {
    fn sign(self) -> f64 {
        match self {
            SignConvention::FactorMinusThreshold => 1.0,
            SignConvention::ThresholdMinusFactor => -1.0,
        }
    }
}

/// `(S, γ, μ)` at one point `(t, m)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HazardPoint {
    pub s: f64,
    pub gamma: f64,
    pub mu: f64,
}

/// Full hazard state at a grid point of a path.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct HazardState {
    pub s: f64,
    pub gamma: f64,
    pub cum_hazard: f64,
    pub mu: f64,
    pub q_density: f64,
    pub d_decay: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HazardModel {
    config: ModelConfig,
    sign: SignConvention,
}

impl HazardModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        Self::with_sign(config, SignConvention::FactorMinusThreshold)
    }

    pub fn with_sign(config: ModelConfig, sign: SignConvention) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, sign })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn sign(&self) -> SignConvention {
        self.sign
    }

    pub fn horizon(&self) -> f64 {
        self.config.horizon
    }

    fn check_domain(&self, t: f64) -> Result<()> {
        let horizon = self.config.horizon;
        if !(t >= 0.0 && t <= horizon * (1.0 + 1e-12)) {
            return Err(Error::Domain { t, horizon });
        }
        Ok(())
    }

    /// Standardized argument `h` of `S = Φ(h)` (DGC, `t > 0`).
    fn standardized(&self, t: f64, m: f64) -> f64 {
        let a = self.config.psi.inverse(t);
        self.sign.sign() * (m - a) / self.config.vol().nu(t)
    }

    /// `ℚ(τ > t | m_t = m)`.
    pub fn azema_s(&self, t: f64, m: f64) -> Result<f64> {
        self.check_domain(t)?;
        Ok(match self.config.kind {
            ModelKind::Cox => (-self.config.cox_hazard.cumulative(t)).exp(),
            ModelKind::Dgc => {
                if t == 0.0 {
                    // Ψ⁻¹(0+) = −∞
                    norm_cdf(self.sign.sign() * f64::INFINITY)
                } else {
                    norm_cdf(self.standardized(t, m))
                }
            }
        })
    }

    /// `(S, γ, μ)` with the positivity checks of the model.
    pub fn point(&self, t: f64, m: f64) -> Result<HazardPoint> {
        let s = self.azema_s(t, m)?;
        if !(s > 0.0) {
            return Err(Error::Numeric(format!("S({t}, {m}) = {s} is not positive")));
        }
        let (gamma, mu) = match self.config.kind {
            ModelKind::Cox => (self.config.cox_hazard.rate(t), 0.0),
            ModelKind::Dgc => {
                if t == 0.0 {
                    (0.0, 0.0)
                } else {
                    let sg = self.sign.sign();
                    let vol = self.config.vol();
                    let h = self.standardized(t, m);
                    let mills = mills_ratio_lower(h);
                    let gamma = sg * self.config.psi.inverse_derivative(t) / vol.nu(t) * mills;
                    // ς/ν = √κ
                    let mu = sg * vol.kappa.sqrt() * mills;
                    (gamma, mu)
                }
            }
        };
        if !(gamma >= 0.0) || !gamma.is_finite() {
            return Err(Error::Model(format!(
                "intensity at (t={t}, m={m}) is {gamma}; the sign convention {:?} is inconsistent",
                self.sign
            )));
        }
        Ok(HazardPoint { s, gamma, mu })
    }

    pub fn intensity(&self, t: f64, m: f64) -> Result<f64> {
        Ok(self.point(t, m)?.gamma)
    }

    pub fn drift(&self, t: f64, m: f64) -> Result<f64> {
        Ok(self.point(t, m)?.mu)
    }

    /// `(γ, ∂²γ/∂m²)` in DGC mode for `t > 0`.
    #[cfg(test)]
    fn intensity_curvature(&self, t: f64, m: f64) -> (f64, f64) {
        let node = StepNode::at(self, t, 1.0, 0.0, 0.0);
        node.gamma_and_curvature(m)
    }

    /// Drift of `B` in the enlarged filtration: `μ(t, m)` before default and,
    /// once `τ` (hence `ξ = Ψ⁻¹(τ)`) is known, the Gaussian-bridge pull
    /// `ς(t)(ξ − m)/ν²(t)`. Zero in Cox mode.
    pub fn enlarged_drift(&self, t: f64, m: f64, tau: f64) -> Result<f64> {
        match self.config.kind {
            ModelKind::Cox => Ok(0.0),
            ModelKind::Dgc if t < tau => self.drift(t, m),
            ModelKind::Dgc => {
                let vol = self.config.vol();
                let xi = self.config.psi.inverse(tau);
                Ok(vol.sigma(t) * (xi - m) / vol.nu(t).powi(2))
            }
        }
    }
}

/// Time node of the hazard quadrature with its bridge coefficients.
#[derive(Clone, Copy, Debug)]
struct StepNode {
    /// Quadrature weight including the time step.
    weight: f64,
    /// Bridge mean weight on the step's factor increment.
    bridge_w: f64,
    bridge_var: f64,
    threshold: f64,
    /// `sign · (Ψ⁻¹)'(t) / ν(t)`.
    scale: f64,
    inv_nu: f64,
    sign: f64,
}

impl StepNode {
    fn at(model: &HazardModel, t: f64, weight: f64, bridge_w: f64, bridge_var: f64) -> Self {
        let cfg = &model.config;
        let nu = cfg.vol().nu(t);
        let sign = model.sign.sign();
        Self {
            weight,
            bridge_w,
            bridge_var,
            threshold: cfg.psi.inverse(t),
            scale: sign * cfg.psi.inverse_derivative(t) / nu,
            inv_nu: 1.0 / nu,
            sign,
        }
    }

    fn gamma_and_curvature(&self, m: f64) -> (f64, f64) {
        let h = self.sign * (m - self.threshold) * self.inv_nu;
        let r = mills_ratio_lower(h);
        // derivatives of the ratio φ/Φ in h
        let r1 = -r * (h + r);
        let r2 = -r1 * (h + r) - r * (1.0 + r1);
        (self.scale * r, self.scale * r2 * self.inv_nu * self.inv_nu)
    }

    /// `E[γ(t, m_t)]` on the bridge through `m0 → m1`, to second order in the
    /// bridge variance.
    fn expected_gamma(&self, m0: f64, m1: f64) -> f64 {
        let (g, g2) = self.gamma_and_curvature(m0 + self.bridge_w * (m1 - m0));
        (g + 0.5 * g2 * self.bridge_var).max(0.0)
    }
}

const GL3: [(f64, f64); 3] = [(-0.774_596_669_241_483_4, 5.0 / 9.0), (0.0, 8.0 / 9.0), (0.774_596_669_241_483_4, 5.0 / 9.0)];

/// Quadrature nodes for `∫_{t0}^{t1} E[γ(s, m_s) | m_{t0}, m_{t1}] ds`.
///
/// Three-point Gauss–Legendre panels; steps that are long in log-time are
/// split, and a step starting at 0 is split geometrically, because `γ` rises
/// from 0 through a very steep initial layer.
fn step_nodes(model: &HazardModel, t0: f64, t1: f64) -> Vec<StepNode> {
    let vol = model.config.vol();
    let (v0, v1) = (vol.cum_var(t0), vol.cum_var(t1));
    let mut panels = Vec::new();
    if t0 == 0.0 {
        // two panels per octave down to t1·2^{−48}; γ is negligible below
        let mut hi = t1;
        for _ in 0..48 {
            let mid = 0.75 * hi;
            panels.push((mid, hi));
            panels.push((0.5 * hi, mid));
            hi *= 0.5;
        }
    } else {
        let n = ((4.0 * (t1 / t0).log2()).ceil() as usize).clamp(1, 64);
        let h = (t1 - t0) / n as f64;
        for k in 0..n {
            panels.push((t0 + k as f64 * h, if k + 1 == n { t1 } else { t0 + (k + 1) as f64 * h }));
        }
    }
    let mut nodes = Vec::with_capacity(3 * panels.len());
    for (a, b) in panels {
        for (x, w) in GL3 {
            let s = 0.5 * (a + b) + 0.5 * (b - a) * x;
            let vs = vol.cum_var(s);
            let bw = (vs - v0) / (v1 - v0);
            let bv = ((vs - v0) * (v1 - vs) / (v1 - v0)).max(0.0);
            nodes.push(StepNode::at(model, s, 0.5 * (b - a) * w, bw, bv));
        }
    }
    nodes
}

fn step_hazard(nodes: &[StepNode], m0: f64, m1: f64) -> f64 {
    nodes.iter().map(|n| n.weight * n.expected_gamma(m0, m1)).sum()
}

/// `S`, `γ`, `Γ` and `μ` along every path of a batch, path-major.
#[derive(Clone, Debug)]
pub struct PathFunctionals {
    kind: ModelKind,
    n_times: usize,
    s: Vec<f64>,
    gamma: Vec<f64>,
    mu: Vec<f64>,
    cum_hazard: Vec<f64>,
}

impl PathFunctionals {
    /// Evaluates the closed forms on the grid. `Γ` is exact in Cox mode; in
    /// DGC mode each step adds the bridge-conditional expected hazard, so that
    /// `𝒬 = S e^{Γ}` keeps its martingale property through the initial layer.
    pub fn compute(batch: &ScenarioBatch, model: &HazardModel) -> Result<Self> {
        let grid = &batch.grid;
        let nt = batch.n_times();
        let n = batch.n_paths;
        let mut s = vec![0.0; n * nt];
        let mut gamma = vec![0.0; n * nt];
        let mut mu = vec![0.0; n * nt];
        let mut cum = vec![0.0; n * nt];
        let kind = model.kind();
        let nodes: Vec<Vec<StepNode>> = match kind {
            ModelKind::Cox => Vec::new(),
            ModelKind::Dgc => (0..grid.n_steps()).map(|i| step_nodes(model, grid.t(i), grid.t(i + 1))).collect(),
        };
        s.par_chunks_mut(nt)
            .zip(gamma.par_chunks_mut(nt))
            .zip(mu.par_chunks_mut(nt))
            .zip(cum.par_chunks_mut(nt))
            .enumerate()
            .try_for_each(|(p, (((s, g), mu), cum))| -> Result<()> {
                let m = batch.m(p);
                for i in 0..nt {
                    let t = grid.t(i);
                    let pt = model.point(t, m[i])?;
                    s[i] = pt.s;
                    g[i] = pt.gamma;
                    mu[i] = pt.mu;
                    cum[i] = match kind {
                        ModelKind::Cox => model.config().cox_hazard.cumulative(t),
                        ModelKind::Dgc if i == 0 => 0.0,
                        ModelKind::Dgc => cum[i - 1] + step_hazard(&nodes[i - 1], m[i - 1], m[i]),
                    };
                }
                Ok(())
            })?;
        Ok(Self { kind, n_times: nt, s, gamma, mu, cum_hazard: cum })
    }

    fn row(v: &[f64], nt: usize, p: usize) -> &[f64] {
        &v[p * nt..(p + 1) * nt]
    }

    pub fn n_times(&self) -> usize {
        self.n_times
    }

    pub fn s(&self, p: usize) -> &[f64] {
        Self::row(&self.s, self.n_times, p)
    }

    pub fn gamma(&self, p: usize) -> &[f64] {
        Self::row(&self.gamma, self.n_times, p)
    }

    pub fn mu(&self, p: usize) -> &[f64] {
        Self::row(&self.mu, self.n_times, p)
    }

    pub fn cum_hazard(&self, p: usize) -> &[f64] {
        Self::row(&self.cum_hazard, self.n_times, p)
    }

    /// `𝒬_{t_i}`; exactly 1 under immersion.
    pub fn q_density(&self, p: usize, i: usize) -> f64 {
        match self.kind {
            ModelKind::Cox => 1.0,
            ModelKind::Dgc => {
                let k = p * self.n_times + i;
                self.s[k] * self.cum_hazard[k].exp()
            }
        }
    }

    /// `𝒬_T`.
    pub fn q_terminal(&self, p: usize) -> f64 {
        self.q_density(p, self.n_times - 1)
    }

    pub fn d_decay(&self, p: usize, i: usize) -> f64 {
        (-self.cum_hazard[p * self.n_times + i]).exp()
    }

    pub fn state(&self, p: usize, i: usize) -> HazardState {
        let k = p * self.n_times + i;
        HazardState {
            s: self.s[k],
            gamma: self.gamma[k],
            cum_hazard: self.cum_hazard[k],
            mu: self.mu[k],
            q_density: self.q_density(p, i),
            d_decay: self.d_decay(p, i),
        }
    }

    /// `Γ_t` off the grid (clamped to `T`). With the factor value at `t` the last
    /// partial step uses the bridge quadrature, otherwise linear interpolation.
    pub fn cum_hazard_at(&self, batch: &ScenarioBatch, model: &HazardModel, p: usize, t: f64, m_t: Option<f64>) -> Result<f64> {
        let grid = &batch.grid;
        if t >= grid.horizon() {
            return Ok(self.cum_hazard(p)[self.n_times - 1]);
        }
        if let ModelKind::Cox = self.kind {
            return Ok(model.config().cox_hazard.cumulative(t));
        }
        let i = grid.step_of(t);
        let c = self.cum_hazard(p);
        if t <= grid.t(i) {
            return Ok(c[i]);
        }
        Ok(match m_t {
            Some(m) => c[i] + step_hazard(&step_nodes(model, grid.t(i), t), batch.m(p)[i], m),
            None => c[i] + (c[i + 1] - c[i]) * (t - grid.t(i)) / grid.dt(i),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::special::norm_pdf;

    fn dgc() -> HazardModel {
        HazardModel::new(ModelConfig::dgc()).unwrap()
    }

    #[test]
    fn survival_at_origin_is_one() {
        assert_eq!(dgc().azema_s(0.0, 0.0).unwrap(), 1.0);
        assert_eq!(HazardModel::new(ModelConfig::cox(0.1)).unwrap().azema_s(0.0, 0.0).unwrap(), 1.0);
    }

    #[test]
    fn survival_is_one_half_at_threshold() {
        let h = dgc();
        for t in [0.2, 0.5, 1.0] {
            let a = h.config().psi.inverse(t);
            assert!((h.azema_s(t, a).unwrap() - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn cox_closed_forms() {
        let h = HazardModel::new(ModelConfig { horizon: 2.0, ..ModelConfig::cox(0.1) }).unwrap();
        assert!((h.azema_s(2.0, 3.0).unwrap() - 0.818_730_753_077_981_9).abs() < 1e-15);
        assert_eq!(h.intensity(0.7, -2.0).unwrap(), 0.1);
        assert_eq!(h.drift(0.7, 5.0).unwrap(), 0.0);
    }

    #[test]
    fn beyond_horizon_is_a_domain_error() {
        assert!(matches!(dgc().azema_s(1.5, 0.0), Err(Error::Domain { .. })));
        assert!(matches!(dgc().intensity(-0.1, 0.0), Err(Error::Domain { .. })));
    }

    #[test]
    fn intensity_matches_time_derivative_of_survival() {
        // γ = −∂_t S / S at fixed m, since m is a martingale with no drift in t
        // beyond the Itô term; the drift of S(t, m_t) divided by S.
        let h = dgc();
        let vol = h.config().vol();
        for &(t, m) in &[(0.25, -0.5), (0.5, 0.0), (0.9, 0.4)] {
            let e = 1e-4;
            let s = |t: f64, m: f64| h.azema_s(t, m).unwrap();
            let st = (s(t + e, m) - s(t - e, m)) / (2.0 * e);
            let smm = (s(t, m + e) - 2.0 * s(t, m) + s(t, m - e)) / (e * e);
            let drift = st + 0.5 * vol.sigma(t).powi(2) * smm;
            let gamma = -drift / s(t, m);
            assert!((gamma - h.intensity(t, m).unwrap()).abs() < 1e-6, "{t} {m}");
            let sm = (s(t, m + e) - s(t, m - e)) / (2.0 * e);
            let mu = vol.sigma(t) * sm / s(t, m);
            assert!((mu - h.drift(t, m).unwrap()).abs() < 1e-7);
        }
    }

    #[test]
    fn closed_form_intensity_expression() {
        let h = dgc();
        let (t, m) = (0.5_f64, 0.1_f64);
        let nu = (-0.5 * t).exp();
        let z = (m - t.ln()) / nu;
        let want = norm_pdf(z) * (1.0 / t) / (nu * norm_cdf(z));
        assert!((h.intensity(t, m).unwrap() - want).abs() < 1e-14);
    }

    #[test]
    fn intensity_vanishes_deep_in_survival() {
        let h = dgc();
        let mut prev = f64::INFINITY;
        for k in 0..60 {
            let m = k as f64 * 0.25;
            let g = h.intensity(0.5, m).unwrap();
            assert!(g <= prev);
            prev = g;
        }
        assert!(prev < 1e-30);
    }

    #[test]
    fn drift_decreases_in_the_factor() {
        // μ = √κ φ(h)/Φ(h) is strictly decreasing in m with no interior maximum.
        let h = dgc();
        let a = h.config().psi.inverse(0.5);
        let grid: Vec<f64> = (0..401).map(|k| a - 4.0 + 0.02 * k as f64).collect();
        let mus: Vec<f64> = grid.iter().map(|&m| h.drift(0.5, m).unwrap()).collect();
        for w in mus.windows(2) {
            assert!(w[1] < w[0]);
        }
        assert!(mus[200] < mus[0] && mus[200] > mus[400]);
    }

    #[test]
    fn curvature_matches_finite_differences() {
        let h = dgc();
        for &(t, m) in &[(0.01, 0.05), (0.3, -0.4), (0.8, 0.9), (1.0, -2.0)] {
            let e = 1e-4;
            let g = |m: f64| h.intensity(t, m).unwrap();
            let fd = (g(m + e) - 2.0 * g(m) + g(m - e)) / (e * e);
            let (g0, g2) = h.intensity_curvature(t, m);
            assert!((g0 - g(m)).abs() <= 1e-14 * g0.max(1e-300));
            assert!((fd - g2).abs() <= 1e-5 * g2.abs().max(1e-3), "{t} {m}: {fd} vs {g2}");
        }
    }

    #[test]
    fn step_quadrature_integrates_the_deterministic_path() {
        // With a flat factor path and no bridge noise the quadrature must match
        // ∫γ(s, 0.2) ds over the step (mpmath adaptive quadrature, 30 digits).
        let h = dgc();
        let m = 0.2;
        for &(t0, t1, want) in &[
            (0.0, 0.005, 1.794_678_070_056_670_8e-8),
            (0.005, 0.01, 6.818_114_540_548_965e-7),
        ] {
            let nodes: Vec<StepNode> = step_nodes(&h, t0, t1).into_iter().map(|n| StepNode { bridge_var: 0.0, ..n }).collect();
            let q = step_hazard(&nodes, m, m);
            assert!((q - want).abs() <= 1e-8 * want, "[{t0}, {t1}]: {q} vs {want}");
        }
    }

    #[test]
    fn step_quadrature_averages_over_the_bridge() {
        // Monte Carlo over bridge paths of ∫γ(s, m_s) ds given the endpoints.
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let h = dgc();
        let vol = h.config().vol();
        let (t0, t1, m0, m1) = (0.5, 0.505, -0.3, -0.25);
        let q = step_hazard(&step_nodes(&h, t0, t1), m0, m1);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (k, reps) = (64, 20_000);
        let dt = (t1 - t0) / k as f64;
        let mut acc = 0.0;
        for _ in 0..reps {
            // forward path on the sub-grid, then pinned to m1 by the bridge shift
            let mut x = vec![m0];
            for j in 0..k {
                let z: f64 = StandardNormal.sample(&mut rng);
                let v = vol.var_between(t0 + j as f64 * dt, t0 + (j + 1) as f64 * dt);
                x.push(x[j] + v.sqrt() * z);
            }
            let (v0, v1) = (vol.cum_var(t0), vol.cum_var(t1));
            let end = x[k];
            let mut integral = 0.0;
            for j in 0..k {
                let w0 = (vol.cum_var(t0 + j as f64 * dt) - v0) / (v1 - v0);
                let w1 = (vol.cum_var(t0 + (j + 1) as f64 * dt) - v0) / (v1 - v0);
                let y0 = x[j] + w0 * (m1 - end);
                let y1 = x[j + 1] + w1 * (m1 - end);
                integral += 0.5 * (h.intensity(t0 + j as f64 * dt, y0).unwrap() + h.intensity(t0 + (j + 1) as f64 * dt, y1).unwrap()) * dt;
            }
            acc += integral;
        }
        let mc = acc / reps as f64;
        assert!((mc - q).abs() < 2e-4 * q, "{mc} vs {q}");
    }

    #[test]
    fn opposite_sign_gives_negative_intensity() {
        let h = HazardModel::with_sign(ModelConfig::dgc(), SignConvention::ThresholdMinusFactor).unwrap();
        assert!(matches!(h.intensity(0.5, 0.0), Err(Error::Model(_))));
    }
}
